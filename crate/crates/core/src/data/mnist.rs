//! MNIST download and cache.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::idx::{parse_idx_images, parse_idx_labels, IdxImages};
use crate::error::{Error, Result};

pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
/// Environment variable overriding the mirror base URL.
pub const MIRROR_ENV: &str = "NEUROCALC_MNIST_URL";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `(file name, decompressed byte length)` of the four MNIST files.
pub const FILES: [(&str, u64); 4] = [
    (TRAIN_IMAGES, 16 + 60_000 * 784),
    (TRAIN_LABELS, 8 + 60_000),
    (TEST_IMAGES, 16 + 10_000 * 784),
    (TEST_LABELS, 8 + 10_000),
];

/// Which files were downloaded and which were already cached.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub downloaded: Vec<String>,
    pub cached: Vec<String>,
}

/// Mirror from the environment, falling back to [`DEFAULT_MIRROR`].
pub fn mirror_from_env() -> String {
    std::env::var(MIRROR_ENV).unwrap_or_else(|_| DEFAULT_MIRROR.to_string())
}

fn fetch_bytes(url: &str) -> Result<Vec<u8>> {
    let fail = |detail: String| Error::Fetch {
        url: url.to_string(),
        detail,
    };
    if let Some(path) = url.strip_prefix("file://") {
        return std::fs::read(path).map_err(|e| fail(e.to_string()));
    }
    let resp = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    let mut buf = Vec::new();
    resp.into_reader()
        .read_to_end(&mut buf)
        .map_err(|e| fail(e.to_string()))?;
    Ok(buf)
}

fn gunzip(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Idx(format!("{name}.gz: gzip decode failed: {e}")))?;
    Ok(out)
}

fn cached(path: &Path, expected: u64) -> bool {
    std::fs::metadata(path)
        .map(|m| m.len() == expected)
        .unwrap_or(false)
}

/// Ensures the four decompressed IDX files exist in `cache_dir`.
///
/// Files whose byte length already matches are not fetched again.
/// Downloaded files are verified by parsing their IDX header and payload.
pub fn fetch_mnist(base_url: &str, cache_dir: impl AsRef<Path>) -> Result<FetchReport> {
    let cache_dir = cache_dir.as_ref();
    std::fs::create_dir_all(cache_dir)?;
    let mut report = FetchReport::default();
    for (name, len) in FILES {
        let path = cache_dir.join(name);
        if cached(&path, len) {
            report.cached.push(name.to_string());
            continue;
        }
        let url = format!("{}/{name}.gz", base_url.trim_end_matches('/'));
        let raw = fetch_bytes(&url).map_err(|e| Error::MissingData {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let bytes = gunzip(&raw, name)?;
        if name.contains("images") {
            parse_idx_images(&bytes)?;
        } else {
            parse_idx_labels(&bytes)?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        report.downloaded.push(name.to_string());
    }
    Ok(report)
}

/// One MNIST split loaded from the cache.
#[derive(Clone, Debug)]
pub struct MnistSplit {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl MnistSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_cached(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::MissingData {
        path,
        detail: e.to_string(),
    })
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<MnistSplit> {
    let images = parse_idx_images(&read_cached(dir, images)?)?;
    let labels = parse_idx_labels(&read_cached(dir, labels)?)?;
    if images.count != labels.len() || images.rows != 28 || images.cols != 28 {
        return Err(Error::Idx(format!(
            "inconsistent split: {} images of {}x{}, {} labels",
            images.count,
            images.rows,
            images.cols,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Idx(format!("label {bad} outside 0..=9")));
    }
    Ok(MnistSplit { images, labels })
}

/// Loads `(train, test)` from an already populated cache directory.
pub fn load_mnist(cache_dir: impl AsRef<Path>) -> Result<(MnistSplit, MnistSplit)> {
    let dir = cache_dir.as_ref();
    Ok((
        load_split(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
        load_split(dir, TEST_IMAGES, TEST_LABELS)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    #[test]
    fn missing_mirror_with_empty_cache_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_mnist("file:///nonexistent/mirror", dir.path()).unwrap_err();
        assert!(err.to_string().contains(TRAIN_IMAGES), "{err}");
    }

    #[test]
    fn corrupt_gzip_is_fatal() {
        let mirror = tempfile::tempdir().unwrap();
        std::fs::write(
            mirror.path().join(format!("{TRAIN_IMAGES}.gz")),
            b"not gzip at all",
        )
        .unwrap();
        let cache = tempfile::tempdir().unwrap();
        let url = format!("file://{}", mirror.path().display());
        let err = fetch_mnist(&url, cache.path()).unwrap_err();
        assert!(err.to_string().contains("gzip"), "{err}");
    }

    #[test]
    fn gzipped_file_with_bad_header_rejected() {
        let mirror = tempfile::tempdir().unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&[0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        std::fs::write(
            mirror.path().join(format!("{TRAIN_IMAGES}.gz")),
            enc.finish().unwrap(),
        )
        .unwrap();
        let cache = tempfile::tempdir().unwrap();
        let err =
            fetch_mnist(&format!("file://{}", mirror.path().display()), cache.path()).unwrap_err();
        assert!(err.to_string().contains("expected magic 2051"), "{err}");
    }
}
