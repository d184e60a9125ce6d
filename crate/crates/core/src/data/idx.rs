//! IDX container parsing (big-endian header, u8 payload).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[N, rows, cols]` with pixels mapped to `[0, 1]` by `/255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Tensor::new(vec![self.count, self.rows, self.cols], data).expect("consistent idx shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxData {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::Idx(format!(
                "header truncated: expected at least {} bytes, found {}",
                at + 4,
                bytes.len()
            ))
        })
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Idx(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(())
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Idx(format!(
            "expected magic {expected}, found {magic}"
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    check_len(bytes, 16 + count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + count)?;
    Ok(bytes[8..].to_vec())
}

/// Parses either IDX flavour, chosen by the magic number.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    match be_u32(bytes, 0)? {
        IMAGES_MAGIC => parse_idx_images(bytes).map(IdxData::Images),
        LABELS_MAGIC => parse_idx_labels(bytes).map(IdxData::Labels),
        other => Err(Error::Idx(format!(
            "expected magic {IMAGES_MAGIC} or {LABELS_MAGIC}, found {other}"
        ))),
    }
}

/// Header fields `(magic, dims...)` without validating the payload.
pub fn idx_header(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0)?;
    let rank = (magic & 0xff) as usize;
    let mut out = vec![magic];
    for i in 0..rank {
        out.push(be_u32(bytes, 4 + 4 * i)?);
    }
    Ok(out)
}
