//! Glyph pools used to compose canvases.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{synthesize_operator_pixels, synthesize_segment_digit, OperatorKind, SIDE};
use super::layout::Glyph;
use super::mnist::{load_mnist, MnistSplit};
use crate::error::{Error, Result};
use crate::rng::named_stream;

pub const CELL_PIXELS: usize = SIDE * SIDE;
/// Synthesized operator glyphs kept per kind and split.
pub const OPERATOR_GLYPHS: usize = 512;
/// Seed of the operator glyph pools used by the command-line tools.
pub const ATLAS_SEED: u64 = 0x61746c6173;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train|test)"
            ))),
        }
    }
}

/// Digit images of one split, grouped by class.
#[derive(Clone, Debug)]
pub struct DigitPool {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    by_class: [Vec<usize>; 10],
}

impl DigitPool {
    /// `pixels` holds `labels.len()` consecutive 28x28 images.
    pub fn new(pixels: Vec<u8>, labels: &[u8]) -> Result<Self> {
        if pixels.len() != labels.len() * CELL_PIXELS {
            return Err(Error::Idx(format!(
                "expected {} pixel bytes for {} labels, found {}",
                labels.len() * CELL_PIXELS,
                labels.len(),
                pixels.len()
            )));
        }
        let mut by_class: [Vec<usize>; 10] = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            let class = by_class
                .get_mut(usize::from(l))
                .ok_or_else(|| Error::Idx(format!("label {l} outside 0..=9")))?;
            class.push(i);
        }
        if let Some(d) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Idx(format!("no images of digit {d}")));
        }
        Ok(Self {
            pixels,
            labels: labels.to_vec(),
            by_class,
        })
    }

    pub fn from_mnist(split: &MnistSplit) -> Result<Self> {
        Self::new(split.images.pixels.clone(), &split.labels)
    }

    /// Seven-segment digits, `per_class` of each.
    pub fn synthetic(seed: u64, per_class: usize) -> Self {
        let mut rng = named_stream(seed, "segment_digits");
        let mut pixels = Vec::with_capacity(10 * per_class * CELL_PIXELS);
        let mut labels = Vec::with_capacity(10 * per_class);
        for d in 0..10u8 {
            for _ in 0..per_class {
                let img = synthesize_segment_digit(d, &mut rng);
                pixels.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
                labels.push(d);
            }
        }
        Self::new(pixels, &labels).expect("synthetic pool is complete")
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / CELL_PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn class_indices(&self, digit: u8) -> &[usize] {
        &self.by_class[usize::from(digit)]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.pixels[index * CELL_PIXELS..(index + 1) * CELL_PIXELS]
    }
}

/// Where a rendered cell came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlyphSource {
    Digit { split: Split, index: usize },
    Minus { split: Split, index: usize },
    Plus { split: Split, index: usize },
    Blank,
}

#[derive(Clone, Debug)]
pub struct GlyphAtlas {
    digits: [DigitPool; 2],
    minus: [Vec<Vec<f32>>; 2],
    plus: [Vec<Vec<f32>>; 2],
}

fn operator_pool(seed: u64, kind: OperatorKind, split: Split) -> Vec<Vec<f32>> {
    let mut rng = named_stream(seed, &format!("operators.{kind:?}.{}", split.name()));
    (0..OPERATOR_GLYPHS)
        .map(|_| synthesize_operator_pixels(kind, &mut rng))
        .collect()
}

impl GlyphAtlas {
    /// Operator glyph pools are synthesized from `seed`, separately per split.
    pub fn new(train: DigitPool, test: DigitPool, seed: u64) -> Self {
        let ops = |kind| [Split::Train, Split::Test].map(|s| operator_pool(seed, kind, s));
        Self {
            digits: [train, test],
            minus: ops(OperatorKind::Minus),
            plus: ops(OperatorKind::Plus),
        }
    }

    pub fn from_mnist(train: &MnistSplit, test: &MnistSplit, seed: u64) -> Result<Self> {
        Ok(Self::new(
            DigitPool::from_mnist(train)?,
            DigitPool::from_mnist(test)?,
            seed,
        ))
    }

    /// Atlas from an MNIST cache directory populated by `fetch_mnist`.
    pub fn load(cache_dir: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let (train, test) = load_mnist(cache_dir)?;
        Self::from_mnist(&train, &test, seed)
    }

    /// Atlas built from seven-segment digits; needs no MNIST files.
    pub fn synthetic(seed: u64, per_class: usize) -> Self {
        Self::new(
            DigitPool::synthetic(seed, per_class),
            DigitPool::synthetic(seed ^ 0x5eed, per_class),
            seed,
        )
    }

    pub fn digits(&self, split: Split) -> &DigitPool {
        &self.digits[split.index()]
    }

    pub fn operators(&self, kind: OperatorKind, split: Split) -> &[Vec<f32>] {
        match kind {
            OperatorKind::Minus => &self.minus[split.index()],
            OperatorKind::Plus => &self.plus[split.index()],
        }
    }

    /// Picks a glyph uniformly from the `split` pool for `glyph`.
    pub fn choose<R: Rng + ?Sized>(&self, glyph: Glyph, split: Split, rng: &mut R) -> GlyphSource {
        match glyph {
            Glyph::Digit(d) => {
                let idx = self.digits(split).class_indices(d);
                GlyphSource::Digit {
                    split,
                    index: idx[rng.gen_range(0..idx.len())],
                }
            }
            Glyph::Minus => GlyphSource::Minus {
                split,
                index: rng.gen_range(0..OPERATOR_GLYPHS),
            },
            Glyph::Plus => GlyphSource::Plus {
                split,
                index: rng.gen_range(0..OPERATOR_GLYPHS),
            },
            Glyph::Blank => GlyphSource::Blank,
        }
    }

    /// Writes the 28x28 glyph of `source` in `[0, 1]` into `out`, a
    /// row-major canvas of width `stride`, starting at column `x0`.
    pub fn paint(&self, source: GlyphSource, out: &mut [f32], stride: usize, x0: usize) {
        let mut put = |f: &dyn Fn(usize) -> f32| {
            for r in 0..SIDE {
                for c in 0..SIDE {
                    out[r * stride + x0 + c] = f(r * SIDE + c);
                }
            }
        };
        match source {
            GlyphSource::Digit { split, index } => {
                let img = self.digits(split).image(index);
                put(&|i| f32::from(img[i]) / 255.0)
            }
            GlyphSource::Minus { split, index } => {
                let img = &self.minus[split.index()][index];
                put(&|i| img[i])
            }
            GlyphSource::Plus { split, index } => {
                let img = &self.plus[split.index()][index];
                put(&|i| img[i])
            }
            GlyphSource::Blank => put(&|_| 0.0),
        }
    }

    /// The glyph of `source` as 784 values in `[0, 1]`.
    pub fn pixels(&self, source: GlyphSource) -> Vec<f32> {
        let mut out = vec![0.0; CELL_PIXELS];
        self.paint(source, &mut out, SIDE, 0);
        out
    }
}
