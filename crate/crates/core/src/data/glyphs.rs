//! Procedural `+` and `-` glyphs in the style of MNIST strokes.

use rand::Rng;

use crate::tensor::Tensor;

pub const SIDE: usize = 28;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    Plus,
    Minus,
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    cx: f64,
    cy: f64,
    half_len: f64,
    half_thick: f64,
    horizontal: bool,
}

impl Stroke {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (along, across) = if self.horizontal {
            (x - self.cx, y - self.cy)
        } else {
            (y - self.cy, x - self.cx)
        };
        along.abs() <= self.half_len && across.abs() <= self.half_thick
    }
}

/// Coverage in `[0, 1]` of each pixel by the union of `strokes`, estimated
/// on a 4x4 subpixel grid (anti-aliasing).
fn rasterize(strokes: &[Stroke], intensity: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; SIDE * SIDE];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..SIDE {
        for px in 0..SIDE {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if strokes.iter().any(|s| s.contains(x, y)) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            out[py * SIDE + px] = (cover * intensity) as f32;
        }
    }
    out
}

/// Draws one jittered operator glyph: stroke thickness 2-4 px, length
/// 12-18 px, centre within 2 px of the cell centre.
pub fn synthesize_operator_pixels<R: Rng + ?Sized>(kind: OperatorKind, rng: &mut R) -> Vec<f32> {
    let centre = SIDE as f64 / 2.0;
    let stroke = |horizontal: bool, cx: f64, cy: f64, rng: &mut R| Stroke {
        cx,
        cy,
        half_len: rng.gen_range(12.0..=18.0) / 2.0,
        half_thick: rng.gen_range(2.0..=4.0) / 2.0,
        horizontal,
    };
    let cx = centre + rng.gen_range(-2.0..=2.0);
    let cy = centre + rng.gen_range(-2.0..=2.0);
    let strokes = match kind {
        OperatorKind::Minus => vec![stroke(true, cx, cy, rng)],
        OperatorKind::Plus => vec![stroke(true, cx, cy, rng), stroke(false, cx, cy, rng)],
    };
    let intensity = rng.gen_range(0.85..=1.0);
    rasterize(&strokes, intensity)
}

/// Seven-segment stand-in for a handwritten digit, jittered like the
/// operator glyphs. Used where MNIST is unavailable (hermetic tests).
pub fn synthesize_segment_digit<R: Rng + ?Sized>(digit: u8, rng: &mut R) -> Vec<f32> {
    // Segments a..g as bits 0..6: top, top-right, bottom-right, bottom,
    // bottom-left, top-left, middle.
    const SEGMENTS: [u8; 10] = [0x3f, 0x06, 0x5b, 0x4f, 0x66, 0x6d, 0x7d, 0x07, 0x7f, 0x6f];
    let mask = SEGMENTS[usize::from(digit % 10)];
    let cx = SIDE as f64 / 2.0 + rng.gen_range(-1.5..=1.5);
    let cy = SIDE as f64 / 2.0 + rng.gen_range(-1.5..=1.5);
    let (w, h) = (rng.gen_range(4.0..=6.0), rng.gen_range(7.0..=9.0));
    let half_thick = rng.gen_range(1.0..=1.6);
    let hs = |y: f64| Stroke {
        cx,
        cy: y,
        half_len: w,
        half_thick,
        horizontal: true,
    };
    let vs = |x: f64, y: f64| Stroke {
        cx: x,
        cy: y,
        half_len: h / 2.0,
        half_thick,
        horizontal: false,
    };
    let all = [
        hs(cy - h),
        vs(cx + w, cy - h / 2.0),
        vs(cx + w, cy + h / 2.0),
        hs(cy + h),
        vs(cx - w, cy + h / 2.0),
        vs(cx - w, cy - h / 2.0),
        hs(cy),
    ];
    let strokes: Vec<Stroke> = (0..7)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| all[i])
        .collect();
    rasterize(&strokes, rng.gen_range(0.85..=1.0))
}

/// [`synthesize_operator_pixels`] as a `[28, 28]` tensor.
pub fn synthesize_operator_glyph<R: Rng + ?Sized>(kind: OperatorKind, rng: &mut R) -> Tensor<f32> {
    Tensor::new(vec![SIDE, SIDE], synthesize_operator_pixels(kind, rng)).expect("glyph shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::named_stream;

    #[test]
    fn minus_stays_within_rows_10_to_18() {
        for seed in 0..200 {
            let g =
                synthesize_operator_pixels(OperatorKind::Minus, &mut named_stream(seed, "minus"));
            for (i, &v) in g.iter().enumerate() {
                assert!((0.0..=1.0).contains(&v));
                if v > 0.0 {
                    let row = i / SIDE;
                    assert!((10..=18).contains(&row), "seed {seed}: pixel in row {row}");
                }
            }
        }
    }

    #[test]
    fn plus_has_horizontal_and_vertical_bands() {
        let g = synthesize_operator_pixels(OperatorKind::Plus, &mut named_stream(1, "plus"));
        let row_on = |r: usize| (0..SIDE).filter(|&c| g[r * SIDE + c] > 0.5).count();
        let col_on = |c: usize| (0..SIDE).filter(|&r| g[r * SIDE + c] > 0.5).count();
        assert!((0..SIDE).any(|r| row_on(r) >= 10));
        assert!((0..SIDE).any(|c| col_on(c) >= 10));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synthesize_operator_glyph(OperatorKind::Plus, &mut named_stream(5, "g"));
        let b = synthesize_operator_glyph(OperatorKind::Plus, &mut named_stream(5, "g"));
        assert_eq!(a, b);
        let c = synthesize_operator_glyph(OperatorKind::Plus, &mut named_stream(6, "g"));
        assert_ne!(a, c);
    }
}
