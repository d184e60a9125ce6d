//! Expression sampling, the train/test triple split, and batch rendering.

use rand::Rng;

use super::atlas::{GlyphAtlas, GlyphSource, Split, CELL_PIXELS};
use super::glyphs::SIDE;
use super::layout::{
    answer_classes, answer_glyphs, expression_glyphs, Glyph, Operator, Triple, OPERAND_MAX,
    OPERAND_MIN,
};
use crate::models::{ANSWER_CELLS, ANSWER_WIDTH, EXPR_CELLS, EXPR_WIDTH};
use crate::rng::mix64;
use crate::tensor::Tensor;

/// Split hash: SplitMix64 of `(a + 99) | (b + 99) << 8 | op << 16`, with
/// `op` 0 for plus and 1 for minus.
pub fn split_hash(t: &Triple) -> u64 {
    let op = match t.op {
        Operator::Plus => 0u64,
        Operator::Minus => 1,
    };
    mix64((t.a + 99) as u64 | ((t.b + 99) as u64) << 8 | op << 16)
}

/// Test iff `split_hash % 10 == 0`.
pub fn split_of(t: &Triple) -> Split {
    if split_hash(t) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn split_triples(split: Split) -> Vec<Triple> {
    super::layout::all_triples()
        .filter(|t| split_of(t) == split)
        .collect()
}

/// The first `k` train triples ordered by split hash: a fixed subset that
/// does not depend on any seed.
pub fn fixed_subset(k: usize) -> Vec<Triple> {
    let mut train = split_triples(Split::Train);
    train.sort_by_key(|t| (split_hash(t), *t));
    train.truncate(k);
    train
}

/// Uniform triple from `split` by rejection.
pub fn sample_triple<R: Rng + ?Sized>(rng: &mut R, split: Split) -> Triple {
    loop {
        let a = rng.gen_range(OPERAND_MIN..=OPERAND_MAX);
        let b = rng.gen_range(OPERAND_MIN..=OPERAND_MAX);
        let op = if rng.gen::<bool>() {
            Operator::Plus
        } else {
            Operator::Minus
        };
        let t = Triple::new(a, b, op);
        if split_of(&t) == split {
            return t;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub glyph: Glyph,
    pub source: GlyphSource,
}

/// A rendered pair. Images hold values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ExpressionSample {
    pub triple: Triple,
    pub result: i64,
    /// `[1, 28, 196]`.
    pub expr_image: Tensor<f32>,
    /// `[1, 28, 112]`.
    pub answer_image: Tensor<f32>,
    pub answer_classes: [usize; 4],
    pub expr_cells: Vec<Placement>,
    pub answer_cells: Vec<Placement>,
}

fn paint_row<R: Rng + ?Sized>(
    atlas: &GlyphAtlas,
    glyphs: &[Glyph],
    split: Split,
    rng: &mut R,
) -> (Vec<f32>, Vec<Placement>) {
    let width = glyphs.len() * SIDE;
    let mut canvas = vec![0.0; SIDE * width];
    let mut log = Vec::with_capacity(glyphs.len());
    for (i, &g) in glyphs.iter().enumerate() {
        let source = atlas.choose(g, split, rng);
        atlas.paint(source, &mut canvas, width, i * SIDE);
        log.push(Placement { glyph: g, source });
    }
    (canvas, log)
}

/// Renders `t` with expression digits from the `glyph_split` pool and
/// answer digits from the train pool.
pub fn render_triple<R: Rng + ?Sized>(
    atlas: &GlyphAtlas,
    t: Triple,
    glyph_split: Split,
    rng: &mut R,
) -> ExpressionSample {
    let result = t.result();
    let (expr, expr_cells) = paint_row(atlas, &expression_glyphs(&t), glyph_split, rng);
    let (answer, answer_cells) = paint_row(atlas, &answer_glyphs(result), Split::Train, rng);
    ExpressionSample {
        triple: t,
        result,
        expr_image: Tensor::new(vec![1, SIDE, EXPR_WIDTH], expr).expect("expression canvas"),
        answer_image: Tensor::new(vec![1, SIDE, ANSWER_WIDTH], answer).expect("answer canvas"),
        answer_classes: answer_classes(result),
        expr_cells,
        answer_cells,
    }
}

/// A triple from `split` rendered with glyphs of the same split.
pub fn sample_expression<R: Rng + ?Sized>(
    atlas: &GlyphAtlas,
    rng: &mut R,
    split: Split,
) -> ExpressionSample {
    let t = sample_triple(rng, split);
    render_triple(atlas, t, split, rng)
}

/// Where a batch draws its triples from.
#[derive(Clone, Copy, Debug)]
pub enum TripleSource<'a> {
    Split(Split),
    /// Uniform over a fixed list, rendered with train glyphs.
    Subset(&'a [Triple]),
}

/// Network-range batch: images mapped to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 1, 28, 196]`.
    pub expressions: Tensor<f32>,
    /// `[N, 1, 28, 112]`.
    pub answers: Tensor<f32>,
    /// `[N, 4]` answer cell classes.
    pub labels: Vec<[usize; 4]>,
    pub triples: Vec<Triple>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Answer labels flattened cell-major to `[N * 4]`.
    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

/// `x * 2 - 1`.
pub fn to_network_range(values: &[f32]) -> impl Iterator<Item = f32> + '_ {
    values.iter().map(|&v| v * 2.0 - 1.0)
}

pub fn render_batch<R: Rng + ?Sized>(
    atlas: &GlyphAtlas,
    rng: &mut R,
    source: TripleSource<'_>,
    n: usize,
) -> Batch {
    assert!(n >= 1, "batch size must be positive");
    let samples = (0..n).map(|_| match source {
        TripleSource::Split(split) => sample_expression(atlas, rng, split),
        TripleSource::Subset(list) => {
            let t = list[rng.gen_range(0..list.len())];
            render_triple(atlas, t, Split::Train, rng)
        }
    });
    collect_batch(samples, n)
}

/// A batch of the given triples, in order, with expression glyphs from
/// `glyph_split`.
pub fn render_triples<R: Rng + ?Sized>(
    atlas: &GlyphAtlas,
    triples: &[Triple],
    glyph_split: Split,
    rng: &mut R,
) -> Batch {
    collect_batch(
        triples
            .iter()
            .map(|&t| render_triple(atlas, t, glyph_split, rng)),
        triples.len(),
    )
}

fn collect_batch(samples: impl Iterator<Item = ExpressionSample>, n: usize) -> Batch {
    let mut expressions = Vec::with_capacity(n * EXPR_CELLS * CELL_PIXELS);
    let mut answers = Vec::with_capacity(n * ANSWER_CELLS * CELL_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut triples = Vec::with_capacity(n);
    for s in samples {
        expressions.extend(to_network_range(s.expr_image.data()));
        answers.extend(to_network_range(s.answer_image.data()));
        labels.push(s.answer_classes);
        triples.push(s.triple);
    }
    assert_eq!(triples.len(), n, "batch size must be positive");
    Batch {
        expressions: Tensor::new(vec![n, 1, SIDE, EXPR_WIDTH], expressions).expect("batch shape"),
        answers: Tensor::new(vec![n, 1, SIDE, ANSWER_WIDTH], answers).expect("batch shape"),
        labels,
        triples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::layout::{all_triples, BLANK_CLASS, TRIPLE_COUNT};
    use crate::rng::{indexed_stream, named_stream};

    fn atlas() -> GlyphAtlas {
        GlyphAtlas::synthetic(4, 2)
    }

    #[test]
    fn split_is_near_ten_percent_and_disjoint() {
        let test = split_triples(Split::Test);
        let train = split_triples(Split::Train);
        assert_eq!(test.len() + train.len(), TRIPLE_COUNT);
        let frac = test.len() as f64 / TRIPLE_COUNT as f64;
        assert!((0.09..0.11).contains(&frac), "{frac}");
        let set: std::collections::HashSet<_> = test.iter().collect();
        assert!(train.iter().all(|t| !set.contains(t)));
        assert_eq!(all_triples().count(), TRIPLE_COUNT);
    }

    #[test]
    fn sampling_respects_split() {
        let mut rng = named_stream(0, "s");
        for split in [Split::Train, Split::Test] {
            for _ in 0..200 {
                assert_eq!(split_of(&sample_triple(&mut rng, split)), split);
            }
        }
    }

    #[test]
    fn fixed_subset_is_stable_prefix() {
        let a = fixed_subset(32);
        assert_eq!(a.len(), 32);
        assert_eq!(&fixed_subset(64)[..32], &a[..]);
        assert!(a.iter().all(|t| split_of(t) == Split::Train));
    }

    #[test]
    fn five_plus_two_renders_seven() {
        let s = render_triple(
            &atlas(),
            Triple::new(5, 2, Operator::Plus),
            Split::Train,
            &mut named_stream(0, "r"),
        );
        assert_eq!(s.result, 7);
        assert_eq!(s.answer_classes, [BLANK_CLASS, BLANK_CLASS, BLANK_CLASS, 7]);
        assert_eq!(s.expr_image.shape(), &[1, 28, 196]);
        assert_eq!(s.answer_image.shape(), &[1, 28, 112]);
        assert_eq!(s.expr_cells.len(), 7);
        assert_eq!(s.answer_cells.len(), 4);
    }

    #[test]
    fn cells_match_the_placement_log() {
        let atlas = atlas();
        let mut rng = named_stream(9, "r");
        for _ in 0..20 {
            let s = sample_expression(&atlas, &mut rng, Split::Test);
            for (i, p) in s.answer_cells.iter().enumerate() {
                let want = atlas.pixels(p.source);
                for r in 0..SIDE {
                    let row = &s.answer_image.data()[r * ANSWER_WIDTH + i * SIDE..][..SIDE];
                    assert_eq!(row, &want[r * SIDE..(r + 1) * SIDE]);
                }
                assert_eq!(p.glyph.class(), Some(s.answer_classes[i]));
                if let GlyphSource::Digit { split, .. } = p.source {
                    assert_eq!(split, Split::Train);
                }
            }
            for p in &s.expr_cells {
                if let GlyphSource::Digit { split, .. } = p.source {
                    assert_eq!(split, Split::Test);
                }
            }
        }
    }

    #[test]
    fn batch_shapes_range_and_determinism() {
        let atlas = atlas();
        let b = render_batch(
            &atlas,
            &mut indexed_stream(1, "batch", 0),
            TripleSource::Split(Split::Train),
            16,
        );
        assert_eq!(b.expressions.shape(), &[16, 1, 28, 196]);
        assert_eq!(b.answers.shape(), &[16, 1, 28, 112]);
        assert_eq!(b.labels.len(), 16);
        assert!(b
            .expressions
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        let again = render_batch(
            &atlas,
            &mut indexed_stream(1, "batch", 0),
            TripleSource::Split(Split::Train),
            16,
        );
        assert_eq!(b.expressions, again.expressions);
        assert_eq!(b.answers, again.answers);
    }

    #[test]
    fn same_triple_different_seed_same_labels_new_pixels() {
        let atlas = GlyphAtlas::synthetic(4, 8);
        let t = Triple::new(-42, 17, Operator::Minus);
        let a = render_triple(&atlas, t, Split::Train, &mut named_stream(1, "x"));
        let b = render_triple(&atlas, t, Split::Train, &mut named_stream(2, "x"));
        assert_eq!(a.answer_classes, b.answer_classes);
        assert_ne!(a.answer_image, b.answer_image);
    }
}
