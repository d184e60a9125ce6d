//! Ground-truth arithmetic, answer-image parsing, and accuracy reports.
//!
//! Digit recognition lives only here, outside the generator's inference path.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::atlas::{GlyphAtlas, Split};
use crate::data::layout::{
    answer_classes, Operator, Triple, BLANK_CLASS, MINUS_CLASS, OPERAND_MAX, OPERAND_MIN,
};
use crate::data::sampler::{render_triples, split_triples, Batch};
use crate::error::{Error, Result};
use crate::models::{ANSWER_CELLS, CELL, NUM_CLASSES};
use crate::nn::ModelGraph;
use crate::rng::{indexed_stream, named_stream};
use crate::tensor::Tensor;

/// Exact `a op b` for operands in `[-99, 99]`.
pub fn arithmetic_oracle(a: i64, b: i64, op: Operator) -> Result<i64> {
    for v in [a, b] {
        if !(OPERAND_MIN..=OPERAND_MAX).contains(&v) {
            return Err(Error::OperandRange(v));
        }
    }
    Ok(match op {
        Operator::Plus => a + b,
        Operator::Minus => a - b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub cell_classes: [usize; 4],
    pub value: Option<i64>,
    pub well_formed: bool,
    /// Max softmax probability per cell; 1.0 for ground-truth parses.
    pub confidences: [f32; 4],
}

/// Applies the layout rules to four cell classes.
///
/// Well-formed means: leading blanks, then an optional minus, then at least
/// one digit running to the last cell, with no leading zero and no `-0`. A
/// digit in the sign cell is malformed. Equivalently, the cells are exactly
/// what the renderer would draw for the value.
pub fn parse_cells(cells: [usize; 4]) -> Option<i64> {
    let first = cells.iter().position(|&c| c != BLANK_CLASS)?;
    let (negative, digits_from) = if cells[first] == MINUS_CLASS {
        (true, first + 1)
    } else {
        (false, first)
    };
    let digits = &cells[digits_from..];
    if digits.is_empty() || digits.iter().any(|&c| c > 9) {
        return None;
    }
    let magnitude = digits.iter().fold(0i64, |acc, &d| acc * 10 + d as i64);
    let value = if negative { -magnitude } else { magnitude };
    (answer_classes_checked(value)? == cells).then_some(value)
}

fn answer_classes_checked(value: i64) -> Option<[usize; 4]> {
    let used = value.unsigned_abs().to_string().len() + usize::from(value < 0);
    // The sign cell never holds a digit.
    (used <= 3 || (used == 4 && value < 0)).then(|| answer_classes(value))
}

pub fn parse_labels(cells: [usize; 4]) -> ParsedAnswer {
    let value = parse_cells(cells);
    ParsedAnswer {
        cell_classes: cells,
        value,
        well_formed: value.is_some(),
        confidences: [1.0; 4],
    }
}

/// `[N, C, H, parts * w]` to `[N * parts, C, H, w]`, item `n * parts + p`
/// holding column block `p` of item `n`.
pub fn split_cells(images: &Tensor<f32>, parts: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[3] % parts != 0 {
        return Err(Error::Shape {
            op: "split_cells",
            detail: format!("{s:?} into {parts} cells"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3] / parts);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..n {
        for p in 0..parts {
            for ch in 0..c {
                for r in 0..h {
                    let start = ((i * c + ch) * h + r) * s[3] + p * w;
                    out.extend_from_slice(&src[start..start + w]);
                }
            }
        }
    }
    Tensor::new(vec![n * parts, c, h, w], out)
}

/// Classifies each cell of network-range `[N, 1, 28, 112]` answers.
pub fn parse_answer_images(
    classifier: &ModelGraph<f32>,
    answers: &Tensor<f32>,
) -> Result<Vec<ParsedAnswer>> {
    let cells = split_cells(answers, ANSWER_CELLS)?;
    let logits = classifier.predict(&cells)?;
    let probs = logits.data();
    let mut out = Vec::with_capacity(answers.shape()[0]);
    for item in probs.chunks(NUM_CLASSES * ANSWER_CELLS) {
        let mut classes = [0; 4];
        let mut conf = [0.0; 4];
        for (k, row) in item.chunks(NUM_CLASSES).enumerate() {
            let (best, max) =
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
            let z: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            classes[k] = best;
            conf[k] = 1.0 / z;
        }
        let mut parsed = parse_labels(classes);
        parsed.confidences = conf;
        out.push(parsed);
    }
    Ok(out)
}

/// Single-image form of [`parse_answer_images`]; accepts `[1, 1, 28, 112]`
/// or `[1, 28, 112]`.
pub fn parse_answer_image(
    classifier: &ModelGraph<f32>,
    answer: &Tensor<f32>,
) -> Result<ParsedAnswer> {
    let batch = answer.reshape(vec![1, 1, CELL, ANSWER_CELLS * CELL])?;
    Ok(parse_answer_images(classifier, &batch)?.remove(0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub n_total: usize,
    pub n_well_formed: usize,
    pub n_exact_match: usize,
    pub exact_match_rate: f64,
    pub well_formed_rate: f64,
}

impl Counts {
    fn add(&mut self, well_formed: bool, exact: bool) {
        self.n_total += 1;
        self.n_well_formed += usize::from(well_formed);
        self.n_exact_match += usize::from(exact);
        let n = self.n_total as f64;
        self.exact_match_rate = self.n_exact_match as f64 / n;
        self.well_formed_rate = self.n_well_formed as f64 / n;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub counts: Counts,
    /// Fraction of answer cells whose predicted class equals the target class.
    pub cell_accuracy: f64,
    /// Keyed by `"plus"` / `"minus"`.
    pub per_op: BTreeMap<String, Counts>,
    /// `|parsed - true|` histogram over well-formed wrong answers.
    pub abs_error_histogram: BTreeMap<u64, usize>,
}

impl EvalReport {
    pub fn exact_match_rate(&self) -> f64 {
        self.counts.exact_match_rate
    }

    pub fn well_formed_rate(&self) -> f64 {
        self.counts.well_formed_rate
    }

    fn record(&mut self, triple: &Triple, parsed: &ParsedAnswer, cells_right: usize) {
        let truth = triple.result();
        let exact = parsed.value == Some(truth);
        self.counts.add(parsed.well_formed, exact);
        let op = match triple.op {
            Operator::Plus => "plus",
            Operator::Minus => "minus",
        };
        self.per_op
            .entry(op.to_string())
            .or_default()
            .add(parsed.well_formed, exact);
        if let (Some(v), false) = (parsed.value, exact) {
            *self
                .abs_error_histogram
                .entry(v.abs_diff(truth))
                .or_default() += 1;
        }
        let cells_seen = (self.counts.n_total - 1) * 4;
        self.cell_accuracy =
            (self.cell_accuracy * cells_seen as f64 + cells_right as f64) / (cells_seen + 4) as f64;
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>7} {:>11} {:>11}\n",
            "op", "n", "exact", "well_formed"
        );
        let mut row = |name: &str, c: &Counts| {
            s += &format!(
                "{:<8} {:>7} {:>11.4} {:>11.4}\n",
                name, c.n_total, c.exact_match_rate, c.well_formed_rate
            );
        };
        for (name, c) in &self.per_op {
            row(name, c);
        }
        row("all", &self.counts);
        s += &format!("cell accuracy {:.4}\n", self.cell_accuracy);
        s
    }
}

/// `n` distinct triples of `split` drawn with `seed`, or all of them when
/// `n` is at least the split size. Sorted for a stable evaluation order.
pub fn eval_triples(split: Split, n: usize, seed: u64) -> Vec<Triple> {
    let mut all = split_triples(split);
    if n < all.len() {
        all.shuffle(&mut named_stream(seed, "eval.triples"));
        all.truncate(n);
        all.sort();
    }
    all
}

pub const EVAL_CHUNK: usize = 64;

/// Evaluation loop with pluggable answer generation and reading.
///
/// Triples are rendered in chunks of [`EVAL_CHUNK`] with glyphs from
/// `glyph_split`; chunk `i` uses the stream `(seed, "eval", i)`.
pub fn evaluate_with<G, P>(
    atlas: &GlyphAtlas,
    triples: &[Triple],
    glyph_split: Split,
    seed: u64,
    mut generate: G,
    mut read: P,
) -> Result<EvalReport>
where
    G: FnMut(&Batch) -> Result<Tensor<f32>>,
    P: FnMut(&Tensor<f32>, &Batch) -> Result<Vec<ParsedAnswer>>,
{
    let mut report = EvalReport::default();
    for (i, chunk) in triples.chunks(EVAL_CHUNK).enumerate() {
        let batch = render_triples(
            atlas,
            chunk,
            glyph_split,
            &mut indexed_stream(seed, "eval", i as u64),
        );
        let answers = generate(&batch)?;
        let parsed = read(&answers, &batch)?;
        for ((t, p), truth) in chunk.iter().zip(&parsed).zip(&batch.labels) {
            let right = p
                .cell_classes
                .iter()
                .zip(truth)
                .filter(|(a, b)| a == b)
                .count();
            report.record(t, p, right);
        }
    }
    Ok(report)
}

/// Runs `generator` (eval mode) on rendered expressions and parses its
/// answers with `classifier`.
pub fn evaluate(
    generator: &ModelGraph<f32>,
    classifier: &ModelGraph<f32>,
    atlas: &GlyphAtlas,
    triples: &[Triple],
    glyph_split: Split,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(
        atlas,
        triples,
        glyph_split,
        seed,
        |b| generator.predict(&b.expressions),
        |answers, _| parse_answer_images(classifier, answers),
    )
}

pub const MIN_COLLAPSE_SAMPLES: usize = 20;

/// Mean over pixels of the per-pixel standard deviation across samples, per
/// class. Each sample is one cell of equal length.
pub fn collapse_statistic(
    images_by_class: &BTreeMap<usize, Vec<Vec<f32>>>,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (&class, images) in images_by_class {
        if images.len() < MIN_COLLAPSE_SAMPLES {
            return Err(Error::InvalidArgument {
                op: "collapse_statistic",
                detail: format!(
                    "class {class} has {} samples, need at least {MIN_COLLAPSE_SAMPLES}",
                    images.len()
                ),
            });
        }
        let len = images[0].len();
        if images.iter().any(|im| im.len() != len) || len == 0 {
            return Err(Error::InvalidArgument {
                op: "collapse_statistic",
                detail: format!("class {class} has images of unequal or zero size"),
            });
        }
        let n = images.len() as f64;
        let mut total = 0.0;
        for p in 0..len {
            let mean = images.iter().map(|im| f64::from(im[p])).sum::<f64>() / n;
            let var = images
                .iter()
                .map(|im| (f64::from(im[p]) - mean).powi(2))
                .sum::<f64>()
                / n;
            total += var.sqrt();
        }
        out.insert(class, total / len as f64);
    }
    Ok(out)
}

/// Network-range generator answer cells grouped by their target digit class
/// (0-9 only), mapped to `[0, 1]`.
pub fn generated_digit_cells(
    generator: &ModelGraph<f32>,
    atlas: &GlyphAtlas,
    triples: &[Triple],
    glyph_split: Split,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<Vec<f32>>>> {
    let mut by_class: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    evaluate_with(
        atlas,
        triples,
        glyph_split,
        seed,
        |b| generator.predict(&b.expressions),
        |answers, batch| {
            let cells = split_cells(answers, ANSWER_CELLS)?;
            let per = CELL * CELL;
            for (k, &class) in batch.flat_labels().iter().enumerate() {
                if class < 10 {
                    let cell = &cells.data()[k * per..(k + 1) * per];
                    by_class.entry(class).or_default().push(
                        cell.iter()
                            .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                            .collect(),
                    );
                }
            }
            Ok(batch.labels.iter().map(|&l| parse_labels(l)).collect())
        },
    )?;
    Ok(by_class)
}

/// Real digit cells from an atlas pool, `per_class` of each, in `[0, 1]`.
pub fn real_digit_cells(
    atlas: &GlyphAtlas,
    split: Split,
    per_class: usize,
) -> BTreeMap<usize, Vec<Vec<f32>>> {
    let pool = atlas.digits(split);
    (0..10u8)
        .map(|d| {
            let cells = pool
                .class_indices(d)
                .iter()
                .take(per_class)
                .map(|&i| {
                    pool.image(i)
                        .iter()
                        .map(|&p| f32::from(p) / 255.0)
                        .collect()
                })
                .collect();
            (usize::from(d), cells)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::layout::TRIPLE_COUNT;
    use crate::models::build_generator;

    #[test]
    fn oracle_examples() {
        assert_eq!(arithmetic_oracle(5, 2, Operator::Plus).unwrap(), 7);
        assert_eq!(arithmetic_oracle(0, 0, Operator::Minus).unwrap(), 0);
        assert_eq!(arithmetic_oracle(99, 99, Operator::Plus).unwrap(), 198);
        assert_eq!(arithmetic_oracle(-99, 99, Operator::Minus).unwrap(), -198);
        assert!(matches!(
            arithmetic_oracle(100, 0, Operator::Plus),
            Err(Error::OperandRange(100))
        ));
        assert!(arithmetic_oracle(0, -100, Operator::Minus).is_err());
    }

    const B: usize = BLANK_CLASS;
    const M: usize = MINUS_CLASS;

    #[test]
    fn cell_rules() {
        assert_eq!(parse_cells([B, 1, 9, 8]), Some(198));
        assert_eq!(parse_cells([B, B, B, 7]), Some(7));
        assert_eq!(parse_cells([B, B, B, 0]), Some(0));
        assert_eq!(parse_cells([M, 1, 9, 8]), Some(-198));
        assert_eq!(parse_cells([B, B, M, 7]), Some(-7));
        assert_eq!(parse_cells([M, B, 4, 2]), None);
        assert_eq!(parse_cells([B, B, B, B]), None);
        assert_eq!(parse_cells([B, B, 7, B]), None);
        assert_eq!(parse_cells([B, 0, 0, 7]), None);
        assert_eq!(parse_cells([B, B, M, 0]), None);
        assert_eq!(parse_cells([1, 2, 3, 4]), None);
        assert_eq!(parse_cells([B, M, M, 4]), None);
        assert_eq!(parse_cells([B, B, B, M]), None);
    }

    #[test]
    fn labels_round_trip_every_result() {
        for v in -198..=198 {
            assert_eq!(parse_labels(answer_classes(v)).value, Some(v));
        }
    }

    #[test]
    fn split_cells_layout() {
        let data: Vec<f32> = (0..2 * 2 * 4).map(|v| v as f32).collect();
        let t = Tensor::new(vec![1, 1, 2, 8], data).unwrap();
        let cells = split_cells(&t, 4).unwrap();
        assert_eq!(cells.shape(), &[4, 1, 2, 2]);
        assert_eq!(&cells.data()[..4], &[0.0, 1.0, 8.0, 9.0]);
        assert_eq!(&cells.data()[12..], &[6.0, 7.0, 14.0, 15.0]);
    }

    #[test]
    fn renderer_targets_with_true_labels_score_perfectly() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let triples = eval_triples(Split::Test, 100, 3);
        let report = evaluate_with(
            &atlas,
            &triples,
            Split::Test,
            0,
            |b| Ok(b.answers.clone()),
            |_, b| Ok(b.labels.iter().map(|&l| parse_labels(l)).collect()),
        )
        .unwrap();
        assert_eq!(report.counts.n_total, 100);
        assert_eq!(report.exact_match_rate(), 1.0);
        assert_eq!(report.cell_accuracy, 1.0);
        let per_op: usize = report.per_op.values().map(|c| c.n_total).sum();
        assert_eq!(per_op, 100);
    }

    #[test]
    fn eval_triples_all_or_sample() {
        assert_eq!(
            eval_triples(Split::Test, usize::MAX, 0).len(),
            split_triples(Split::Test).len()
        );
        let a = eval_triples(Split::Test, 50, 1);
        assert_eq!(a, eval_triples(Split::Test, 50, 1));
        assert_eq!(a.len(), 50);
        assert!(split_triples(Split::Test).len() < TRIPLE_COUNT);
    }

    #[test]
    fn untrained_generator_report_is_consistent() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let g = build_generator::<f32>(1).unwrap();
        let mut cls = crate::models::build_classifier::<f32>(2).unwrap();
        cls.freeze();
        let triples = eval_triples(Split::Test, 64, 0);
        let r = evaluate(&g, &cls, &atlas, &triples, Split::Test, 0).unwrap();
        let c = &r.counts;
        assert!(c.n_exact_match <= c.n_well_formed && c.n_well_formed <= c.n_total);
        assert_eq!(c.n_total, 64);
        let again = evaluate(&g, &cls, &atlas, &triples, Split::Test, 0).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn collapse_statistic_rules() {
        let same: BTreeMap<_, _> = [(1, vec![vec![0.3f32; 784]; 20])].into();
        assert_eq!(collapse_statistic(&same).unwrap()[&1], 0.0);
        let few: BTreeMap<_, _> = [(1, vec![vec![0.3f32; 784]; 19])].into();
        assert!(collapse_statistic(&few).is_err());
        // Half the samples 0, half 1: std 0.5 at every pixel.
        let split: BTreeMap<_, _> =
            [(2, (0..20).map(|i| vec![(i % 2) as f32; 4]).collect())].into();
        assert!((collapse_statistic(&split).unwrap()[&2] - 0.5).abs() < 1e-12);
    }
}
