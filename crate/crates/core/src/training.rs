//! Classifier pretraining and GAN training of the generator.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::atlas::{GlyphAtlas, Split, CELL_PIXELS};
use crate::data::glyphs::{synthesize_operator_pixels, OperatorKind};
use crate::data::layout::{BLANK_CLASS, MINUS_CLASS, TRIPLE_COUNT};
use crate::data::sampler::{fixed_subset, render_batch, Batch, TripleSource};
use crate::error::{Error, Result};
use crate::losses::{
    generator_total_loss, lsgan_d_loss, lsgan_g_loss, perceptual_loss, LossWeights,
};
use crate::models::{
    build_classifier, build_discriminator, build_generator, ANSWER_CELLS, CELL, NUM_CLASSES,
};
use crate::nn::{Mode, ModelGraph};
use crate::optim::{Adam, AdamConfig};
use crate::rng::indexed_stream;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// GAN batch size.
    pub batch_size: usize,
    pub classifier_batch_size: usize,
    pub classifier_epochs: usize,
    /// Stops classifier training early after this many steps.
    pub classifier_max_steps: Option<usize>,
    pub classifier_optim: AdamConfig,
    pub gan_steps: usize,
    pub weights: LossWeights,
    pub generator_optim: AdamConfig,
    pub discriminator_optim: AdamConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Restricts GAN training to the first K triples of [`fixed_subset`].
    pub overfit_subset: Option<usize>,
    /// Trains with the L1 term only (no discriminator, no perceptual loss).
    pub l1_only: bool,
    /// Discriminator also sees the expression canvas.
    pub conditional_discriminator: bool,
    /// Renders batches synchronously on the training thread.
    pub determinism: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            classifier_batch_size: 64,
            classifier_epochs: 2,
            classifier_max_steps: None,
            classifier_optim: AdamConfig::with_lr(1e-3),
            gan_steps: 5000,
            weights: LossWeights::default(),
            generator_optim: AdamConfig::gan(),
            discriminator_optim: AdamConfig::gan(),
            checkpoint_every: 1000,
            log_every: 100,
            overfit_subset: None,
            l1_only: false,
            conditional_discriminator: false,
            determinism: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("classifier_batch_size", self.classifier_batch_size),
            ("classifier_epochs", self.classifier_epochs),
            ("gan_steps", self.gan_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        match self.overfit_subset {
            Some(0) => return Err(Error::Config("overfit_subset must be positive".into())),
            Some(k) if k > TRIPLE_COUNT => {
                return Err(Error::Config(format!(
                    "overfit_subset {k} exceeds {TRIPLE_COUNT}"
                )))
            }
            _ => {}
        }
        if self.classifier_max_steps == Some(0) {
            return Err(Error::Config(
                "classifier_max_steps must be positive".into(),
            ));
        }
        for cfg in [
            &self.classifier_optim,
            &self.generator_optim,
            &self.discriminator_optim,
        ] {
            let ok = cfg.lr > 0.0
                && (0.0..1.0).contains(&cfg.beta1)
                && (0.0..1.0).contains(&cfg.beta2)
                && cfg.eps > 0.0;
            if !ok {
                return Err(Error::Config(format!("invalid optimizer settings {cfg:?}")));
            }
        }
        self.effective_weights().validate()
    }

    /// Loss weights actually used: `l1_only` overrides `weights`.
    pub fn effective_weights(&self) -> LossWeights {
        if self.l1_only {
            LossWeights::l1_only()
        } else {
            self.weights
        }
    }
}

/// One metrics line: `{"step": .., "wall_ms": .., "<loss>": ..}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Appends metrics as JSON lines and writes checkpoints under a directory.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    metrics: std::fs::File,
}

impl RunDir {
    pub fn create(dir: impl AsRef<Path>, metrics_name: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let metrics = std::fs::File::create(dir.join(metrics_name))?;
        Ok(Self { dir, metrics })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }
}

pub const CLASSIFIER_FILE: &str = "classifier.nnck";
pub const GENERATOR_FILE: &str = "generator.nnck";
pub const DISCRIMINATOR_FILE: &str = "discriminator.nnck";

fn check_finite(step: usize, name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            name: name.to_string(),
        })
    }
}

/// One classifier training or test item.
#[derive(Clone, Copy, Debug)]
enum CellItem {
    Digit(usize),
    Minus(u64),
    Blank(u64),
}

/// Faint background noise so that "blank" covers near-empty generated cells.
const BLANK_NOISE: f64 = 0.15;

fn cell_pixels(atlas: &GlyphAtlas, split: Split, seed: u64, item: CellItem) -> (Vec<f32>, usize) {
    let domain = match split {
        Split::Train => "cls.synth.train",
        Split::Test => "cls.synth.test",
    };
    match item {
        CellItem::Digit(i) => {
            let pool = atlas.digits(split);
            let pixels = pool
                .image(i)
                .iter()
                .map(|&p| f32::from(p) / 255.0)
                .collect();
            (pixels, usize::from(pool.label(i)))
        }
        CellItem::Minus(k) => {
            let mut rng = indexed_stream(seed, domain, k);
            (
                synthesize_operator_pixels(OperatorKind::Minus, &mut rng),
                MINUS_CLASS,
            )
        }
        CellItem::Blank(k) => {
            let mut rng = indexed_stream(seed ^ 1, domain, k);
            let amp = rng.gen_range(0.0..BLANK_NOISE);
            (
                (0..CELL_PIXELS)
                    .map(|_| rng.gen_range(0.0..=amp) as f32)
                    .collect(),
                BLANK_CLASS,
            )
        }
    }
}

/// Digits of `split` plus one synthesized minus and one blank per ten digits.
fn cell_items(atlas: &GlyphAtlas, split: Split, salt: u64) -> Vec<CellItem> {
    let n = atlas.digits(split).len();
    let extra = n / 10;
    let mut items: Vec<CellItem> = (0..n).map(CellItem::Digit).collect();
    items.extend((0..extra as u64).map(|k| CellItem::Minus(salt + k)));
    items.extend((0..extra as u64).map(|k| CellItem::Blank(salt + k)));
    items
}

fn cell_batch(
    atlas: &GlyphAtlas,
    split: Split,
    seed: u64,
    items: &[CellItem],
) -> (Tensor<f32>, Vec<usize>) {
    let mut data = Vec::with_capacity(items.len() * CELL_PIXELS);
    let mut labels = Vec::with_capacity(items.len());
    for &item in items {
        let (pixels, class) = cell_pixels(atlas, split, seed, item);
        data.extend(pixels.iter().map(|&v| v * 2.0 - 1.0));
        labels.push(class);
    }
    (
        Tensor::new(vec![items.len(), 1, CELL, CELL], data).expect("cell batch"),
        labels,
    )
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0
        })
        .collect()
}

/// Accuracy on MNIST-test digits plus held-out synthesized minus and blank
/// cells (one of each per ten digits).
pub fn classifier_test_accuracy(
    classifier: &ModelGraph<f32>,
    atlas: &GlyphAtlas,
    seed: u64,
) -> Result<f64> {
    let items = cell_items(atlas, Split::Test, 0);
    let mut right = 0;
    for chunk in items.chunks(500) {
        let (x, labels) = cell_batch(atlas, Split::Test, seed, chunk);
        let pred = argmax_rows(&classifier.predict(&x)?);
        right += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(right as f64 / items.len() as f64)
}

pub struct ClassifierOutcome {
    pub model: ModelGraph<f32>,
    pub records: Vec<MetricsRecord>,
    pub test_accuracy: f64,
}

/// Trains the 12-class cell classifier. Items are reshuffled every epoch;
/// each epoch's synthesized minus and blank cells are fresh.
pub fn train_classifier(
    config: &TrainConfig,
    atlas: &GlyphAtlas,
    mut run: Option<&mut RunDir>,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<ClassifierOutcome> {
    config.validate()?;
    let seed = config.seed;
    let mut model = build_classifier::<f32>(seed)?;
    let mut adam = Adam::new(config.classifier_optim);
    let mut records = Vec::new();
    let start = Instant::now();
    let mut step = 0;
    let max_steps = config.classifier_max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.classifier_epochs {
        let mut items = cell_items(atlas, Split::Train, (epoch as u64) << 32);
        items.shuffle(&mut indexed_stream(seed, "cls.shuffle", epoch as u64));
        for chunk in items.chunks(config.classifier_batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let (x, labels) = cell_batch(atlas, Split::Train, seed, chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.forward(&mut tape, xv, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_value = check_finite(step, "cls_loss", f64::from(tape.value(loss).item()))?;
            let pred = argmax_rows(tape.value(logits));
            let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64
                / labels.len() as f64;
            let grads = tape.backward(loss)?;
            adam.step(&mut model, &grads)?;
            step += 1;
            if step == 1 || step % config.log_every == 0 {
                let record = MetricsRecord {
                    step: if step == 1 { 0 } else { step },
                    losses: [
                        ("cls_loss".to_string(), loss_value),
                        ("cls_acc".to_string(), acc),
                    ]
                    .into(),
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                if let Some(run) = run.as_deref_mut() {
                    run.append(&record)?;
                }
                observe(&record);
                records.push(record);
            }
        }
    }
    let test_accuracy = classifier_test_accuracy(&model, atlas, seed)?;
    let record = MetricsRecord {
        step,
        losses: [("test_acc".to_string(), test_accuracy)].into(),
        wall_ms: start.elapsed().as_millis() as u64,
    };
    if let Some(run) = run.as_deref_mut() {
        run.append(&record)?;
        save_checkpoint(&model, run.path(CLASSIFIER_FILE))?;
    }
    observe(&record);
    records.push(record);
    Ok(ClassifierOutcome {
        model,
        records,
        test_accuracy,
    })
}

pub struct GanOutcome {
    pub generator: ModelGraph<f32>,
    pub discriminator: ModelGraph<f32>,
    pub records: Vec<MetricsRecord>,
}

/// Losses of one GAN step, before any parameter update.
#[derive(Clone, Debug, Default)]
pub struct StepLosses {
    pub values: BTreeMap<String, f64>,
}

/// Mutable state of a GAN run.
pub struct GanTrainer<'a> {
    config: TrainConfig,
    weights: LossWeights,
    classifier: &'a ModelGraph<f32>,
    pub generator: ModelGraph<f32>,
    pub discriminator: ModelGraph<f32>,
    g_adam: Adam<f32>,
    d_adam: Adam<f32>,
}

impl<'a> GanTrainer<'a> {
    /// `classifier` must be frozen; it is only ever read.
    pub fn new(config: &TrainConfig, classifier: &'a ModelGraph<f32>) -> Result<Self> {
        config.validate()?;
        if !classifier.is_frozen() {
            return Err(Error::Frozen(
                "GAN training requires a frozen classifier".into(),
            ));
        }
        Ok(Self {
            config: config.clone(),
            weights: config.effective_weights(),
            classifier,
            generator: build_generator(config.seed)?,
            discriminator: build_discriminator(config.seed, config.conditional_discriminator)?,
            g_adam: Adam::new(config.generator_optim),
            d_adam: Adam::new(config.discriminator_optim),
        })
    }

    fn disc_input(&self, tape: &mut Tape<f32>, expr: Var, answer: Var) -> Result<Var> {
        if self.config.conditional_discriminator {
            tape.concat(&[expr, answer], 3)
        } else {
            Ok(answer)
        }
    }

    /// One alternating update: discriminator first, then generator.
    pub fn step(&mut self, step: usize, batch: &Batch) -> Result<StepLosses> {
        let w = self.weights;
        let mut out = StepLosses::default();
        let mut g_tape = Tape::new();
        let expr = g_tape.constant(batch.expressions.clone());
        let target = g_tape.constant(batch.answers.clone());
        let fake = self.generator.forward(&mut g_tape, expr, Mode::Train)?;

        if w.lambda_adv > 0.0 {
            let mut d_tape = Tape::new();
            let e = d_tape.constant(batch.expressions.clone());
            let real = d_tape.constant(batch.answers.clone());
            let detached = d_tape.constant(g_tape.value(fake).clone());
            let real_in = self.disc_input(&mut d_tape, e, real)?;
            let fake_in = self.disc_input(&mut d_tape, e, detached)?;
            let d_real = self
                .discriminator
                .forward(&mut d_tape, real_in, Mode::Train)?;
            let d_fake = self
                .discriminator
                .forward(&mut d_tape, fake_in, Mode::Train)?;
            let d_loss = lsgan_d_loss(&mut d_tape, d_real, d_fake)?;
            let v = check_finite(step, "d_loss", f64::from(d_tape.value(d_loss).item()))?;
            out.values.insert("d_loss".into(), v);
            let grads = d_tape.backward(d_loss)?;
            self.d_adam.step(&mut self.discriminator, &grads)?;
        }

        let zero = g_tape.constant(Tensor::scalar(0.0));
        let adv = if w.lambda_adv > 0.0 {
            let d_in = self.disc_input(&mut g_tape, expr, fake)?;
            let d_fake = self
                .discriminator
                .forward_fixed(&mut g_tape, d_in, Mode::Train)?;
            lsgan_g_loss(&mut g_tape, d_fake)?
        } else {
            zero
        };
        let l1 = g_tape.l1_loss(fake, target)?;
        let needs_cells = w.lambda_perc > 0.0 || w.lambda_cls > 0.0;
        let cells = if needs_cells {
            Some((
                g_tape.split_cells(fake, ANSWER_CELLS)?,
                g_tape.split_cells(target, ANSWER_CELLS)?,
            ))
        } else {
            None
        };
        let perc = match cells {
            Some((f, t)) if w.lambda_perc > 0.0 => {
                perceptual_loss(&mut g_tape, self.classifier, f, t)?
            }
            _ => zero,
        };
        let mut total = generator_total_loss(&mut g_tape, &w, l1, perc, adv)?;
        let mut named = vec![("g_l1", l1), ("g_total", total)];
        if w.lambda_adv > 0.0 {
            named.push(("g_adv", adv));
        }
        if w.lambda_perc > 0.0 {
            named.push(("g_perc", perc));
        }
        if let Some((f, _)) = cells.filter(|_| w.lambda_cls > 0.0) {
            let logits = self.classifier.forward_fixed(&mut g_tape, f, Mode::Eval)?;
            let ce = g_tape.softmax_cross_entropy(logits, &batch.flat_labels())?;
            let scaled = g_tape.scale(ce, w.lambda_cls as f32);
            total = g_tape.add(total, scaled)?;
            named.retain(|(n, _)| *n != "g_total");
            named.push(("g_cls", ce));
            named.push(("g_total", total));
        }
        for (name, var) in named {
            let v = check_finite(step, name, f64::from(g_tape.value(var).item()))?;
            out.values.insert(name.into(), v);
        }
        let grads = g_tape.backward(total)?;
        self.g_adam.step(&mut self.generator, &grads)?;
        Ok(out)
    }

    fn save(&self, run: &RunDir) -> Result<()> {
        save_checkpoint(&self.generator, run.path(GENERATOR_FILE))?;
        save_checkpoint(&self.discriminator, run.path(DISCRIMINATOR_FILE))
    }
}

/// Batch `index` of a run, rendered from the stream `(seed, "gan.batch", index)`.
pub fn gan_batch(
    atlas: &GlyphAtlas,
    config: &TrainConfig,
    subset: Option<&[crate::data::Triple]>,
    index: usize,
) -> Batch {
    let source = match subset {
        Some(list) => TripleSource::Subset(list),
        None => TripleSource::Split(Split::Train),
    };
    render_batch(
        atlas,
        &mut indexed_stream(config.seed, "gan.batch", index as u64),
        source,
        config.batch_size,
    )
}

/// Trains generator and discriminator for `config.gan_steps` steps.
///
/// A record is logged for step 0 (losses at initialization) and after every
/// `log_every` completed steps. Checkpoints are written every
/// `checkpoint_every` steps and at the end.
pub fn train_gan(
    config: &TrainConfig,
    atlas: &GlyphAtlas,
    classifier: &ModelGraph<f32>,
    mut run: Option<&mut RunDir>,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<GanOutcome> {
    let mut trainer = GanTrainer::new(config, classifier)?;
    let subset = config.overfit_subset.map(fixed_subset);
    let start = Instant::now();
    let mut records = Vec::new();
    let steps = config.gan_steps;

    let mut body = |i: usize, batch: Batch| -> Result<()> {
        let losses = trainer.step(i, &batch)?;
        let done = i + 1;
        if i == 0 || done % config.log_every == 0 {
            let record = MetricsRecord {
                step: if i == 0 { 0 } else { done },
                losses: losses.values,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(run) = run.as_deref_mut() {
                run.append(&record)?;
            }
            observe(&record);
            records.push(record);
        }
        if done % config.checkpoint_every == 0 || done == steps {
            if let Some(run) = run.as_deref() {
                trainer.save(run)?;
            }
        }
        Ok(())
    };

    if config.determinism {
        for i in 0..steps {
            body(i, gan_batch(atlas, config, subset.as_deref(), i))?;
        }
    } else {
        // Batches are keyed by index, so prefetching yields the same stream.
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Batch>(4);
            let subset = subset.as_deref();
            scope.spawn(move || {
                for i in 0..steps {
                    if tx.send(gan_batch(atlas, config, subset, i)).is_err() {
                        break;
                    }
                }
            });
            for (i, batch) in rx.iter().enumerate() {
                body(i, batch)?;
            }
            Ok(())
        })?;
    }
    drop(body);
    Ok(GanOutcome {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            gan_steps: 3,
            log_every: 2,
            checkpoint_every: 2,
            classifier_batch_size: 8,
            classifier_max_steps: Some(3),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("batch_size"));
        let bad = TrainConfig {
            overfit_subset: Some(TRIPLE_COUNT + 1),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            overfit_subset: Some(TRIPLE_COUNT),
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn config_toml_like_round_trip() {
        let c = TrainConfig {
            overfit_subset: Some(32),
            l1_only: true,
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.batch_size, 16);
    }

    #[test]
    fn classifier_initial_loss_near_ln12() {
        let atlas = GlyphAtlas::synthetic(0, 10);
        let out = train_classifier(&tiny(), &atlas, None, |_| {}).unwrap();
        let first = out.records[0].losses["cls_loss"];
        assert!((first - 12f64.ln()).abs() < 0.3, "{first}");
        assert!(out.records.last().unwrap().losses.contains_key("test_acc"));
    }

    #[test]
    fn gan_requires_frozen_classifier() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let cls = build_classifier::<f32>(0).unwrap();
        let err = train_gan(&tiny(), &atlas, &cls, None, |_| {})
            .err()
            .unwrap();
        assert!(matches!(err, Error::Frozen(_)));
    }

    #[test]
    fn gan_logs_and_leaves_classifier_untouched() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let mut cls = build_classifier::<f32>(0).unwrap();
        cls.freeze();
        let before = cls.params().clone();
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "metrics.jsonl").unwrap();
        let cfg = TrainConfig {
            gan_steps: 4,
            ..tiny()
        };
        let out = train_gan(&cfg, &atlas, &cls, Some(&mut run), |_| {}).unwrap();
        assert_eq!(cls.params(), &before);
        // floor(4 / 2) + 1
        assert_eq!(out.records.len(), 3);
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4]);
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        for key in ["d_loss", "g_adv", "g_l1", "g_perc", "g_total"] {
            assert!(out.records[0].losses.contains_key(key), "{key}");
        }
        assert!(dir.path().join(GENERATOR_FILE).exists());
        assert!(dir.path().join(DISCRIMINATOR_FILE).exists());
    }

    #[test]
    fn generator_and_discriminator_steps_touch_disjoint_params() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let mut cls = build_classifier::<f32>(0).unwrap();
        cls.freeze();
        let cfg = tiny();
        let mut t = GanTrainer::new(&cfg, &cls).unwrap();
        let g0 = t.generator.params().clone();
        let d0 = t.discriminator.params().clone();
        t.step(0, &gan_batch(&atlas, &cfg, None, 0)).unwrap();
        assert!(g0.keys().all(|k| k.starts_with("gen.")));
        assert!(d0.keys().all(|k| k.starts_with("disc.")));
        assert_ne!(t.generator.params(), &g0);
        assert_ne!(t.discriminator.params(), &d0);
        let l1 = TrainConfig {
            l1_only: true,
            ..tiny()
        };
        let mut t = GanTrainer::new(&l1, &cls).unwrap();
        let losses = t.step(0, &gan_batch(&atlas, &l1, None, 0)).unwrap();
        assert_eq!(t.discriminator.params(), &d0);
        assert!(!losses.values.contains_key("d_loss"));
    }

    #[test]
    fn prefetch_matches_synchronous_rendering() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let mut cls = build_classifier::<f32>(0).unwrap();
        cls.freeze();
        let sync = train_gan(&tiny(), &atlas, &cls, None, |_| {}).unwrap();
        let cfg = TrainConfig {
            determinism: false,
            ..tiny()
        };
        let piped = train_gan(&cfg, &atlas, &cls, None, |_| {}).unwrap();
        assert_eq!(sync.generator.params(), piped.generator.params());
    }

    #[test]
    fn aux_classifier_term_is_logged() {
        let atlas = GlyphAtlas::synthetic(0, 2);
        let mut cls = build_classifier::<f32>(0).unwrap();
        cls.freeze();
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_cls: 0.5,
                ..Default::default()
            },
            ..tiny()
        };
        let mut t = GanTrainer::new(&cfg, &cls).unwrap();
        let l = t.step(0, &gan_batch(&atlas, &cfg, None, 0)).unwrap();
        assert!(l.values.contains_key("g_cls"));
    }
}
