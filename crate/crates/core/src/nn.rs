//! Parameterized layers and the fixed-topology network container.
//!
//! A [`ModelGraph`] owns a flat map of named tensors (weights plus batch-norm
//! running statistics) and an ordered list of named stages, each a sequence
//! of [`LayerSpec`]s. Parameter names are dotted paths such as
//! `gen.enc1.conv.weight`, so checkpoints do not depend on ordering.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::rng::named_stream;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `(-s, s)` with `s = sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Builds a parameter tensor as a pure function of `(global_seed, name)`.
pub fn init_param<S: Scalar>(
    shape: &[usize],
    init: Init,
    global_seed: u64,
    name: &str,
) -> Tensor<S> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::FanIn(fan_in) => {
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut rng = named_stream(global_seed, name);
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        }
    }
}

/// One layer of a fixed network topology.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    },
    /// `y = x W + b` with `W` stored as `[in, out]`.
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Activation(Activation),
    MaxPool,
    Flatten,
    /// Reshapes each batch item to the given dimensions.
    Reshape(Vec<usize>),
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn conv_transpose(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Self {
        LayerSpec::ConvTranspose {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            geometry,
            bias,
        }
    }

    pub fn linear(name: &str, inputs: usize, outputs: usize) -> Self {
        LayerSpec::Linear {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        LayerSpec::BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::ConvTranspose { name, .. }
            | LayerSpec::Linear { name, .. }
            | LayerSpec::BatchNorm { name, .. } => name.clone(),
            LayerSpec::Activation(a) => format!("{a:?}").to_lowercase(),
            LayerSpec::MaxPool => "max_pool".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Reshape(d) => format!("reshape{d:?}"),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        let ok = match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => positive(&[*in_channels, *out_channels, *kernel, *stride]),
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                geometry,
                ..
            } => {
                positive(&[*in_channels, *out_channels, *kernel])
                    && geometry.validate("conv_transpose").is_ok()
            }
            LayerSpec::Linear {
                inputs, outputs, ..
            } => positive(&[*inputs, *outputs]),
            LayerSpec::BatchNorm { channels, .. } => *channels > 0,
            LayerSpec::Reshape(dims) => !dims.is_empty() && positive(dims),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            arg_err("layer", format!("invalid hyperparameters for {self:?}"))
        }
    }

    /// `(name, shape, init)` for every tensor this layer owns.
    fn tensors(&self) -> Vec<(String, Vec<usize>, Init)> {
        match self {
            LayerSpec::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    Init::FanIn(in_channels * kernel * kernel),
                )];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_channels], Init::Zeros));
                }
                v
            }
            LayerSpec::ConvTranspose {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    format!("{name}.weight"),
                    vec![*in_channels, *out_channels, *kernel, *kernel],
                    Init::FanIn(in_channels * kernel * kernel),
                )];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_channels], Init::Zeros));
                }
                v
            }
            LayerSpec::Linear {
                name,
                inputs,
                outputs,
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*inputs, *outputs],
                    Init::FanIn(*inputs),
                ),
                (format!("{name}.bias"), vec![*outputs], Init::Zeros),
            ],
            LayerSpec::BatchNorm { name, channels } => vec![
                (format!("{name}.weight"), vec![*channels], Init::Ones),
                (format!("{name}.bias"), vec![*channels], Init::Zeros),
                (format!("{name}.running_mean"), vec![*channels], Init::Zeros),
                (format!("{name}.running_var"), vec![*channels], Init::Ones),
            ],
            _ => Vec::new(),
        }
    }
}

/// Names of batch-norm running statistics; these are state, not trainable.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Generator,
    Discriminator,
    Classifier,
}

impl ModelKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ModelKind::Generator => "gen",
            ModelKind::Discriminator => "disc",
            ModelKind::Classifier => "cls",
        }
    }
}

/// Running-statistic update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<S> {
    layer: String,
    mean: Vec<S>,
    var: Vec<S>,
}

/// A fixed topology plus its named tensors.
#[derive(Clone, Debug)]
pub struct ModelGraph<S: Scalar> {
    kind: ModelKind,
    input_shape: Vec<usize>,
    stages: Vec<(String, Vec<LayerSpec>)>,
    params: BTreeMap<String, Tensor<S>>,
    frozen: bool,
}

impl<S: Scalar> ModelGraph<S> {
    /// Validates every layer and initializes its tensors from `seed`.
    pub fn new(
        kind: ModelKind,
        input_shape: Vec<usize>,
        stages: Vec<(String, Vec<LayerSpec>)>,
        seed: u64,
    ) -> Result<Self> {
        let mut params = BTreeMap::new();
        for layer in stages.iter().flat_map(|(_, l)| l) {
            layer.validate()?;
            for (name, shape, init) in layer.tensors() {
                if params
                    .insert(name.clone(), init_param(&shape, init, seed, &name))
                    .is_some()
                {
                    return arg_err("model", format!("duplicate parameter name {name}"));
                }
            }
        }
        Ok(Self {
            kind,
            input_shape,
            stages,
            params,
            frozen: false,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Per-item input shape `[C, H, W]`.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn stage_names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|(n, _)| n.as_str())
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.stages.iter().flat_map(|(_, l)| l)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    /// Names of the tensors an optimizer should update.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .map(String::as_str)
            .filter(|n| !is_buffer(n))
    }

    /// Scalar count of trainable values.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen model never exposes its parameters to gradient updates.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replaces every tensor; the name sets must match exactly.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        let missing: Vec<String> = self
            .params
            .keys()
            .filter(|k| !tensors.contains_key(*k))
            .cloned()
            .collect();
        let unexpected: Vec<String> = tensors
            .keys()
            .filter(|k| !self.params.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::NameDelta {
                missing,
                unexpected,
            });
        }
        for (name, t) in tensors {
            let slot = self.params.get_mut(name).expect("checked above");
            if slot.shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape<S>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "{:?} expects input [N, {:?}], got {s:?}",
                    self.kind, self.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Runs stages `[from, to)` without touching model state.
    ///
    /// Parameter gradients are recorded iff `param_grads` and the model is not
    /// frozen. Train-mode batch-norm statistics are returned for the caller to
    /// apply with [`apply_stat_updates`](Self::apply_stat_updates).
    pub fn run_stages(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        mode: Mode,
        param_grads: bool,
        from: usize,
        to: usize,
    ) -> Result<(Var, Vec<StatUpdate<S>>)> {
        let trainable = param_grads && !self.frozen;
        let mut updates = Vec::new();
        let mut h = x;
        for (_, layers) in &self.stages[from..to] {
            for layer in layers {
                h = self
                    .apply_layer(tape, layer, h, mode, trainable, &mut updates)
                    .map_err(|e| Error::Layer {
                        layer: layer.label(),
                        source: Box::new(e),
                    })?;
            }
        }
        Ok((h, updates))
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|(n, _)| n == name)
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Full forward pass. In train mode, batch-norm running statistics are
    /// updated with momentum [`BN_MOMENTUM`].
    pub fn forward(&mut self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape, x)?;
        let (y, updates) = self.run_stages(tape, x, mode, true, 0, self.stages.len())?;
        self.apply_stat_updates(&updates);
        Ok(y)
    }

    /// Eval-mode forward with no parameter gradients; safe for shared use.
    pub fn forward_eval(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        Ok(self
            .run_stages(tape, x, Mode::Eval, false, 0, self.stages.len())?
            .0)
    }

    /// Forward with parameters treated as constants (no parameter gradients,
    /// no state change), e.g. a discriminator during a generator step.
    pub fn forward_fixed(&self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape, x)?;
        let (y, _) = self.run_stages(tape, x, mode, false, 0, self.stages.len())?;
        Ok(y)
    }

    /// Eval-mode inference on a batch without building gradients.
    pub fn predict(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<S>]) {
        let m = S::from_f64_lossy(BN_MOMENTUM);
        let one_minus = S::one() - m;
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let t = self
                    .params
                    .get_mut(&format!("{}.{suffix}", u.layer))
                    .expect("batch norm buffer");
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + one_minus * b;
                }
            }
        }
    }

    fn bind(&self, tape: &mut Tape<S>, name: &str, trainable: bool) -> Var {
        let t = self
            .params
            .get(name)
            .expect("parameter registered at construction");
        tape.param(name, t, trainable)
    }

    fn apply_layer(
        &self,
        tape: &mut Tape<S>,
        layer: &LayerSpec,
        x: Var,
        mode: Mode,
        trainable: bool,
        updates: &mut Vec<StatUpdate<S>>,
    ) -> Result<Var> {
        match layer {
            LayerSpec::Conv {
                name,
                stride,
                padding,
                bias,
                ..
            } => {
                let w = self.bind(tape, &format!("{name}.weight"), trainable);
                let y = tape.conv2d(x, w, *stride, *padding)?;
                self.maybe_bias(tape, y, name, *bias, trainable)
            }
            LayerSpec::ConvTranspose {
                name,
                geometry,
                bias,
                ..
            } => {
                let w = self.bind(tape, &format!("{name}.weight"), trainable);
                let y = tape.conv_transpose2d(x, w, *geometry)?;
                self.maybe_bias(tape, y, name, *bias, trainable)
            }
            LayerSpec::Linear { name, .. } => {
                let w = self.bind(tape, &format!("{name}.weight"), trainable);
                let y = tape.matmul(x, w)?;
                self.maybe_bias(tape, y, name, true, trainable)
            }
            LayerSpec::BatchNorm { name, .. } => {
                let gamma = self.bind(tape, &format!("{name}.weight"), trainable);
                let beta = self.bind(tape, &format!("{name}.bias"), trainable);
                match mode {
                    Mode::Train => {
                        let (y, moments) = tape.batch_norm(x, gamma, beta, BN_EPS)?;
                        updates.push(StatUpdate {
                            layer: name.clone(),
                            mean: moments.mean,
                            var: moments.var,
                        });
                        Ok(y)
                    }
                    Mode::Eval => {
                        let mean = self.params[&format!("{name}.running_mean")].data().to_vec();
                        let var = self.params[&format!("{name}.running_var")].data().to_vec();
                        tape.channel_norm(x, gamma, beta, &mean, &var, BN_EPS)
                    }
                }
            }
            LayerSpec::Activation(a) => Ok(match a {
                Activation::LeakyRelu => tape.leaky_relu(x),
                Activation::Relu => tape.relu(x),
                Activation::Tanh => tape.tanh(x),
                Activation::Sigmoid => tape.sigmoid(x),
            }),
            LayerSpec::MaxPool => tape.max_pool2d(x),
            LayerSpec::Flatten => {
                let s = tape.shape(x);
                let (n, rest) = (s[0], s[1..].iter().product::<usize>());
                tape.reshape(x, &[n, rest])
            }
            LayerSpec::Reshape(dims) => {
                let n = tape.shape(x)[0];
                let mut shape = vec![n];
                shape.extend_from_slice(dims);
                tape.reshape(x, &shape)
            }
        }
    }

    fn maybe_bias(
        &self,
        tape: &mut Tape<S>,
        y: Var,
        name: &str,
        bias: bool,
        trainable: bool,
    ) -> Result<Var> {
        if !bias {
            return Ok(y);
        }
        let b = self.bind(tape, &format!("{name}.bias"), trainable);
        tape.add(y, b)
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ModelGraph<T> {
        ModelGraph {
            kind: self.kind,
            input_shape: self.input_shape.clone(),
            stages: self.stages.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelGraph<f64> {
        ModelGraph::new(
            ModelKind::Classifier,
            vec![2, 4, 4],
            vec![
                (
                    "body".into(),
                    vec![
                        LayerSpec::conv("t.conv", 2, 3, 3, 1, 1, false),
                        LayerSpec::batch_norm("t.bn", 3),
                        LayerSpec::Activation(Activation::LeakyRelu),
                        LayerSpec::MaxPool,
                    ],
                ),
                (
                    "head".into(),
                    vec![LayerSpec::Flatten, LayerSpec::linear("t.fc", 12, 2)],
                ),
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn linear_init_bound() {
        let t: Tensor<f32> = init_param(&[10, 5], Init::FanIn(5), 3, "x.weight");
        assert!(t.data().iter().all(|v| v.abs() < 0.4473));
        assert!(t.max_abs() > 0.3);
    }

    #[test]
    fn batchnorm_scale_init_is_ones() {
        let t: Tensor<f32> = init_param(&[8], Init::Ones, 3, "x.bn.weight");
        assert_eq!(t, Tensor::ones([8]));
    }

    #[test]
    fn init_is_pure_in_seed_and_name() {
        let a: Tensor<f32> = init_param(&[4, 4], Init::FanIn(4), 9, "a");
        let b: Tensor<f32> = init_param(&[4, 4], Init::FanIn(4), 9, "a");
        let c: Tensor<f32> = init_param(&[4, 4], Init::FanIn(4), 9, "b");
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert_eq!(tiny(1).params(), tiny(1).params());
    }

    #[test]
    fn invalid_hyperparameters_rejected_at_construction() {
        let bad = ModelGraph::<f32>::new(
            ModelKind::Classifier,
            vec![1, 4, 4],
            vec![("s".into(), vec![LayerSpec::conv("c", 1, 2, 3, 0, 1, true)])],
            0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn shape_error_names_layer() {
        let model = tiny(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        // Skip the body so the head sees an unflattenable-to-12 input.
        let err = model
            .run_stages(&mut tape, x, Mode::Eval, false, 1, 2)
            .unwrap_err();
        assert!(err.to_string().contains("t.fc"), "{err}");
        let bad = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        assert!(model.forward_eval(&mut tape, bad).is_err());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut model = tiny(0);
        let mut rng = named_stream(0, "input");
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform([3, 2, 4, 4], 0.0, 2.0, &mut rng));
        let before = model.param("t.bn.running_mean").unwrap().clone();
        model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_ne!(model.param("t.bn.running_mean").unwrap(), &before);
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_independent() {
        let mut model = tiny(4);
        let mut rng = named_stream(0, "input");
        let batch = Tensor::uniform([4, 2, 4, 4], -1.0, 1.0, &mut rng);
        {
            let mut tape = Tape::new();
            let x = tape.constant(batch.clone());
            model.forward(&mut tape, x, Mode::Train).unwrap();
        }
        let full = model.predict(&batch).unwrap();
        assert_eq!(full, model.predict(&batch).unwrap());
        // Shuffled batch: per-sample outputs are unchanged.
        let order = [2, 0, 3, 1];
        let shuffled = Tensor::stack_batch(&order.map(|i| batch.batch_item(i))).unwrap();
        let out = model.predict(&shuffled).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            assert_eq!(out.batch_item(pos), full.batch_item(i));
        }
    }

    #[test]
    fn every_param_receives_gradient() {
        let mut model = tiny(5);
        let mut rng = named_stream(1, "input");
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform([3, 2, 4, 4], -1.0, 1.0, &mut rng));
        let y = model.forward(&mut tape, x, Mode::Train).unwrap();
        let w = tape.constant(Tensor::uniform([3, 2], -1.0, 1.0, &mut rng));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        for name in model.trainable_names() {
            let g = grads
                .param(name)
                .unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.max_abs() > 0.0, "dead parameter {name}");
        }
    }

    #[test]
    fn load_state_reports_name_delta() {
        let mut model = tiny(0);
        let mut state = model.params().clone();
        state.remove("t.fc.bias");
        state.insert("other.weight".into(), Tensor::zeros([1]));
        match model.load_state(&state).unwrap_err() {
            Error::NameDelta {
                missing,
                unexpected,
            } => {
                assert_eq!(missing, vec!["t.fc.bias".to_string()]);
                assert_eq!(unexpected, vec!["other.weight".to_string()]);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
