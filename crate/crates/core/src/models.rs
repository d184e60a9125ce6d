//! The three fixed network topologies.
//!
//! Generator (hourglass, no skip connections):
//!
//! | stage      | layers                                                        | output          |
//! |------------|---------------------------------------------------------------|-----------------|
//! | encoder    | 3 x (conv k4 s2 p1, batch norm, leaky ReLU), 1→16→32→64; flatten | `[N, 4608]`     |
//! | bottleneck | linear 4608→512→512→2688, each + leaky ReLU; reshape           | `[N, 64, 3, 14]` |
//! | decoder    | 2 x (transposed conv, batch norm, leaky ReLU), 64→32→16; transposed conv 16→1, tanh | `[N, 1, 28, 112]` |
//!
//! Transposed-convolution geometry of the decoder (kernel 4 everywhere):
//!
//! | layer | stride | padding | output padding (rows, cols) | rows    | cols     |
//! |-------|--------|---------|-----------------------------|---------|----------|
//! | dec1  | 2      | 1       | (1, 0)                      | 3 → 7   | 14 → 28  |
//! | dec2  | 2      | 1       | (0, 0)                      | 7 → 14  | 28 → 56  |
//! | dec3  | 2      | 1       | (0, 0)                      | 14 → 28 | 56 → 112 |
//!
//! The only path from input to output runs through the bottleneck. Its first
//! linear layer also changes the canvas aspect from 24 to 14 columns.
//!
//! Convolutions followed by batch norm carry no bias.

use crate::error::Result;
use crate::nn::{Activation, LayerSpec, Mode, ModelGraph, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

pub const CELL: usize = 28;
pub const EXPR_CELLS: usize = 7;
pub const ANSWER_CELLS: usize = 4;
pub const EXPR_WIDTH: usize = CELL * EXPR_CELLS;
pub const ANSWER_WIDTH: usize = CELL * ANSWER_CELLS;
pub const NUM_CLASSES: usize = 12;

/// Classifier stage whose output feeds the perceptual loss.
pub const FEATURE_STAGE: &str = "block2";

const LEAKY: LayerSpec = LayerSpec::Activation(Activation::LeakyRelu);
const RELU: LayerSpec = LayerSpec::Activation(Activation::Relu);

pub fn build_generator<S: Scalar>(seed: u64) -> Result<ModelGraph<S>> {
    let s2 = |op_rows, op_cols| ConvGeometry::new(2, 1).with_output_padding(op_rows, op_cols);
    let mut encoder = Vec::new();
    for (i, (cin, cout)) in [(1, 16), (16, 32), (32, 64)].into_iter().enumerate() {
        let n = i + 1;
        encoder.push(LayerSpec::conv(
            &format!("gen.enc{n}.conv"),
            cin,
            cout,
            4,
            2,
            1,
            false,
        ));
        encoder.push(LayerSpec::batch_norm(&format!("gen.enc{n}.bn"), cout));
        encoder.push(LEAKY);
    }
    encoder.push(LayerSpec::Flatten);
    let bottleneck = vec![
        LayerSpec::linear("gen.fc1", 64 * 3 * 24, 512),
        LEAKY,
        LayerSpec::linear("gen.fc2", 512, 512),
        LEAKY,
        LayerSpec::linear("gen.fc3", 512, 64 * 3 * 14),
        LEAKY,
        LayerSpec::Reshape(vec![64, 3, 14]),
    ];
    let decoder = vec![
        LayerSpec::conv_transpose("gen.dec1.deconv", 64, 32, 4, s2(1, 0), false),
        LayerSpec::batch_norm("gen.dec1.bn", 32),
        LEAKY,
        LayerSpec::conv_transpose("gen.dec2.deconv", 32, 16, 4, s2(0, 0), false),
        LayerSpec::batch_norm("gen.dec2.bn", 16),
        LEAKY,
        LayerSpec::conv_transpose("gen.dec3.deconv", 16, 1, 4, s2(0, 0), true),
        LayerSpec::Activation(Activation::Tanh),
    ];
    ModelGraph::new(
        ModelKind::Generator,
        vec![1, CELL, EXPR_WIDTH],
        vec![
            ("encoder".into(), encoder),
            ("bottleneck".into(), bottleneck),
            ("decoder".into(), decoder),
        ],
        seed,
    )
}

/// Patch discriminator over answer canvases. With `conditional`, the
/// expression canvas is placed left of the answer and judged jointly.
pub fn build_discriminator<S: Scalar>(seed: u64, conditional: bool) -> Result<ModelGraph<S>> {
    let width = if conditional {
        EXPR_WIDTH + ANSWER_WIDTH
    } else {
        ANSWER_WIDTH
    };
    let body = vec![
        LayerSpec::conv("disc.conv1", 1, 16, 4, 2, 1, true),
        LEAKY,
        LayerSpec::conv("disc.conv2", 16, 32, 4, 2, 1, true),
        LEAKY,
        LayerSpec::conv("disc.conv3", 32, 64, 4, 2, 1, true),
        LEAKY,
        LayerSpec::conv("disc.conv4", 64, 1, 3, 1, 1, true),
    ];
    ModelGraph::new(
        ModelKind::Discriminator,
        vec![1, CELL, width],
        vec![("body".into(), body)],
        seed,
    )
}

/// VGG-style cell classifier over 12 classes: digits, minus, blank.
pub fn build_classifier<S: Scalar>(seed: u64) -> Result<ModelGraph<S>> {
    let block1 = vec![
        LayerSpec::conv("cls.conv1a", 1, 16, 3, 1, 1, true),
        RELU,
        LayerSpec::conv("cls.conv1b", 16, 16, 3, 1, 1, true),
        RELU,
    ];
    let block2 = vec![
        LayerSpec::MaxPool,
        LayerSpec::conv("cls.conv2a", 16, 32, 3, 1, 1, true),
        RELU,
        LayerSpec::conv("cls.conv2b", 32, 32, 3, 1, 1, true),
        RELU,
    ];
    let head = vec![
        LayerSpec::MaxPool,
        LayerSpec::Flatten,
        LayerSpec::linear("cls.fc1", 32 * 7 * 7, 128),
        RELU,
        LayerSpec::linear("cls.fc2", 128, NUM_CLASSES),
    ];
    ModelGraph::new(
        ModelKind::Classifier,
        vec![1, CELL, CELL],
        vec![
            ("block1".into(), block1),
            (FEATURE_STAGE.into(), block2),
            ("head".into(), head),
        ],
        seed,
    )
}

/// Builds the topology for `kind` with default options.
pub fn build<S: Scalar>(kind: ModelKind, seed: u64) -> Result<ModelGraph<S>> {
    match kind {
        ModelKind::Generator => build_generator(seed),
        ModelKind::Discriminator => build_discriminator(seed, false),
        ModelKind::Classifier => build_classifier(seed),
    }
}

/// Stage-level access to the generator, used to probe the bottleneck.
pub trait HourglassExt<S: Scalar> {
    /// Encoder + bottleneck: expression canvas to the `[N,64,3,14]` code.
    fn encode(&self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var>;
    /// Decoder only: bottleneck code to answer canvas.
    fn decode(&self, tape: &mut Tape<S>, code: Var, mode: Mode) -> Result<Var>;
}

impl<S: Scalar> HourglassExt<S> for ModelGraph<S> {
    fn encode(&self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var> {
        let end = self.stage_index("decoder").expect("generator topology");
        Ok(self.run_stages(tape, x, mode, false, 0, end)?.0)
    }

    fn decode(&self, tape: &mut Tape<S>, code: Var, mode: Mode) -> Result<Var> {
        let start = self.stage_index("decoder").expect("generator topology");
        Ok(self
            .run_stages(tape, code, mode, false, start, self.stage_count())?
            .0)
    }
}

/// Classifier features at the perceptual tap (pre-pool, `[N,32,14,14]`).
pub fn classifier_features<S: Scalar>(
    classifier: &ModelGraph<S>,
    tape: &mut Tape<S>,
    cells: Var,
) -> Result<Var> {
    let end = classifier
        .stage_index(FEATURE_STAGE)
        .expect("classifier topology")
        + 1;
    Ok(classifier
        .run_stages(tape, cells, Mode::Eval, false, 0, end)?
        .0)
}

/// Receptive field (rows, cols) of one output unit of a plain conv stack.
pub fn receptive_field<S: Scalar>(model: &ModelGraph<S>) -> usize {
    let mut field = 1;
    let mut jump = 1;
    for layer in model.layers() {
        if let LayerSpec::Conv { kernel, stride, .. } = layer {
            field += (kernel - 1) * jump;
            jump *= stride;
        }
    }
    field
}

/// Maps a generator output batch to the `[0, 1]` pixel range.
pub fn to_unit_range<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64_lossy(0.5);
    t.map(|v| ((v + S::one()) * half).max(S::zero()).min(S::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::named_stream;

    #[test]
    fn generator_shapes() {
        let g = build_generator::<f32>(0).unwrap();
        let out = g.predict(&Tensor::zeros([1, 1, 28, 196])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 28, 112]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 1, 28, 196]));
        let code = g.encode(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.shape(code), &[2, 64, 3, 14]);
    }

    #[test]
    fn generator_output_strictly_inside_unit_interval() {
        let g = build_generator::<f32>(1).unwrap();
        let mut rng = named_stream(0, "x");
        let out = g
            .predict(&Tensor::uniform([2, 1, 28, 196], -1.0, 1.0, &mut rng))
            .unwrap();
        assert!(out.all_finite());
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn decoder_sees_only_the_code() {
        let g = build_generator::<f32>(2).unwrap();
        let mut rng = named_stream(0, "probe");
        let code = Tensor::uniform([1, 64, 3, 14], -1.0, 1.0, &mut rng);
        let decode_with_input = |img: Tensor<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(img);
            // The encoder runs (and could leak activations) before decoding a fixed code.
            let _ = g.encode(&mut tape, x, Mode::Eval).unwrap();
            let c = tape.constant(code.clone());
            let y = g.decode(&mut tape, c, Mode::Eval).unwrap();
            tape.value(y).clone()
        };
        let a = decode_with_input(Tensor::zeros([1, 1, 28, 196]));
        let b = decode_with_input(Tensor::uniform([1, 1, 28, 196], -1.0, 1.0, &mut rng));
        assert_eq!(a, b);
    }

    #[test]
    fn discriminator_patch_map() {
        let d = build_discriminator::<f32>(0, false).unwrap();
        let out = d.predict(&Tensor::zeros([3, 1, 28, 112])).unwrap();
        assert_eq!(out.shape(), &[3, 1, 3, 14]);
        assert!(receptive_field(&d) < 112);
        let dc = build_discriminator::<f32>(0, true).unwrap();
        assert_eq!(dc.input_shape(), &[1, 28, 308]);
    }

    #[test]
    fn classifier_logits_and_tap() {
        let c = build_classifier::<f32>(0).unwrap();
        let out = c.predict(&Tensor::zeros([5, 1, 28, 28])).unwrap();
        assert_eq!(out.shape(), &[5, 12]);
        assert!(out.all_finite());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 1, 28, 28]));
        let f = classifier_features(&c, &mut tape, x).unwrap();
        assert_eq!(tape.shape(f), &[2, 32, 14, 14]);
    }

    #[test]
    fn parameter_names_are_prefixed_by_model() {
        for (kind, model) in [
            (
                ModelKind::Generator,
                build::<f32>(ModelKind::Generator, 0).unwrap(),
            ),
            (
                ModelKind::Discriminator,
                build::<f32>(ModelKind::Discriminator, 0).unwrap(),
            ),
            (
                ModelKind::Classifier,
                build::<f32>(ModelKind::Classifier, 0).unwrap(),
            ),
        ] {
            assert!(model
                .params()
                .keys()
                .all(|k| k.starts_with(&format!("{}.", kind.prefix()))));
            assert!(model.param_count() > 0);
        }
    }
}
