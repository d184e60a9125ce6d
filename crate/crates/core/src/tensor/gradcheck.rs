//! Finite-difference verification of every differentiable op.
//!
//! Checks run entirely in `f64`: the analytic gradient comes from the tape,
//! the numeric one from central differences of the same forward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvGeometry, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step used by [`grad_check`].
pub const GRADCHECK_EPS: f64 = 1e-6;

/// An op from the tensor catalog, with any hyperparameters it needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CatalogOp {
    Add,
    Sub,
    Mul,
    /// `[C]` bias broadcast over axis 1.
    AddBias,
    ScalarMul(f64),
    MatMul,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d(ConvGeometry),
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Mean,
    Sum,
    Reshape,
    Concat {
        axis: usize,
    },
    MaxPool2d,
    SoftmaxCrossEntropy,
    L1Loss,
    MseLoss,
    BatchNorm,
    ChannelNorm,
    SplitCells {
        parts: usize,
    },
}

impl CatalogOp {
    pub fn name(&self) -> &'static str {
        match self {
            CatalogOp::Add => "add",
            CatalogOp::Sub => "sub",
            CatalogOp::Mul => "mul",
            CatalogOp::AddBias => "add_bias",
            CatalogOp::ScalarMul(_) => "scalar_mul",
            CatalogOp::MatMul => "matmul",
            CatalogOp::Conv2d { .. } => "conv2d",
            CatalogOp::ConvTranspose2d(_) => "conv_transpose2d",
            CatalogOp::LeakyRelu => "leaky_relu",
            CatalogOp::Relu => "relu",
            CatalogOp::Tanh => "tanh",
            CatalogOp::Sigmoid => "sigmoid",
            CatalogOp::Mean => "batch_mean",
            CatalogOp::Sum => "sum",
            CatalogOp::Reshape => "reshape",
            CatalogOp::Concat { .. } => "concat",
            CatalogOp::MaxPool2d => "max_pool2d",
            CatalogOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            CatalogOp::L1Loss => "l1_loss",
            CatalogOp::MseLoss => "mse_loss",
            CatalogOp::BatchNorm => "batch_norm",
            CatalogOp::ChannelNorm => "channel_norm",
            CatalogOp::SplitCells { .. } => "split_cells",
        }
    }

    /// Every op with a representative small input configuration.
    pub fn catalog() -> Vec<(CatalogOp, Vec<Vec<usize>>)> {
        vec![
            (CatalogOp::Add, vec![vec![2, 3, 4], vec![2, 3, 4]]),
            (CatalogOp::Sub, vec![vec![2, 3, 4], vec![2, 3, 4]]),
            (CatalogOp::Mul, vec![vec![2, 3, 4], vec![2, 3, 4]]),
            (CatalogOp::AddBias, vec![vec![2, 3, 2, 2], vec![3]]),
            (CatalogOp::ScalarMul(-1.7), vec![vec![3, 5]]),
            (CatalogOp::MatMul, vec![vec![3, 4], vec![4, 2]]),
            (
                CatalogOp::Conv2d {
                    stride: 2,
                    padding: 1,
                },
                vec![vec![1, 2, 6, 6], vec![3, 2, 3, 3]],
            ),
            (
                CatalogOp::Conv2d {
                    stride: 1,
                    padding: 0,
                },
                vec![vec![2, 1, 5, 4], vec![2, 1, 2, 3]],
            ),
            (
                CatalogOp::ConvTranspose2d(ConvGeometry::new(2, 1).with_output_padding(1, 0)),
                vec![vec![1, 3, 3, 4], vec![3, 2, 4, 4]],
            ),
            (CatalogOp::LeakyRelu, vec![vec![4, 5]]),
            (CatalogOp::Relu, vec![vec![4, 5]]),
            (CatalogOp::Tanh, vec![vec![4]]),
            (CatalogOp::Sigmoid, vec![vec![4, 3]]),
            (CatalogOp::Mean, vec![vec![3, 2, 2]]),
            (CatalogOp::Sum, vec![vec![3, 2, 2]]),
            (CatalogOp::Reshape, vec![vec![2, 6]]),
            (
                CatalogOp::Concat { axis: 1 },
                vec![vec![2, 1, 2, 2], vec![2, 3, 2, 2]],
            ),
            (
                CatalogOp::Concat { axis: 3 },
                vec![vec![1, 1, 2, 3], vec![1, 1, 2, 2]],
            ),
            (CatalogOp::MaxPool2d, vec![vec![2, 2, 4, 6]]),
            (CatalogOp::SoftmaxCrossEntropy, vec![vec![5, 12]]),
            (CatalogOp::L1Loss, vec![vec![3, 4], vec![3, 4]]),
            (CatalogOp::MseLoss, vec![vec![3, 4], vec![3, 4]]),
            (
                CatalogOp::BatchNorm,
                vec![vec![4, 3, 2, 2], vec![3], vec![3]],
            ),
            (
                CatalogOp::ChannelNorm,
                vec![vec![2, 3, 2, 2], vec![3], vec![3]],
            ),
            (CatalogOp::SplitCells { parts: 4 }, vec![vec![2, 1, 3, 8]]),
        ]
    }

    fn apply(&self, tape: &mut Tape<f64>, x: &[Var], labels: &[usize]) -> Result<Var> {
        match *self {
            CatalogOp::Add | CatalogOp::AddBias => tape.add(x[0], x[1]),
            CatalogOp::Sub => tape.sub(x[0], x[1]),
            CatalogOp::Mul => tape.mul(x[0], x[1]),
            CatalogOp::ScalarMul(f) => Ok(tape.scale(x[0], f)),
            CatalogOp::MatMul => tape.matmul(x[0], x[1]),
            CatalogOp::Conv2d { stride, padding } => tape.conv2d(x[0], x[1], stride, padding),
            CatalogOp::ConvTranspose2d(geom) => tape.conv_transpose2d(x[0], x[1], geom),
            CatalogOp::LeakyRelu => Ok(tape.leaky_relu(x[0])),
            CatalogOp::Relu => Ok(tape.relu(x[0])),
            CatalogOp::Tanh => Ok(tape.tanh(x[0])),
            CatalogOp::Sigmoid => Ok(tape.sigmoid(x[0])),
            CatalogOp::Mean => Ok(tape.mean(x[0])),
            CatalogOp::Sum => Ok(tape.sum(x[0])),
            CatalogOp::Reshape => {
                let n = tape.value(x[0]).numel();
                tape.reshape(x[0], &[n])
            }
            CatalogOp::Concat { axis } => tape.concat(x, axis),
            CatalogOp::MaxPool2d => tape.max_pool2d(x[0]),
            CatalogOp::SoftmaxCrossEntropy => tape.softmax_cross_entropy(x[0], labels),
            CatalogOp::L1Loss => tape.l1_loss(x[0], x[1]),
            CatalogOp::MseLoss => tape.mse_loss(x[0], x[1]),
            CatalogOp::BatchNorm => Ok(tape.batch_norm(x[0], x[1], x[2], 1e-5)?.0),
            CatalogOp::ChannelNorm => {
                let c = tape.shape(x[1])[0];
                let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64 - 0.05).collect();
                let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
                tape.channel_norm(x[0], x[1], x[2], &mean, &var, 1e-5)
            }
            CatalogOp::SplitCells { parts } => tape.split_cells(x[0], parts),
        }
    }
}

/// Forward value of `sum(op(inputs) * projection)`.
fn projected(
    op: &CatalogOp,
    inputs: &[Tensor<f64>],
    labels: &[usize],
    projection: Option<&Tensor<f64>>,
) -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op.apply(&mut tape, &vars, labels)?;
    let proj = match projection {
        Some(p) => p.clone(),
        None => {
            // Deterministic in the output shape so forward re-evaluations agree.
            let n = tape.value(out).numel();
            let data = (0..n)
                .map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() * 2.0 - 1.0)
                .collect();
            Tensor::from_parts(tape.shape(out).to_vec(), data)
        }
    };
    let w = tape.constant(proj.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, proj))
}

/// Maximum relative disagreement between analytic and central-difference
/// gradients, over every coordinate of every input.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`. Configuration
/// errors (bad shapes for the op) are reported as `f64::INFINITY`.
pub fn grad_check(op: CatalogOp, input_shapes: &[Vec<usize>], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = Tensor::uniform(s.clone(), -1.0, 1.0, &mut rng);
            // Keep normalization scales away from zero.
            if matches!(op, CatalogOp::BatchNorm | CatalogOp::ChannelNorm) && i == 1 {
                t.map(|v| v + 1.5)
            } else {
                t
            }
        })
        .collect();
    let labels: Vec<usize> = match (op, input_shapes.first()) {
        (CatalogOp::SoftmaxCrossEntropy, Some(s)) if s.len() == 2 => {
            (0..s[0]).map(|_| rng.gen_range(0..s[1])).collect()
        }
        _ => Vec::new(),
    };
    check(&op, &inputs, &labels).unwrap_or(f64::INFINITY)
}

fn check(op: &CatalogOp, inputs: &[Tensor<f64>], labels: &[usize]) -> Result<f64> {
    let (mut tape, vars, loss, proj) = projected(op, inputs, labels, None)?;
    let grads = tape.backward(loss)?;
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss, _) = projected(op, perturbed, labels, Some(&proj))?;
        Ok(tape.value(loss).item())
    };
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("input gradient");
        for j in 0..inputs[i].numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += GRADCHECK_EPS;
            let plus = eval(&shifted)?;
            shifted[i].data_mut()[j] -= 2.0 * GRADCHECK_EPS;
            let minus = eval(&shifted)?;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_vector() {
        assert!(grad_check(CatalogOp::Tanh, &[vec![4]], 0) < 1e-4);
    }

    #[test]
    fn matmul_small() {
        assert!(grad_check(CatalogOp::MatMul, &[vec![3, 4], vec![4, 2]], 0) < 1e-4);
    }

    #[test]
    fn strided_padded_conv() {
        let err = grad_check(
            CatalogOp::Conv2d {
                stride: 2,
                padding: 1,
            },
            &[vec![1, 2, 6, 6], vec![3, 2, 3, 3]],
            0,
        );
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn misconfigured_op_reports_infinity() {
        assert_eq!(
            grad_check(CatalogOp::MatMul, &[vec![3, 4], vec![3, 2]], 0),
            f64::INFINITY
        );
    }

    #[test]
    fn whole_catalog_single_seed() {
        for (op, shapes) in CatalogOp::catalog() {
            let err = grad_check(op, &shapes, 11);
            assert!(err < 1e-3, "{} error {err}", op.name());
        }
    }
}
