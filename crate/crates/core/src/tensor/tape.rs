use std::collections::HashMap;

use super::kernels::{self, ChannelLayout, ConvDims, ConvGeometry, LEAKY_SLOPE};
use super::Tensor;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand of shape `[C]` applied along axis 1 of the left operand.
    Channel,
}

enum Op<S> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, S),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvDims, ConvGeometry),
    ConvTranspose2d(Var, Var, ConvDims, ConvGeometry),
    LeakyRelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    MaxPool2d(Var, Vec<usize>),
    SoftmaxCrossEntropy(Var, Vec<usize>, Vec<S>),
    L1(Var, Var),
    Mse(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SplitCells(Var, usize),
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Append-only record of one forward computation.
///
/// Ops validate their inputs and append a node; the node's position is its
/// id, so inputs always precede the ops that consume them. A tape supports
/// exactly one [`backward`](Tape::backward) call, after which its recorded
/// values are released.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bindings: HashMap<String, Var>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        assert!(!self.consumed, "recording on a tape consumed by backward");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf value; gradients are reported for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter. Binding the same name twice returns the same
    /// handle, so a network applied several times accumulates one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<S>, trainable: bool) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.bindings.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert!(!self.consumed, "tape already consumed by backward");
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sa.len() >= 2 && sa[1] == sb[0] {
            Ok(Broadcast::Channel)
        } else {
            shape_err(op, format!("cannot combine {sa:?} with {sb:?}"))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: fn(Var, Var, Broadcast) -> Op<S>,
    ) -> Result<Var> {
        let mode = self.broadcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<S> = match mode {
            Broadcast::Same => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::Channel => {
                let l = ChannelLayout::of(ta.shape());
                let mut out = Vec::with_capacity(ta.data().len());
                for (i, block) in ta.data().chunks(l.inner).enumerate() {
                    let y = tb.data()[i % l.c];
                    out.extend(block.iter().map(|&x| f(x, y)));
                }
                out
            }
        };
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b, mode), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg))
    }

    /// Cross-correlation of `[N,Ci,H,W]` with a `[Co,Ci,kh,kw]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(stride, padding);
        let d = kernels::conv2d_dims(self.shape(x), self.shape(kernel), &geom)?;
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &d, &geom);
        let value = Tensor::from_parts(vec![d.n, d.cout, d.oh, d.ow], out);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Op::Conv2d(x, kernel, d, geom), value, rg))
    }

    /// Adjoint of [`conv2d`](Self::conv2d); the kernel is `[Ci,Co,kh,kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let d = kernels::conv_transpose2d_dims(self.shape(x), self.shape(kernel), &geom)?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            &d,
            &geom,
        );
        let value = Tensor::from_parts(vec![d.n, d.cout, d.oh, d.ow], out);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Op::ConvTranspose2d(x, kernel, d, geom), value, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let slope = S::from_f64_lossy(LEAKY_SLOPE);
        self.unary(
            a,
            |v| if v > S::zero() { v } else { v * slope },
            Op::LeakyRelu(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(S::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(a))
    }

    /// Mean over every element, producing a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / S::from_usize(t.numel()).unwrap());
        let rg = self.rg(a);
        self.push(Op::Mean(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat", "nothing to concatenate");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return arg_err(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            );
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(
                    "concat",
                    format!("cannot join {base:?} with {s:?} on axis {axis}"),
                );
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::Concat(parts.to_vec(), axis),
            Tensor::from_parts(shape, data),
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[N,C,H,W]`.
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err("max_pool2d", format!("expected [N,C,H>=2,W>=2], got {s:?}"));
        }
        let (out, arg) = kernels::max_pool2d_forward(self.value(a).data(), &s);
        let value = Tensor::from_parts(vec![s[0], s[1], s[2] / 2, s[3] / 2], out);
        let rg = self.rg(a);
        Ok(self.push(Op::MaxPool2d(a, arg), value, rg))
    }

    /// Mean cross-entropy of `[N,C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} do not match {} labels", labels.len()),
            );
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return arg_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            );
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = S::zero();
        for (row, &label) in x.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(total / S::from_usize(n).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
            value,
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `mean(|a - b|)`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total: S = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let value = Tensor::scalar(total / S::from_usize(ta.numel()).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::L1(a, b), value, rg))
    }

    /// `mean((a - b)^2)`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total: S = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / S::from_usize(ta.numel()).unwrap());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mse(a, b), value, rg))
    }

    fn norm_params(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<ChannelLayout> {
        let s = self.shape(x);
        if s.len() < 2 {
            return shape_err(op, format!("expected [N,C,...], got {s:?}"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [s[1]] {
                return shape_err(
                    op,
                    format!(
                        "affine parameter {:?} does not match {} channels",
                        self.shape(p),
                        s[1]
                    ),
                );
            }
        }
        Ok(ChannelLayout::of(s))
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        inv_std: &[S],
        l: &ChannelLayout,
    ) -> (Vec<S>, Vec<S>) {
        let (xs, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let c = (i / l.inner) % l.c;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(h * g[c] + b[c]);
        }
        (xhat, out)
    }

    /// Batch normalization with batch statistics (training mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments<S>)> {
        let l = self.norm_params("batch_norm", x, gamma, beta)?;
        if l.count() < 2 {
            return shape_err(
                "batch_norm",
                "batch statistics need at least two values per channel",
            );
        }
        let (mean, var) = kernels::channel_moments(self.value(x).data(), &l);
        let eps = S::from_f64_lossy(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std, &l);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            rg,
        );
        Ok((v, BatchMoments { mean, var }))
    }

    /// Normalization with fixed statistics (evaluation mode).
    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let l = self.norm_params("channel_norm", x, gamma, beta)?;
        if mean.len() != l.c || var.len() != l.c {
            return shape_err(
                "channel_norm",
                "running statistics do not match channel count",
            );
        }
        let eps = S::from_f64_lossy(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &inv_std, &l);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            rg,
        ))
    }

    /// Splits `[N,C,H,parts*w]` into `parts` column tiles stacked on the
    /// batch axis: `[N*parts, C, H, w]`, item `n*parts + p` is tile `p` of `n`.
    pub fn split_cells(&mut self, a: Var, parts: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || parts == 0 || s[3] % parts != 0 {
            return shape_err(
                "split_cells",
                format!("cannot split {s:?} into {parts} tiles"),
            );
        }
        let out = split_cells_forward(self.value(a).data(), &s, parts);
        let value = Tensor::from_parts(vec![s[0] * parts, s[1], s[2], s[3] / parts], out);
        let rg = self.rg(a);
        Ok(self.push(Op::SplitCells(a, parts), value, rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node visited is visited once, in strict reverse recording order.
    /// Leaves with `requires_grad` that the loss does not reach get zeros.
    /// The tape is consumed: a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(shape));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], contribution);
            }
        }

        let mut result = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                result.insert(Var(i), g);
            }
        }
        let names = std::mem::take(&mut self.bindings);
        self.nodes = Vec::new();
        self.consumed = true;
        Ok(Gradients {
            grads: result,
            names,
        })
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<S>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b, mode) => vec![(*a, g.clone()), (*b, reduce_to(g, *mode, val(*b), |x| x))],
            Op::Sub(a, b, mode) => {
                vec![(*a, g.clone()), (*b, reduce_to(g, *mode, val(*b), |x| -x))]
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (val(*a), val(*b));
                let (inner, c) = match mode {
                    Broadcast::Same => (1, usize::MAX),
                    Broadcast::Channel => {
                        let l = ChannelLayout::of(ta.shape());
                        (l.inner, l.c)
                    }
                };
                let pick = |idx: usize| (idx / inner) % c;
                let ga: Vec<S> = gd
                    .iter()
                    .enumerate()
                    .map(|(k, &gv)| gv * tb.data()[pick(k)])
                    .collect();
                let prod: Vec<S> = gd.iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                let gb = reduce_to(
                    &Tensor::from_parts(ta.shape().to_vec(), prod),
                    *mode,
                    tb,
                    |x| x,
                );
                vec![(*a, like(*a, ga)), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * *f))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut grads = Vec::new();
                if self.rg(*a) {
                    // ga = g · b^T
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        gd,
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        S::zero(),
                        &mut ga,
                        (k as isize, 1),
                    );
                    grads.push((*a, like(*a, ga)));
                }
                if self.rg(*b) {
                    // gb = a^T · g
                    let mut gb = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        ta.data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        S::zero(),
                        &mut gb,
                        (n as isize, 1),
                    );
                    grads.push((*b, like(*b, gb)));
                }
                grads
            }
            Op::Conv2d(x, k, d, geom) => {
                let need = (self.rg(*x), self.rg(*k));
                let (gx, gk) =
                    kernels::conv2d_backward(val(*x).data(), val(*k).data(), gd, d, geom, need);
                let gx = gx.map(|v| (*x, like(*x, v)));
                let gk = gk.map(|v| (*k, like(*k, v)));
                gx.into_iter().chain(gk).collect()
            }
            Op::ConvTranspose2d(x, k, d, geom) => {
                let need = (self.rg(*x), self.rg(*k));
                let (gx, gk) = kernels::conv_transpose2d_backward(
                    val(*x).data(),
                    val(*k).data(),
                    gd,
                    d,
                    geom,
                    need,
                );
                let gx = gx.map(|v| (*x, like(*x, v)));
                let gk = gk.map(|v| (*k, like(*k, v)));
                gx.into_iter().chain(gk).collect()
            }
            Op::LeakyRelu(a) => {
                let slope = S::from_f64_lossy(LEAKY_SLOPE);
                let data = val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| if x > S::zero() { gv } else { gv * slope })
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Relu(a) => {
                let data = val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Tanh(a) => {
                let data = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * (S::one() - y * y))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Sigmoid(a) => {
                let data = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (S::one() - y))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Mean(a) => {
                let n = S::from_usize(val(*a).numel()).unwrap();
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), gd[0] / n))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), gd[0]))],
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut pieces: Vec<Vec<S>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(val(*p).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (j, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        pieces[j].extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                parts
                    .iter()
                    .zip(pieces)
                    .map(|(p, data)| (*p, like(*p, data)))
                    .collect()
            }
            Op::MaxPool2d(a, arg) => {
                let mut data = vec![S::zero(); val(*a).numel()];
                for (&src, &gv) in arg.iter().zip(gd) {
                    data[src] += gv;
                }
                vec![(*a, like(*a, data))]
            }
            Op::SoftmaxCrossEntropy(a, labels, probs) => {
                let c = val(*a).shape()[1];
                let scale = gd[0] / S::from_usize(labels.len()).unwrap();
                let mut data: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    data[row * c + label] -= scale;
                }
                vec![(*a, like(*a, data))]
            }
            Op::L1(a, b) => {
                let n = S::from_usize(val(*a).numel()).unwrap();
                let s = gd[0] / n;
                let ga: Vec<S> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| {
                        if x > y {
                            s
                        } else if x < y {
                            -s
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Mse(a, b) => {
                let n = S::from_usize(val(*a).numel()).unwrap();
                let s = (S::one() + S::one()) * gd[0] / n;
                let ga: Vec<S> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| s * (x - y))
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let l = ChannelLayout::of(val(*x).shape());
                let gamma_v = val(*gamma).data();
                let (dgamma, dbeta) = affine_grads(gd, xhat, &l);
                let m = S::from_usize(l.count()).unwrap();
                // dx = inv_std/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = g*gamma
                let mut sum_d = vec![S::zero(); l.c];
                let mut sum_dx = vec![S::zero(); l.c];
                for (i, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                    let c = (i / l.inner) % l.c;
                    let dh = gv * gamma_v[c];
                    sum_d[c] += dh;
                    sum_dx[c] += dh * h;
                }
                let gx = gd
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(i, (&gv, &h))| {
                        let c = (i / l.inner) % l.c;
                        inv_std[c] / m * (m * gv * gamma_v[c] - sum_d[c] - h * sum_dx[c])
                    })
                    .collect();
                vec![
                    (*x, like(*x, gx)),
                    (*gamma, like(*gamma, dgamma)),
                    (*beta, like(*beta, dbeta)),
                ]
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let l = ChannelLayout::of(val(*x).shape());
                let gamma_v = val(*gamma).data();
                let (dgamma, dbeta) = affine_grads(gd, xhat, &l);
                let gx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let c = (i / l.inner) % l.c;
                        gv * gamma_v[c] * inv_std[c]
                    })
                    .collect();
                vec![
                    (*x, like(*x, gx)),
                    (*gamma, like(*gamma, dgamma)),
                    (*beta, like(*beta, dbeta)),
                ]
            }
            Op::SplitCells(a, parts) => {
                let data = split_cells_backward(gd, val(*a).shape(), *parts);
                vec![(*a, like(*a, data))]
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

/// Reduces an upstream gradient to the shape of a (possibly broadcast) operand.
fn reduce_to<S: Scalar>(
    g: &Tensor<S>,
    mode: Broadcast,
    target: &Tensor<S>,
    f: impl Fn(S) -> S,
) -> Tensor<S> {
    match mode {
        Broadcast::Same => g.map(f),
        Broadcast::Channel => {
            let l = ChannelLayout::of(g.shape());
            let mut acc = vec![S::zero(); l.c];
            for (i, block) in g.data().chunks(l.inner).enumerate() {
                acc[i % l.c] += block.iter().fold(S::zero(), |s, &v| s + v);
            }
            Tensor::from_parts(target.shape().to_vec(), acc.into_iter().map(f).collect())
        }
    }
}

fn affine_grads<S: Scalar>(g: &[S], xhat: &[S], l: &ChannelLayout) -> (Vec<S>, Vec<S>) {
    let mut dgamma = vec![S::zero(); l.c];
    let mut dbeta = vec![S::zero(); l.c];
    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
        let c = (i / l.inner) % l.c;
        dgamma[c] += gv * h;
        dbeta[c] += gv;
    }
    (dgamma, dbeta)
}

fn split_cells_forward<S: Scalar>(x: &[S], s: &[usize], parts: usize) -> Vec<S> {
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cw = w / parts;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for p in 0..parts {
            for ch in 0..c {
                for y in 0..h {
                    let start = ((b * c + ch) * h + y) * w + p * cw;
                    out.extend_from_slice(&x[start..start + cw]);
                }
            }
        }
    }
    out
}

fn split_cells_backward<S: Scalar>(g: &[S], s: &[usize], parts: usize) -> Vec<S> {
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cw = w / parts;
    let mut out = vec![S::zero(); g.len()];
    let mut offset = 0;
    for b in 0..n {
        for p in 0..parts {
            for ch in 0..c {
                for y in 0..h {
                    let start = ((b * c + ch) * h + y) * w + p * cw;
                    out[start..start + cw].copy_from_slice(&g[offset..offset + cw]);
                    offset += cw;
                }
            }
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`] for every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: HashMap<Var, Tensor<S>>,
    names: HashMap<String, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(&v)
    }

    /// Gradient of a parameter bound with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.get(name).and_then(|v| self.grads.get(v))
    }

    /// Names of bound parameters that received a gradient slot.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .filter(|(_, v)| self.grads.contains_key(v))
            .map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones([1, 1, 3, 3]));
    }

    #[test]
    fn conv_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 10.0);
    }

    #[test]
    fn conv_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 28, 28]));
        let k = tape.constant(Tensor::zeros([8, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 14, 14]);
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        let k = tape.constant(Tensor::zeros([3, 1, 3, 3]));
        let err = tape.conv2d(x, k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let k = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 0, 0),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn transposed_conv_broadcasts_single_value() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 5.0));
        let k = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape
            .conv_transpose2d(x, k, ConvGeometry::new(1, 0))
            .unwrap();
        assert_eq!(tape.value(y), &Tensor::full([1, 1, 2, 2], 5.0));
    }

    #[test]
    fn transposed_conv_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 8, 14, 14]));
        let k = tape.constant(Tensor::zeros([8, 1, 4, 4]));
        let y = tape
            .conv_transpose2d(x, k, ConvGeometry::new(2, 1))
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 28, 28]);
    }

    #[test]
    fn transposed_conv_rejects_non_positive_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let k = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(tape
            .conv_transpose2d(x, k, ConvGeometry::new(1, 1))
            .is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn mse_gradient_of_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let zero = tape.constant(Tensor::scalar(0.0));
        let loss = tape.mse_loss(x, zero).unwrap();
        assert_eq!(tape.value(loss).item(), 9.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let unused = tape.leaf(Tensor::ones([3]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), &Tensor::zeros([3]));
    }

    #[test]
    fn shared_param_binding_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = Tensor::scalar(2.0);
        let a = tape.param("w", &w, true);
        let b = tape.param("w", &w, true);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.param("w").unwrap().item(), 4.0);
    }

    #[test]
    fn channel_broadcast_add() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 1, 2]), true);
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(&tape.value(y).data()[..6], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0, 4.0, 4.0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2, 3]), true);
        let b = tape.leaf(Tensor::zeros([2]), true);
        assert!(tape.add(x, b).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::zeros([2, 12]), true);
        let ce = tape.softmax_cross_entropy(uniform, &[3, 11]).unwrap();
        assert!((tape.value(ce).item() - 12f64.ln()).abs() < 1e-12);
        assert!(tape.softmax_cross_entropy(uniform, &[12, 0]).is_err());
        let mut data = vec![0.0; 12];
        data[4] = 1000.0;
        let confident = tape.constant(t(&[1, 12], &data));
        let ce = tape.softmax_cross_entropy(confident, &[4]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-9);
    }

    #[test]
    fn split_cells_layout() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let x = tape.leaf(t(&[1, 1, 2, 4], &data), true);
        let y = tape.split_cells(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 2, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]
        );
    }

    #[test]
    fn concat_on_channel_and_width() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 2, 1, 2]);
        let w = tape.concat(&[a, b], 3).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
