//! Raw numeric kernels operating on row-major slices.
//!
//! Convolutions are lowered to `im2col` + GEMM per batch item. All loops
//! run in a fixed order, so results are bit-identical for identical inputs.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

/// Negative-side slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Hyperparameters of a 2-D (transposed) convolution.
///
/// `output_padding` only applies to transposed convolutions, where it adds
/// extra rows/columns on the bottom/right edge; it must be smaller than
/// the stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: (0, 0),
        }
    }

    pub fn with_output_padding(mut self, rows: usize, cols: usize) -> Self {
        self.output_padding = (rows, cols);
        self
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 {
            return arg_err(op, "stride must be positive");
        }
        if self.output_padding.0 >= self.stride || self.output_padding.1 >= self.stride {
            return arg_err(
                op,
                format!(
                    "output padding {:?} must be smaller than stride {}",
                    self.output_padding, self.stride
                ),
            );
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn conv_out(&self, size: usize, kernel: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if kernel > padded {
            return shape_err(
                "conv2d",
                format!("kernel {kernel} larger than padded input {padded}"),
            );
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transpose_out(&self, size: usize, kernel: usize, extra: usize) -> Result<usize> {
        let grown = (size - 1) * self.stride + kernel + extra;
        if grown <= 2 * self.padding {
            return shape_err(
                "conv_transpose2d",
                format!(
                    "computed output size {} is not positive",
                    grown as isize - 2 * self.padding as isize
                ),
            );
        }
        Ok(grown - 2 * self.padding)
    }
}

/// Sizes describing one convolution "image <-> column grid" correspondence.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Source coordinate of grid cell `g` shifted by kernel offset `d`.
    #[inline]
    fn source(&self, g: usize, d: usize, limit: usize) -> Option<usize> {
        let pos = (g * self.stride + d) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Half-open range of grid cells whose shifted source lies in `0..limit`.
    fn valid(&self, d: usize, grid: usize, limit: usize) -> (usize, usize) {
        let lo = self
            .padding
            .saturating_sub(d)
            .div_ceil(self.stride)
            .min(grid);
        // largest g with g*stride + d - padding < limit
        let bound = limit + self.padding;
        let hi = if bound > d {
            ((bound - d - 1) / self.stride + 1).min(grid)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, gh*gw]` column matrix.
pub(crate) fn im2col<S: Scalar>(image: &[S], p: &Patch, cols: &mut [S]) {
    let ncols = p.cols();
    debug_assert_eq!(cols.len(), p.rows() * ncols);
    for c in 0..p.channels {
        let plane = &image[c * p.height * p.width..(c + 1) * p.height * p.width];
        for dy in 0..p.kh {
            for dx in 0..p.kw {
                let row = (c * p.kh + dy) * p.kw + dx;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = p.valid(dx, p.grid_w, p.width);
                for gy in 0..p.grid_h {
                    let dst = &mut out[gy * p.grid_w..(gy + 1) * p.grid_w];
                    let Some(y) = p.source(gy, dy, p.height) else {
                        dst.fill(S::zero());
                        continue;
                    };
                    let src = &plane[y * p.width..(y + 1) * p.width];
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    if lo < hi {
                        let x0 = lo * p.stride + dx - p.padding;
                        if p.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (k, v) in dst[lo..hi].iter_mut().enumerate() {
                                *v = src[x0 + k * p.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` image.
pub(crate) fn col2im<S: Scalar>(cols: &[S], p: &Patch, image: &mut [S]) {
    let ncols = p.cols();
    for c in 0..p.channels {
        let plane = &mut image[c * p.height * p.width..(c + 1) * p.height * p.width];
        for dy in 0..p.kh {
            for dx in 0..p.kw {
                let row = (c * p.kh + dy) * p.kw + dx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = p.valid(dx, p.grid_w, p.width);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * p.stride + dx - p.padding;
                for gy in 0..p.grid_h {
                    let Some(y) = p.source(gy, dy, p.height) else {
                        continue;
                    };
                    let dst = &mut plane[y * p.width..(y + 1) * p.width];
                    let g = &src[gy * p.grid_w + lo..gy * p.grid_w + hi];
                    if p.stride == 1 {
                        for (d, &v) in dst[x0..x0 + hi - lo].iter_mut().zip(g) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in g.iter().enumerate() {
                            dst[x0 + k * p.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a conv2d call, resolved and validated.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_dims(x: &[usize], k: &[usize], geom: &ConvGeometry) -> Result<ConvDims> {
    geom.validate("conv2d")?;
    if x.len() != 4 || k.len() != 4 {
        return shape_err(
            "conv2d",
            format!("expected input [N,C,H,W] and kernel [Co,Ci,kh,kw], got {x:?} and {k:?}"),
        );
    }
    if x[1] != k[1] {
        return shape_err(
            "conv2d",
            format!("input has {} channels but kernel expects {}", x[1], k[1]),
        );
    }
    let oh = geom.conv_out(x[2], k[2])?;
    let ow = geom.conv_out(x[3], k[3])?;
    Ok(ConvDims {
        n: x[0],
        cin: x[1],
        cout: k[0],
        h: x[2],
        w: x[3],
        kh: k[2],
        kw: k[3],
        oh,
        ow,
    })
}

fn conv_patch(d: &ConvDims, geom: &ConvGeometry) -> Patch {
    Patch {
        channels: d.cin,
        height: d.h,
        width: d.w,
        kh: d.kh,
        kw: d.kw,
        grid_h: d.oh,
        grid_w: d.ow,
        stride: geom.stride,
        padding: geom.padding,
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    k: &[S],
    d: &ConvDims,
    geom: &ConvGeometry,
) -> Vec<S> {
    let p = conv_patch(d, geom);
    let (rows, ncols) = (p.rows(), p.cols());
    let mut cols = vec![S::zero(); rows * ncols];
    let mut out = vec![S::zero(); d.n * d.cout * ncols];
    let in_per = d.cin * d.h * d.w;
    for n in 0..d.n {
        im2col(&x[n * in_per..(n + 1) * in_per], &p, &mut cols);
        let dst = &mut out[n * d.cout * ncols..(n + 1) * d.cout * ncols];
        S::gemm(
            d.cout,
            rows,
            ncols,
            S::one(),
            k,
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            S::zero(),
            dst,
            (ncols as isize, 1),
        );
    }
    out
}

/// Returns `(d_input, d_kernel)` for an upstream gradient `gy` of shape
/// `[N,Co,oh,ow]`, computing only the sides flagged in `need`.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    gy: &[S],
    d: &ConvDims,
    geom: &ConvGeometry,
    need: (bool, bool),
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let p = conv_patch(d, geom);
    let (rows, ncols) = (p.rows(), p.cols());
    let in_per = d.cin * d.h * d.w;
    let mut cols = vec![S::zero(); if need.1 { rows * ncols } else { 0 }];
    let mut dcols = vec![S::zero(); if need.0 { rows * ncols } else { 0 }];
    let mut dx = need.0.then(|| vec![S::zero(); x.len()]);
    let mut dk = need.1.then(|| vec![S::zero(); k.len()]);
    for n in 0..d.n {
        let g = &gy[n * d.cout * ncols..(n + 1) * d.cout * ncols];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * in_per..(n + 1) * in_per], &p, &mut cols);
            // dk += g · cols^T
            S::gemm(
                d.cout,
                ncols,
                rows,
                S::one(),
                g,
                (ncols as isize, 1),
                &cols,
                (1, ncols as isize),
                S::one(),
                dk,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = k^T · g
            S::gemm(
                rows,
                d.cout,
                ncols,
                S::one(),
                k,
                (1, rows as isize),
                g,
                (ncols as isize, 1),
                S::zero(),
                &mut dcols,
                (ncols as isize, 1),
            );
            col2im(&dcols, &p, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    (dx, dk)
}

/// Transposed convolution dims; kernel layout is `[Cin, Cout, kh, kw]`.
pub(crate) fn conv_transpose2d_dims(
    x: &[usize],
    k: &[usize],
    geom: &ConvGeometry,
) -> Result<ConvDims> {
    geom.validate("conv_transpose2d")?;
    if x.len() != 4 || k.len() != 4 {
        return shape_err(
            "conv_transpose2d",
            format!("expected input [N,C,H,W] and kernel [Ci,Co,kh,kw], got {x:?} and {k:?}"),
        );
    }
    if x[1] != k[0] {
        return shape_err(
            "conv_transpose2d",
            format!("input has {} channels but kernel expects {}", x[1], k[0]),
        );
    }
    let oh = geom.transpose_out(x[2], k[2], geom.output_padding.0)?;
    let ow = geom.transpose_out(x[3], k[3], geom.output_padding.1)?;
    Ok(ConvDims {
        n: x[0],
        cin: x[1],
        cout: k[1],
        h: x[2],
        w: x[3],
        kh: k[2],
        kw: k[3],
        oh,
        ow,
    })
}

/// The transposed convolution scatters into the output image through the
/// same patch structure a forward convolution would gather from.
fn transpose_patch(d: &ConvDims, geom: &ConvGeometry) -> Patch {
    Patch {
        channels: d.cout,
        height: d.oh,
        width: d.ow,
        kh: d.kh,
        kw: d.kw,
        grid_h: d.h,
        grid_w: d.w,
        stride: geom.stride,
        padding: geom.padding,
    }
}

pub(crate) fn conv_transpose2d_forward<S: Scalar>(
    x: &[S],
    k: &[S],
    d: &ConvDims,
    geom: &ConvGeometry,
) -> Vec<S> {
    let p = transpose_patch(d, geom);
    let (rows, ncols) = (p.rows(), p.cols());
    let mut cols = vec![S::zero(); rows * ncols];
    let out_per = d.cout * d.oh * d.ow;
    let mut out = vec![S::zero(); d.n * out_per];
    for n in 0..d.n {
        let xs = &x[n * d.cin * ncols..(n + 1) * d.cin * ncols];
        // cols = k^T · x, with k viewed as [Cin, Cout*kh*kw]
        S::gemm(
            rows,
            d.cin,
            ncols,
            S::one(),
            k,
            (1, rows as isize),
            xs,
            (ncols as isize, 1),
            S::zero(),
            &mut cols,
            (ncols as isize, 1),
        );
        col2im(&cols, &p, &mut out[n * out_per..(n + 1) * out_per]);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    gy: &[S],
    d: &ConvDims,
    geom: &ConvGeometry,
    need: (bool, bool),
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let p = transpose_patch(d, geom);
    let (rows, ncols) = (p.rows(), p.cols());
    let out_per = d.cout * d.oh * d.ow;
    let mut cols = vec![S::zero(); rows * ncols];
    let mut dx = need.0.then(|| vec![S::zero(); x.len()]);
    let mut dk = need.1.then(|| vec![S::zero(); k.len()]);
    for n in 0..d.n {
        im2col(&gy[n * out_per..(n + 1) * out_per], &p, &mut cols);
        let xs = &x[n * d.cin * ncols..(n + 1) * d.cin * ncols];
        if let Some(dx) = dx.as_mut() {
            // dx = k · cols
            S::gemm(
                d.cin,
                rows,
                ncols,
                S::one(),
                k,
                (rows as isize, 1),
                &cols,
                (ncols as isize, 1),
                S::zero(),
                &mut dx[n * d.cin * ncols..(n + 1) * d.cin * ncols],
                (ncols as isize, 1),
            );
        }
        if let Some(dk) = dk.as_mut() {
            // dk += x · cols^T
            S::gemm(
                d.cin,
                ncols,
                rows,
                S::one(),
                xs,
                (ncols as isize, 1),
                &cols,
                (1, ncols as isize),
                S::one(),
                dk,
                (rows as isize, 1),
            );
        }
    }
    (dx, dk)
}

/// 2x2, stride 2 max pooling. Returns the pooled values and, per output,
/// the flat input index that won (first maximum in row-major window order).
pub(crate) fn max_pool2d_forward<S: Scalar>(x: &[S], shape: &[usize]) -> (Vec<S>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over all axes except axis 1 of `[N, C, ...]`.
pub(crate) struct ChannelLayout {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Self {
        Self {
            n: shape[0],
            c: shape[1],
            inner: shape[2..].iter().product(),
        }
    }

    pub fn count(&self) -> usize {
        self.n * self.inner
    }

    #[inline]
    pub fn for_channel<'a, S: Copy>(
        &self,
        data: &'a [S],
        c: usize,
    ) -> impl Iterator<Item = &'a [S]> + 'a {
        let (inner, cc) = (self.inner, self.c);
        (0..self.n).map(move |n| &data[(n * cc + c) * inner..(n * cc + c + 1) * inner])
    }
}

/// Batch statistics `(mean, biased variance)` per channel.
pub(crate) fn channel_moments<S: Scalar>(x: &[S], layout: &ChannelLayout) -> (Vec<S>, Vec<S>) {
    let count = S::from_usize(layout.count()).unwrap();
    let mut means = Vec::with_capacity(layout.c);
    let mut vars = Vec::with_capacity(layout.c);
    for c in 0..layout.c {
        let mut sum = S::zero();
        for row in layout.for_channel(x, c) {
            sum += row.iter().copied().sum::<S>();
        }
        let mean = sum / count;
        let mut sq = S::zero();
        for row in layout.for_channel(x, c) {
            sq += row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
        }
        means.push(mean);
        vars.push(sq / count);
    }
    (means, vars)
}
