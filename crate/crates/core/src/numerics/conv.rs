//! 2-D convolution with "same" padding and its exact adjoint.
//!
//! Inputs are `[C, H, W]` (one sample), weights `[C_out, C_in, kh, kw]`.
//! Convolution is cross-correlation (no kernel flip). With stride `s` the
//! output extent is `ceil(H / s)`; the total padding
//! `max((H' - 1) s + k - H, 0)` is split evenly with the odd sample on the
//! trailing side.
//!
//! All three products (forward, input gradient, weight gradient) run as
//! im2col + GEMM over fixed-size column chunks. Chunk boundaries depend
//! only on the geometry, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::linalg::gemm;
use crate::numerics::tensor::Tensor;

const CHUNK_BUDGET: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    GroupNorm,
    Linear,
    Bilstm,
    Activation,
    Dropout,
}

/// Shape-level description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("layer {self:?} has zero channels")));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config(format!("layer {self:?} has a zero kernel or stride")));
        }
        Ok(())
    }

    /// Spatial output extent of the "same"-padded convolution.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }
}

/// Index bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

impl ConvGeometry {
    pub fn same(c_in: usize, c_out: usize, hw: (usize, usize), kernel: (usize, usize), stride: (usize, usize)) -> Self {
        let (oh, pad_top) = same_padding(hw.0, kernel.0, stride.0);
        let (ow, pad_left) = same_padding(hw.1, kernel.1, stride.1);
        Self {
            c_in,
            c_out,
            h: hw.0,
            w: hw.1,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
            oh,
            ow,
        }
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let p = self.positions();
        let step = (CHUNK_BUDGET / self.k().max(1)).clamp(16, p.max(16));
        (0..p).step_by(step).map(|s| (s, (s + step).min(p))).collect()
    }

    /// Input coordinate along one axis, or `None` when it falls in padding.
    #[inline]
    fn source(o: usize, stride: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = o * stride + tap;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }

    fn im2col(&self, x: &[f64], p0: usize, p1: usize, col: &mut [f64]) {
        let np = p1 - p0;
        let mut k = 0;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[k * np..(k + 1) * np];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let p = p0 + j;
                        let (oy, ox) = (p / self.ow, p % self.ow);
                        *slot = match (
                            Self::source(oy, self.sh, ki, self.pad_top, self.h),
                            Self::source(ox, self.sw, kj, self.pad_left, self.w),
                        ) {
                            (Some(iy), Some(ix)) => plane[iy * self.w + ix],
                            _ => 0.0,
                        };
                    }
                    k += 1;
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], p0: usize, p1: usize, gx: &mut [f64]) {
        let np = p1 - p0;
        let mut k = 0;
        for ci in 0..self.c_in {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[k * np..(k + 1) * np];
                    for (j, &v) in row.iter().enumerate() {
                        let p = p0 + j;
                        let (oy, ox) = (p / self.ow, p % self.ow);
                        if let (Some(iy), Some(ix)) = (
                            Self::source(oy, self.sh, ki, self.pad_top, self.h),
                            Self::source(ox, self.sw, kj, self.pad_left, self.w),
                        ) {
                            plane[iy * self.w + ix] += v;
                        }
                    }
                    k += 1;
                }
            }
        }
    }

    /// `out[co, p] = sum_k w[co, k] col[k, p]`, shape `[c_out, oh * ow]`.
    pub fn forward(&self, x: &[f64], weight: &[f64]) -> Vec<f64> {
        let (k, p) = (self.k(), self.positions());
        let parts: Vec<(usize, usize, Vec<f64>)> = self
            .chunks()
            .into_par_iter()
            .map(|(p0, p1)| {
                let np = p1 - p0;
                let mut col = vec![0.0; k * np];
                self.im2col(x, p0, p1, &mut col);
                let mut out = vec![0.0; self.c_out * np];
                gemm(self.c_out, k, np, weight, k, 1, &col, np, 1, &mut out, np, 1);
                (p0, p1, out)
            })
            .collect();
        let mut out = vec![0.0; self.c_out * p];
        for (p0, p1, part) in parts {
            let np = p1 - p0;
            for co in 0..self.c_out {
                out[co * p + p0..co * p + p1].copy_from_slice(&part[co * np..(co + 1) * np]);
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward) with respect to the input.
    pub fn backward_input(&self, gout: &[f64], weight: &[f64]) -> Vec<f64> {
        let (k, p) = (self.k(), self.positions());
        let mut gx = vec![0.0; self.c_in * self.h * self.w];
        let chunks = self.chunks();
        let wave = rayon::current_num_threads().max(1) * 2;
        for group in chunks.chunks(wave) {
            let cols: Vec<Vec<f64>> = group
                .par_iter()
                .map(|&(p0, p1)| {
                    let np = p1 - p0;
                    let mut col = vec![0.0; k * np];
                    // weight^T [k, c_out] times gout[:, p0..p1]
                    gemm(k, self.c_out, np, weight, 1, k, &gout[p0..], p, 1, &mut col, np, 1);
                    col
                })
                .collect();
            for (&(p0, p1), col) in group.iter().zip(&cols) {
                self.col2im_add(col, p0, p1, &mut gx);
            }
        }
        gx
    }

    /// Gradient of [`forward`](Self::forward) with respect to the weight.
    pub fn backward_weight(&self, x: &[f64], gout: &[f64]) -> Vec<f64> {
        let (k, p) = (self.k(), self.positions());
        let parts: Vec<Vec<f64>> = self
            .chunks()
            .into_par_iter()
            .map(|(p0, p1)| {
                let np = p1 - p0;
                let mut col = vec![0.0; k * np];
                self.im2col(x, p0, p1, &mut col);
                let mut gw = vec![0.0; self.c_out * k];
                // gout[:, p0..p1] [c_out, np] times col^T [np, k]
                gemm(self.c_out, np, k, &gout[p0..], p, 1, &col, 1, np, &mut gw, k, 1);
                gw
            })
            .collect();
        let mut gw = vec![0.0; self.c_out * k];
        for part in parts {
            for (a, b) in gw.iter_mut().zip(part) {
                *a += b;
            }
        }
        gw
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    let per = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(g: &[f64], channels: usize) -> Tensor {
    let per = g.len() / channels;
    Tensor::from_parts(vec![channels], g.chunks(per).map(|c| c.iter().sum()).collect())
}

fn check_weight(op: &'static str, x: &Var, weight: &Var, x_channels_axis: usize) -> Result<[usize; 4]> {
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::shape(op, format!("weight must be rank 4, got {ws:?}")));
    }
    if x.shape().len() != 3 {
        return Err(Error::shape(op, format!("input must be [C, H, W], got {:?}", x.shape())));
    }
    if x.shape()[0] != ws[x_channels_axis] {
        return Err(Error::shape(
            op,
            format!("input has {} channels, weight {ws:?}", x.shape()[0]),
        ));
    }
    Ok([ws[0], ws[1], ws[2], ws[3]])
}

impl Graph {
    /// "Same"-padded 2-D cross-correlation.
    pub fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, stride: (usize, usize)) -> Result<Var> {
        let [c_out, c_in, kh, kw] = check_weight("conv2d", x, weight, 1)?;
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let geo = ConvGeometry::same(c_in, c_out, (x.shape()[1], x.shape()[2]), (kh, kw), stride);
        let mut out = geo.forward(x.value().data(), weight.value().data());
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data());
        }
        let value = Tensor::from_parts(vec![c_out, geo.oh, geo.ow], out);
        let (xv, wv) = (x.value_rc(), weight.value_rc());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(value, &parents, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| {
                    Tensor::from_parts(xv.shape().to_vec(), geo.backward_input(g.data(), wv.data()))
                }),
                needs[1].then(|| {
                    Tensor::from_parts(wv.shape().to_vec(), geo.backward_weight(xv.data(), g.data()))
                }),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g.data(), c_out)));
            }
            grads
        }))
    }

    /// Exact adjoint of [`conv2d`](Self::conv2d) for an input of spatial size
    /// `target`: maps `[C_out, ceil(h/s), ceil(w/s)]` to `[C_in, h, w]`.
    /// The optional bias has one entry per `C_in`.
    pub fn conv_transpose2d(
        &self,
        y: &Var,
        weight: &Var,
        bias: Option<&Var>,
        stride: (usize, usize),
        target: (usize, usize),
    ) -> Result<Var> {
        let [c_out, c_in, kh, kw] = check_weight("conv_transpose2d", y, weight, 0)?;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv_transpose2d stride must be positive"));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::shape("conv_transpose2d", "target extents must be positive"));
        }
        let geo = ConvGeometry::same(c_in, c_out, target, (kh, kw), stride);
        if (geo.oh, geo.ow) != (y.shape()[1], y.shape()[2]) {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {:?} cannot mirror target {target:?} at stride {stride:?}",
                    y.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_in] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} for {c_in} outputs", b.shape())));
            }
        }
        let mut out = geo.backward_input(y.value().data(), weight.value().data());
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data());
        }
        let value = Tensor::from_parts(vec![c_in, target.0, target.1], out);
        let (yv, wv) = (y.value_rc(), weight.value_rc());
        let mut parents = vec![y, weight];
        parents.extend(bias);
        Ok(self.record(value, &parents, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| Tensor::from_parts(yv.shape().to_vec(), geo.forward(g.data(), wv.data()))),
                needs[1].then(|| {
                    Tensor::from_parts(wv.shape().to_vec(), geo.backward_weight(g.data(), yv.data()))
                }),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g.data(), c_in)));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct nested-loop "same" cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: (usize, usize)) -> Tensor {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = h.div_ceil(stride.0);
        let ow = wd.div_ceil(stride.1);
        let pt = ((oh - 1) * stride.0 + kh).saturating_sub(h) / 2;
        let pl = ((ow - 1) * stride.1 + kw).saturating_sub(wd) / 2;
        let mut out = Tensor::zeros(vec![c_out, oh, ow]);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride.0 + ki) as isize - pt as isize;
                                let ix = (ox * stride.1 + kj) as isize - pl as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[co, ci, ki, kj]) * x.at(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![3, 5, 4], &mut rng);
        let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w));
        let y = g.conv2d(&xv, &wv, None, (1, 1)).unwrap();
        assert_eq!(y.value(), &x);
        let t = g.conv_transpose2d(&xv, &wv, None, (1, 1), (5, 4)).unwrap();
        assert_eq!(t.value(), &x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![1, 4, 4], &mut rng);
        let w = Tensor::randn(vec![1, 1, 2, 2], &mut rng);
        let g = Graph::inference();
        let y = g
            .conv2d(&g.constant(x.clone()), &g.constant(w.clone()), None, (1, 1))
            .unwrap();
        assert!(y.value().max_abs_diff(&naive_conv(&x, &w, (1, 1))) < 1e-12);

        for (stride, kernel) in [((2, 2), (8, 6)), ((2, 1), (6, 3)), ((1, 1), (7, 1))] {
            let x = Tensor::randn(vec![2, 11, 9], &mut rng);
            let w = Tensor::randn(vec![3, 2, kernel.0, kernel.1], &mut rng);
            let y = g
                .conv2d(&g.constant(x.clone()), &g.constant(w.clone()), None, stride)
                .unwrap();
            assert!(y.value().max_abs_diff(&naive_conv(&x, &w, stride)) < 1e-12);
        }
    }

    #[test]
    fn same_padding_shape_law() {
        let spec = LayerSpec::conv(32, 32, (8, 6), (2, 2));
        assert_eq!(spec.output_hw(596, 257), (298, 129));
        let geo = ConvGeometry::same(32, 32, (596, 257), (8, 6), (2, 2));
        assert_eq!((geo.oh, geo.ow), (298, 129));
        // (297 * 2 + 8 - 596) = 6 -> 3 top, 3 bottom; (128 * 2 + 6 - 257) = 5 -> 2 left, 3 right
        assert_eq!((geo.pad_top, geo.pad_left), (3, 2));
    }

    #[test]
    fn transpose_rejects_unmirrorable_target() {
        let g = Graph::inference();
        let y = g.constant(Tensor::zeros(vec![2, 3, 3]));
        let w = g.constant(Tensor::zeros(vec![2, 1, 3, 3]));
        assert!(g.conv_transpose2d(&y, &w, None, (2, 2), (9, 6)).is_err());
        assert!(g.conv_transpose2d(&y, &w, None, (2, 2), (6, 5)).is_ok());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let g = Graph::inference();
        let x = g.constant(Tensor::zeros(vec![3, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![2, 2, 1, 1]));
        assert!(matches!(g.conv2d(&x, &w, None, (1, 1)), Err(Error::Shape { .. })));
    }
}
