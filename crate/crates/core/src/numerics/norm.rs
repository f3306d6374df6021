//! Batch and group normalization plus the PReLU activation.
//!
//! Both normalizations operate on one `[C, H, W]` sample. Batch statistics
//! are therefore taken per channel over the spatial extent.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics measured in a training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

/// Exponential moving update `r <- (1 - m) r + m s`.
pub fn update_running(running: &mut Tensor, observed: &[f64], momentum: f64) {
    for (r, &s) in running.data_mut().iter_mut().zip(observed) {
        *r = (1.0 - momentum) * *r + momentum * s;
    }
}

struct Normalized {
    out: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Normalizes contiguous groups of `group_len` values, then applies an
/// affine map whose coefficients change every `plane_len` values.
fn normalize_groups(x: &[f64], group_len: usize, plane_len: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Normalized {
    let groups = x.len() / group_len;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    let mut mean = Vec::with_capacity(groups);
    let mut var = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * group_len..(gi + 1) * group_len];
        let n = group_len as f64;
        let mu = seg.iter().sum::<f64>() / n;
        let v = seg.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / n;
        let inv = 1.0 / (v + eps).sqrt();
        for (o, &a) in xhat[gi * group_len..(gi + 1) * group_len].iter_mut().zip(seg) {
            *o = (a - mu) * inv;
        }
        inv_std.push(inv);
        mean.push(mu);
        var.push(v);
    }
    let out = affine(&xhat, plane_len, gamma, beta);
    Normalized {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

fn affine(xhat: &[f64], plane_len: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xhat.len());
    for (c, plane) in xhat.chunks(plane_len).enumerate() {
        out.extend(plane.iter().map(|&v| gamma[c] * v + beta[c]));
    }
    out
}

fn normalize_backward(g: &[f64], xhat: &[f64], inv_std: &[f64], group_len: usize, plane_len: usize, gamma: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    let n = group_len as f64;
    for (gi, &inv) in inv_std.iter().enumerate() {
        let range = gi * group_len..(gi + 1) * group_len;
        let dxhat: Vec<f64> = range.clone().map(|i| g[i] * gamma[i / plane_len]).collect();
        let s1: f64 = dxhat.iter().sum();
        let s2: f64 = dxhat.iter().zip(&xhat[range.clone()]).map(|(d, h)| d * h).sum();
        for (k, i) in range.enumerate() {
            dx[i] = inv / n * (n * dxhat[k] - s1 - xhat[i] * s2);
        }
    }
    dx
}

fn affine_grads(g: &[f64], xhat: &[f64], plane_len: usize) -> (Tensor, Tensor) {
    let planes = g.len() / plane_len;
    let mut dgamma = vec![0.0; planes];
    let mut dbeta = vec![0.0; planes];
    for c in 0..planes {
        let r = c * plane_len..(c + 1) * plane_len;
        dgamma[c] = g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
        dbeta[c] = g[r].iter().sum();
    }
    (
        Tensor::from_parts(vec![planes], dgamma),
        Tensor::from_parts(vec![planes], dbeta),
    )
}

fn check_affine(op: &'static str, x: &Var, gamma: &Var, beta: &Var) -> Result<usize> {
    if x.shape().len() < 2 {
        return Err(Error::shape(op, format!("input must be [C, ...], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

impl Graph {
    /// Batch normalization of one `[C, ...]` sample.
    ///
    /// In training mode the output uses the sample's own per-channel
    /// statistics, which are returned for the caller's running estimate.
    /// In eval mode the running statistics are used and nothing is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = check_affine("batchnorm2d", x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batchnorm2d", "running statistics do not match channels"));
        }
        let plane = x.value().numel() / c;
        let gv = gamma.value_rc();
        if training {
            let norm = normalize_groups(x.value().data(), plane, plane, gv.data(), beta.value().data(), eps);
            let unbiased = if plane > 1 { plane as f64 / (plane as f64 - 1.0) } else { 1.0 };
            let stats = BatchStats {
                mean: norm.mean.clone(),
                var: norm.var.iter().map(|v| v * unbiased).collect(),
            };
            let (xhat, inv) = (Rc::new(norm.xhat), Rc::new(norm.inv_std));
            let value = Tensor::from_parts(x.shape().to_vec(), norm.out);
            let shape = x.shape().to_vec();
            let var = self.record(value, &[x, gamma, beta], move |g, needs| {
                let (dg, db) = affine_grads(g.data(), &xhat, plane);
                vec![
                    needs[0].then(|| {
                        Tensor::from_parts(
                            shape.clone(),
                            normalize_backward(g.data(), &xhat, &inv, plane, plane, gv.data()),
                        )
                    }),
                    Some(dg),
                    Some(db),
                ]
            });
            Ok((var, Some(stats)))
        } else {
            let inv: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = x.value().data().to_vec();
            for (ci, p) in xhat.chunks_mut(plane).enumerate() {
                for v in p {
                    *v = (*v - running_mean.data()[ci]) * inv[ci];
                }
            }
            let value = Tensor::from_parts(
                x.shape().to_vec(),
                affine(&xhat, plane, gv.data(), beta.value().data()),
            );
            let xhat = Rc::new(xhat);
            let shape = x.shape().to_vec();
            let var = self.record(value, &[x, gamma, beta], move |g, needs| {
                let (dg, db) = affine_grads(g.data(), &xhat, plane);
                let dx = needs[0].then(|| {
                    let mut d = g.data().to_vec();
                    for (ci, p) in d.chunks_mut(plane).enumerate() {
                        for v in p {
                            *v *= gv.data()[ci] * inv[ci];
                        }
                    }
                    Tensor::from_parts(shape.clone(), d)
                });
                vec![dx, Some(dg), Some(db)]
            });
            Ok((var, None))
        }
    }

    /// Group normalization of one `[C, ...]` sample with per-channel affine.
    pub fn groupnorm(&self, x: &Var, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Result<Var> {
        let c = check_affine("groupnorm", x, gamma, beta)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!("{c} channels not divisible into {groups} groups")));
        }
        let plane = x.value().numel() / c;
        let group_len = plane * (c / groups);
        let gv = gamma.value_rc();
        let norm = normalize_groups(x.value().data(), group_len, plane, gv.data(), beta.value().data(), eps);
        let (xhat, inv) = (Rc::new(norm.xhat), Rc::new(norm.inv_std));
        let value = Tensor::from_parts(x.shape().to_vec(), norm.out);
        let shape = x.shape().to_vec();
        Ok(self.record(value, &[x, gamma, beta], move |g, needs| {
            let (dg, db) = affine_grads(g.data(), &xhat, plane);
            vec![
                needs[0].then(|| {
                    Tensor::from_parts(
                        shape.clone(),
                        normalize_backward(g.data(), &xhat, &inv, group_len, plane, gv.data()),
                    )
                }),
                Some(dg),
                Some(db),
            ]
        }))
    }

    /// Parametric ReLU with one learnable slope per channel of `[C, ...]`.
    pub fn prelu(&self, x: &Var, slope: &Var) -> Result<Var> {
        let c = x.shape()[0];
        if slope.shape() != [c] {
            return Err(Error::shape("prelu", format!("slope {:?} for {c} channels", slope.shape())));
        }
        let plane = x.value().numel() / c;
        let (xv, av) = (x.value_rc(), slope.value_rc());
        let mut out = xv.data().to_vec();
        for (ci, p) in out.chunks_mut(plane).enumerate() {
            for v in p.iter_mut().filter(|v| **v < 0.0) {
                *v *= av.data()[ci];
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.record(value, &[x, slope], move |g, needs| {
            let mut dx = g.data().to_vec();
            let mut da = vec![0.0; c];
            for ci in 0..c {
                for i in ci * plane..(ci + 1) * plane {
                    let xi = xv.data()[i];
                    if xi < 0.0 {
                        da[ci] += g.data()[i] * xi;
                        dx[i] *= av.data()[ci];
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![c], da)),
            ]
        }))
    }
}
