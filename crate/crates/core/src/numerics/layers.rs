//! Affine maps on the last axis and inverted dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::linalg::gemm;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

impl Graph {
    /// `y = x W^T + b` over the last axis; `weight` is `[D_out, D_in]`.
    pub fn linear(&self, x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let ws = weight.shape();
        let d_in = *x.shape().last().unwrap();
        if ws.len() != 2 || ws[1] != d_in {
            return Err(Error::shape("linear", format!("weight {ws:?} for input {:?}", x.shape())));
        }
        let d_out = ws[0];
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?} for {d_out} outputs", b.shape())));
            }
        }
        let rows = x.value().numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        gemm(rows, d_in, d_out, x.value().data(), d_in, 1, weight.value().data(), 1, d_in, &mut out, d_out, 1);
        if let Some(b) = bias {
            for row in out.chunks_mut(d_out) {
                for (v, bb) in row.iter_mut().zip(b.value().data()) {
                    *v += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let (xv, wv) = (x.value_rc(), weight.value_rc());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(Tensor::from_parts(shape, out), &parents, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; rows * d_in];
                gemm(rows, d_out, d_in, gd, d_out, 1, wv.data(), d_in, 1, &mut dx, d_in, 1);
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; d_out * d_in];
                gemm(d_out, rows, d_in, gd, 1, d_out, xv.data(), d_in, 1, &mut dw, d_in, 1);
                Tensor::from_parts(vec![d_out, d_in], dw)
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                let mut db = vec![0.0; d_out];
                for row in gd.chunks(d_out) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![d_out], db)));
            }
            grads
        }))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    /// Identity when `training` is false or `rate` is zero.
    pub fn dropout(&self, x: &Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.value().numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::from_parts(x.shape().to_vec(), mask));
        Ok(self.mul(x, &mask))
    }
}
