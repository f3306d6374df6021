//! Single-direction LSTM as one fused tape op, and the bidirectional wrapper.
//!
//! Gate layout in the `4H` axis is input, forget, cell, output:
//!
//! ```text
//! z_t = W_ih x_t + W_hh h_{t-1} + b
//! i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
//! c_t = f c_{t-1} + i g
//! h_t = o tanh(c_t)
//! ```
//!
//! State starts at zero. The backward pass is hand-written BPTT.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::graph::{sigmoid, Graph, Var};
use crate::numerics::linalg::{gemm, gemm_acc};
use crate::numerics::tensor::Tensor;

/// Weights for one direction.
#[derive(Clone)]
pub struct LstmWeights {
    /// `[4H, D]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

struct Saved {
    x: Rc<Tensor>,
    w_ih: Rc<Tensor>,
    w_hh: Rc<Tensor>,
    /// Activated gates `[B, T, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[B, T, H]`.
    cells: Vec<f64>,
    /// Hidden states `[B, T, H]` (the op output).
    hidden: Vec<f64>,
}

impl Graph {
    /// Runs an LSTM over `x: [B, T, D]`, returning `[B, T, H]`. With
    /// `reverse` the recurrence runs from `t = T-1` down to `0` and outputs
    /// stay aligned with their input time index.
    pub fn lstm(&self, x: &Var, weights: &LstmWeights, reverse: bool) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::shape("lstm", format!("input must be [B, T, D], got {xs:?}")));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let ws = weights.w_ih.shape();
        if ws.len() != 2 || ws[1] != d || ws[0] % 4 != 0 {
            return Err(Error::shape("lstm", format!("w_ih {ws:?} for input width {d}")));
        }
        let h = ws[0] / 4;
        if weights.w_hh.shape() != [4 * h, h] || weights.bias.shape() != [4 * h] {
            return Err(Error::shape(
                "lstm",
                format!("w_hh {:?} / bias {:?} for hidden {h}", weights.w_hh.shape(), weights.bias.shape()),
            ));
        }
        let g4 = 4 * h;
        let xv = x.value_rc();
        let w_ih = weights.w_ih.value_rc();
        let w_hh = weights.w_hh.value_rc();
        let bias = weights.bias.value();

        // input projections for every (b, t) row at once
        let mut gates = vec![0.0; b * t * g4];
        gemm(b * t, d, g4, xv.data(), d, 1, w_ih.data(), 1, d, &mut gates, g4, 1);
        for row in gates.chunks_mut(g4) {
            for (v, bb) in row.iter_mut().zip(bias.data()) {
                *v += bb;
            }
        }
        let mut cells = vec![0.0; b * t * h];
        let mut hidden = vec![0.0; b * t * h];
        let mut h_prev = vec![0.0; b * h];
        let mut c_prev = vec![0.0; b * h];
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            // z[:, ti] += h_prev W_hh^T
            gemm_acc(b, h, g4, &h_prev, h, 1, w_hh.data(), 1, h, &mut gates[ti * g4..], t * g4, 1);
            for bi in 0..b {
                let z = &mut gates[(bi * t + ti) * g4..(bi * t + ti + 1) * g4];
                for j in 0..h {
                    let i = sigmoid(z[j]);
                    let f = sigmoid(z[h + j]);
                    let g = z[2 * h + j].tanh();
                    let o = sigmoid(z[3 * h + j]);
                    z[j] = i;
                    z[h + j] = f;
                    z[2 * h + j] = g;
                    z[3 * h + j] = o;
                    let c = f * c_prev[bi * h + j] + i * g;
                    let hv = o * c.tanh();
                    cells[(bi * t + ti) * h + j] = c;
                    hidden[(bi * t + ti) * h + j] = hv;
                    c_prev[bi * h + j] = c;
                    h_prev[bi * h + j] = hv;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, t, h], hidden.clone());
        let saved = Saved {
            x: xv,
            w_ih,
            w_hh,
            gates,
            cells,
            hidden,
        };
        Ok(self.record(
            value,
            &[x, &weights.w_ih, &weights.w_hh, &weights.bias],
            move |gout, needs| lstm_backward(&saved, gout.data(), (b, t, d, h), reverse, needs),
        ))
    }

    /// Bidirectional LSTM: forward and backward outputs concatenated on the
    /// feature axis, `[B, T, 2H]`.
    pub fn bilstm(&self, x: &Var, forward: &LstmWeights, backward: &LstmWeights) -> Result<Var> {
        let f = self.lstm(x, forward, false)?;
        let r = self.lstm(x, backward, true)?;
        Ok(self.concat_last(&[&f, &r]))
    }
}

fn lstm_backward(
    s: &Saved,
    gout: &[f64],
    (b, t, d, h): (usize, usize, usize, usize),
    reverse: bool,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let g4 = 4 * h;
    let mut dgates = vec![0.0; b * t * g4];
    let mut dw_hh = vec![0.0; g4 * h];
    let mut dh_next = vec![0.0; b * h];
    let mut dc_next = vec![0.0; b * h];
    let zeros = vec![0.0; b * t * h];
    for step in (0..t).rev() {
        let ti = if reverse { t - 1 - step } else { step };
        // time index of the previous step, if any
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(ti + 1)
        } else {
            Some(ti - 1)
        };
        for bi in 0..b {
            let gate = &s.gates[(bi * t + ti) * g4..(bi * t + ti + 1) * g4];
            let dz = &mut dgates[(bi * t + ti) * g4..(bi * t + ti + 1) * g4];
            for j in 0..h {
                let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let c = s.cells[(bi * t + ti) * h + j];
                let c_prev = prev.map_or(0.0, |p| s.cells[(bi * t + p) * h + j]);
                let tc = c.tanh();
                let dh = gout[(bi * t + ti) * h + j] + dh_next[bi * h + j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[bi * h + j];
                dz[j] = dc * g * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - g * g);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[bi * h + j] = dc * f;
            }
        }
        // dh_next = dz_t W_hh ; dW_hh += dz_t^T h_prev
        let dz_t = &dgates[ti * g4..];
        gemm(b, g4, h, dz_t, t * g4, 1, s.w_hh.data(), h, 1, &mut dh_next, h, 1);
        let (hsrc, off) = match prev {
            Some(p) => (&s.hidden, p * h),
            None => (&zeros, 0),
        };
        gemm_acc(g4, b, h, dz_t, 1, t * g4, &hsrc[off..], t * h, 1, &mut dw_hh, h, 1);
    }
    let dx = needs[0].then(|| {
        let mut dx = vec![0.0; b * t * d];
        gemm(b * t, g4, d, &dgates, g4, 1, s.w_ih.data(), d, 1, &mut dx, d, 1);
        Tensor::from_parts(vec![b, t, d], dx)
    });
    let dw_ih = needs[1].then(|| {
        let mut dw = vec![0.0; g4 * d];
        gemm(g4, b * t, d, &dgates, 1, g4, s.x.data(), d, 1, &mut dw, d, 1);
        Tensor::from_parts(vec![g4, d], dw)
    });
    let db = needs[3].then(|| {
        let mut db = vec![0.0; g4];
        for row in dgates.chunks(g4) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_parts(vec![g4], db)
    });
    vec![dx, dw_ih, needs[2].then(|| Tensor::from_parts(vec![g4, h], dw_hh)), db]
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn weights(g: &Graph, d: usize, h: usize, rng: &mut ChaCha8Rng, scale: f64) -> LstmWeights {
        LstmWeights {
            w_ih: g.constant(Tensor::randn(vec![4 * h, d], rng).scale(scale)),
            w_hh: g.constant(Tensor::randn(vec![4 * h, h], rng).scale(scale)),
            bias: g.constant(Tensor::randn(vec![4 * h], rng).scale(scale)),
        }
    }

    #[test]
    fn zero_params_and_input_give_zero_output() {
        let g = Graph::inference();
        let z = LstmWeights {
            w_ih: g.constant(Tensor::zeros(vec![8, 3])),
            w_hh: g.constant(Tensor::zeros(vec![8, 2])),
            bias: g.constant(Tensor::zeros(vec![8])),
        };
        let x = g.constant(Tensor::zeros(vec![2, 5, 3]));
        let y = g.bilstm(&x, &z, &z).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4]);
        assert_eq!(y.value().max_abs(), 0.0);
    }

    #[test]
    fn single_step_scalar_gates_by_hand() {
        // H = 1, D = 1, one step: z = w_ih x + b (h_prev = 0)
        let g = Graph::inference();
        let w = LstmWeights {
            w_ih: g.constant(Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 1.5]).unwrap()),
            w_hh: g.constant(Tensor::new(vec![4, 1], vec![9.0, 9.0, 9.0, 9.0]).unwrap()),
            bias: g.constant(Tensor::new(vec![4], vec![0.1, 0.2, -0.3, 0.0]).unwrap()),
        };
        let x = 0.8;
        let y = g
            .lstm(&g.constant(Tensor::new(vec![1, 1, 1], vec![x]).unwrap()), &w, false)
            .unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5 * x + 0.1);
        let gg = (2.0 * x - 0.3).tanh();
        let o = sig(1.5 * x);
        // c_prev = 0 so the forget gate drops out
        let c = i * gg;
        let expected = o * c.tanh();
        assert!((y.value().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn time_reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Graph::inference();
        let fw = weights(&g, 3, 2, &mut rng, 0.7);
        let bw = weights(&g, 3, 2, &mut rng, 0.7);
        let x = Tensor::randn(vec![2, 6, 3], &mut rng);
        let mut xr = x.clone();
        for b in 0..2 {
            for t in 0..6 {
                for d in 0..3 {
                    xr.set(&[b, t, d], x.at(&[b, 5 - t, d]));
                }
            }
        }
        // bilstm(x) with (fw, bw) against bilstm(reverse(x)) with (bw, fw)
        let y = g.bilstm(&g.constant(x), &fw, &bw).unwrap();
        let yr = g.bilstm(&g.constant(xr), &bw, &fw).unwrap();
        for b in 0..2 {
            for t in 0..6 {
                for j in 0..2 {
                    let a = y.value().at(&[b, t, j]);
                    let r = yr.value().at(&[b, 5 - t, 2 + j]);
                    assert!((a - r).abs() < 1e-14);
                }
            }
        }
    }
}
