//! Attention fusion of same-shaped tensors and the (t, f)-pointwise neural
//! beamformer.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::model::config::BeamActivation;
use crate::numerics::{Graph, Tensor, Var};

/// Column-wise softmax of `[N, C]` logits.
pub fn softmax_columns(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * c];
    for ci in 0..c {
        let max = (0..n).map(|i| logits.data()[i * c + ci]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..n {
            let e = (logits.data()[i * c + ci] - max).exp();
            out[i * c + ci] = e;
            total += e;
        }
        for i in 0..n {
            out[i * c + ci] /= total;
        }
    }
    Tensor::from_parts(vec![n, c], out)
}

/// `O = Σ_i softmax_i(A)[c] · X_i[c, ...]` for `N` inputs of shape
/// `[C, ...]` and logits `A: [N, C]`.
pub fn attention_fuse(g: &Graph, logits: &Var, inputs: &[&Var]) -> Result<Var> {
    let ls = logits.shape();
    let n = inputs.len();
    if n == 0 || ls.len() != 2 || ls[0] != n {
        return Err(Error::shape("attention_fuse", format!("logits {ls:?} for {n} inputs")));
    }
    let shape = inputs[0].shape().to_vec();
    if shape.first() != Some(&ls[1]) || inputs.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "attention_fuse",
            format!("inputs must share a [C={}, ...] shape", ls[1]),
        ));
    }
    let c = ls[1];
    let plane = inputs[0].value().numel() / c;
    let weights = Rc::new(softmax_columns(logits.value()));
    let mut out = vec![0.0; c * plane];
    for (i, x) in inputs.iter().enumerate() {
        for ci in 0..c {
            let a = weights.data()[i * c + ci];
            let src = &x.value().data()[ci * plane..(ci + 1) * plane];
            for (o, v) in out[ci * plane..(ci + 1) * plane].iter_mut().zip(src) {
                *o += a * v;
            }
        }
    }
    let values: Vec<Rc<Tensor>> = inputs.iter().map(|x| x.value_rc()).collect();
    let mut parents = vec![logits];
    parents.extend_from_slice(inputs);
    Ok(g.record(Tensor::from_parts(shape.clone(), out), &parents, move |gout, needs| {
        let gd = gout.data();
        let mut grads = Vec::with_capacity(n + 1);
        grads.push(needs[0].then(|| {
            // da[i, c] = <G[c], X_i[c]>, then the softmax Jacobian
            let mut da = vec![0.0; n * c];
            for (i, x) in values.iter().enumerate() {
                for ci in 0..c {
                    let span = ci * plane..(ci + 1) * plane;
                    da[i * c + ci] = gd[span.clone()].iter().zip(&x.data()[span]).map(|(a, b)| a * b).sum();
                }
            }
            let a = weights.data();
            let mut dl = vec![0.0; n * c];
            for ci in 0..c {
                let dot: f64 = (0..n).map(|i| a[i * c + ci] * da[i * c + ci]).sum();
                for i in 0..n {
                    dl[i * c + ci] = a[i * c + ci] * (da[i * c + ci] - dot);
                }
            }
            Tensor::from_parts(vec![n, c], dl)
        }));
        for i in 0..n {
            grads.push(needs[i + 1].then(|| {
                let mut dx = gd.to_vec();
                for ci in 0..c {
                    let a = weights.data()[i * c + ci];
                    for v in &mut dx[ci * plane..(ci + 1) * plane] {
                        *v *= a;
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            }));
        }
        grads
    }))
}

/// Beamformer weights, all bound to the current graph.
pub struct BeamVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Per-bin MLP input `[L, F, 2C + 1]`: real parts, imaginary parts and the
/// normalized bin index `f / (F - 1)`.
pub fn beam_features(g: &Graph, re: &Var, im: &Var) -> Result<Var> {
    if re.shape() != im.shape() || re.shape().len() != 3 {
        return Err(Error::shape("beamform", format!("planes {:?} / {:?}", re.shape(), im.shape())));
    }
    let (l, f) = (re.shape()[1], re.shape()[2]);
    let denom = (f.max(2) - 1) as f64;
    let freq: Vec<f64> = (0..l).flat_map(|_| (0..f).map(|k| k as f64 / denom)).collect();
    let freq = g.constant(Tensor::from_parts(vec![l, f, 1], freq));
    let re_t = g.permute3(re, [1, 2, 0]);
    let im_t = g.permute3(im, [1, 2, 0]);
    Ok(g.concat_last(&[&re_t, &im_t, &freq]))
}

/// Two-layer MLP from `[L, F, 2C + 1]` features to the monaural bin,
/// returned as `[1, L, F]` real and imaginary planes. `dropout` is applied
/// to the hidden layer.
pub fn beamform(
    g: &Graph,
    features: &Var,
    vars: &BeamVars,
    activation: BeamActivation,
    slope: f64,
    dropout: impl FnOnce(&Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let (l, f) = (features.shape()[0], features.shape()[1]);
    let hidden = g.linear(features, &vars.w1, Some(&vars.b1))?;
    let hidden = match activation {
        BeamActivation::LeakyRelu => g.leaky_relu(&hidden, slope),
        BeamActivation::Identity => hidden,
    };
    let hidden = dropout(&hidden)?;
    let out = g.linear(&hidden, &vars.w2, Some(&vars.b2))?;
    if out.shape()[2] != 2 {
        return Err(Error::shape("beamform", format!("output layer yields {:?}", out.shape())));
    }
    let re = g.reshape(&g.narrow_last(&out, 0, 1), vec![1, l, f]);
    let im = g.reshape(&g.narrow_last(&out, 1, 1), vec![1, l, f]);
    Ok((re, im))
}
