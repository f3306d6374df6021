//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// At most this many elements per tensor are probed (evenly strided).
    pub max_elements: usize,
    /// Gradients smaller than this fraction of the largest numeric gradient
    /// are compared against that floor instead of their own magnitude.
    pub relative_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_elements: 64,
            relative_floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, flat index)` of the worst element.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max + (n / max) / 2).collect()
    }
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<(usize, f64)>], floor_frac: f64) -> GradCheckReport {
    let scale = numeric
        .iter()
        .flatten()
        .fold(0.0f64, |m, &(_, v)| m.max(v.abs()))
        .max(1e-12);
    let floor = floor_frac * scale;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for &(idx, nv) in n {
            let av = a[idx];
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (ti, idx);
            }
        }
    }
    report
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences, for every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(&out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.wrt(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; v.value().numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut probes = Vec::new();
        for idx in probe_indices(inputs[ti].numel(), opts.max_elements) {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            probes.push((idx, (plus - minus) / (2.0 * opts.eps)));
        }
        numeric.push(probes);
    }
    Ok(compare(&analytic, &numeric, opts.relative_floor))
}

/// Like [`grad_check`], but perturbs the parameters of `store` and reports
/// one result per parameter name.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, opts: GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(&out)?;
    let mut analytic: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    for (id, t) in grads.params() {
        for (a, v) in analytic[id.0].iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    drop(g);

    let mut results = Vec::new();
    let ids: Vec<_> = store.param_ids().collect();
    for id in ids {
        let n = store.param(id).value.numel();
        let mut probes = Vec::new();
        for idx in probe_indices(n, opts.max_elements) {
            let orig = store.param(id).value.data()[idx];
            store.param_mut(id).value.data_mut()[idx] = orig + opts.eps;
            let plus = f(&Graph::inference(), store)?.value().item();
            store.param_mut(id).value.data_mut()[idx] = orig - opts.eps;
            let minus = f(&Graph::inference(), store)?.value().item();
            store.param_mut(id).value.data_mut()[idx] = orig;
            probes.push((idx, (plus - minus) / (2.0 * opts.eps)));
        }
        let report = compare(&analytic[id.0..=id.0], &[probes], opts.relative_floor);
        results.push((store.param(id).name.clone(), report));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // |x| recorded with the sign flipped would be caught; emulate by
        // comparing d(x^2)/dx against the gradient of a different function.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = grad_check(
            |g, v| {
                let sq = g.mul(&v[0], &v[0]);
                Ok(g.sum(&sq))
            },
            std::slice::from_ref(&x),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passes(1e-8), "{ok:?}");

        let analytic = vec![vec![1.0, -2.0, 4.0]];
        let numeric = vec![vec![(0, 1.0), (1, -2.0), (2, 3.0)]];
        assert!(compare(&analytic, &numeric, 1e-2).max_rel_error > 0.2);
    }

    #[test]
    fn probes_are_spread() {
        assert_eq!(probe_indices(4, 10), vec![0, 1, 2, 3]);
        let p = probe_indices(1000, 10);
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
        assert!(*p.last().unwrap() < 1000);
    }
}
