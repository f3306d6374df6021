//! Training objectives: mean absolute error and the combined relative error
//! over magnitudes and samples.
//!
//! ```text
//! combined = γ / (L F) Σ ||X| - |X̂|| / (|X| + ε)  +  (1 - γ) / T Σ |x - x̂| / (|x| + ε)
//! ```
//!
//! Each function comes in a plain form over tensors and a graph form whose
//! estimate is differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Mae,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            epsilon: 1e-8,
            variant: LossVariant::Combined,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("clean {a:?} vs estimate {b:?}")));
    }
    Ok(())
}

/// `(1/T) Σ |x - x̂|`.
pub fn mae_loss(clean: &Tensor, est: &Tensor) -> Result<f64> {
    same_shape("mae_loss", clean.shape(), est.shape())?;
    Ok(clean.zip_map(est, |a, b| (a - b).abs()).mean())
}

/// Mean of `|a - b| / (|a| + ε)`.
pub fn relative_error(clean: &Tensor, est: &Tensor, eps: f64) -> Result<f64> {
    same_shape("relative_error", clean.shape(), est.shape())?;
    Ok(clean.zip_map(est, |a, b| (a - b).abs() / (a.abs() + eps)).mean())
}

/// The T-F term and the time term, unweighted.
pub fn combined_terms(
    clean_mag: &Tensor,
    est_mag: &Tensor,
    clean: &Tensor,
    est: &Tensor,
    eps: f64,
) -> Result<(f64, f64)> {
    Ok((relative_error(clean_mag, est_mag, eps)?, relative_error(clean, est, eps)?))
}

pub fn combined_loss(clean_mag: &Tensor, est_mag: &Tensor, clean: &Tensor, est: &Tensor, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let (tf, time) = combined_terms(clean_mag, est_mag, clean, est, cfg.epsilon)?;
    Ok(cfg.gamma * tf + (1.0 - cfg.gamma) * time)
}

/// Differentiable [`mae_loss`].
pub fn mae_loss_var(g: &Graph, clean: &Tensor, est: &Var) -> Result<Var> {
    same_shape("mae_loss", clean.shape(), est.shape())?;
    let diff = g.sub(&g.constant(clean.clone()), est);
    Ok(g.mean(&g.abs(&diff)))
}

/// Differentiable [`relative_error`]; the weights `1 / (|a| + ε)` are
/// constants.
pub fn relative_error_var(g: &Graph, clean: &Tensor, est: &Var, eps: f64) -> Result<Var> {
    same_shape("relative_error", clean.shape(), est.shape())?;
    let diff = g.abs(&g.sub(&g.constant(clean.clone()), est));
    let weights = g.constant(clean.map(|a| 1.0 / (a.abs() + eps)));
    Ok(g.mean(&g.mul(&diff, &weights)))
}

/// Differentiable [`combined_loss`].
pub fn combined_loss_var(
    g: &Graph,
    clean_mag: &Tensor,
    est_mag: &Var,
    clean: &Tensor,
    est: &Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let tf = relative_error_var(g, clean_mag, est_mag, cfg.epsilon)?;
    let time = relative_error_var(g, clean, est, cfg.epsilon)?;
    Ok(g.add(&g.scale(&tf, cfg.gamma), &g.scale(&time, 1.0 - cfg.gamma)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mae_hand_values() {
        assert_eq!(mae_loss(&t(&[1.0, 2.0]), &t(&[0.0, 0.0])).unwrap(), 1.5);
        assert_eq!(mae_loss(&t(&[1.0, -2.0]), &t(&[1.0, -2.0])).unwrap(), 0.0);
        assert!(mae_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn single_bin_hand_value() {
        let cfg = LossConfig {
            epsilon: 1e-300,
            ..LossConfig::default()
        };
        let v = combined_loss(&t(&[2.0]), &t(&[1.0]), &t(&[1.0]), &t(&[0.5]), &cfg).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn endpoints_and_perfect_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cm = Tensor::uniform(vec![3, 4], 0.0, 1.0, &mut rng);
        let em = Tensor::uniform(vec![3, 4], 0.0, 1.0, &mut rng);
        let c = Tensor::randn(vec![9], &mut rng);
        let e = Tensor::randn(vec![9], &mut rng);
        let (a, b) = combined_terms(&cm, &em, &c, &e, 1e-8).unwrap();
        let at = |gamma| {
            combined_loss(&cm, &em, &c, &e, &LossConfig { gamma, ..LossConfig::default() }).unwrap()
        };
        assert_eq!(at(1.0), a);
        assert_eq!(at(0.0), b);
        assert_eq!(combined_loss(&cm, &cm, &c, &c, &LossConfig::default()).unwrap(), 0.0);
        assert!(combined_loss(&cm, &em, &c, &e, &LossConfig { gamma: 1.5, ..LossConfig::default() }).is_err());
    }

    #[test]
    fn graph_form_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cm = Tensor::uniform(vec![2, 3], 0.0, 1.0, &mut rng);
        let em = Tensor::uniform(vec![2, 3], 0.0, 1.0, &mut rng);
        let c = Tensor::randn(vec![7], &mut rng);
        let e = Tensor::randn(vec![7], &mut rng);
        let cfg = LossConfig::default();
        let g = Graph::inference();
        let v = combined_loss_var(&g, &cm, &g.constant(em.clone()), &c, &g.constant(e.clone()), &cfg).unwrap();
        let plain = combined_loss(&cm, &em, &c, &e, &cfg).unwrap();
        assert!((v.value().item() - plain).abs() < 1e-12);
        let m = mae_loss_var(&g, &c, &g.constant(e.clone())).unwrap();
        assert!((m.value().item() - mae_loss(&c, &e).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gradients_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cm = Tensor::uniform(vec![3, 4], 0.5, 1.5, &mut rng);
        let c = Tensor::randn(vec![10], &mut rng);
        // estimates kept at least 0.1 away from the targets
        let em = cm.map(|v| v + 0.3);
        let e = c.map(|v| v - 0.2);
        let cfg = LossConfig::default();
        let r = grad_check(
            |g, v| combined_loss_var(g, &cm, &v[0], &c, &v[1], &cfg),
            &[em.clone(), e.clone()],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-5), "{r:?}");
        let r = grad_check(|g, v| mae_loss_var(g, &c, &v[0]), &[e], GradCheckOptions::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }
}
