//! Finite-difference gradient suite over every differentiable op and the
//! full pipeline at [`ModelConfig::gradcheck`] scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{istft_var, stft, AudioSegment, StftConfig};
use crate::error::Result;
use crate::loss::{combined_loss_var, mae_loss_var, relative_error_var, LossConfig};
use crate::model::{attention_fuse, beam_features, beamform, BeamActivation, BeamVars, Ctx, Mode, Model, ModelConfig};
use crate::numerics::{grad_check, grad_check_params, GradCheckOptions, Graph, LstmWeights, SeedTree, Tensor, Var};

/// Tolerance for elementwise ops.
pub const POINTWISE_TOL: f64 = 1e-4;
/// Tolerance for composite ops and the pipeline.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<CheckOutcome>,
}

impl Suite {
    /// Uniform values with magnitude in `[0.1, 1.1]`, clear of kinks at 0.
    fn away(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.rng).map(|v| v.signum() * (0.1 + v.abs()))
    }

    fn randn(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::randn(shape, &mut self.rng)
    }

    /// Checks `sum(f(inputs) * w)` for a fixed random `w`.
    fn check<F>(&mut self, name: &str, tol: f64, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let g0 = Graph::inference();
        let probe = f(&g0, &inputs.iter().map(|t| g0.constant(t.clone())).collect::<Vec<_>>())?;
        let w = self.randn(probe.shape().to_vec());
        let report = grad_check(
            |g, v| {
                let y = f(g, v)?;
                Ok(g.sum(&g.mul(&y, &g.constant(w.clone()))))
            },
            &inputs,
            GradCheckOptions::default(),
        )?;
        self.out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance: tol,
        });
        Ok(())
    }
}

fn lstm_weights(v: &[Var]) -> LstmWeights {
    LstmWeights {
        w_ih: v[0].clone(),
        w_hh: v[1].clone(),
        bias: v[2].clone(),
    }
}

/// Runs every check; the caller decides what to do with failures.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let p = POINTWISE_TOL;
    let c = COMPOSITE_TOL;

    let (a, b) = (s.away(vec![3, 4]), s.away(vec![3, 4]));
    s.check("add", p, vec![a.clone(), b.clone()], |g, v| Ok(g.add(&v[0], &v[1])))?;
    s.check("sub", p, vec![a.clone(), b.clone()], |g, v| Ok(g.sub(&v[0], &v[1])))?;
    s.check("mul", p, vec![a.clone(), b.clone()], |g, v| Ok(g.mul(&v[0], &v[1])))?;
    s.check("scale", p, vec![a.clone()], |g, v| Ok(g.scale(&v[0], -1.7)))?;
    s.check("sigmoid", p, vec![a.clone()], |g, v| Ok(g.sigmoid(&v[0])))?;
    s.check("tanh", p, vec![a.clone()], |g, v| Ok(g.tanh(&v[0])))?;
    s.check("leaky_relu", p, vec![a.clone()], |g, v| Ok(g.leaky_relu(&v[0], 0.01)))?;
    s.check("abs", p, vec![a.clone()], |g, v| Ok(g.abs(&v[0])))?;
    s.check("magnitude", p, vec![a.clone(), b.clone()], |g, v| Ok(g.magnitude(&v[0], &v[1])))?;
    s.check("mean", p, vec![a.clone()], |g, v| Ok(g.mean(&v[0])))?;
    let slope = s.away(vec![3]);
    s.check("prelu", p, vec![a.clone(), slope], |g, v| g.prelu(&v[0], &v[1]))?;

    let x3 = s.randn(vec![2, 3, 4]);
    s.check("permute3", c, vec![x3.clone()], |g, v| Ok(g.permute3(&v[0], [2, 0, 1])))?;
    s.check("reshape", c, vec![x3.clone()], |g, v| Ok(g.reshape(&v[0], vec![6, 4])))?;
    s.check("concat_narrow", c, vec![x3.clone(), x3.map(|v| v * 0.5)], |g, v| {
        let cat = g.concat_last(&[&v[0], &v[1]]);
        Ok(g.narrow_last(&cat, 2, 5))
    })?;
    let (w, bias) = (s.randn(vec![5, 4]), s.randn(vec![5]));
    s.check("linear", c, vec![x3.clone(), w, bias], |g, v| g.linear(&v[0], &v[1], Some(&v[2])))?;

    let img = s.randn(vec![2, 7, 6]);
    let (kw, kb) = (s.randn(vec![3, 2, 3, 2]), s.randn(vec![3]));
    s.check("conv2d", c, vec![img.clone(), kw.clone(), kb], |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), (2, 2)))?;
    let y = s.randn(vec![3, 4, 3]);
    let tb = s.randn(vec![2]);
    s.check("conv_transpose2d", c, vec![y, kw, tb], |g, v| {
        g.conv_transpose2d(&v[0], &v[1], Some(&v[2]), (2, 2), (7, 6))
    })?;

    let (gamma, beta) = (s.away(vec![2]), s.randn(vec![2]));
    let (rm, rv) = (Tensor::new(vec![2], vec![0.1, -0.2])?, Tensor::new(vec![2], vec![0.8, 1.3])?);
    for (name, training) in [("batchnorm_train", true), ("batchnorm_eval", false)] {
        let (rm, rv) = (rm.clone(), rv.clone());
        s.check(name, c, vec![img.clone(), gamma.clone(), beta.clone()], move |g, v| {
            Ok(g.batchnorm2d(&v[0], &v[1], &v[2], &rm, &rv, training, 1e-5)?.0)
        })?;
    }
    let gx = s.randn(vec![4, 3, 5]);
    let (gg, gb) = (s.away(vec![4]), s.randn(vec![4]));
    s.check("groupnorm", c, vec![gx, gg, gb], |g, v| g.groupnorm(&v[0], &v[1], &v[2], 2, 1e-5))?;

    let seq = s.randn(vec![2, 5, 3]);
    let h = 4;
    let fwd = vec![
        s.randn(vec![4 * h, 3]).scale(0.5),
        s.randn(vec![4 * h, h]).scale(0.5),
        s.randn(vec![4 * h]).scale(0.5),
    ];
    let bwd = vec![
        s.randn(vec![4 * h, 3]).scale(0.5),
        s.randn(vec![4 * h, h]).scale(0.5),
        s.randn(vec![4 * h]).scale(0.5),
    ];
    let mut inputs = vec![seq.clone()];
    inputs.extend(fwd.iter().cloned());
    s.check("lstm", c, inputs.clone(), |g, v| g.lstm(&v[0], &lstm_weights(&v[1..4]), false))?;
    s.check("lstm_reverse", c, inputs.clone(), |g, v| g.lstm(&v[0], &lstm_weights(&v[1..4]), true))?;
    inputs.extend(bwd);
    s.check("bilstm", c, inputs, |g, v| g.bilstm(&v[0], &lstm_weights(&v[1..4]), &lstm_weights(&v[4..7])))?;

    let (m1, m2) = (s.randn(vec![3, 4, 5]), s.randn(vec![3, 4, 5]));
    let logits = s.randn(vec![2, 3]);
    s.check("attention_fuse", c, vec![logits, m1, m2], |g, v| attention_fuse(g, &v[0], &[&v[1], &v[2]]))?;

    let (re, im) = (s.randn(vec![2, 4, 5]), s.randn(vec![2, 4, 5]));
    let beam = vec![s.randn(vec![3, 5]), s.randn(vec![3]), s.randn(vec![2, 3]), s.randn(vec![2])];
    let mut inputs = vec![re, im];
    inputs.extend(beam);
    s.check("beamform", c, inputs, |g, v| {
        let feats = beam_features(g, &v[0], &v[1])?;
        let vars = BeamVars {
            w1: v[2].clone(),
            b1: v[3].clone(),
            w2: v[4].clone(),
            b2: v[5].clone(),
        };
        let (re, im) = beamform(g, &feats, &vars, BeamActivation::LeakyRelu, 0.01, |h| Ok(h.clone()))?;
        Ok(g.concat_last(&[&re, &im]))
    })?;

    let cfg = StftConfig { window: 8, hop: 2 };
    let frames = cfg.frames(20).expect("20 samples hold one frame");
    let (re, im) = (s.randn(vec![1, frames, cfg.bins()]), s.randn(vec![1, frames, cfg.bins()]));
    s.check("istft", c, vec![re, im], move |g, v| istft_var(g, &v[0], &v[1], cfg, 20))?;

    let clean = s.away(vec![1, 16]);
    let est = s.away(vec![1, 16]);
    let loss_cfg = LossConfig::default();
    {
        let clean = clean.clone();
        s.check("mae_loss", c, vec![est.clone()], move |g, v| mae_loss_var(g, &clean, &v[0]))?;
    }
    {
        let clean = clean.clone();
        s.check("relative_error", c, vec![est.clone()], move |g, v| relative_error_var(g, &clean, &v[0], 1e-8))?;
    }
    let clean_mag = s.away(vec![1, 3, 5]).map(f64::abs);
    let est_mag = s.away(vec![1, 3, 5]).map(f64::abs);
    s.check("combined_loss", c, vec![est_mag, est], move |g, v| {
        combined_loss_var(g, &clean_mag, &v[0], &clean, &v[1], &loss_cfg)
    })?;

    s.out.extend(pipeline_check(seed)?);
    Ok(s.out)
}

/// Combined-loss gradient of every parameter of a [`ModelConfig::gradcheck`]
/// network in training mode, one outcome per parameter tensor.
pub fn pipeline_check(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = ModelConfig::gradcheck();
    let model = Model::new(cfg.clone(), seed)?;
    let mut store = model.store().clone();
    let n = cfg.segment_len();
    let mut rng = SeedTree::new(seed).split("pipeline").rng();
    let noisy = AudioSegment::from_tensor(cfg.sample_rate, &Tensor::uniform(vec![cfg.channels, n], -1.0, 1.0, &mut rng))?;
    let clean_t = Tensor::uniform(vec![1, n], -1.0, 1.0, &mut rng).map(|v| v.signum() * (0.1 + v.abs()));
    let clean = AudioSegment::from_tensor(cfg.sample_rate, &clean_t)?;
    let clean_mag = stft(&clean, cfg.stft)?.magnitude();
    let loss_cfg = LossConfig::default();
    let reports = grad_check_params(
        &mut store,
        |g, store| {
            let ctx = Ctx::new(g, store, Mode::Train, SeedTree::new(seed).split("dropout"));
            let spec = stft(&noisy, cfg.stft)?;
            let (re, im) = (g.constant(spec.re), g.constant(spec.im));
            let f = model.forward_spec(&ctx, &re, &im, n)?;
            let est_mag = g.magnitude(&f.xe_re, &f.xe_im);
            combined_loss_var(g, &clean_mag, &est_mag, &clean_t, &f.output, &loss_cfg)
        },
        GradCheckOptions {
            max_elements: 16,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(reports
        .into_iter()
        .map(|(name, r)| CheckOutcome {
            name: format!("pipeline {name}"),
            max_rel_error: r.max_rel_error,
            tolerance: COMPOSITE_TOL,
        })
        .collect())
}
