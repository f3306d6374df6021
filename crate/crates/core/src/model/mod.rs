//! The two-stage masking network.
//!
//! ```text
//! X   = STFT(s)
//! M1  = dec1(dprnn(enc1(|X|)))        Xf = X ⊙ M1
//! M2  = dec2(enc2(|Xf|))
//! M   = attn_mask(M1, M2)             X̂ = attn_signal(X, Xf)
//! Xe  = beamform(X̂ ⊙ M)               ŝ = iSTFT(Xe)
//! ```
//!
//! Parameters live in a [`ParamStore`] owned by [`Model`]; every forward
//! pass binds them into a fresh [`Graph`] through a [`Ctx`].

mod config;
mod dprnn;
mod fusion;
mod unet;

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use config::{reference_encoder, BeamActivation, InitScheme, MaskActivation, ModelConfig};
pub use dprnn::{dprnn_block, DprnnModule};
pub use fusion::{attention_fuse, beam_features, beamform, softmax_columns, BeamVars};
pub use unet::{decode, encode, AutoEncoder, ConvBlock};

use crate::dsp::{istft_var, stft, AudioSegment};
use crate::error::{Error, Result};
use crate::numerics::norm::update_running;
use crate::numerics::{
    BatchStats, BufferId, Graph, LstmWeights, ParamId, ParamStore, SeedTree, Tensor, Var, BN_MOMENTUM,
    NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Batch-norm parameter and running-statistic handles.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

/// Running-statistic update produced by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

/// LSTM handles for one direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// One forward pass: the graph, read access to parameters, the mode and the
/// dropout stream. Batch-norm updates are collected, not applied.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, mode: Mode, stream: SeedTree) -> Self {
        Self {
            g,
            store,
            mode,
            rng: RefCell::new(stream.rng()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.store.bind(self.g, id)
    }

    pub fn lstm(&self, ids: &LstmIds) -> LstmWeights {
        LstmWeights {
            w_ih: self.p(ids.w_ih),
            w_hh: self.p(ids.w_hh),
            bias: self.p(ids.bias),
        }
    }

    pub fn batchnorm(&self, x: &Var, bn: &BnIds) -> Result<Var> {
        let training = self.mode == Mode::Train;
        let (y, stats) = self.g.batchnorm2d(
            x,
            &self.p(bn.gamma),
            &self.p(bn.beta),
            &self.store.buffer(bn.running_mean).value,
            &self.store.buffer(bn.running_var).value,
            training,
            NORM_EPS,
        )?;
        if let Some(stats) = stats {
            self.bn_updates.borrow_mut().push(BnUpdate {
                mean: bn.running_mean,
                var: bn.running_var,
                stats,
            });
        }
        Ok(y)
    }

    pub fn dropout(&self, x: &Var, rate: f64) -> Result<Var> {
        self.g
            .dropout(x, rate, self.mode == Mode::Train, &mut *self.rng.borrow_mut())
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates.into_inner()
    }
}

/// Folds collected batch statistics into the running estimates, in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        update_running(&mut store.buffer_mut(u.mean).value, &u.stats.mean, BN_MOMENTUM);
        update_running(&mut store.buffer_mut(u.var).value, &u.stats.var, BN_MOMENTUM);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BeamIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Every intermediate of [`Model::forward_spec`].
pub struct Forward {
    pub m1: Var,
    pub m2: Var,
    pub mask: Var,
    pub xf_re: Var,
    pub xf_im: Var,
    pub xe_re: Var,
    pub xe_im: Var,
    /// `[1, N]` enhanced signal.
    pub output: Var,
}

/// Architecture handles plus the parameter store.
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stages: [AutoEncoder; 2],
    dprnn: Vec<DprnnModule>,
    mask_attention: ParamId,
    signal_attention: ParamId,
    beam: BeamIds,
}

/// Draws parameter values; each tensor gets its own stream keyed by name.
pub(crate) struct Init<'a> {
    store: &'a mut ParamStore,
    root: SeedTree,
}

impl Init<'_> {
    pub(crate) fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let mut rng = self.root.split(name).rng();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.store.add_param(name, Tensor::from_parts(shape, data))
    }

    pub(crate) fn fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub(crate) fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.store.add_param(name, Tensor::full(shape, value))
    }

    pub(crate) fn batchnorm(&mut self, prefix: &str, c: usize) -> BnIds {
        BnIds {
            gamma: self.constant(&format!("{prefix}.gamma"), vec![c], 1.0),
            beta: self.constant(&format!("{prefix}.beta"), vec![c], 0.0),
            running_mean: self.store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![c])),
            running_var: self.store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(vec![c])),
        }
    }

    pub(crate) fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmIds {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmIds {
            w_ih: self.uniform(&format!("{prefix}.w_ih"), vec![4 * hidden, input], bound),
            w_hh: self.uniform(&format!("{prefix}.w_hh"), vec![4 * hidden, hidden], bound),
            bias: self.uniform(&format!("{prefix}.bias"), vec![4 * hidden], bound),
        }
    }
}

impl Model {
    /// Builds the network with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.attention_inputs != 2 {
            return Err(Error::config(format!(
                "the two-stage pipeline fuses 2 inputs, config asks for {}",
                cfg.attention_inputs
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            root: SeedTree::new(seed).split("init"),
        };
        let stages = [
            AutoEncoder::new(&mut init, "ae1", &cfg.encoder),
            AutoEncoder::new(&mut init, "ae2", &cfg.encoder),
        ];
        let dprnn = (0..cfg.dprnn_modules)
            .map(|m| DprnnModule::new(&mut init, &format!("dprnn{m}"), &cfg))
            .collect();
        let n = cfg.attention_inputs;
        let mask_attention = init.constant("attention.mask.logits", vec![n, cfg.channels], 0.0);
        let signal_attention = init.constant("attention.signal.logits", vec![n, cfg.channels], 0.0);
        let d = 2 * cfg.channels + 1;
        let h = cfg.beam_hidden;
        let beam = BeamIds {
            w1: init.fan_in("beam.fc1.weight", vec![h, d], d),
            b1: init.fan_in("beam.fc1.bias", vec![h], d),
            w2: init.fan_in("beam.fc2.weight", vec![2, h], h),
            b2: init.fan_in("beam.fc2.bias", vec![2], h),
        };
        store.round_to_f32();
        Ok(Self {
            cfg,
            store,
            stages,
            dprnn,
            mask_attention,
            signal_attention,
            beam,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stage(&self, i: usize) -> &AutoEncoder {
        &self.stages[i]
    }

    pub fn dprnn(&self) -> &[DprnnModule] {
        &self.dprnn
    }

    pub fn attention_ids(&self) -> (ParamId, ParamId) {
        (self.mask_attention, self.signal_attention)
    }

    pub fn beam_ids(&self) -> BeamIds {
        self.beam
    }

    fn mask(&self, ctx: &Ctx, stage: usize, mag: &Var, with_dprnn: bool) -> Result<Var> {
        let (latent, skips) = encode(ctx, &self.stages[stage], mag, self.cfg.leaky_slope)?;
        let latent = if with_dprnn {
            dprnn_block(ctx, &self.dprnn, &latent, &self.cfg)?
        } else {
            latent
        };
        decode(ctx, &self.stages[stage], &latent, &skips, mag.shape(), &self.cfg)
    }

    /// Full pipeline from a multichannel spectrogram (`[C, L, F]` planes) to
    /// `out_len` enhanced samples.
    pub fn forward_spec(&self, ctx: &Ctx, re: &Var, im: &Var, out_len: usize) -> Result<Forward> {
        let g = ctx.g;
        if re.shape().first() != Some(&self.cfg.channels) {
            return Err(Error::shape(
                "two_stage_forward",
                format!("spectrogram {:?} for a {}-channel model", re.shape(), self.cfg.channels),
            ));
        }
        let mag = g.magnitude(re, im);
        let m1 = self.mask(ctx, 0, &mag, true)?;
        let xf_re = g.mul(re, &m1);
        let xf_im = g.mul(im, &m1);
        let xf_mag = g.magnitude(&xf_re, &xf_im);
        let m2 = self.mask(ctx, 1, &xf_mag, false)?;

        let mask_logits = ctx.p(self.mask_attention);
        let mask = attention_fuse(g, &mask_logits, &[&m1, &m2])?;
        let sig_logits = ctx.p(self.signal_attention);
        let xh_re = attention_fuse(g, &sig_logits, &[re, &xf_re])?;
        let xh_im = attention_fuse(g, &sig_logits, &[im, &xf_im])?;
        let xm_re = g.mul(&xh_re, &mask);
        let xm_im = g.mul(&xh_im, &mask);

        let beam = BeamVars {
            w1: ctx.p(self.beam.w1),
            b1: ctx.p(self.beam.b1),
            w2: ctx.p(self.beam.w2),
            b2: ctx.p(self.beam.b2),
        };
        let feats = beam_features(g, &xm_re, &xm_im)?;
        let (xe_re, xe_im) = beamform(
            g,
            &feats,
            &beam,
            self.cfg.beam_activation,
            self.cfg.leaky_slope,
            |h| ctx.dropout(h, self.cfg.dropout),
        )?;
        let output = istft_var(g, &xe_re, &xe_im, self.cfg.stft, out_len)?;
        Ok(Forward {
            m1,
            m2,
            mask,
            xf_re,
            xf_im,
            xe_re,
            xe_im,
            output,
        })
    }

    /// [`forward_spec`](Self::forward_spec) on the STFT of `seg`.
    pub fn forward(&self, ctx: &Ctx, seg: &AudioSegment) -> Result<Forward> {
        if seg.num_channels() != self.cfg.channels {
            return Err(Error::input(format!(
                "{}-channel audio for a {}-channel model",
                seg.num_channels(),
                self.cfg.channels
            )));
        }
        let spec = stft(seg, self.cfg.stft)?;
        let re = ctx.g.constant(spec.re);
        let im = ctx.g.constant(spec.im);
        self.forward_spec(ctx, &re, &im, seg.len())
    }

    /// Eval-mode enhancement of one segment, returning mono audio.
    pub fn enhance(&self, seg: &AudioSegment) -> Result<AudioSegment> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store, Mode::Eval, SeedTree::new(0));
        let out = self.forward(&ctx, seg)?;
        AudioSegment::from_tensor(seg.rate(), out.output.value())
    }
}
