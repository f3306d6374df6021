//! Mini-batch Adam training with validation-driven early stopping.

mod adam;
mod checkpoint;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Progress, MAGIC, VERSION};

use crate::data::{load_pairs, Manifest, Pair};
use crate::dsp::{stft, AudioSegment, StftConfig};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_var, mae_loss_var, LossConfig, LossVariant};
use crate::model::{apply_bn_updates, BnUpdate, Ctx, Mode, Model, ModelConfig};
use crate::numerics::{Graph, SeedTree, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Epochs without strict improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Items processed concurrently; results are reduced in item order so
    /// the outcome does not depend on it.
    pub jobs: usize,
    /// Keep batch-norm running statistics fixed during training.
    pub freeze_norm_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            patience: 10,
            max_epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            grad_clip: None,
            jobs: 1,
            freeze_norm_stats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(Error::config("batch_size and jobs must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.epsilon > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// A training pair with its targets precomputed.
#[derive(Clone, Debug)]
pub struct Example {
    pub noisy: AudioSegment,
    /// Reference channel of the clean signal, `[1, N]`.
    pub clean: Tensor,
    /// Its STFT magnitude, `[1, L, F]`.
    pub clean_mag: Tensor,
}

impl Example {
    /// Channel 0 of a multichannel clean signal is the reference.
    pub fn new(pair: &Pair, stft_cfg: StftConfig) -> Result<Self> {
        if pair.noisy.len() != pair.clean.len() {
            return Err(Error::input(format!(
                "noisy has {} samples, clean has {}",
                pair.noisy.len(),
                pair.clean.len()
            )));
        }
        let reference = pair.clean.select_channel(0)?;
        Ok(Self {
            noisy: pair.noisy.clone(),
            clean: reference.to_tensor(),
            clean_mag: stft(&reference, stft_cfg)?.magnitude(),
        })
    }
}

pub fn prepare(pairs: &[Pair], stft_cfg: StftConfig) -> Result<Vec<Example>> {
    pairs.iter().map(|p| Example::new(p, stft_cfg)).collect()
}

/// Training objective of one example on graph `g`.
pub fn example_loss(model: &Model, ctx: &Ctx, ex: &Example, cfg: &LossConfig) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let g = ctx.g;
    let f = model.forward(ctx, &ex.noisy)?;
    let loss = match cfg.variant {
        LossVariant::Mae => mae_loss_var(g, &ex.clean, &f.output)?,
        LossVariant::Combined => {
            let est_mag = g.magnitude(&f.xe_re, &f.xe_im);
            combined_loss_var(g, &ex.clean_mag, &est_mag, &ex.clean, &f.output, cfg)?
        }
    };
    let trace = vec![
        ("stage-1 mask", f.m1),
        ("stage-2 mask", f.m2),
        ("fused mask", f.mask),
        ("filtered spectrogram (re)", f.xf_re),
        ("filtered spectrogram (im)", f.xf_im),
        ("beamformed spectrogram (re)", f.xe_re),
        ("beamformed spectrogram (im)", f.xe_im),
        ("output waveform", f.output),
    ];
    Ok((loss, trace))
}

fn first_non_finite(trace: &[(&'static str, Var)], loss: &Var) -> Option<String> {
    trace
        .iter()
        .find(|(_, v)| !v.value().is_finite())
        .map(|(n, _)| n.to_string())
        .or_else(|| (!loss.value().is_finite()).then(|| "loss".to_string()))
}

/// Per-epoch log record, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot at the lowest monitored loss seen in this run.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

struct ItemResult {
    loss: f64,
    grads: Vec<Option<Tensor>>,
    bn: Vec<BnUpdate>,
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    progress: Progress,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let adam = AdamState::new(model.store());
        Ok(Self {
            model,
            cfg,
            adam,
            progress: Progress::default(),
        })
    }

    /// Continues from `ckpt`; `cfg` may change anything but the seed.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.seed != ckpt.train.seed {
            return Err(Error::config(format!(
                "resume seed {} differs from checkpoint seed {}",
                cfg.seed, ckpt.train.seed
            )));
        }
        Ok(Self {
            model: ckpt.build_model()?,
            cfg,
            adam: ckpt.adam.clone(),
            progress: ckpt.progress,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.cfg, &self.adam, self.progress)
    }

    fn item(&self, ex: &Example, stream: SeedTree, index: usize) -> Result<ItemResult> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, self.model.store(), Mode::Train, stream);
        let (loss, trace) = example_loss(&self.model, &ctx, ex, &self.cfg.loss)?;
        if let Some(name) = first_non_finite(&trace, &loss) {
            return Err(Error::NonFinite {
                tensor: format!("{name} (epoch {}, item {index})", self.progress.epochs_done),
            });
        }
        let grads = g.backward(&loss)?;
        let mut dense = vec![None; self.model.store().params().len()];
        for (id, t) in grads.params() {
            dense[id.0] = Some(t.clone());
        }
        let value = loss.value().item();
        drop(trace);
        Ok(ItemResult {
            loss: value,
            grads: dense,
            bn: ctx.into_bn_updates(),
        })
    }

    /// One pass over `train` in a seeded order, then validation.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::input("empty training set"));
        }
        let start = Instant::now();
        let epoch = self.progress.epochs_done;
        let root = SeedTree::new(self.cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut root.split("shuffle").split(epoch).rng());
        let dropout = root.split("dropout").split(epoch);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;

        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            self.model.store_mut().zero_grad();
            let mut bn = Vec::new();
            for wave in batch.chunks(self.cfg.jobs) {
                let results: Vec<Result<ItemResult>> = if self.cfg.jobs == 1 {
                    wave.iter().map(|&i| self.item(&train[i], dropout.split(i), i)).collect()
                } else {
                    pool.install(|| {
                        wave.par_iter()
                            .map(|&i| self.item(&train[i], dropout.split(i), i))
                            .collect()
                    })
                };
                for r in results {
                    let r = r?;
                    total += r.loss;
                    for (p, g) in self.model.store_mut().params_mut().iter_mut().zip(&r.grads) {
                        if let Some(g) = g {
                            p.grad.add_assign(g);
                        }
                    }
                    bn.extend(r.bn);
                }
            }
            let store = self.model.store_mut();
            store.scale_grads(1.0 / batch.len() as f64);
            if let Some(p) = store.params().iter().find(|p| !p.grad.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("gradient of {} (epoch {epoch})", p.name),
                });
            }
            if let Some(clip) = self.cfg.grad_clip {
                let norm = store.grad_norm();
                if norm > clip {
                    store.scale_grads(clip / norm);
                }
            }
            adam_step(store, &mut self.adam, self.cfg.learning_rate, &self.cfg.adam);
            if !self.cfg.freeze_norm_stats {
                apply_bn_updates(store, &bn);
            }
            store.round_to_f32();
            if let Some(p) = store.params().iter().find(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("parameter {} after update (epoch {epoch})", p.name),
                });
            }
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(self.evaluate(val)?) };

        let monitored = val_loss.unwrap_or(train_loss);
        if monitored < self.progress.best_loss {
            self.progress.best_loss = monitored;
            self.progress.since_best = 0;
        } else {
            self.progress.since_best += 1;
        }
        self.progress.epochs_done += 1;
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: self.cfg.learning_rate,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Mean eval-mode loss over `set`.
    pub fn evaluate(&self, set: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for (i, ex) in set.iter().enumerate() {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, self.model.store(), Mode::Eval, SeedTree::new(0));
            let (loss, trace) = example_loss(&self.model, &ctx, ex, &self.cfg.loss)?;
            if let Some(name) = first_non_finite(&trace, &loss) {
                return Err(Error::NonFinite {
                    tensor: format!("{name} (validation item {i})"),
                });
            }
            total += loss.value().item();
        }
        Ok(total / set.len() as f64)
    }

    pub fn should_stop(&self) -> bool {
        self.progress.since_best >= self.cfg.patience
    }

    /// Trains until `max_epochs` or early stopping, calling `on_epoch`
    /// after each epoch.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut best = None;
        let mut stopped_early = false;
        while self.progress.epochs_done < self.cfg.max_epochs {
            if self.should_stop() {
                stopped_early = true;
                break;
            }
            let rec = self.run_epoch(train, val)?;
            on_epoch(&rec)?;
            if self.progress.since_best == 0 {
                best = Some(self.checkpoint());
            }
            history.push(rec);
        }
        if self.should_stop() {
            stopped_early = true;
        }
        Ok(TrainOutcome {
            history,
            best,
            last: self.checkpoint(),
            stopped_early,
        })
    }
}

/// Appends one JSON line per record.
pub struct JsonLog {
    file: std::fs::File,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::input(format!("log record: {e}")))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// Loads both manifests and trains from scratch.
pub fn train(
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let stft_cfg = model_cfg.stft;
    let train_set = prepare(&load_pairs(train_manifest)?, stft_cfg)?;
    let val_set = prepare(&load_pairs(val_manifest)?, stft_cfg)?;
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    trainer.fit(&train_set, &val_set, &mut on_epoch)
}

#[cfg(test)]
mod tests;
