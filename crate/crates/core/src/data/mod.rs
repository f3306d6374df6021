//! WAV I/O, synthetic scene generation and dataset manifests.

mod manifest;
mod scene;
mod wav;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manifest::{build_manifest, split_manifest, Manifest, ManifestEntry, Split};
pub use scene::{
    convolve, make_scene, measured_snr_db, synth_noise, synth_rir, synth_scene, synth_speech, Scene, SceneSpec,
};
pub use wav::{read_wav, wav_info, write_wav, WavEncoding};

use crate::dsp::{segment_samples, AudioSegment};
use crate::error::{Error, Result};
use crate::numerics::SeedTree;

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub items: usize,
    pub seconds: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub seed: u64,
    /// Fraction of items in the training split.
    pub train_ratio: f64,
    /// Template for every scene; its seed and SNR are overridden per item.
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            items: 24,
            seconds: 4.792,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            seed: 0,
            train_ratio: 0.8,
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Scene spec of item `i`: seed and SNR drawn from the dataset stream.
    pub fn item_spec(&self, i: usize) -> SceneSpec {
        let stream = SeedTree::new(self.seed).split("item").split(i);
        let snr = if self.snr_db_max > self.snr_db_min {
            rand::Rng::gen_range(&mut stream.split("snr").rng(), self.snr_db_min..self.snr_db_max)
        } else {
            self.snr_db_min
        };
        SceneSpec {
            seed: stream.seed(),
            snr_db: snr,
            ..self.scene.clone()
        }
    }

    pub fn samples(&self) -> usize {
        segment_samples(self.seconds, self.scene.sample_rate)
    }
}

/// Generates every item of `cfg` in memory.
pub fn synth_dataset(cfg: &DatasetConfig) -> Result<Vec<(SceneSpec, Scene)>> {
    if cfg.items == 0 || cfg.samples() == 0 {
        return Err(Error::config("dataset needs at least one item of positive length"));
    }
    (0..cfg.items)
        .map(|i| {
            let spec = cfg.item_spec(i);
            let scene = synth_scene(&spec, cfg.samples())?;
            Ok((spec, scene))
        })
        .collect()
}

/// Writes `<i>_noisy.wav` / `<i>_clean.wav` pairs (32-bit float) plus
/// `all.tsv`, `train.tsv` and `val.tsv` into `dir`.
pub fn write_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Split> {
    std::fs::create_dir_all(dir)?;
    let mut all = Manifest::default();
    for (i, (spec, scene)) in synth_dataset(cfg)?.into_iter().enumerate() {
        let noisy = dir.join(format!("{i:04}_noisy.wav"));
        let clean = dir.join(format!("{i:04}_clean.wav"));
        write_wav(&noisy, &scene.noisy, WavEncoding::Float32)?;
        write_wav(&clean, &scene.target, WavEncoding::Float32)?;
        all.entries.push(ManifestEntry {
            noisy,
            clean,
            samples: scene.target.len(),
            snr_db: Some(spec.snr_db),
            seed: Some(spec.seed),
        });
    }
    all.write(&dir.join("all.tsv"))?;
    let split = split_manifest(&all, cfg.train_ratio, cfg.seed)?;
    split.train.write(&dir.join("train.tsv"))?;
    split.val.write(&dir.join("val.tsv"))?;
    Ok(split)
}

/// A loaded `(noisy, clean)` pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub noisy: AudioSegment,
    pub clean: AudioSegment,
}

pub fn load_pairs(manifest: &Manifest) -> Result<Vec<Pair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let noisy = read_wav(&e.noisy)?;
            let clean = read_wav(&e.clean)?;
            if noisy.len() != clean.len() || noisy.rate() != clean.rate() {
                return Err(Error::input(format!(
                    "{} and {} differ in length or rate",
                    e.noisy.display(),
                    e.clean.display()
                )));
            }
            Ok(Pair { noisy, clean })
        })
        .collect()
}
