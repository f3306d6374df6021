use serde::{Deserialize, Serialize};

use crate::dsp::{segment_samples, StftConfig, DEFAULT_RATE, DEFAULT_SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::numerics::LayerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamActivation {
    LeakyRelu,
    Identity,
}

/// Weight initialization. Conv and linear weights and biases are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, LSTM tensors from
/// `U(-1/sqrt(H), 1/sqrt(H))`; norm scales start at 1, shifts at 0, PReLU
/// slopes at 0.25 and attention logits at 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    KaimingUniformFanIn,
}

/// Every architectural hyperparameter of the two-stage network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub sample_rate: u32,
    pub segment_seconds: f64,
    pub stft: StftConfig,
    /// Encoder convolutions, shallowest first. Decoder blocks mirror them.
    pub encoder: Vec<LayerSpec>,
    pub leaky_slope: f64,
    pub dprnn_modules: usize,
    /// Hidden units per LSTM direction; also the DPRNN working width.
    pub bilstm_hidden: usize,
    pub groupnorm_groups: usize,
    pub attention_inputs: usize,
    pub beam_hidden: usize,
    pub beam_activation: BeamActivation,
    pub dropout: f64,
    pub mask_activation: MaskActivation,
    pub init: InitScheme,
}

/// The ten encoder convolutions of the reference network for `c` input
/// channels.
pub fn reference_encoder(c: usize) -> Vec<LayerSpec> {
    [
        (c, 32, (7, 1), (1, 1)),
        (32, 32, (1, 7), (1, 1)),
        (32, 32, (8, 6), (2, 2)),
        (32, 64, (7, 6), (1, 1)),
        (64, 64, (6, 5), (2, 2)),
        (64, 96, (5, 5), (1, 1)),
        (96, 96, (6, 3), (2, 2)),
        (96, 96, (5, 3), (1, 1)),
        (96, 128, (6, 3), (2, 1)),
        (128, 256, (5, 3), (1, 1)),
    ]
    .into_iter()
    .map(|(i, o, k, s)| LayerSpec::conv(i, o, k, s))
    .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            sample_rate: DEFAULT_RATE,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
            stft: StftConfig::default(),
            encoder: reference_encoder(4),
            leaky_slope: 0.01,
            dprnn_modules: 4,
            bilstm_hidden: 128,
            groupnorm_groups: 8,
            attention_inputs: 2,
            beam_hidden: 128,
            beam_activation: BeamActivation::LeakyRelu,
            dropout: 0.1,
            mask_activation: MaskActivation::Sigmoid,
            init: InitScheme::KaimingUniformFanIn,
        }
    }
}

impl ModelConfig {
    /// Same kernels and strides as the reference encoder with every width
    /// divided by `divisor` (at least 1 channel), and a narrower DPRNN and
    /// beamformer. Intended for toy training runs.
    pub fn miniature(channels: usize, divisor: usize) -> Self {
        let mut encoder = reference_encoder(channels);
        for (i, layer) in encoder.iter_mut().enumerate() {
            if i > 0 {
                layer.in_channels = (layer.in_channels / divisor).max(1);
            }
            layer.out_channels = (layer.out_channels / divisor).max(1);
        }
        let hidden = (128 / divisor).max(8);
        Self {
            channels,
            encoder,
            bilstm_hidden: hidden,
            groupnorm_groups: if hidden % 8 == 0 { 8 } else { 1 },
            beam_hidden: hidden,
            ..Self::default()
        }
    }

    /// A few-element network (2 channels, 16-sample segments, 8-sample
    /// window) small enough for finite-difference checks of every
    /// parameter.
    pub fn gradcheck() -> Self {
        Self {
            channels: 2,
            sample_rate: 16_000,
            segment_seconds: 0.001,
            stft: StftConfig { window: 8, hop: 2 },
            encoder: vec![LayerSpec::conv(2, 3, (3, 2), (2, 2)), LayerSpec::conv(3, 4, (2, 2), (1, 1))],
            dprnn_modules: 2,
            bilstm_hidden: 4,
            groupnorm_groups: 2,
            beam_hidden: 3,
            ..Self::default()
        }
    }

    pub fn segment_len(&self) -> usize {
        segment_samples(self.segment_seconds, self.sample_rate)
    }

    pub fn frames(&self) -> Result<usize> {
        self.stft.frames(self.segment_len()).ok_or_else(|| {
            Error::config(format!(
                "segment of {} samples is shorter than the {}-sample window",
                self.segment_len(),
                self.stft.window
            ))
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.out_channels)
    }

    /// Spatial extents `(H, W)` after each encoder block for a `(frames,
    /// bins)` input.
    pub fn encoder_extents(&self, frames: usize, bins: usize) -> Vec<(usize, usize)> {
        let mut hw = (frames, bins);
        self.encoder
            .iter()
            .map(|l| {
                hw = l.output_hw(hw.0, hw.1);
                hw
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.channels == 0 {
            return Err(Error::config("channels must be at least 1"));
        }
        if self.encoder.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        let mut c = self.channels;
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.validate()?;
            if layer.in_channels != c {
                return Err(Error::config(format!(
                    "encoder layer {i} takes {} channels but receives {c}",
                    layer.in_channels
                )));
            }
            c = layer.out_channels;
        }
        if self.sample_rate == 0 || !(self.segment_seconds > 0.0) {
            return Err(Error::config("sample rate and segment length must be positive"));
        }
        self.frames()?;
        if self.bilstm_hidden == 0 || self.beam_hidden == 0 || self.attention_inputs == 0 {
            return Err(Error::config("hidden sizes and attention input count must be positive"));
        }
        if self.groupnorm_groups == 0 || self.bilstm_hidden % self.groupnorm_groups != 0 {
            return Err(Error::config(format!(
                "{} group-norm groups do not divide {} channels",
                self.groupnorm_groups, self.bilstm_hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky slope must be finite"));
        }
        Ok(())
    }
}
