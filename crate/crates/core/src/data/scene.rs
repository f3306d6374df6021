//! Desk-scale semi-synthetic scenes: dry source convolved with a sparse
//! multichannel impulse response, plus spatialized noise at a set SNR.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioSegment;
use crate::error::{Error, Result};
use crate::numerics::{SeedTree, Tensor};

/// Geometry and acoustics of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub channels: usize,
    pub sample_rate: u32,
    pub rir_len: usize,
    /// Energy decays as `exp(-6.9 t / rt60)`; zero gives a dry response.
    pub rt60: f64,
    /// Direct-path delay of each channel, in samples.
    pub delays: Vec<usize>,
    /// Maximum per-channel offset of shared reflection times, in samples.
    pub jitter: usize,
    /// Probability that a sample after the direct path carries a reflection.
    pub tap_density: f64,
    /// RMS amplitude of the first reflections relative to the direct tap.
    pub reflection_gain: f64,
    pub snr_db: f64,
    /// Synthetic source and noise when true; otherwise the caller supplies
    /// recordings.
    pub synthetic: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 4,
            sample_rate: 16_000,
            rir_len: 4096,
            rt60: 0.4,
            delays: vec![0, 3, 6, 9],
            jitter: 2,
            tap_density: 0.05,
            reflection_gain: 0.5,
            snr_db: 5.0,
            synthetic: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.delays.len() != self.channels {
            return Err(Error::config(format!(
                "{} delays for {} channels",
                self.delays.len(),
                self.channels
            )));
        }
        let max_delay = self.delays.iter().copied().max().unwrap_or(0);
        if self.rir_len < max_delay + 1 {
            return Err(Error::config(format!(
                "rir length {} cannot hold a direct path at {max_delay}",
                self.rir_len
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr must be finite"));
        }
        if !(self.rt60 >= 0.0) || !(0.0..=1.0).contains(&self.tap_density) || !(self.reflection_gain >= 0.0) {
            return Err(Error::config("rt60, tap density and reflection gain must be non-negative"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(())
    }

    /// Expected reflection energy at `t` samples after the direct path.
    pub fn envelope(&self, t: f64) -> f64 {
        if self.rt60 == 0.0 {
            return 0.0;
        }
        let secs = t / self.sample_rate as f64;
        self.reflection_gain.powi(2) * (-6.9 * secs / self.rt60).exp()
    }
}

/// `[C, rir_len]` impulse responses: a unit direct tap at each channel's
/// delay, then sparse Gaussian reflections at shared times (jittered per
/// channel) whose energy follows [`SceneSpec::envelope`].
pub fn synth_rir(spec: &SceneSpec, stream: SeedTree) -> Result<Tensor> {
    spec.validate()?;
    let (c, len) = (spec.channels, spec.rir_len);
    let mut rir = Tensor::zeros(vec![c, len]);
    for (ch, &d) in spec.delays.iter().enumerate() {
        rir.set(&[ch, d], 1.0);
    }
    if spec.rt60 == 0.0 || spec.tap_density == 0.0 {
        return Ok(rir);
    }
    let mut times = stream.split("times").rng();
    let mut amps = stream.split("amplitudes").rng();
    let j = spec.jitter as i64;
    for base in 1..len {
        if times.gen::<f64>() >= spec.tap_density {
            continue;
        }
        for (ch, &d) in spec.delays.iter().enumerate() {
            let offset = if j > 0 { times.gen_range(-j..=j) } else { 0 };
            let t = (d + base) as i64 + offset;
            if t <= d as i64 || t >= len as i64 {
                continue;
            }
            let lag = (t as usize - d) as f64;
            let a: f64 = StandardNormal.sample(&mut amps);
            let idx = ch * len + t as usize;
            rir.data_mut()[idx] += a * spec.envelope(lag).sqrt();
        }
    }
    Ok(rir)
}

/// First `out_len` samples of the linear convolution `x ∗ h`, via FFT.
pub fn convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b = vec![Complex::new(0.0, 0.0); n];
        for (d, s) in b.iter_mut().zip(v) {
            d.re = *s;
        }
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { a[i].re * scale } else { 0.0 })
        .collect()
}

/// A noisy multichannel mixture and its dry target.
#[derive(Clone, Debug)]
pub struct Scene {
    pub noisy: AudioSegment,
    pub target: AudioSegment,
    /// Reverberant speech component of `noisy`.
    pub reverberant: AudioSegment,
    /// Noise gain applied to the spatialized noise.
    pub noise_gain: f64,
}

/// `noisy_c = clean ∗ rir_c + g · noise ∗ rir'_c`, with `g` chosen so the
/// reverberant-speech to noise energy ratio (all channels) equals
/// `spec.snr_db`. Noise is cropped or zero-padded to the clean length.
pub fn make_scene(clean: &AudioSegment, noise: &AudioSegment, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    if clean.num_channels() != 1 || noise.num_channels() != 1 {
        return Err(Error::input("make_scene expects mono clean and noise signals"));
    }
    if clean.energy() == 0.0 {
        return Err(Error::input("clean signal is silent"));
    }
    let n = clean.len();
    let noise = noise.resized(n)?;
    let stream = SeedTree::new(spec.seed);
    let rir = synth_rir(spec, stream.split("speech_rir"))?;
    let mut noise_spec = spec.clone();
    // the noise arrives from another direction: reversed delay order
    noise_spec.delays.reverse();
    let noise_rir = synth_rir(&noise_spec, stream.split("noise_rir"))?;
    let len = spec.rir_len;
    let speech: Vec<Vec<f64>> = (0..spec.channels)
        .map(|c| convolve(clean.channel(0), &rir.data()[c * len..(c + 1) * len], n))
        .collect();
    let spatial: Vec<Vec<f64>> = (0..spec.channels)
        .map(|c| convolve(noise.channel(0), &noise_rir.data()[c * len..(c + 1) * len], n))
        .collect();
    let e_speech: f64 = speech.iter().flatten().map(|v| v * v).sum();
    let e_noise: f64 = spatial.iter().flatten().map(|v| v * v).sum();
    let gain = if e_noise == 0.0 {
        0.0
    } else {
        (e_speech / (e_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt()
    };
    let noisy = speech
        .iter()
        .zip(&spatial)
        .map(|(s, v)| s.iter().zip(v).map(|(a, b)| a + gain * b).collect())
        .collect();
    Ok(Scene {
        noisy: AudioSegment::new(clean.rate(), noisy)?,
        target: clean.clone(),
        reverberant: AudioSegment::new(clean.rate(), speech)?,
        noise_gain: gain,
    })
}

/// Speech-like source: a sequence of voiced syllables (harmonic complexes
/// with gliding pitch, band-limited to 100–4000 Hz, raised-sine amplitude
/// envelopes) separated by short pauses. Peak-normalized to 0.5.
pub fn synth_speech(n: usize, rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let fs = rate as f64;
    let mut pos = 0usize;
    while pos < n {
        let syllable = (rng.gen_range(0.12..0.35) * fs) as usize;
        let pause = (rng.gen_range(0.03..0.15) * fs) as usize;
        let f0 = rng.gen_range(90.0..240.0);
        let glide = rng.gen_range(-0.3..0.3);
        // two formant-like emphasis regions
        let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2500.0)];
        let mut phase = 0.0;
        for i in 0..syllable.min(n - pos) {
            let u = i as f64 / syllable as f64;
            let f = f0 * (1.0 + glide * u);
            phase += 2.0 * PI * f / fs;
            let env = (PI * u).sin().powi(2);
            let mut v = 0.0;
            let mut h = 1.0;
            while h * f < 4000.0 {
                if h * f >= 100.0 {
                    let hf = h * f;
                    let emphasis: f64 = formants
                        .iter()
                        .map(|&fm| (-((hf - fm) / 250.0).powi(2)).exp())
                        .sum::<f64>()
                        + 0.1;
                    v += emphasis * (h * phase).sin() / h;
                }
                h += 1.0;
            }
            out[pos + i] = env * v;
        }
        pos += syllable + pause;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Colored noise: white Gaussian noise through a one-pole low-pass with a
/// random pole, plus a weak random hum. Unit RMS.
pub fn synth_noise(n: usize, rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let pole = rng.gen_range(0.0..0.95);
    let hum_f = rng.gen_range(50.0..400.0);
    let hum_a = rng.gen_range(0.0..0.3);
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(rng);
            state = pole * state + (1.0 - pole) * w;
            state + hum_a * (2.0 * PI * hum_f * i as f64 / rate as f64).sin()
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Fully synthetic scene of `n` samples, reproducible from `spec.seed`.
pub fn synth_scene(spec: &SceneSpec, n: usize) -> Result<Scene> {
    let stream = SeedTree::new(spec.seed);
    let clean = synth_speech(n, spec.sample_rate, &mut stream.split("source").rng());
    let noise = synth_noise(n, spec.sample_rate, &mut stream.split("noise").rng());
    make_scene(
        &AudioSegment::mono(spec.sample_rate, clean)?,
        &AudioSegment::mono(spec.sample_rate, noise)?,
        spec,
    )
}

/// Reverberant-speech to noise ratio of a scene, in dB.
pub fn measured_snr_db(scene: &Scene) -> f64 {
    let noise: f64 = scene
        .noisy
        .channels()
        .iter()
        .zip(scene.reverberant.channels())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)))
        .sum();
    10.0 * (scene.reverberant.energy() / noise).log10()
}
