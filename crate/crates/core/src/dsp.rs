//! STFT analysis / least-squares iSTFT synthesis and segmentation.
//!
//! Frames use a periodic Hann window without centre padding, so a signal of
//! `N` samples yields `1 + (N - W) / H` frames and `W / 2 + 1` one-sided
//! bins. Synthesis is weighted overlap-add divided by the summed squared
//! window, which inverts the analysis exactly wherever that sum is not
//! negligible.

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_RATE: u32 = 16_000;
pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_HOP: usize = 128;
pub const DEFAULT_SEGMENT_SECONDS: f64 = 4.792;

/// Samples whose summed squared window falls below this are set to zero.
const WINDOW_SUM_FLOOR: f64 = 1e-8;

/// Multichannel time-domain audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSegment {
    rate: u32,
    channels: Vec<Vec<f64>>,
}

impl AudioSegment {
    pub fn new(rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.is_empty() || n == 0 {
            return Err(Error::input("audio needs at least one channel and one sample"));
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::input("audio channels differ in length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("audio contains non-finite samples"));
        }
        if rate == 0 {
            return Err(Error::input("sample rate must be positive"));
        }
        Ok(Self { rate, channels })
    }

    pub fn mono(rate: u32, samples: Vec<f64>) -> Result<Self> {
        Self::new(rate, vec![samples])
    }

    pub fn silence(rate: u32, channels: usize, samples: usize) -> Result<Self> {
        Self::new(rate, vec![vec![0.0; samples]; channels])
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|v| v * v).sum()
    }

    /// `[C, N]` tensor view of the samples.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.num_channels(), self.len()],
            self.channels.concat(),
        )
    }

    pub fn from_tensor(rate: u32, t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("audio", format!("expected [C, N], got {:?}", t.shape())));
        }
        let n = t.shape()[1];
        Self::new(rate, t.data().chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// Copy with `len` samples: truncated or zero-padded at the end.
    pub fn resized(&self, len: usize) -> Result<Self> {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.resize(len, 0.0);
                c
            })
            .collect();
        Self::new(self.rate, channels)
    }

    pub fn select_channel(&self, c: usize) -> Result<Self> {
        Self::mono(self.rate, self.channels[c].clone())
    }
}

/// Complex STFT with separate real and imaginary `[C, L, F]` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrogram {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() || re.rank() != 3 {
            return Err(Error::shape(
                "spectrogram",
                format!("planes {:?} / {:?} must both be [C, L, F]", re.shape(), im.shape()),
            ));
        }
        Ok(Self { re, im })
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[2]
    }

    /// `|X| = sqrt(re² + im²)`.
    pub fn magnitude(&self) -> Tensor {
        self.re.zip_map(&self.im, f64::hypot)
    }

    /// Scales both planes by a real mask of the same shape.
    pub fn mul_real(&self, mask: &Tensor) -> Result<Self> {
        if mask.shape() != self.re.shape() {
            return Err(Error::shape(
                "complex_mul_real",
                format!("mask {:?} for spectrogram {:?}", mask.shape(), self.re.shape()),
            ));
        }
        Ok(Self {
            re: self.re.zip_map(mask, |a, m| a * m),
            im: self.im.zip_map(mask, |a, m| a * m),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::config(format!("window {} must be even and >= 2", self.window)));
        }
        if self.hop == 0 || self.hop > self.window {
            return Err(Error::config(format!("hop {} must be in 1..={}", self.hop, self.window)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frame count for `n` samples, or `None` when `n < window`.
    pub fn frames(&self, n: usize) -> Option<usize> {
        (n >= self.window).then(|| 1 + (n - self.window) / self.hop)
    }

    /// Periodic Hann window.
    pub fn hann(&self) -> Vec<f64> {
        let w = self.window as f64;
        (0..self.window)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / w).cos())
            .collect()
    }

    /// Summed squared window at every output sample for `frames` frames.
    fn window_sum(&self, frames: usize, out_len: usize) -> Vec<f64> {
        let win = self.hann();
        let mut sum = vec![0.0; out_len];
        for l in 0..frames {
            for (m, w) in win.iter().enumerate() {
                if let Some(s) = sum.get_mut(l * self.hop + m) {
                    *s += w * w;
                }
            }
        }
        sum
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Windowed one-sided STFT of every channel.
pub fn stft(seg: &AudioSegment, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = seg.len();
    let frames = cfg
        .frames(n)
        .ok_or_else(|| Error::input(format!("{n} samples is shorter than the {}-sample window", cfg.window)))?;
    let bins = cfg.bins();
    let c = seg.num_channels();
    let win = cfg.hann();
    let fft = plans(cfg.window).forward;
    let mut re = vec![0.0; c * frames * bins];
    let mut im = vec![0.0; c * frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for (ci, x) in seg.channels().iter().enumerate() {
        for l in 0..frames {
            for (m, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(win[m] * x[l * cfg.hop + m], 0.0);
            }
            fft.process(&mut buf);
            let base = (ci * frames + l) * bins;
            for k in 0..bins {
                re[base + k] = buf[k].re;
                im[base + k] = buf[k].im;
            }
        }
    }
    ComplexSpectrogram::new(
        Tensor::from_parts(vec![c, frames, bins], re),
        Tensor::from_parts(vec![c, frames, bins], im),
    )
}

fn check_synthesis(cfg: StftConfig, frames: usize, bins: usize, out_len: usize) -> Result<()> {
    cfg.validate()?;
    if bins != cfg.bins() {
        return Err(Error::shape("istft", format!("{bins} bins for a {}-sample window", cfg.window)));
    }
    if cfg.frames(out_len) != Some(frames) {
        return Err(Error::shape(
            "istft",
            format!("{frames} frames cannot produce {out_len} samples at hop {}", cfg.hop),
        ));
    }
    Ok(())
}

/// Real frame from one-sided bins (imaginary parts of DC and Nyquist are
/// ignored), scaled by `1 / W`.
fn irfft_frame(inverse: &dyn Fft<f64>, re: &[f64], im: &[f64], buf: &mut [Complex<f64>]) {
    let w = buf.len();
    let half = w / 2;
    buf[0] = Complex::new(re[0], 0.0);
    buf[half] = Complex::new(re[half], 0.0);
    for k in 1..half {
        buf[k] = Complex::new(re[k], im[k]);
        buf[w - k] = Complex::new(re[k], -im[k]);
    }
    inverse.process(buf);
    let scale = 1.0 / w as f64;
    for v in buf.iter_mut() {
        v.re *= scale;
    }
}

fn overlap_add(re: &Tensor, im: &Tensor, cfg: StftConfig, out_len: usize) -> Vec<f64> {
    let (c, frames, bins) = (re.shape()[0], re.shape()[1], re.shape()[2]);
    let win = cfg.hann();
    let wsum = cfg.window_sum(frames, out_len);
    let inverse = plans(cfg.window).inverse;
    let mut out = vec![0.0; c * out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for ci in 0..c {
        let y = &mut out[ci * out_len..(ci + 1) * out_len];
        for l in 0..frames {
            let base = (ci * frames + l) * bins;
            irfft_frame(&*inverse, &re.data()[base..base + bins], &im.data()[base..base + bins], &mut buf);
            for m in 0..cfg.window {
                y[l * cfg.hop + m] += win[m] * buf[m].re;
            }
        }
        for (v, s) in y.iter_mut().zip(&wsum) {
            *v = if *s < WINDOW_SUM_FLOOR { 0.0 } else { *v / s };
        }
    }
    out
}

/// Least-squares overlap-add inverse of [`stft`].
pub fn istft(spec: &ComplexSpectrogram, cfg: StftConfig, out_len: usize, rate: u32) -> Result<AudioSegment> {
    check_synthesis(cfg, spec.frames(), spec.bins(), out_len)?;
    let out = overlap_add(&spec.re, &spec.im, cfg, out_len);
    AudioSegment::from_tensor(rate, &Tensor::from_parts(vec![spec.channels(), out_len], out))
}

/// Differentiable [`istft`]: `[C, L, F]` planes to `[C, N]` samples.
pub fn istft_var(g: &Graph, re: &Var, im: &Var, cfg: StftConfig, out_len: usize) -> Result<Var> {
    if re.shape() != im.shape() || re.shape().len() != 3 {
        return Err(Error::shape("istft", format!("planes {:?} / {:?}", re.shape(), im.shape())));
    }
    let (c, frames, bins) = (re.shape()[0], re.shape()[1], re.shape()[2]);
    check_synthesis(cfg, frames, bins, out_len)?;
    let out = overlap_add(re.value(), im.value(), cfg, out_len);
    let win = Rc::new(cfg.hann());
    let wsum = Rc::new(cfg.window_sum(frames, out_len));
    Ok(g.record(
        Tensor::from_parts(vec![c, out_len], out),
        &[re, im],
        move |gout, needs| {
            let forward = plans(cfg.window).forward;
            let w = cfg.window;
            let half = w / 2;
            let mut dre = vec![0.0; c * frames * bins];
            let mut dim = vec![0.0; c * frames * bins];
            let mut buf = vec![Complex::new(0.0, 0.0); w];
            for ci in 0..c {
                let gy = &gout.data()[ci * out_len..(ci + 1) * out_len];
                for l in 0..frames {
                    for m in 0..w {
                        let n = l * cfg.hop + m;
                        let s = wsum[n];
                        let gf = if s < WINDOW_SUM_FLOOR { 0.0 } else { gy[n] / s };
                        buf[m] = Complex::new(win[m] * gf, 0.0);
                    }
                    forward.process(&mut buf);
                    let base = (ci * frames + l) * bins;
                    let inv_w = 1.0 / w as f64;
                    dre[base] = buf[0].re * inv_w;
                    dre[base + half] = buf[half].re * inv_w;
                    for k in 1..half {
                        dre[base + k] = 2.0 * buf[k].re * inv_w;
                        dim[base + k] = 2.0 * buf[k].im * inv_w;
                    }
                }
            }
            let shape = vec![c, frames, bins];
            vec![
                needs[0].then(|| Tensor::from_parts(shape.clone(), dre)),
                needs[1].then(|| Tensor::from_parts(shape, dim)),
            ]
        },
    ))
}

/// Segment length in samples for a duration at `rate`.
pub fn segment_samples(seconds: f64, rate: u32) -> usize {
    (seconds * rate as f64).round() as usize
}

/// Non-overlapping segments of exactly `len` samples; the final partial
/// segment is zero-padded.
pub fn segment(audio: &AudioSegment, len: usize) -> Result<Vec<AudioSegment>> {
    if len == 0 {
        return Err(Error::config("segment length must be positive"));
    }
    let count = audio.len().div_ceil(len);
    (0..count)
        .map(|s| {
            let channels = audio
                .channels()
                .iter()
                .map(|ch| {
                    let end = ((s + 1) * len).min(ch.len());
                    let mut part = ch[s * len..end].to_vec();
                    part.resize(len, 0.0);
                    part
                })
                .collect();
            AudioSegment::new(audio.rate(), channels)
        })
        .collect()
}

/// Concatenates segments channel-wise and trims to `len` samples.
pub fn concatenate(parts: &[AudioSegment], len: usize) -> Result<AudioSegment> {
    let first = parts.first().ok_or_else(|| Error::input("nothing to concatenate"))?;
    let mut channels = vec![Vec::with_capacity(len); first.num_channels()];
    for p in parts {
        if p.num_channels() != first.num_channels() || p.rate() != first.rate() {
            return Err(Error::input("segments differ in channel count or rate"));
        }
        for (dst, src) in channels.iter_mut().zip(p.channels()) {
            dst.extend_from_slice(src);
        }
    }
    for c in &mut channels {
        c.truncate(len);
    }
    AudioSegment::new(first.rate(), channels)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Direct O(W·F) DFT of one windowed frame.
    fn naive_frame_dft(x: &[f64], start: usize, cfg: StftConfig) -> Vec<(f64, f64)> {
        let win = cfg.hann();
        (0..cfg.bins())
            .map(|k| {
                let mut acc = (0.0, 0.0);
                for m in 0..cfg.window {
                    let th = -2.0 * PI * (k * m) as f64 / cfg.window as f64;
                    let v = win[m] * x[start + m];
                    acc.0 += v * th.cos();
                    acc.1 += v * th.sin();
                }
                acc
            })
            .collect()
    }

    #[test]
    fn canonical_segment_shape() {
        let n = segment_samples(DEFAULT_SEGMENT_SECONDS, DEFAULT_RATE);
        assert_eq!(n, 76_672);
        let cfg = StftConfig::default();
        assert_eq!(cfg.frames(n), Some(596));
        assert_eq!(cfg.bins(), 257);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let seg = AudioSegment::mono(DEFAULT_RATE, vec![0.0; 511]).unwrap();
        assert!(stft(&seg, StftConfig::default()).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let seg = AudioSegment::silence(DEFAULT_RATE, 2, 1024).unwrap();
        let cfg = StftConfig::default();
        let spec = stft(&seg, cfg).unwrap();
        assert_eq!(spec.re.max_abs() + spec.im.max_abs(), 0.0);
        let back = istft(&spec, cfg, 1024, DEFAULT_RATE).unwrap();
        assert_eq!(back.energy(), 0.0);
    }

    #[test]
    fn bin_centred_cosine_matches_dft_oracle() {
        let cfg = StftConfig::default();
        let k0 = 37;
        let x: Vec<f64> = (0..2048)
            .map(|n| (2.0 * PI * k0 as f64 * n as f64 / cfg.window as f64).cos())
            .collect();
        let spec = stft(&AudioSegment::mono(DEFAULT_RATE, x.clone()).unwrap(), cfg).unwrap();
        for l in [0, 3, spec.frames() - 1] {
            let oracle = naive_frame_dft(&x, l * cfg.hop, cfg);
            let mut best = (0, 0.0);
            for (k, &(r, i)) in oracle.iter().enumerate() {
                assert!((spec.re.at(&[0, l, k]) - r).abs() < 1e-8);
                assert!((spec.im.at(&[0, l, k]) - i).abs() < 1e-8);
                let mag = spec.re.at(&[0, l, k]).hypot(spec.im.at(&[0, l, k]));
                if mag > best.1 {
                    best = (k, mag);
                }
            }
            assert_eq!(best.0, k0);
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let n = 5000;
        let x = noise(n, 1);
        let seg = AudioSegment::new(DEFAULT_RATE, vec![x.clone(), noise(n, 2)]).unwrap();
        let spec = stft(&seg, cfg).unwrap();
        let back = istft(&spec, cfg, n, DEFAULT_RATE).unwrap();
        for c in 0..2 {
            let (a, b) = (&seg.channel(c)[512..n - 512], &back.channel(c)[512..n - 512]);
            let err: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(err / norm < 1e-6, "relative error {}", err / norm);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(1024, 3);
        let spec = stft(&AudioSegment::mono(DEFAULT_RATE, x.clone()).unwrap(), cfg).unwrap();
        let win = cfg.hann();
        for l in 0..spec.frames() {
            let time: f64 = (0..cfg.window).map(|m| (win[m] * x[l * cfg.hop + m]).powi(2)).sum();
            // one-sided: interior bins count twice
            let mut freq = 0.0;
            for k in 0..cfg.bins() {
                let p = spec.re.at(&[0, l, k]).powi(2) + spec.im.at(&[0, l, k]).powi(2);
                freq += if k == 0 || k == cfg.bins() - 1 { p } else { 2.0 * p };
            }
            freq /= cfg.window as f64;
            assert!((time - freq).abs() <= 1e-8 * time.max(1.0));
        }
    }

    #[test]
    fn single_frame_synthesis_reproduces_windowed_cosine() {
        // with one frame, y = w·frame / w² = frame wherever w² >= floor
        let cfg = StftConfig { window: 16, hop: 4 };
        let x: Vec<f64> = (0..16).map(|n| (2.0 * PI * 3.0 * n as f64 / 16.0).cos()).collect();
        let spec = stft(&AudioSegment::mono(8000, x.clone()).unwrap(), cfg).unwrap();
        let y = istft(&spec, cfg, 16, 8000).unwrap();
        let win = cfg.hann();
        for m in 1..16 {
            // frame = w·x, normalized back by w²  ->  x
            let overlap_added = win[m] * (win[m] * x[m]);
            assert!((overlap_added / (win[m] * win[m]) - y.channel(0)[m]).abs() < 1e-12);
        }
        // the first Hann tap is zero: guarded to 0
        assert_eq!(y.channel(0)[0], 0.0);
    }

    #[test]
    fn unit_mask_is_identity_and_half_mask_keeps_phase() {
        let cfg = StftConfig { window: 32, hop: 8 };
        let spec = stft(&AudioSegment::mono(8000, noise(96, 4)).unwrap(), cfg).unwrap();
        let ones = Tensor::ones(spec.re.shape().to_vec());
        assert_eq!(spec.mul_real(&ones).unwrap(), spec);
        let half = spec.mul_real(&ones.scale(0.5)).unwrap();
        let m0 = spec.magnitude();
        let m1 = half.magnitude();
        for i in 0..m0.numel() {
            assert!((m1.data()[i] - 0.5 * m0.data()[i]).abs() < 1e-12);
            if m0.data()[i] > 1e-9 {
                let a0 = spec.im.data()[i].atan2(spec.re.data()[i]);
                let a1 = half.im.data()[i].atan2(half.re.data()[i]);
                assert!((a0 - a1).abs() < 1e-12);
            }
        }
        assert!(spec.mul_real(&Tensor::ones(vec![1, 2, 3])).is_err());
    }

    #[test]
    fn segmentation_counts_and_padding() {
        let len = 76_672;
        let make = |n| AudioSegment::mono(DEFAULT_RATE, vec![1.0; n]).unwrap();
        assert_eq!(segment(&make(76_672), len).unwrap().len(), 1);
        assert_eq!(segment(&make(153_344), len).unwrap().len(), 2);
        let parts = segment(&make(100_000), len).unwrap();
        assert_eq!(parts.len(), 2);
        let zeros = parts[1].channel(0).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2 * 76_672 - 100_000);
        assert_eq!(zeros, 53_344);
    }

    #[test]
    fn istft_rejects_inconsistent_length() {
        let cfg = StftConfig::default();
        let spec = stft(&AudioSegment::mono(DEFAULT_RATE, vec![0.0; 1024]).unwrap(), cfg).unwrap();
        assert!(istft(&spec, cfg, 1024 + 128, DEFAULT_RATE).is_err());
        assert!(istft(&spec, cfg, 1024 + 127, DEFAULT_RATE).is_ok());
    }
}
