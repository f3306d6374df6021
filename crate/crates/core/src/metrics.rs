//! Short-time objective intelligibility and the STOI/WER composite score.
//!
//! STOI follows the canonical algorithm: resample to 10 kHz, drop frames
//! more than 40 dB below the loudest clean frame, take 15 one-third-octave
//! band envelopes from 150 Hz, correlate clipped and normalized 30-frame
//! (384 ms) envelope segments and average.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc anti-aliasing filter with 60 dB rejection, for a
/// rational rate change `up / down` (already reduced).
fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let cutoff = 1.0 / (2 * up.max(down)) as f64;
    let roll_off = cutoff / 10.0;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let len = (2 * half + 1) as usize;
    let i0b = bessel_i0(beta);
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - half as f64;
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            kaiser * 2.0 * up as f64 * cutoff * sinc(2.0 * cutoff * t)
        })
        .collect();
    let total: f64 = h.iter().sum();
    for v in &mut h {
        *v *= up as f64 / total;
    }
    h
}

/// Polyphase rational resampling from `from` Hz to `to` Hz with a
/// zero-phase FIR; output length is `ceil(len * to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    let h = resample_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|m| {
            // output sample m sits at upsampled index m * down; the filter
            // tap for input k is h[m * down - k * up + half]
            let centre = m * down + half;
            let k_hi = (centre / up).min(x.len() - 1);
            let k_lo = (centre + 1).saturating_sub(h.len()).div_ceil(up);
            (k_lo..=k_hi).map(|k| x[k] * h[centre - k * up]).sum()
        })
        .collect()
}

/// Hann window of `n` taps excluding the zero end points.
fn hanning_inner(n: usize) -> Vec<f64> {
    let m = (n + 2) as f64;
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (m - 1.0)).cos()).collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames of both signals whose clean-frame energy lies more than
/// `DYN_RANGE_DB` below the loudest clean frame, then overlap-adds the rest.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hanning_inner(FRAME);
    let hop = FRAME / 2;
    let starts: Vec<usize> = frame_starts(x.len(), FRAME, hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * hop + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            xs[j * hop + i] += w[i] * x[s + i];
            ys[j * hop + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// One-third-octave band envelopes `[BANDS][frames]`.
fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hanning_inner(FRAME);
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * STOI_RATE as f64 / NFFT as f64).collect();
    let nearest = |target: f64| {
        (0..bins)
            .min_by(|&a, &b| (f[a] - target).powi(2).total_cmp(&(f[b] - target).powi(2)))
            .unwrap()
    };
    let ranges: Vec<(usize, usize)> = (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let mut env = vec![Vec::new(); BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for s in frame_starts(x.len(), FRAME, FRAME / 2) {
        buf.fill(Complex::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i].re = w[i] * x[s + i];
        }
        fft.process(&mut buf);
        for (band, &(lo, hi)) in env.iter_mut().zip(&ranges) {
            band.push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    env
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// STOI of `degraded` against `clean`, both mono at `rate`, clamped to
/// `[0, 1]`.
pub fn stoi(clean: &[f64], degraded: &[f64], rate: u32) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::input(format!(
            "stoi needs equal lengths, got {} and {}",
            clean.len(),
            degraded.len()
        )));
    }
    if rate == 0 || clean.is_empty() {
        return Err(Error::input("stoi needs a positive rate and non-empty signals"));
    }
    let x = resample(clean, rate, STOI_RATE);
    let y = resample(degraded, rate, STOI_RATE);
    let (x, y) = remove_silent_frames(&x, &y);
    let xe = band_envelopes(&x);
    let ye = band_envelopes(&y);
    let frames = xe[0].len();
    if frames < SEGMENT {
        return Err(Error::input(format!(
            "only {frames} non-silent frames, stoi needs at least {SEGMENT}"
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let segments = frames - SEGMENT + 1;
    let mut total = 0.0;
    for m in SEGMENT..=frames {
        for (xb, yb) in xe.iter().zip(&ye) {
            let xs = &xb[m - SEGMENT..m];
            let ys = &yb[m - SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + EPS);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / SEGMENT as f64;
                v.iter_mut().for_each(|a| *a -= mean);
                let n = norm(v) + EPS;
                v.iter_mut().for_each(|a| *a /= n);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok((total / (segments * BANDS) as f64).clamp(0.0, 1.0))
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::input(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

/// `(stoi + (1 - wer)) / 2`.
pub fn composite_metric(stoi: f64, wer: f64) -> Result<f64> {
    check_unit("stoi", stoi)?;
    check_unit("wer", wer)?;
    Ok((stoi + (1.0 - wer)) / 2.0)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub stoi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composite: Option<f64>,
}

impl MetricReport {
    pub fn new(id: impl Into<String>, stoi: f64, wer: Option<f64>) -> Result<Self> {
        check_unit("stoi", stoi)?;
        let composite = wer.map(|w| composite_metric(stoi, w)).transpose()?;
        Ok(Self {
            id: id.into(),
            stoi,
            wer,
            composite,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    /// Amplitude-modulated harmonic complex with pauses.
    fn speech_like(n: usize, rate: u32) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let f0 = 140.0 + 30.0 * (2.0 * PI * 0.7 * t).sin();
                let voiced: f64 = (1..12).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
                let env = (2.0 * PI * 3.0 * t).sin().max(0.0).powi(2);
                voiced * env
            })
            .collect()
    }

    #[test]
    fn composite_reproduces_table_rows() {
        assert!((composite_metric(0.859, 0.148).unwrap() - 0.8555).abs() < 1e-12);
        assert!((composite_metric(0.624, 0.599).unwrap() - 0.5125).abs() < 1e-12);
        assert_eq!(composite_metric(1.0, 0.0).unwrap(), 1.0);
        assert!(composite_metric(1.2, 0.1).is_err());
        assert!(composite_metric(0.5, -0.1).is_err());
    }

    #[test]
    fn report_fills_composite_only_with_wer() {
        let r = MetricReport::new("a", 0.8, None).unwrap();
        assert_eq!(r.composite, None);
        let r = MetricReport::new("a", 0.8, Some(0.2)).unwrap();
        assert!((r.composite.unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn resampler_keeps_a_passband_tone() {
        let x: Vec<f64> = (0..16_000).map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin()).collect();
        let y = resample(&x, 16_000, 10_000);
        assert_eq!(y.len(), 10_000);
        for (i, v) in y.iter().enumerate().skip(1000).take(8000) {
            let expected = (2.0 * PI * 440.0 * i as f64 / 10_000.0).sin();
            assert!((v - expected).abs() < 2e-3, "sample {i}: {v} vs {expected}");
        }
    }

    #[test]
    fn bessel_matches_known_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-10);
    }

    #[test]
    fn self_similarity_and_gain_invariance() {
        let x = speech_like(32_000, 16_000);
        assert!(stoi(&x, &x, 16_000).unwrap() >= 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy: Vec<f64> = x
            .iter()
            .map(|v| v + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let base = stoi(&x, &noisy, 16_000).unwrap();
        for gain in [0.1, 1.0, 10.0] {
            let scaled: Vec<f64> = noisy.iter().map(|v| v * gain).collect();
            assert!((stoi(&x, &scaled, 16_000).unwrap() - base).abs() < 1e-9);
            let clean: Vec<f64> = x.iter().map(|v| v * gain).collect();
            assert!((stoi(&clean, &noisy, 16_000).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_input_is_an_error() {
        let x = speech_like(3_000, 16_000);
        assert!(stoi(&x, &x, 16_000).is_err());
        assert!(stoi(&x, &x[..10], 16_000).is_err());
    }
}
