use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::dsp::AudioSegment;
use crate::error::{Error, Result};

/// On-disk sample encoding for [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads 16-bit PCM or 32-bit float WAV with any channel count. PCM is
/// scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<AudioSegment> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32_768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (format, bits) => {
            return Err(Error::WavFormat {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {format:?} samples (expected 16-bit PCM or 32-bit float)"),
            })
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 || interleaved.len() % channels != 0 {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            detail: format!("{} samples do not form whole {channels}-channel frames", interleaved.len()),
        });
    }
    let mut data = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks(channels) {
        for (c, v) in frame.iter().enumerate() {
            data[c].push(*v);
        }
    }
    AudioSegment::new(spec.sample_rate, data)
}

pub fn write_wav(path: &Path, seg: &AudioSegment, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: seg.num_channels() as u16,
        sample_rate: seg.rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for n in 0..seg.len() {
        for c in seg.channels() {
            let v = c[n];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
                    writer.write_sample(q)
                }
                WavEncoding::Float32 => writer.write_sample(v as f32),
            }
            .map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}

/// Header-only sample count and rate.
pub fn wav_info(path: &Path) -> Result<(usize, u32, usize)> {
    let reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    Ok((reader.duration() as usize, spec.sample_rate, spec.channels as usize))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_audio(channels: usize, n: usize) -> AudioSegment {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..channels)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0f32) as f64).collect())
            .collect();
        AudioSegment::new(16_000, data).unwrap()
    }

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let seg = random_audio(4, 1000);
        write_wav(&path, &seg, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), seg);
        assert_eq!(wav_info(&path).unwrap(), (1000, 16_000, 4));
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let seg = random_audio(3, 777);
        write_wav(&path, &seg, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 3);
        for (a, b) in seg.channels().iter().flatten().zip(back.channels().iter().flatten()) {
            assert!((a - b).abs() <= 1.0 / 32_768.0);
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        write_wav(&path, &random_audio(2, 500), WavEncoding::Float32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1001]).unwrap();
        assert!(read_wav(&path).is_err());
        std::fs::write(&path, b"RIFF\x00\x00").unwrap();
        assert!(read_wav(&path).is_err());

        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::WavFormat { .. })));
    }
}
