//! Line-delimited manifests of `(noisy, clean)` pairs.
//!
//! One record per line, tab-separated: noisy path, clean path, samples,
//! SNR in dB, seed. Unknown SNR or seed is written as `-`. Relative paths
//! resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::wav::wav_info;
use crate::error::{Error, Result};
use crate::numerics::SeedTree;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub samples: usize,
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Manifest {
            path: origin.to_path_buf(),
            line,
            detail,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let samples = fields[2]
                .parse()
                .map_err(|e| err(line_no, format!("samples {:?}: {e}", fields[2])))?;
            let snr_db = match fields[3] {
                "-" => None,
                s => Some(s.parse().map_err(|e| err(line_no, format!("snr {s:?}: {e}")))?),
            };
            let seed = match fields[4] {
                "-" => None,
                s => Some(s.parse().map_err(|e| err(line_no, format!("seed {s:?}: {e}")))?),
            };
            entries.push(ManifestEntry {
                noisy: base.join(fields[0]),
                clean: base.join(fields[1]),
                samples,
                snr_db,
                seed,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for e in &self.entries {
            let snr = e.snr_db.map_or("-".to_string(), |v| v.to_string());
            let seed = e.seed.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{}\t{}\t{}\t{snr}\t{seed}", rel(&e.noisy), rel(&e.clean), e.samples);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base))?;
        Ok(())
    }
}

/// Train / validation halves of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
}

/// Shuffles with `seed` and puts `round(ratio * n)` entries in the training
/// half.
pub fn split_manifest(all: &Manifest, ratio: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut entries = all.entries.clone();
    entries.shuffle(&mut SeedTree::new(seed).split("split").rng());
    let n_train = (ratio * entries.len() as f64).round() as usize;
    let val = entries.split_off(n_train);
    Ok(Split {
        train: Manifest { entries },
        val: Manifest { entries: val },
    })
}

/// Pairs every `<stem>_noisy.wav` in `dir` with `<stem>_clean.wav`, splits
/// them and writes `train.tsv` and `val.tsv` into `dir`.
pub fn build_manifest(dir: &Path, ratio: f64, seed: u64) -> Result<Split> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_noisy.wav")).map(String::from))
        .collect();
    stems.sort();
    let mut all = Manifest::default();
    for stem in stems {
        let noisy = dir.join(format!("{stem}_noisy.wav"));
        let clean = dir.join(format!("{stem}_clean.wav"));
        if !clean.exists() {
            return Err(Error::input(format!("{} has no clean counterpart", noisy.display())));
        }
        let (samples, rate, _) = wav_info(&noisy)?;
        let (clean_samples, clean_rate, _) = wav_info(&clean)?;
        if rate != clean_rate || samples != clean_samples {
            return Err(Error::input(format!("{stem}: noisy and clean differ in rate or length")));
        }
        all.entries.push(ManifestEntry {
            noisy,
            clean,
            samples,
            snr_db: None,
            seed: None,
        });
    }
    let split = split_manifest(&all, ratio, seed)?;
    split.train.write(&dir.join("train.tsv"))?;
    split.val.write(&dir.join("val.tsv"))?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Manifest {
        Manifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    noisy: PathBuf::from(format!("/d/{i}_noisy.wav")),
                    clean: PathBuf::from(format!("/d/{i}_clean.wav")),
                    samples: 100 + i,
                    snr_db: if i % 2 == 0 { Some(i as f64 - 2.5) } else { None },
                    seed: Some(i as u64),
                })
                .collect(),
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample(5);
        let text = m.to_text(Path::new("/d"));
        assert!(text.starts_with("0_noisy.wav\t0_clean.wav\t100\t-2.5\t0\n"));
        assert_eq!(Manifest::parse(&text, Path::new("/d"), Path::new("m.tsv")).unwrap(), m);
    }

    #[test]
    fn malformed_lines_name_their_position() {
        let err = Manifest::parse("a\tb\t1\t-\t-\na\tb\tx\t-\t-\n", Path::new("."), Path::new("m.tsv")).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn splits_are_deterministic_and_complete() {
        let m = sample(11);
        let all = split_manifest(&m, 1.0, 3).unwrap();
        assert_eq!((all.train.len(), all.val.len()), (11, 0));
        let a = split_manifest(&m, 0.7, 3).unwrap();
        let b = split_manifest(&m, 0.7, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.val.len(), 11);
        assert_eq!(a.train.len(), 8);
        assert!(split_manifest(&m, 1.5, 3).is_err());
    }
}
