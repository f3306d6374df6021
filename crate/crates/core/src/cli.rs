//! Batch entry points behind the `se3d` binary.
//!
//! ```text
//! se3d synth     --config dataset.yaml --out data/
//! se3d train     --config run.yaml --manifest data/train.tsv --val-manifest data/val.tsv --out run/
//! se3d enhance   --checkpoint run/best.ckpt --manifest data/val.tsv --out enhanced/
//! se3d evaluate  --manifest enhanced/enhanced.tsv --out report.jsonl
//! se3d gradcheck
//! ```

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checks::gradient_suite;
use crate::data::{read_wav, write_dataset, write_wav, DatasetConfig, Manifest, ManifestEntry, WavEncoding};
use crate::dsp::{concatenate, segment, stft, AudioSegment, StftConfig};
use crate::metrics::{stoi, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::trainer::{train, Checkpoint, JsonLog, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "se3d", version, about = "Two-stage masking autoencoder for multichannel speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with manifests.
    Synth(SynthArgs),
    /// Train from a manifest; writes checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Enhance one WAV or every noisy file of a manifest.
    Enhance(EnhanceArgs),
    /// STOI (and composite, given WER) over estimate/clean pairs.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient suite; fails if any check is out of tolerance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset recipe (YAML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and training settings of one run, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest; without it early stopping watches the training loss.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Output directory for `best.ckpt`, `last.ckpt`, `train_log.jsonl` and `config.yaml`.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Weight of the spectral term of the combined loss.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single multichannel WAV.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub input: Option<PathBuf>,
    /// Enhance the noisy column of a manifest; also writes `enhanced.tsv`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Accepted for uniformity; enhancement draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest whose first column holds estimates and second the clean references.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path (JSON lines); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-utterance WER, one `id wer` pair per line.
    #[arg(long, conflicts_with = "wer")]
    pub wer_file: Option<PathBuf>,
    /// One WER applied to every utterance.
    #[arg(long)]
    pub wer: Option<f64>,
    /// Directory for log-frequency spectrogram PNGs of estimate and clean.
    #[arg(long)]
    pub emit_spectrograms: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Enhance(a) => cmd_enhance(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn read_yaml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_yaml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!("--jobs must be positive");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: DatasetConfig = read_yaml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let split = write_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} train and {} validation pairs to {}",
        split.train.len(),
        split.val.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_yaml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        cfg.train.jobs = jobs;
    }
    if let Some(gamma) = args.gamma {
        cfg.train.loss.gamma = gamma;
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.yaml"), serde_yaml::to_string(&cfg)?)?;
    let train_m = Manifest::read(&args.manifest)?;
    let val_m = match &args.val_manifest {
        Some(p) => Manifest::read(p)?,
        None => Manifest::default(),
    };
    let mut log = JsonLog::create(&args.out.join("train_log.jsonl"))?;
    let mut on_epoch = |r: &crate::trainer::EpochRecord| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss.map_or("-".to_string(), |v| format!("{v:.6}")),
            r.seconds
        );
        log.write(r)
    };
    let outcome = match &args.checkpoint {
        None => train(&train_m, &val_m, cfg.model.clone(), cfg.train.clone(), &mut on_epoch)?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model != cfg.model {
                bail!("model config differs from the checkpoint's");
            }
            let stft_cfg = ckpt.model.stft;
            let train_set = crate::trainer::prepare(&crate::data::load_pairs(&train_m)?, stft_cfg)?;
            let val_set = crate::trainer::prepare(&crate::data::load_pairs(&val_m)?, stft_cfg)?;
            let mut trainer = Trainer::resume(&ckpt, cfg.train.clone())?;
            trainer.fit(&train_set, &val_set, &mut on_epoch)?
        }
    };
    outcome.last.save(&args.out.join("last.ckpt"))?;
    if let Some(best) = &outcome.best {
        best.save(&args.out.join("best.ckpt"))?;
    }
    println!(
        "{} epochs, best monitored loss {:.6}{}",
        outcome.last.progress.epochs_done,
        outcome.last.progress.best_loss,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

/// Splits into model-length segments, enhances each and trims the padding.
pub fn enhance_audio(model: &Model, audio: &AudioSegment) -> Result<AudioSegment> {
    let len = model.config().segment_len();
    let parts = segment(audio, len)?
        .iter()
        .map(|s| model.enhance(s))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(concatenate(&parts, audio.len())?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("utterance".into(), |s| s.to_string_lossy().into_owned())
}

/// Returns the written paths in input order.
pub fn cmd_enhance(args: &EnhanceArgs) -> Result<Vec<PathBuf>> {
    let model = Checkpoint::load(&args.checkpoint)?.build_model()?;
    std::fs::create_dir_all(&args.out)?;
    let entries: Vec<(PathBuf, Option<ManifestEntry>)> = match (&args.input, &args.manifest) {
        (Some(input), None) => vec![(input.clone(), None)],
        (None, Some(m)) => Manifest::read(m)?
            .entries
            .into_iter()
            .map(|e| (e.noisy.clone(), Some(e)))
            .collect(),
        _ => bail!("give exactly one of --input and --manifest"),
    };
    let work = |(input, _): &(PathBuf, Option<ManifestEntry>)| -> Result<PathBuf> {
        let audio = read_wav(input)?;
        let out = enhance_audio(&model, &audio).with_context(|| format!("enhancing {}", input.display()))?;
        let path = args.out.join(format!("{}_enhanced.wav", stem(input)));
        write_wav(&path, &out, WavEncoding::Float32)?;
        Ok(path)
    };
    let written: Vec<PathBuf> = pool(args.jobs)?.install(|| entries.par_iter().map(work).collect::<Result<_>>())?;
    if args.manifest.is_some() {
        let manifest = Manifest {
            entries: entries
                .iter()
                .zip(&written)
                .map(|((_, e), path)| {
                    let e = e.clone().expect("manifest entries");
                    ManifestEntry { noisy: path.clone(), ..e }
                })
                .collect(),
        };
        manifest.write(&args.out.join("enhanced.tsv"))?;
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

fn read_wer_file(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(id), Some(v), None) = (it.next(), it.next(), it.next()) else {
            bail!("{}:{}: expected `id wer`", path.display(), i + 1);
        };
        let wer: f64 = v.parse().with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(id.to_string(), wer);
    }
    Ok(out)
}

/// Grayscale log-frequency spectrogram, low frequencies at the bottom,
/// 80 dB below the peak mapped to black.
pub fn spectrogram_image(audio: &[f64], rate: u32, rows: u32) -> Result<image::GrayImage> {
    let cfg = StftConfig::default();
    let seg = AudioSegment::mono(rate, audio.to_vec())?;
    let mag = stft(&seg, cfg)?.magnitude();
    let (frames, bins) = (mag.shape()[1], mag.shape()[2]);
    let db: Vec<f64> = mag.data().iter().map(|m| 20.0 * (m + 1e-12).log10()).collect();
    let peak = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (f_lo, f_hi) = (50.0f64, rate as f64 / 2.0);
    let mut img = image::GrayImage::new(frames as u32, rows);
    for r in 0..rows {
        let hz = f_lo * (f_hi / f_lo).powf(r as f64 / (rows - 1).max(1) as f64);
        let bin = ((hz / f_hi) * (bins - 1) as f64).round() as usize;
        for t in 0..frames {
            let v = ((db[t * bins + bin.min(bins - 1)] - peak + 80.0) / 80.0).clamp(0.0, 1.0);
            img.put_pixel(t as u32, rows - 1 - r, image::Luma([(v * 255.0) as u8]));
        }
    }
    Ok(img)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<MetricReport>> {
    let manifest = Manifest::read(&args.manifest)?;
    let wers = args.wer_file.as_deref().map(read_wer_file).transpose()?;
    if let Some(dir) = &args.emit_spectrograms {
        std::fs::create_dir_all(dir)?;
    }
    let work = |e: &ManifestEntry| -> Result<MetricReport> {
        let est = read_wav(&e.noisy)?;
        let clean = read_wav(&e.clean)?;
        let id = stem(&e.noisy);
        let score = stoi(clean.channel(0), est.channel(0), clean.rate())
            .with_context(|| format!("STOI of {}", e.noisy.display()))?;
        let wer = match (&wers, args.wer) {
            (Some(map), _) => Some(*map.get(&id).ok_or_else(|| anyhow!("no WER for `{id}`"))?),
            (None, w) => w,
        };
        if let Some(dir) = &args.emit_spectrograms {
            spectrogram_image(est.channel(0), est.rate(), 256)?.save(dir.join(format!("{id}_estimate.png")))?;
            spectrogram_image(clean.channel(0), clean.rate(), 256)?.save(dir.join(format!("{id}_clean.png")))?;
        }
        Ok(MetricReport::new(id, score, wer)?)
    };
    let reports: Vec<MetricReport> = pool(args.jobs)?.install(|| manifest.entries.par_iter().map(work).collect::<Result<_>>())?;

    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let mean_stoi = reports.iter().map(|r| r.stoi).sum::<f64>() / n;
        eprint!("{} utterances, mean STOI {mean_stoi:.4}", reports.len());
        if reports.iter().all(|r| r.composite.is_some()) {
            let mean_c = reports.iter().filter_map(|r| r.composite).sum::<f64>() / n;
            eprint!(", mean composite {mean_c:.4}");
        }
        eprintln!();
    }
    Ok(reports)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = gradient_suite(args.seed)?;
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{mark:<4} {:<40} {:.3e} (tol {:.0e})", r.name, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks out of tolerance", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
