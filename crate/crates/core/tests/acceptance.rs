//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use se3d::checks::gradient_suite;
use se3d::cli::{cmd_synth, cmd_train, RunConfig, SynthArgs, TrainArgs};
use se3d::data::{measured_snr_db, synth_dataset, synth_scene, DatasetConfig, Pair, SceneSpec};
use se3d::dsp::{istft, stft, AudioSegment, StftConfig};
use se3d::loss::{combined_loss, combined_terms, LossConfig};
use se3d::metrics::{composite_metric, stoi};
use se3d::model::{attention_fuse, encode, Ctx, Mode, Model, ModelConfig};
use se3d::numerics::{Graph, SeedTree, Tensor};
use se3d::trainer::{prepare, TrainConfig, Trainer};

struct Verdict {
    passed: bool,
    detail: String,
}

fn run(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let ok = v.passed && in_time;
    println!(
        "[{}] {id}. {name}: {} ({:.2} s, budget {:.0} s{})",
        if ok { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { ", over budget" }
    );
    ok
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// Composite scores of the result tables, reported to three decimals.
fn c1_composite() -> Verdict {
    let rows = [
        (0.624, 0.599, 0.513),
        (0.679, 0.562, 0.559),
        (0.837, 0.167, 0.835),
        (0.859, 0.148, 0.856),
        (0.802, 0.171, 0.816),
        (0.862, 0.161, 0.851),
        (0.841, 0.143, 0.849),
    ];
    // half a unit in the last reported digit, plus float slack
    let tol = 0.0005 + 1e-12;
    let worst = rows
        .iter()
        .map(|&(s, w, reported)| (composite_metric(s, w).unwrap() - reported).abs())
        .fold(0.0, f64::max);
    Verdict {
        passed: worst <= tol,
        detail: format!("{} rows, max |composite - reported| = {worst:.2e} (tol 5e-4)", rows.len()),
    }
}

fn c2_round_trip() -> Verdict {
    let cfg = StftConfig::default();
    let n = 76_672;
    let mut worst: f64 = 0.0;
    let mut shape_ok = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..4).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = AudioSegment::new(16_000, data).unwrap();
        let spec = stft(&x, cfg).unwrap();
        shape_ok &= spec.frames() == 596 && spec.bins() == 257;
        let y = istft(&spec, cfg, n, 16_000).unwrap();
        for (a, b) in x.channels().iter().zip(y.channels()) {
            let interior = cfg.window..n - cfg.window;
            let err: f64 = interior.clone().map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = interior.map(|i| a[i] * a[i]).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
    }
    Verdict {
        passed: worst <= 1e-6 && shape_ok,
        detail: format!("max interior relative error {worst:.2e} (tol 1e-6), L=596 F=257: {shape_ok}"),
    }
}

fn c3_shapes() -> Verdict {
    // (C_out, kernel, stride) per encoder layer
    let table = [
        (32, (7, 1), (1, 1)),
        (32, (1, 7), (1, 1)),
        (32, (8, 6), (2, 2)),
        (64, (7, 6), (1, 1)),
        (64, (6, 5), (2, 2)),
        (96, (5, 5), (1, 1)),
        (96, (6, 3), (2, 2)),
        (96, (5, 3), (1, 1)),
        (128, (6, 3), (2, 1)),
        (256, (5, 3), (1, 1)),
    ];
    let mut oracle = Vec::new();
    let (mut h, mut w) = (596usize, 257usize);
    for &(c, _, (sh, sw)) in &table {
        h = h.div_ceil(sh);
        w = w.div_ceil(sw);
        oracle.push(vec![c, h, w]);
    }

    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let x = AudioSegment::new(
        16_000,
        (0..4)
            .map(|c| (0..76_672).map(|i| ((i * (c + 3)) as f64 * 0.013).sin() * 0.3).collect())
            .collect(),
    )
    .unwrap();
    let g = Graph::inference();
    let ctx = Ctx::new(&g, model.store(), Mode::Eval, SeedTree::new(0));
    let spec = stft(&x, cfg.stft).unwrap();
    let mag = g.constant(spec.magnitude());
    let (latent, skips) = encode(&ctx, model.stage(0), &mag, cfg.leaky_slope).unwrap();
    let mut chain: Vec<Vec<usize>> = skips.iter().map(|s| s.shape().to_vec()).collect();
    if chain.len() < table.len() {
        chain.push(latent.shape().to_vec());
    }
    let f = model.forward(&ctx, &x).unwrap();
    let masks_ok = [&f.m1, &f.m2, &f.mask].iter().all(|m| m.shape() == [4, 596, 257]);
    let out_ok = f.output.shape() == [1, 76_672];
    let chain_ok = chain == oracle && latent.shape() == [256, 38, 33];
    Verdict {
        passed: chain_ok && masks_ok && out_ok,
        detail: format!(
            "latent {:?}, chain matches: {chain_ok}, masks (4,596,257): {masks_ok}, output {:?}",
            latent.shape(),
            f.output.shape()
        ),
    }
}

fn c4_gradients() -> Verdict {
    let results = gradient_suite(0).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    Verdict {
        passed: failed.is_empty(),
        detail: format!(
            "{} checks, worst error/tolerance {worst:.2e}, failures {failed:?}",
            results.len()
        ),
    }
}

fn c5_loss() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean_mag = Tensor::uniform(vec![1, 6, 9], 0.1, 2.0, &mut rng);
    let est_mag = Tensor::uniform(vec![1, 6, 9], 0.0, 2.0, &mut rng);
    let clean = Tensor::uniform(vec![1, 40], -1.0, 1.0, &mut rng);
    let est = Tensor::uniform(vec![1, 40], -1.0, 1.0, &mut rng);
    let eps = 1e-8;
    let (tf, time) = combined_terms(&clean_mag, &est_mag, &clean, &est, eps).unwrap();
    let mut lin: f64 = 0.0;
    for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let cfg = LossConfig { gamma, epsilon: eps, ..LossConfig::default() };
        let l = combined_loss(&clean_mag, &est_mag, &clean, &est, &cfg).unwrap();
        lin = lin.max((l - (gamma * tf + (1.0 - gamma) * time)).abs());
    }
    let cfg = LossConfig::default();
    let zero = combined_loss(&clean_mag, &clean_mag, &clean, &clean, &cfg).unwrap();
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let hand = combined_loss(&one(2.0), &one(1.0), &one(1.0), &one(0.5), &LossConfig { epsilon: 1e-15, ..cfg }).unwrap();
    Verdict {
        passed: lin <= 1e-12 && zero == 0.0 && (hand - 0.5).abs() <= 1e-12,
        detail: format!("linearity gap {lin:.1e} (tol 1e-12), perfect reconstruction {zero}, single bin {hand}"),
    }
}

fn c6_toy_overfit() -> Verdict {
    let run: RunConfig = serde_yaml::from_str(include_str!("../../../configs/toy.yaml")).unwrap();
    let data = DatasetConfig {
        items: 10,
        seconds: run.model.segment_seconds,
        seed: 6,
        ..DatasetConfig::default()
    };
    let pairs: Vec<Pair> = synth_dataset(&data)
        .unwrap()
        .into_iter()
        .map(|(_, s)| Pair { noisy: s.noisy, clean: s.target })
        .collect();
    let examples = prepare(&pairs, run.model.stft).unwrap();
    let mut trainer = Trainer::new(run.model, run.train).unwrap();
    let out = trainer.fit(&examples, &[], |_| Ok(())).unwrap();
    let first = out.history[0].train_loss;
    let best = out.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / first;

    let (mut before, mut after) = (0.0, 0.0);
    for p in &pairs {
        let clean = p.clean.channel(0);
        let enhanced = trainer.model().enhance(&p.noisy).unwrap();
        before += stoi(clean, p.noisy.channel(0), 16_000).unwrap();
        after += stoi(clean, enhanced.channel(0), 16_000).unwrap();
    }
    let n = pairs.len() as f64;
    let gain = (after - before) / n;
    Verdict {
        passed: drop >= 0.9 && gain >= 0.05,
        detail: format!(
            "loss {first:.4e} -> {best:.4e} over {} epochs (drop {:.1}%, need 90%), STOI {:.3} -> {:.3} (gain {gain:+.3}, need +0.05)",
            out.history.len(),
            100.0 * drop,
            before / n,
            after / n
        ),
    }
}

fn c7_convexity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let (c, l, f) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let m1 = Tensor::uniform(vec![c, l, f], 0.0, 1.0, &mut rng);
        let m2 = Tensor::uniform(vec![c, l, f], 0.0, 1.0, &mut rng);
        let logits = Tensor::uniform(vec![2, c], -5.0, 5.0, &mut rng);
        let g = Graph::inference();
        let fused = attention_fuse(&g, &g.constant(logits), &[&g.constant(m1.clone()), &g.constant(m2.clone())]).unwrap();
        for ((&m, &a), &b) in fused.value().data().iter().zip(m1.data()).zip(m2.data()) {
            if m < a.min(b) || m > a.max(b) {
                violations += 1;
            }
        }
    }
    Verdict {
        passed: violations == 0,
        detail: format!("{violations} elements outside [min(M1, M2), max(M1, M2)] over 1000 draws"),
    }
}

fn c8_snr() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let requested = -5.0 + (seed % 11) as f64 * 2.0;
        let spec = SceneSpec { seed, snr_db: requested, ..SceneSpec::default() };
        let scene = synth_scene(&spec, 32_000).unwrap();
        worst = worst.max((measured_snr_db(&scene) - requested).abs());
    }
    Verdict {
        passed: worst <= 0.1,
        detail: format!("max |measured - requested| = {worst:.2e} dB over 50 seeds (tol 0.1)"),
    }
}

fn c9_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("dataset.yaml"), "items: 4\nseconds: 0.5\ntrain_ratio: 0.5\n").unwrap();
    cmd_synth(&SynthArgs {
        config: Some(root.join("dataset.yaml")),
        out: root.join("data"),
        seed: Some(9),
    })
    .unwrap();
    let mut model = ModelConfig::miniature(4, 32);
    model.segment_seconds = 0.5;
    let cfg = RunConfig {
        model,
        train: TrainConfig {
            batch_size: 2,
            max_epochs: 3,
            ..TrainConfig::default()
        },
    };
    std::fs::write(root.join("run.yaml"), serde_yaml::to_string(&cfg).unwrap()).unwrap();
    let train_once = |name: &str| {
        let out = root.join(name);
        cmd_train(&TrainArgs {
            config: Some(root.join("run.yaml")),
            manifest: root.join("data/train.tsv"),
            val_manifest: Some(root.join("data/val.tsv")),
            out: out.clone(),
            checkpoint: None,
            seed: Some(42),
            jobs: Some(1),
            gamma: None,
        })
        .unwrap();
        (std::fs::read(out.join("last.ckpt")).unwrap(), std::fs::read(out.join("best.ckpt")).unwrap())
    };
    let (a, b) = (train_once("a"), train_once("b"));
    Verdict {
        passed: a == b,
        detail: format!(
            "last.ckpt identical: {}, best.ckpt identical: {} ({} bytes)",
            a.0 == b.0,
            a.1 == b.1,
            a.0.len()
        ),
    }
}

#[test]
fn acceptance() {
    let results = [
        run(1, "metric arithmetic", secs(1), c1_composite),
        run(2, "STFT/iSTFT round trip", secs(10), c2_round_trip),
        run(3, "shape oracle", secs(30), c3_shapes),
        run(4, "gradient suite", secs(300), c4_gradients),
        run(5, "loss properties", secs(1), c5_loss),
        run(6, "toy overfit", secs(1200), c6_toy_overfit),
        run(7, "fusion convexity", secs(60), c7_convexity),
        run(8, "scene SNR", secs(60), c8_snr),
        run(9, "determinism", secs(120), c9_determinism),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    assert_eq!(passed, results.len());
}
