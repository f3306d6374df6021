use rand::Rng;

use super::*;
use crate::dsp::DEFAULT_RATE;

fn examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let len = cfg.segment_len();
    (0..n)
        .map(|i| {
            let mut rng = SeedTree::new(seed).split(i).rng();
            let clean: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let noisy = (0..cfg.channels)
                .map(|_| clean.iter().map(|c| c + rng.gen_range(-0.2..0.2)).collect())
                .collect();
            let pair = Pair {
                noisy: AudioSegment::new(DEFAULT_RATE, noisy).unwrap(),
                clean: AudioSegment::mono(DEFAULT_RATE, clean).unwrap(),
            };
            Example::new(&pair, cfg.stft).unwrap()
        })
        .collect()
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        learning_rate: 1e-2,
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_run_stops_after_patience() {
    let mcfg = ModelConfig::gradcheck();
    let data = examples(&mcfg, 3, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        patience: 1,
        max_epochs: 10,
        freeze_norm_stats: true,
        ..small_train()
    };
    let mut t = Trainer::new(mcfg, cfg).unwrap();
    let out = t.fit(&data[..2], &data[2..], |_| Ok(())).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.stopped_early);
    assert_eq!(out.history[0].val_loss, out.history[1].val_loss);
    assert_eq!(out.best.unwrap().progress.epochs_done, 1);
}

#[test]
fn resume_is_bit_identical() {
    let mcfg = ModelConfig::gradcheck();
    let data = examples(&mcfg, 5, 2);
    let (train, val) = data.split_at(4);

    let mut straight = Trainer::new(mcfg.clone(), small_train()).unwrap();
    let full = straight.fit(train, val, |_| Ok(())).unwrap();

    let mut first = Trainer::new(mcfg, TrainConfig { max_epochs: 2, ..small_train() }).unwrap();
    first.fit(train, val, |_| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ckpt, small_train()).unwrap();
    let rest = resumed.fit(train, val, |_| Ok(())).unwrap();

    assert_eq!(rest.history.len(), 1);
    assert_eq!(rest.history[0].train_loss.to_bits(), full.history[2].train_loss.to_bits());
    assert_eq!(rest.history[0].val_loss, full.history[2].val_loss);
    assert_eq!(rest.last, full.last);
}

#[test]
fn parallel_items_match_serial() {
    let mcfg = ModelConfig::gradcheck();
    let data = examples(&mcfg, 4, 3);
    let run = |jobs| {
        let mut t = Trainer::new(mcfg.clone(), TrainConfig { jobs, max_epochs: 1, batch_size: 4, ..small_train() }).unwrap();
        t.fit(&data, &[], |_| Ok(())).unwrap().last.tensors
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let mcfg = ModelConfig::gradcheck();
    let data = examples(&mcfg, 2, 4);
    let mut t = Trainer::new(mcfg, TrainConfig { max_epochs: 30, patience: 100, ..small_train() }).unwrap();
    let out = t.fit(&data, &[], |_| Ok(())).unwrap();
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_weights_are_named() {
    let mcfg = ModelConfig::gradcheck();
    let data = examples(&mcfg, 2, 5);
    let t = Trainer::new(mcfg, small_train()).unwrap();
    let mut ckpt = t.checkpoint();
    let w = ckpt.tensors.iter_mut().find(|(n, _)| n == "ae2.enc0.weight").unwrap();
    w.1.data_mut()[0] = f64::NAN;
    let mut t = Trainer::resume(&ckpt, small_train()).unwrap();
    let err = t.run_epoch(&data, &[]).unwrap_err();
    match err {
        Error::NonFinite { tensor } => assert!(tensor.starts_with("stage-2 mask"), "{tensor}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let mcfg = ModelConfig::gradcheck();
    let t = Trainer::new(mcfg, small_train()).unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    let model = back.build_model().unwrap();
    assert_eq!(model.store(), t.model().store());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    let mut wrong = ckpt.clone();
    wrong.tensors[0].1 = Tensor::zeros(vec![1]);
    assert!(wrong.build_model().is_err());
    let mut missing = ckpt.clone();
    missing.tensors.pop();
    assert!(missing.build_model().is_err());
    let mut other = ckpt;
    other.model.beam_hidden += 1;
    assert!(other.build_model().is_err());
}

#[test]
fn json_log_lines_parse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = JsonLog::create(&path).unwrap();
    let rec = EpochRecord {
        epoch: 0,
        train_loss: 1.5,
        val_loss: None,
        lr: 1e-3,
        seconds: 0.25,
    };
    log.write(&rec).unwrap();
    log.write(&EpochRecord { epoch: 1, ..rec.clone() }).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], rec);
}
