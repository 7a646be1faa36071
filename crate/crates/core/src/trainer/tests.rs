use super::*;
use crate::model::ModelConfig;

fn records(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let frames = 4 + rng.below(5);
            let len = 2 + rng.below(3);
            let mut random = |cols: usize| {
                Tensor::matrix(frames, cols, (0..frames * cols).map(|_| rng.uniform()).collect()).unwrap()
            };
            let mel = random(cfg.mel_bands);
            let linear = random(cfg.linear_bins);
            FeatureRecord {
                id: format!("u{i}"),
                text: "x".repeat(len),
                ids: (0..len).map(|k| 2 + (i + k) % (cfg.vocab_size - 2)).collect(),
                mel,
                linear,
            }
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_steps: 6,
        seed: 5,
        checkpoint_every: 3,
        alignment_every: 2,
        ..Default::default()
    }
}

fn trainer(variant: Variant) -> Trainer {
    let model = Tacotron::new(ModelConfig::gradcheck().with_variant(variant), 11).unwrap();
    Trainer::new(model, small_config()).unwrap()
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_step(0, &cfg), 0.001);
    assert_eq!(lr_at_step(499_999, &cfg), 0.001);
    assert_eq!(lr_at_step(500_000, &cfg), 0.0005);
    assert_eq!(lr_at_step(1_000_000, &cfg), 0.0003);
    assert_eq!(lr_at_step(3_000_000, &cfg), 0.0001);
    let scaled = TrainConfig {
        milestone_scale: 0.001,
        ..cfg
    };
    assert_eq!(lr_at_step(499, &scaled), 0.001);
    assert_eq!(lr_at_step(500, &scaled), 0.0005);
    assert_eq!(lr_at_step(2000, &scaled), 0.0001);
}

#[test]
fn config_validation_and_keys() {
    let mut cfg = TrainConfig::default();
    cfg.validate().unwrap();
    let mut copy = TrainConfig {
        seed: 99,
        clip_norm: None,
        ..Default::default()
    };
    for (k, v) in cfg.key_values() {
        copy.set(&k, &v).unwrap();
    }
    assert_eq!(copy, cfg);
    cfg.set("clip_norm", "off").unwrap();
    assert_eq!(cfg.clip_norm, None);
    assert!(cfg.set("bogus", "1").is_err());
    cfg.lr_milestones = vec![(10, 0.0005), (5, 0.0001)];
    assert!(cfg.validate().is_err());
    cfg.lr_milestones = vec![(10, 0.0005), (20, 0.0006)];
    assert!(cfg.validate().is_err());
}

#[test]
fn loss_matches_elementwise_oracle() {
    let mut rng = Rng::new(3);
    let mut random = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap();
    let (pm, tm, pl, tl) = (random(5, 3), random(5, 3), random(5, 4), random(5, 4));
    let mean_abs = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
    };
    let tape = Tape::new();
    let loss = compute_loss(Some(tape.constant(pm.clone())), &tm, tape.constant(pl.clone()), &tl).unwrap();
    let expected = mean_abs(&pm, &tm) + mean_abs(&pl, &tl);
    assert!((loss.total.value().item() - expected).abs() < 1e-12);
    assert!((loss.mel.unwrap() - mean_abs(&pm, &tm)).abs() < 1e-12);

    // identical linear branch: total is the mel part
    let same = compute_loss(Some(tape.constant(pm.clone())), &tm, tape.constant(tl.clone()), &tl).unwrap();
    assert_eq!(same.total.value().item(), same.mel.unwrap());
    let perfect = compute_loss(Some(tape.constant(tm.clone())), &tm, tape.constant(tl.clone()), &tl).unwrap();
    assert_eq!(perfect.total.value().item(), 0.0);
    let linear_only = compute_loss(None, &tm, tape.constant(pl.clone()), &tl).unwrap();
    assert!(linear_only.mel.is_none());
    assert!((linear_only.total.value().item() - mean_abs(&pl, &tl)).abs() < 1e-12);
    assert!(compute_loss(None, &tm, tape.constant(pl), &tm).is_err());
}

#[test]
fn scheduled_sampling_rates() {
    let mut rng = Rng::new(17);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| scheduled_sampling_choose(Variant::Vanilla, 0.5, &mut rng).unwrap())
        .count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    assert!((0..100).all(|_| scheduled_sampling_choose(Variant::Vanilla, 1.0, &mut rng).unwrap()));
    assert!((0..100).all(|_| !scheduled_sampling_choose(Variant::Vanilla, 0.0, &mut rng).unwrap()));
    for v in [Variant::Full, Variant::GruEncoder] {
        assert!(matches!(scheduled_sampling_choose(v, 0.5, &mut rng), Err(TrainError::Config(_))));
    }
}

#[test]
fn training_is_deterministic_and_finite() {
    let data = records(5, &ModelConfig::gradcheck(), 1);
    for variant in Variant::ALL {
        let run = || {
            let mut t = trainer(variant);
            let mut losses = Vec::new();
            t.fit(&data, &SpectralConfig::default(), &Charset::default(), None, |m| {
                assert!(m.grad_norm.is_finite());
                losses.push((m.step, m.total_loss(), m.grad_norm));
            })
            .unwrap();
            (losses, t.model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b, "{variant}");
        assert_eq!(pa, pb);
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    }
}

#[test]
fn clipping_bounds_the_update_direction() {
    let data = records(2, &ModelConfig::gradcheck(), 2);
    let batch = pad_batch(&[&data[0], &data[1]], 2).unwrap();
    let mut t = trainer(Variant::Full);
    t.config.clip_norm = Some(1e-6);
    let m = t.train_step(&batch).unwrap();
    assert!(m.clipped && m.grad_norm > 1e-6);
    t.config.clip_norm = None;
    assert!(!t.train_step(&batch).unwrap().clipped);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let mut data = records(2, &ModelConfig::gradcheck(), 3);
    data[1].mel.data_mut()[0] = f64::NAN;
    let batch = pad_batch(&[&data[0], &data[1]], 2).unwrap();
    let mut t = trainer(Variant::Full);
    match t.train_step(&batch) {
        Err(TrainError::NonFinite { step, utterances, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(utterances, vec!["u0".to_string(), "u1".to_string()]);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(t.state.step, 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = records(4, &ModelConfig::gradcheck(), 4);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let spectral = SpectralConfig::default();
    let charset = Charset::default();
    let mut t = trainer(Variant::Full);
    t.fit(&data, &spectral, &charset, Some(&run), |_| {}).unwrap();
    assert!(run.checkpoint(3).exists() && run.checkpoint(6).exists());
    let ck = load_checkpoint(run.latest()).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.model.params, t.model.params);
    assert_eq!(ck.adam.first_moment, t.adam.first_moment);
    assert_eq!(ck.adam.second_moment, t.adam.second_moment);
    assert_eq!(ck.adam.step, t.adam.step);
    assert_eq!(ck.charset, charset);
    ck.ensure_matches(&t.model.config, &spectral).unwrap();
    let mut other = spectral.clone();
    other.mel_bands = 40;
    assert!(matches!(ck.ensure_matches(&t.model.config, &other), Err(TrainError::ConfigMismatch(_))));

    // identical inference outputs
    let forward = |model: &Tacotron| {
        let tape = Tape::no_grad();
        let mut ctx = model.ctx(&tape, Mode::Infer, Rng::new(1));
        let batch = pad_batch(&[&data[0]], 2).unwrap();
        let out = model.forward(&mut ctx, &batch.ids, &batch.mel, batch.frames, Feedback::TeacherForcing).unwrap();
        (*out.linear.value()).clone()
    };
    assert_eq!(forward(&ck.model), forward(&t.model));

    // metrics: header plus one row per step, zero wall time
    let csv = std::fs::read_to_string(run.metrics()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0") && l.split(',').count() == 6));
    for step in [2u64, 4, 6] {
        let pgm = std::fs::read(run.alignments().join(format!("step_{step:08}.pgm"))).unwrap();
        assert!(crate::dsp::export::pgm_dimensions(&pgm).is_some());
    }
}

#[test]
fn resume_continues_schedule_and_trajectory() {
    let data = records(4, &ModelConfig::gradcheck(), 6);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let (spectral, charset) = (SpectralConfig::default(), Charset::default());
    let mut straight = trainer(Variant::Full);
    let mut full_losses = Vec::new();
    straight.fit(&data, &spectral, &charset, Some(&run), |m| full_losses.push(m.total_loss())).unwrap();

    let ck = load_checkpoint(run.checkpoint(3)).unwrap();
    let config = TrainConfig {
        lr_milestones: vec![(4, 0.0005)],
        ..small_config()
    };
    let mut resumed = Trainer::resume(ck.model, ck.adam, ck.step, config.clone());
    let mut lrs = Vec::new();
    let mut losses = Vec::new();
    resumed
        .fit(&data, &spectral, &charset, None, |m| {
            lrs.push(m.lr);
            losses.push(m.total_loss());
        })
        .unwrap();
    assert_eq!(lrs, vec![lr_at_step(3, &config), lr_at_step(4, &config), lr_at_step(5, &config)]);
    assert_eq!(lrs, vec![0.001, 0.0005, 0.0005]);
    // same schedule as the uninterrupted run up to the change: identical step
    let ck = load_checkpoint(run.checkpoint(3)).unwrap();
    let mut same = Trainer::resume(ck.model, ck.adam, ck.step, small_config());
    let mut same_losses = Vec::new();
    same.fit(&data, &spectral, &charset, None, |m| same_losses.push(m.total_loss())).unwrap();
    assert_eq!(same_losses, full_losses[3..]);
    assert_eq!(losses[0], full_losses[3]);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = trainer(Variant::GruEncoder);
    let (spectral, charset) = (SpectralConfig::default(), Charset::default());
    let bytes = encode_checkpoint(&t.model, &t.adam, 0, &spectral, &charset);
    let ck = decode_checkpoint(&bytes).unwrap();
    assert_eq!(ck.model.config, t.model.config);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).unwrap_err().contains("magic"));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode_checkpoint(&bad).unwrap_err().contains("version"));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Checkpoint { .. })));
}
