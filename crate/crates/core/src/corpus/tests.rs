use super::*;
use crate::dsp::SpectralEngine;

fn parse(text: &str) -> Result<Manifest, CorpusError> {
    Manifest::parse(text, Path::new("/data"), Path::new("m.txt"), &Charset::default())
}

#[test]
fn manifest_lines() {
    let m = parse("u1|a.wav|Hello\n\nu2|/abs/b.wav|Two  words!\n").unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(
        m.records[0],
        ManifestRecord {
            id: "u1".into(),
            wav_path: "/data/a.wav".into(),
            text: "hello".into()
        }
    );
    assert_eq!(m.records[1].wav_path, PathBuf::from("/abs/b.wav"));
    assert_eq!(m.records[1].text, "two words!");
    // pipes past the second belong to the text
    assert_eq!(parse("x|a.wav|a|b").unwrap().records[0].text, "ab");
}

#[test]
fn manifest_errors_name_the_line() {
    match parse("u1|a.wav|hi\nu2|b.wav\n") {
        Err(CorpusError::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    match parse("u1|a.wav|hi\nu1|b.wav|yo\n") {
        Err(CorpusError::DuplicateId { line, id, .. }) => assert_eq!((line, id.as_str()), (2, "u1")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse("u1|a.wav|—\n"), Err(CorpusError::Manifest { line: 1, .. })));
}

#[test]
fn ten_line_manifest() {
    let text: String = (0..10).map(|i| format!("u{i}|{i}.wav|text {i}\n")).collect();
    assert_eq!(parse(&text).unwrap().len(), 10);
}

#[test]
fn pad_batch_rounds_to_r_with_zero_padding() {
    let rec = |id: &str, t: usize| FeatureRecord {
        id: id.into(),
        text: "a".into(),
        ids: vec![2],
        mel: Tensor::full(&[t, 3], 0.5),
        linear: Tensor::full(&[t, 4], 0.25),
    };
    let a = rec("a", 7);
    let b = pad_batch(&[&a], 2).unwrap();
    assert_eq!(b.frames, 8);
    assert_eq!(b.mel.shape(), &[8, 3]);
    assert!(b.mel.row(7).iter().all(|&v| v == 0.0));
    assert!(b.linear.row(7).iter().all(|&v| v == 0.0));

    let (x, y) = (rec("x", 10), rec("y", 15));
    let b = pad_batch(&[&x, &y], 5).unwrap();
    assert_eq!(b.frames, 15);
    assert_eq!(b.frame_lengths, vec![10, 15]);
    for t in 0..15 {
        let expect = if t < 10 { 0.5 } else { 0.0 };
        assert!(b.mel.row(t).iter().all(|&v| v == expect));
        assert!(b.mel.row(15 + t).iter().all(|&v| v == 0.5));
    }
    assert!(matches!(pad_batch(&[], 2), Err(CorpusError::EmptyBatch)));
}

#[test]
fn batch_plan_buckets_by_length() {
    let plan = BatchPlan::new(&[50, 10, 40, 20, 30], 2, 7);
    assert_eq!(plan.batches_per_epoch(), 3);
    let mut e0 = plan.epoch(0);
    assert_eq!(e0, plan.epoch(0));
    e0.sort();
    assert_eq!(e0, vec![vec![0], vec![1, 3], vec![4, 2]]);
    let seen: Vec<Vec<usize>> = (0..3).map(|s| plan.batch_at(s)).collect();
    assert_eq!(seen, plan.epoch(0));
}

#[test]
fn toy_text_is_two_tones() {
    let spec = ToysetSpec::default();
    let wav = render_toy_text("ab", &spec).unwrap();
    assert_eq!(wav.len(), 4800);
    let engine = SpectralEngine::new(&crate::dsp::SpectralConfig::default()).unwrap();
    let bin_hz = 24_000.0 / 2048.0;
    // dominant bin of a frame centred in each half
    for (centre, hz) in [(1200usize, 200.0), (3600, 240.0)] {
        let frame = engine.analyze(&wav.samples[centre - 600..centre + 600]);
        let mags: Vec<f64> = frame.frame(0).iter().map(|c| c.norm()).collect();
        let peak = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert!((peak as f64 * bin_hz - hz).abs() <= bin_hz, "{peak} vs {hz}");
    }
    assert!(render_toy_text("az", &spec).is_err());
}

#[test]
fn toyset_is_a_function_of_its_spec() {
    let spec = ToysetSpec {
        utterances: 3,
        ..Default::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = generate_toyset(&spec, d1.path()).unwrap();
    let m2 = generate_toyset(&spec, d2.path()).unwrap();
    assert_eq!(m1.len(), 3);
    for (a, b) in m1.records.iter().zip(&m2.records) {
        assert_eq!(a.text, b.text);
        assert_eq!(std::fs::read(&a.wav_path).unwrap(), std::fs::read(&b.wav_path).unwrap());
    }
    assert_eq!(load_manifest(d1.path().join("manifest.txt")).unwrap(), m1);
    let empty = ToysetSpec {
        alphabet: vec![],
        ..Default::default()
    };
    assert!(matches!(generate_toyset(&empty, d1.path()), Err(CorpusError::Toyset(_))));
}

#[test]
fn featurize_frame_count_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let wav_path = dir.path().join("a.wav");
    // 1.2 s at 24 kHz
    let wav = Waveform::new((0..28_800).map(|n| 0.3 * (n as f64 * 0.05).sin()).collect(), 24_000);
    dsp::write_wav(&wav_path, &wav).unwrap();
    let record = ManifestRecord {
        id: "a".into(),
        wav_path: wav_path.clone(),
        text: "hi".into(),
    };
    let cfg = SpectralConfig::default();
    let f = Featurizer::new(cfg.clone()).unwrap();
    let cache = FeatureCache::new(dir.path().join("cache"), &cfg).unwrap();
    let cs = Charset::default();
    let fresh = f.featurize(&record, &cs, Some(&cache)).unwrap();
    // 1 + ⌊28800 / 300⌋ centred frames
    assert_eq!(fresh.frames(), 97);
    assert_eq!(fresh.mel.cols(), 80);
    assert_eq!(fresh.linear.cols(), 1025);
    assert!(fresh.mel.data().iter().chain(fresh.linear.data()).all(|&v| (0.0..=1.0).contains(&v)));
    assert!(cache.path("a").exists());
    assert_eq!(cache.dir().file_name().unwrap().len(), 16);
    // cache hit even with the wav gone
    std::fs::remove_file(&wav_path).unwrap();
    let cached = f.featurize(&record, &cs, Some(&cache)).unwrap();
    assert_eq!(cached, fresh);

    std::fs::write(cache.path("a"), b"garbage").unwrap();
    assert!(matches!(f.featurize(&record, &cs, Some(&cache)), Err(CorpusError::Cache { .. })));
}

#[test]
fn sample_rate_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let wav_path = dir.path().join("b.wav");
    dsp::write_wav(&wav_path, &Waveform::new(vec![0.1; 1600], 16_000)).unwrap();
    let record = ManifestRecord {
        id: "b".into(),
        wav_path,
        text: "x".into(),
    };
    let f = Featurizer::new(SpectralConfig::default()).unwrap();
    let err = f.featurize(&record, &Charset::default(), None).unwrap_err();
    assert!(matches!(err, CorpusError::SampleRate { expected: 24_000, actual: 16_000, .. }));
    assert!(err.to_string().contains("16000") && err.to_string().contains("24000"));
}

#[test]
fn config_hash_tracks_settings() {
    let a = SpectralConfig::default();
    let mut b = a.clone();
    b.mel_bands = 40;
    assert_eq!(config_hash(&a), config_hash(&a.clone()));
    assert_ne!(config_hash(&a), config_hash(&b));
}
