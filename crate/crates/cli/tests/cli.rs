//! Command behaviour through the built binary: exit codes, outputs and
//! reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use tacotron_core::dsp::export::pgm_dimensions;
use tacotron_core::dsp::{read_wav, write_wav, Waveform};

fn tacotron(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacotron"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "model.preset=tiny", "--set", "toyset.utterances=3", "--set", "train.alignment_every=1"];

fn train_small(run: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--toyset", "--run-dir", path(run), "--steps", "2"];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    tacotron(&args)
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tacotron(&["train", "--run-dir", path(dir.path())])), 2);
    assert_eq!(code(&tacotron(&["bogus"])), 2);
    let out = train_small(&dir.path().join("r"), &["--set", "model.not_a_key=1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&tacotron(&["featurize", "--manifest", path(&empty), "--out", path(dir.path())])), 2);
}

#[test]
fn featurize_totals_and_cache_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tacotron_core::corpus::ToysetSpec {
        utterances: 4,
        ..Default::default()
    };
    let manifest = tacotron_core::corpus::generate_toyset(&spec, dir.path().join("toy")).unwrap();
    let manifest_path = dir.path().join("toy/manifest.txt");
    let cache = dir.path().join("cache");
    let args = ["featurize", "--manifest", path(&manifest_path), "--out", path(&cache)];
    let first = tacotron(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    // 2400 samples per character at hop 300, centred framing
    let expected: usize = manifest.records.iter().map(|r| 1 + 8 * r.text.len()).sum();
    let text = stdout(&first);
    assert!(text.contains(&format!("total,{expected},4 utterances")), "{text}");
    assert_eq!(text.matches(",computed").count(), 4);
    let second = stdout(&tacotron(&args));
    assert_eq!(second.matches(",cache").count(), 4);

    // a wav at the wrong rate fails that utterance and the command
    let bad = dir.path().join("bad.wav");
    write_wav(&bad, &Waveform::new(vec![0.1; 1600], 16_000)).unwrap();
    let m = dir.path().join("bad.txt");
    std::fs::write(&m, format!("x|{}|abc\n", path(&bad))).unwrap();
    let out = tacotron(&["featurize", "--manifest", path(&m), "--out", path(&cache)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("16000"));
}

#[test]
fn gradcheck_passes_and_rejects_impossible_tolerance() {
    let ok = tacotron(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let report = stdout(&ok);
    let names: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len(), "each check listed once");
    for name in ["matmul", "end_to_end.full", "end_to_end.vanilla", "end_to_end.gru_encoder"] {
        assert!(names.contains(&name), "{name} missing from {names:?}");
    }
    let strict = tacotron(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("gradient check failed"));
}

fn tone(path: &Path) {
    let sr = 24_000.0;
    let x = (0..24_000)
        .map(|n| {
            let t = n as f64 / sr;
            (1..=3).map(|h| 0.3 / h as f64 * (2.0 * std::f64::consts::PI * 180.0 * h as f64 * t).sin()).sum()
        })
        .collect();
    write_wav(path, &Waveform::new(x, 24_000)).unwrap();
}

#[test]
fn invert_round_trip_and_raw_istft() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    tone(&wav);
    let out = dir.path().join("out.wav");
    let run = tacotron(&["invert", "--wav", path(&wav), "--roundtrip", "--out", path(&out), "--iters", "20"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let errors: Vec<f64> = stdout(&run)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errors.len(), 21);
    assert!(errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{errors:?}");
    assert_eq!(read_wav(&out).unwrap().len(), 24_000);

    let raw = tacotron(&["invert", "--wav", path(&wav), "--roundtrip", "--out", path(&out), "--iters", "0"]);
    assert_eq!(stdout(&raw).lines().count(), 2);

    // negative magnitudes are rejected
    let csv = dir.path().join("neg.csv");
    let row = vec!["0.5"; 1025].join(",");
    std::fs::write(&csv, format!("{row}\n-0.1,{}\n", vec!["0"; 1024].join(","))).unwrap();
    let neg = tacotron(&["invert", "--spectrogram", path(&csv), "--out", path(&out)]);
    assert_eq!(code(&neg), 2);
}

#[test]
fn train_reduction_factor_and_variant_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r5");
    let out = train_small(&run, &["--r", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // the snapshot shows the batch's first utterance over the padded length
    let longest = std::fs::read_to_string(run.join("toyset/manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit('|').next().unwrap().len())
        .max()
        .unwrap();
    let padded = (1 + 8 * longest).div_ceil(5) * 5;
    let pgm = std::fs::read(run.join("alignments/step_00000002.pgm")).unwrap();
    let (_, rows) = pgm_dimensions(&pgm).unwrap();
    assert_eq!(rows, padded / 5);
    assert!(run.join("checkpoints/latest.ckpt").exists());
    let echo = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("model.r = 5"));

    let vanilla = dir.path().join("vanilla");
    let out = train_small(&vanilla, &["--variant", "vanilla"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let echo = std::fs::read_to_string(vanilla.join("config.txt")).unwrap();
    assert!(echo.contains("model.variant = vanilla") && echo.contains("train.scheduled_sampling_rate = 0.5"));
    let metrics = std::fs::read_to_string(vanilla.join("metrics.csv")).unwrap();
    // no mel output: empty mel column
    assert!(metrics.lines().nth(1).unwrap().split(',').nth(2).unwrap().is_empty());
}

#[test]
fn synth_outputs_and_checkpoint_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_small(&run, &[])), 0);
    let ck = run.join("checkpoints/latest.ckpt");
    let out = dir.path().join("one");
    let base = ["synth", "--checkpoint", path(&ck), "--set", "synth.max_decoder_steps=10"];
    let mut args = base.to_vec();
    args.extend(["--text", "abc", "--out", path(&out)]);
    let single = tacotron(&args);
    assert_eq!(code(&single), 0, "{}", String::from_utf8_lossy(&single.stderr));
    assert!(out.join("utt_000.wav").exists() && out.join("utt_000.alignment.pgm").exists());

    let lines = dir.path().join("lines.txt");
    std::fs::write(&lines, "abc\n\ncab\nhead\n").unwrap();
    let many = dir.path().join("many");
    let mut args = base.to_vec();
    args.extend(["--textfile", path(&lines), "--out", path(&many)]);
    assert_eq!(code(&tacotron(&args)), 0);
    for i in 0..3 {
        assert!(many.join(format!("utt_{i:03}.wav")).exists());
    }
    assert!(!many.join("utt_003.wav").exists());

    let mut args = base.to_vec();
    args.extend(["--text", "abc", "--out", path(&out), "--set", "model.r=5"]);
    let mismatch = tacotron(&args);
    assert_eq!(code(&mismatch), 2);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("model.r"));
}

#[test]
fn ablate_reports_three_variants_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let d = dir.path().join(name);
        let mut args = vec!["ablate", "--toyset", "--run-dir", path(&d), "--steps", "2"];
        args.extend_from_slice(&SMALL);
        let out = tacotron(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(d.join("ablation.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a.lines().count(), 4);
    for v in ["full,", "vanilla,", "gru_encoder,"] {
        assert!(a.contains(v), "{a}");
    }
    assert_eq!(a, run("b"));
}
