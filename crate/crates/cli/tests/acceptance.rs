//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Thresholds are fixed constants below.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tacotron_core::corpus::{generate_toyset, FeatureRecord, Featurizer, Manifest, ToysetSpec};
use tacotron_core::dsp::{istft, stft, SpectralConfig, Waveform};
use tacotron_core::dsp::{griffin_lim, MagnitudeSpectrogram, PhaseInit};
use tacotron_core::grad::gradcheck::primitive_suite;
use tacotron_core::grad::ops::Mode;
use tacotron_core::grad::{Rng, Tape, Tensor};
use tacotron_core::model::{end_to_end_gradcheck, Feedback, ModelConfig, Tacotron, Variant};
use tacotron_core::synth::{synthesize, StopReason, SynthConfig, SynthResult};
use tacotron_core::text::Charset;
use tacotron_core::trainer::{decode_checkpoint, encode_checkpoint, evaluate_alignments, TrainConfig, Trainer};

const PRIMITIVE_REL_ERR: f64 = 1e-5;
const END_TO_END_REL_ERR: f64 = 1e-3;
const GRADCHECK_BUDGET_S: f64 = 120.0;
const STFT_INTERIOR_ERR: f64 = 1e-6;
const GL_ITERS: usize = 50;
const GL_FINAL_ERR: f64 = 0.1;
const OVERFIT_STEPS: u64 = 5000;
const OVERFIT_MEL_L1: f64 = 0.03;
const OVERFIT_BUDGET_S: f64 = 30.0 * 60.0;
const REPRO_PREFIX_STEPS: u64 = 50;
const MONOTONICITY_MIN: f64 = 0.9;
const TONE_MATCH_MIN: f64 = 0.8;
const SILENCE_STOPS_MIN: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome) {
    println!(
        "criterion {n:>2} {name}: {} ({}; {:.1}s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let primitives = primitive_suite(1).expect("primitive suite runs");
    let worst = primitives
        .iter()
        .max_by(|a, b| a.max_rel_err().total_cmp(&b.max_rel_err()))
        .expect("nonempty suite");
    let e2e: Vec<(Variant, f64)> = Variant::ALL
        .iter()
        .map(|&v| (v, end_to_end_gradcheck(v, 1, 4).expect("model gradcheck runs").max_rel_err()))
        .collect();
    let e2e_worst = e2e.iter().map(|x| x.1).fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst.max_rel_err() < PRIMITIVE_REL_ERR && e2e_worst < END_TO_END_REL_ERR && secs < GRADCHECK_BUDGET_S,
        detail: format!(
            "{} primitives, worst {} {:.2e} < {PRIMITIVE_REL_ERR:e}; end-to-end worst {e2e_worst:.2e} < {END_TO_END_REL_ERR:e}",
            primitives.len(),
            worst.name,
            worst.max_rel_err()
        ),
    }
}

fn stft_identity() -> Outcome {
    let cfg = SpectralConfig::default();
    let interior = cfg.frame_length_samples();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = Rng::new(100 + seed);
        let x: Vec<f64> = (0..24_000).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let wav = Waveform::new(x.clone(), 24_000);
        let y = istft(&stft(&wav, &cfg).unwrap(), &cfg, Some(x.len())).unwrap();
        let err = (interior..x.len() - interior)
            .map(|i| (x[i] - y.samples[i]).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Outcome {
        pass: worst < STFT_INTERIOR_ERR,
        detail: format!("max interior error {worst:.2e} < {STFT_INTERIOR_ERR:e} over 10 one-second signals"),
    }
}

/// `‖|DFT| − M‖ / ‖M‖` over the interior frames of `x` (windows that lie
/// wholly inside the signal), with a direct Hann-windowed DFT independent of
/// the FFT path.
fn direct_interior_convergence(x: &[f64], target: &Tensor, cfg: &SpectralConfig) -> f64 {
    let (n, hop, nfft) = (cfg.frame_length_samples(), cfg.frame_shift_samples(), cfg.fft_size);
    let pad = n / 2;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let scale = 1.0 / window.iter().sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for t in (0..target.rows()).filter(|&t| t * hop >= pad && t * hop + n - pad <= x.len()) {
        let start = t * hop - pad;
        for k in 0..target.cols() {
            let w = 2.0 * std::f64::consts::PI * k as f64 / nfft as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let v = x[start + i] * window[i];
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            let weight = if k == 0 || k == target.cols() - 1 { 1.0 } else { 2.0 };
            let m = target.get(t, k);
            num += weight * ((re * re + im * im).sqrt() * scale - m).powi(2);
            den += weight * m * m;
        }
    }
    (num / den).sqrt()
}

fn griffin_lim_convergence() -> Outcome {
    let cfg = SpectralConfig::default();
    let sr = 24_000.0;
    let x: Vec<f64> = (0..6000)
        .map(|i| {
            let t = i as f64 / sr;
            (1..=5)
                .map(|h| 0.5 / h as f64 * (2.0 * std::f64::consts::PI * 150.0 * h as f64 * t).sin())
                .sum()
        })
        .collect();
    let wav = Waveform::new(x.clone(), 24_000);
    let mag = MagnitudeSpectrogram::from_stft(&stft(&wav, &cfg).unwrap(), &cfg);
    let out = griffin_lim(&mag, &cfg, GL_ITERS, PhaseInit::Random, &mut Rng::new(3), Some(x.len())).unwrap();
    let e = &out.spectral_convergence;
    let monotone = e.windows(2).all(|w| w[1] <= w[0]);
    let last = *e.last().unwrap();
    let direct = direct_interior_convergence(&out.waveform.samples, &mag.frames, &cfg);
    Outcome {
        pass: monotone && e.len() == GL_ITERS + 1 && last < GL_FINAL_ERR && direct < GL_FINAL_ERR,
        detail: format!(
            "non-increasing over {GL_ITERS} iterations: {monotone}; {:.3} -> {last:.4} (need < {GL_FINAL_ERR}); \
             interior frames recomputed by direct DFT {direct:.4} (need < {GL_FINAL_ERR})",
            e[0]
        ),
    }
}

fn shape_contract() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for r in [1usize, 2, 5] {
        let model = Tacotron::new(ModelConfig { r, ..ModelConfig::tiny() }, 1).unwrap();
        let mut rng = Rng::new(r as u64);
        for l in 1..=20usize {
            let ids: Vec<usize> = (0..l).map(|_| 2 + rng.below(40)).collect();
            for k in 1..=10usize {
                let t = k * r;
                let tape = Tape::no_grad();
                let mut ctx = model.ctx(&tape, Mode::Infer, Rng::new(0));
                let targets = Tensor::full(&[t, 80], 0.5);
                let out = model
                    .forward(&mut ctx, std::slice::from_ref(&ids), &targets, t, Feedback::TeacherForcing)
                    .unwrap();
                let a = &out.alignments[0];
                let ok = out.mel.map(|m| m.shape()) == Some(vec![t, 80])
                    && out.linear.shape() == vec![t, 1025]
                    && a.decoder_steps() == t / r
                    && a.text_len() == l;
                checked += 1;
                if !ok {
                    failures.push(format!("r={r} L={l} T={t}"));
                }
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!("{checked} (r, L, T) cases, mismatches: {failures:?}"),
    }
}

struct Corpus {
    manifest: Manifest,
    records: Vec<FeatureRecord>,
    spec: ToysetSpec,
}

fn toy_corpus(dir: &Path) -> Corpus {
    let spec = ToysetSpec::default();
    let manifest = generate_toyset(&spec, dir).unwrap();
    let featurizer = Featurizer::new(SpectralConfig::default()).unwrap();
    let records = featurizer
        .featurize_all(&manifest, &Charset::default(), None)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    Corpus { manifest, records, spec }
}

fn train(variant: Variant, records: &[FeatureRecord], steps: u64) -> (Trainer, Vec<f64>) {
    let model = Tacotron::new(ModelConfig::tiny().with_variant(variant), 1).unwrap();
    let config = TrainConfig {
        max_steps: steps,
        seed: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let mut losses = Vec::new();
    let decoder_loss = |m: &tacotron_core::trainer::StepMetrics| m.mel_loss.unwrap_or(m.linear_loss);
    trainer
        .fit(records, &SpectralConfig::default(), &Charset::default(), None, |m| {
            losses.push(decoder_loss(m))
        })
        .unwrap();
    (trainer, losses)
}

fn overfit(corpus: &Corpus, losses: &[f64], secs: f64) -> Outcome {
    let (_, prefix) = train(Variant::Full, &corpus.records, REPRO_PREFIX_STEPS);
    let reproducible = prefix[..] == losses[..REPRO_PREFIX_STEPS as usize];
    let first_hit = losses.iter().position(|&l| l <= OVERFIT_MEL_L1).map(|i| i + 1);
    let last = *losses.last().unwrap();
    Outcome {
        pass: last <= OVERFIT_MEL_L1 && reproducible && secs < OVERFIT_BUDGET_S,
        detail: format!(
            "mel l1 {:.4} -> {last:.4} after {} steps (first <= {OVERFIT_MEL_L1} at step {first_hit:?}); \
             rerun of first {REPRO_PREFIX_STEPS} steps identical: {reproducible}; training {secs:.0}s",
            losses[0],
            losses.len()
        ),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Fraction of decoder steps whose attention peak sits on the character the
/// generator was rendering at that step's first frame.
fn peak_on_sounding_char(alignments: &[tacotron_core::model::AlignmentMatrix], spec: &ToysetSpec, r: usize) -> f64 {
    let hop = SpectralConfig::default().frame_shift_samples();
    let (mut hits, mut total) = (0, 0);
    for a in alignments {
        let steps = a.decoder_steps();
        for (s, &peak) in a.argmax_path().iter().enumerate().take(steps) {
            let sounding = (s * r * hop / spec.samples_per_char()).min(a.text_len() - 1);
            hits += usize::from(peak == sounding);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

fn alignment_learning(full: &Tacotron, records: &[FeatureRecord], spec: &ToysetSpec) -> Outcome {
    let alignments = evaluate_alignments(full, records).unwrap();
    let on_char = peak_on_sounding_char(&alignments, spec, full.r());
    let scores: Vec<f64> = alignments.iter().map(|a| a.monotonicity()).collect();
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let vanilla_started = Instant::now();
    let (vanilla, _) = train(Variant::Vanilla, records, OVERFIT_STEPS);
    let vanilla_scores: Vec<f64> = evaluate_alignments(&vanilla.model, records)
        .unwrap()
        .iter()
        .map(|a| a.monotonicity())
        .collect();
    let (f, v) = (mean(&scores), mean(&vanilla_scores));
    Outcome {
        pass: min >= MONOTONICITY_MIN,
        detail: format!(
            "full min {min:.3} mean {f:.3} (need each >= {MONOTONICITY_MIN}); vanilla mean {v:.3} after {OVERFIT_STEPS} steps \
             [{:.0}s]; vanilla strictly lower (soft): {}; full attention peak on the sounding character {on_char:.3} (info)",
            vanilla_started.elapsed().as_secs_f64(),
            v < f
        ),
    }
}

/// Fraction of analysis frames whose dominant frequency is the generator's
/// tone for the character sounding at that time (either neighbour within
/// half a frame of a boundary); frames past the source's end must be silent.
fn tone_match(result: &SynthResult, text: &str, spec: &ToysetSpec) -> f64 {
    let cfg = SpectralConfig::default();
    let frames = stft(&result.waveform, &cfg).unwrap();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let seg = (spec.sample_rate_hz as f64 * spec.char_duration_ms / 1000.0) as isize;
    let chars: Vec<char> = text.chars().collect();
    let source_len = seg * chars.len() as isize;
    let hop = cfg.frame_shift_samples() as isize;
    let half = cfg.frame_length_samples() as isize / 2;
    let peak = result.waveform.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tone = |c: char| spec.tone_base_hz + spec.tone_step_hz * spec.alphabet.iter().position(|&a| a == c).unwrap() as f64;
    let mut hits = 0;
    for t in 0..frames.frames {
        let centre = t as isize * hop;
        let mags: Vec<f64> = frames.frame(t).iter().map(|c| c.norm()).collect();
        if centre >= source_len {
            let rms = (result.waveform.samples[(centre - half).max(0) as usize..]
                .iter()
                .take(2 * half as usize)
                .map(|x| x * x)
                .sum::<f64>()
                / (2 * half) as f64)
                .sqrt();
            hits += usize::from(rms < 0.01 * peak);
            continue;
        }
        let dominant = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap() as f64 * bin_hz;
        let lo = ((centre - half).max(0) / seg) as usize;
        let hi = (((centre + half).min(source_len - 1)) / seg) as usize;
        let ok = (lo..=hi).any(|i| (dominant - tone(chars[i])).abs() <= spec.tone_step_hz / 2.0);
        hits += usize::from(ok);
    }
    hits as f64 / frames.frames as f64
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tacotron"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs")
}

fn determinism(dir: &Path) -> Outcome {
    let p = |q: &Path| q.to_str().unwrap().to_string();
    let train = |name: &str| {
        let run = dir.join(name);
        let out = run_cli(&[
            "train", "--toyset", "--run-dir", &p(&run), "--seed", "7", "--steps", "5",
            "--set", "model.preset=tiny", "--set", "toyset.utterances=4",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        run
    };
    let (a, b) = (train("a"), train("b"));
    let metrics_same = std::fs::read(a.join("metrics.csv")).unwrap() == std::fs::read(b.join("metrics.csv")).unwrap();
    let ckpt_same = std::fs::read(a.join("checkpoints/latest.ckpt")).unwrap()
        == std::fs::read(b.join("checkpoints/latest.ckpt")).unwrap();
    let synth = |name: &str| {
        let out_dir = dir.join(name);
        let out = run_cli(&[
            "synth", "--checkpoint", &p(&a.join("checkpoints/latest.ckpt")), "--text", "bead",
            "--out", &p(&out_dir), "--no-inference-dropout", "--set", "synth.max_decoder_steps=40",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("utt_000.wav")).unwrap()
    };
    let wav_same = synth("s1") == synth("s2");
    let invert = |name: &str| {
        let out = dir.join(name);
        let run = run_cli(&[
            "invert", "--spectrogram", &p(&dir.join("s1/utt_000.linear.csv")), "--out", &p(&out),
            "--random-phase", "--seed", "4",
        ]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        std::fs::read(out).unwrap()
    };
    let invert_same = invert("i1.wav") == invert("i2.wav");
    Outcome {
        pass: metrics_same && ckpt_same && wav_same && invert_same,
        detail: format!(
            "train metrics CSV identical: {metrics_same}, checkpoint identical: {ckpt_same}, \
             synth WAV identical: {wav_same}, invert WAV identical: {invert_same}"
        ),
    }
}

fn checkpoint_round_trip(records: &[FeatureRecord]) -> Outcome {
    let (trainer, _) = train(Variant::Full, &records[..4], 3);
    let bytes = encode_checkpoint(&trainer.model, &trainer.adam, 3, &SpectralConfig::default(), &Charset::default());
    let restored = decode_checkpoint(&bytes).unwrap();
    let mut rng = Rng::new(42);
    let mut identical = restored.model.params == trainer.model.params;
    for trial in 0..5 {
        let ids: Vec<Vec<usize>> = (0..2).map(|_| (0..3 + rng.below(6)).map(|_| 2 + rng.below(40)).collect()).collect();
        let frames = 2 * (2 + rng.below(10));
        let targets = Tensor::matrix(2 * frames, 80, (0..2 * frames * 80).map(|_| rng.uniform()).collect()).unwrap();
        let run = |m: &Tacotron, mode| {
            let tape = Tape::new();
            let mut ctx = m.ctx(&tape, mode, Rng::new(trial));
            let out = m.forward(&mut ctx, &ids, &targets, frames, Feedback::TeacherForcing).unwrap();
            let mel = (*out.mel.unwrap().value()).clone();
            let linear = (*out.linear.value()).clone();
            let weights: Vec<Tensor> = out.alignments.into_iter().map(|a| a.weights).collect();
            (mel, linear, weights)
        };
        for mode in [Mode::Infer, Mode::Train] {
            let (a, b) = (run(&trainer.model, mode), run(&restored.model, mode));
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            identical &= bits(&a.0) == bits(&b.0) && bits(&a.1) == bits(&b.1);
            identical &= a.2.iter().zip(&b.2).all(|(x, y)| bits(x) == bits(y));
        }
    }
    let adam_same = restored.adam.first_moment == trainer.adam.first_moment
        && restored.adam.second_moment == trainer.adam.second_moment;
    Outcome {
        pass: identical && adam_same && restored.step == 3,
        detail: format!("5 random batches in train and inference mode bit-identical: {identical}; Adam moments identical: {adam_same}"),
    }
}

fn main() {
    let mut all_pass = true;
    let mut record = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        report(n, name, started, &outcome);
        all_pass &= outcome.pass;
    };

    let t = Instant::now();
    record(1, "gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    record(2, "STFT/ISTFT identity", t, stft_identity());
    let t = Instant::now();
    record(3, "Griffin-Lim monotonicity and convergence", t, griffin_lim_convergence());
    let t = Instant::now();
    record(4, "shape and reduction-factor contract", t, shape_contract());

    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(&dir.path().join("toy"));
    let t = Instant::now();
    let (full, losses) = train(Variant::Full, &corpus.records, OVERFIT_STEPS);
    let secs = t.elapsed().as_secs_f64();
    record(5, "toy corpus overfit", t, overfit(&corpus, &losses, secs));
    let t = Instant::now();
    record(6, "alignment learning", t, alignment_learning(&full.model, &corpus.records, &corpus.spec));

    let t = Instant::now();
    let synth_cfg = SynthConfig::default();
    let results: Vec<SynthResult> = corpus
        .manifest
        .records
        .iter()
        .map(|r| synthesize(&r.text, &full.model, &Charset::default(), &SpectralConfig::default(), &synth_cfg).unwrap())
        .collect();
    let matches: Vec<f64> = results
        .iter()
        .zip(&corpus.manifest.records)
        .map(|(res, rec)| tone_match(res, &rec.text, &corpus.spec))
        .collect();
    record(
        7,
        "synthesis fidelity",
        t,
        Outcome {
            pass: matches[0] >= TONE_MATCH_MIN,
            detail: format!(
                "{:?} ({:?}) frames on the generator's tone: {:.3} (need >= {TONE_MATCH_MIN}); all sentences min {:.3} mean {:.3}",
                corpus.manifest.records[0].id,
                corpus.manifest.records[0].text,
                matches[0],
                matches.iter().cloned().fold(f64::INFINITY, f64::min),
                mean(&matches)
            ),
        },
    );
    let t = Instant::now();
    let stops: Vec<String> = results
        .iter()
        .map(|r| format!("{}@{}", r.stop, r.decoder_steps))
        .collect();
    let silent = results.iter().filter(|r| r.stop == StopReason::Silence).count();
    record(
        8,
        "zero-pad stopping",
        t,
        Outcome {
            pass: silent >= SILENCE_STOPS_MIN,
            detail: format!("{silent}/10 utterances stopped on silence (need >= {SILENCE_STOPS_MIN}): {stops:?}"),
        },
    );

    let t = Instant::now();
    record(9, "determinism", t, determinism(&dir.path().join("det")));
    let t = Instant::now();
    record(10, "checkpoint round trip", t, checkpoint_round_trip(&corpus.records));

    if !all_pass {
        std::process::exit(1);
    }
}
