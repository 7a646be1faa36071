use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use tacotron_core::corpus::{generate_toyset, load_manifest, FeatureCache, FeatureRecord, Featurizer, Manifest};
use tacotron_core::dsp::export::read_csv;
use tacotron_core::dsp::{
    de_emphasis, exp_expand, griffin_lim, read_wav, stft, write_wav, MagnitudeSpectrogram, PhaseInit, SpectralConfig,
};
use tacotron_core::grad::gradcheck::{corrupted_tanh_check, primitive_suite};
use tacotron_core::grad::{Rng, Tensor};
use tacotron_core::model::{end_to_end_gradcheck, ModelConfig, Tacotron, Variant};
use tacotron_core::synth::{export_diagnostics, synthesize, OUTPUT_PEAK};
use tacotron_core::text::Charset;
use tacotron_core::trainer::{evaluate_alignments, load_checkpoint, Checkpoint, RunDir, TrainError, Trainer};

use crate::config::{parse_override, RunConfig};
use crate::{bad_input, ConfigArgs};

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()
        .map_err(bad_input)?;
    RunConfig::load(args.config.as_deref(), &overrides).map_err(bad_input)
}

/// Featurizes `manifest` through a cache under `cache_root`, failing on the
/// first bad utterance.
fn featurize_manifest(manifest: &Manifest, dsp: &SpectralConfig, cache_root: &Path) -> Result<Vec<FeatureRecord>> {
    if manifest.is_empty() {
        return Err(bad_input(anyhow::anyhow!("manifest has no utterances")));
    }
    let featurizer = Featurizer::new(dsp.clone()).map_err(bad_input)?;
    let cache = FeatureCache::new(cache_root, dsp)?;
    featurizer
        .featurize_all(manifest, &Charset::default(), Some(&cache))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(bad_input)
}

pub fn featurize(manifest_path: &Path, out: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = run_config(args)?;
    let manifest = load_manifest(manifest_path).map_err(bad_input)?;
    if manifest.is_empty() {
        return Err(bad_input(anyhow::anyhow!("{} has no utterances", manifest_path.display())));
    }
    let featurizer = Featurizer::new(cfg.dsp.clone()).map_err(bad_input)?;
    let cache = FeatureCache::new(out, &cfg.dsp)?;
    cfg.write_echo(out)?;
    let already: Vec<bool> = manifest.records.iter().map(|r| cache.path(&r.id).exists()).collect();
    let results = featurizer.featurize_all(&manifest, &Charset::default(), Some(&cache));
    let (mut total, mut failures) = (0usize, Vec::new());
    println!("id,frames,source");
    for ((record, result), cached) in manifest.records.iter().zip(&results).zip(already) {
        match result {
            Ok(f) => {
                total += f.frames();
                println!("{},{},{}", record.id, f.frames(), if cached { "cache" } else { "computed" });
            }
            Err(e) => failures.push(format!("{}: {e}", record.id)),
        }
    }
    println!("total,{total},{} utterances", results.len() - failures.len());
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!("failed: {f}");
    }
    Err(bad_input(anyhow::anyhow!("{} of {} utterances failed", failures.len(), results.len())))
}

/// Training records from a manifest or a freshly generated tone corpus.
fn training_records(manifest: Option<&Path>, cfg: &RunConfig, run_dir: &Path) -> Result<Vec<FeatureRecord>> {
    let manifest = match manifest {
        Some(path) => load_manifest(path).map_err(bad_input)?,
        None => {
            if cfg.toyset.sample_rate_hz != cfg.dsp.sample_rate_hz {
                return Err(bad_input(anyhow::anyhow!(
                    "toyset.sample_rate_hz {} differs from dsp.sample_rate_hz {}",
                    cfg.toyset.sample_rate_hz,
                    cfg.dsp.sample_rate_hz
                )));
            }
            generate_toyset(&cfg.toyset, run_dir.join("toyset"))?
        }
    };
    featurize_manifest(&manifest, &cfg.dsp, &run_dir.join("cache"))
}

/// Explicitly requested model/dsp settings must agree with the checkpoint;
/// Griffin-Lim settings are inference-only and may differ.
fn check_against_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<(SpectralConfig, ModelConfig)> {
    let mut spectral = ck.spectral.clone();
    let mut problems = Vec::new();
    for (key, ck_value) in ck.spectral.key_values() {
        let dotted = format!("dsp.{key}");
        if !cfg.is_set(&dotted) {
            continue;
        }
        let wanted = cfg.dsp.key_values().into_iter().find(|(k, _)| *k == key).expect("same keys").1;
        if key == "griffin_lim_iters" || key == "magnitude_power" {
            spectral.set(&key, &wanted)?;
        } else if wanted != ck_value {
            problems.push(format!("{dotted}: checkpoint {ck_value}, requested {wanted}"));
        }
    }
    for (key, ck_value) in ck.model.config.key_values() {
        let dotted = format!("model.{key}");
        let wanted = cfg.model.key_values().into_iter().find(|(k, _)| *k == key).expect("same keys").1;
        if cfg.is_set(&dotted) && wanted != ck_value {
            problems.push(format!("{dotted}: checkpoint {ck_value}, requested {wanted}"));
        }
    }
    if !problems.is_empty() {
        return Err(bad_input(TrainError::ConfigMismatch(problems.join("; "))));
    }
    Ok((spectral, ck.model.config.clone()))
}

pub fn train(manifest: Option<&Path>, run_dir: &Path, resume: Option<&Path>, args: &ConfigArgs) -> Result<ExitCode> {
    let mut cfg = run_config(args)?;
    let (mut trainer, charset) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(bad_input)?;
            let (spectral, model_cfg) = check_against_checkpoint(&cfg, &ck)?;
            cfg.dsp = spectral;
            cfg.model = model_cfg;
            info!("resuming {} at step {}", path.display(), ck.step);
            (Trainer::resume(ck.model, ck.adam, ck.step, cfg.train.clone()), ck.charset)
        }
        None => {
            let model = Tacotron::new(cfg.model.clone(), cfg.train.seed).map_err(bad_input)?;
            (Trainer::new(model, cfg.train.clone()).map_err(bad_input)?, Charset::default())
        }
    };
    cfg.write_echo(run_dir)?;
    let records = training_records(manifest, &cfg, run_dir)?;
    info!(
        "training {} variant on {} utterances, {} parameters",
        cfg.model.variant,
        records.len(),
        trainer.model.params.num_scalars()
    );
    let run = RunDir::new(run_dir);
    let every = (cfg.train.max_steps / 20).max(1);
    let mut last = None;
    trainer.fit(&records, &cfg.dsp, &charset, Some(&run), |m| {
        if m.step % every == 0 || m.step == 1 {
            info!(
                "step {} lr {:e} mel {:.4} linear {:.4} grad norm {:.3}",
                m.step,
                m.lr,
                m.mel_loss.unwrap_or(f64::NAN),
                m.linear_loss,
                m.grad_norm
            );
        }
        last = Some(m.clone());
    })?;
    if let Some(m) = last {
        println!(
            "step {} mel_loss {} linear_loss {:.6}",
            m.step,
            m.mel_loss.map_or("-".into(), |v| format!("{v:.6}")),
            m.linear_loss
        );
    }
    println!("checkpoint {}", run.latest().display());
    Ok(ExitCode::SUCCESS)
}

pub fn synth(checkpoint: &Path, text: Option<&str>, textfile: Option<&Path>, out: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = run_config(args)?;
    let ck = load_checkpoint(checkpoint).map_err(bad_input)?;
    let (spectral, _) = check_against_checkpoint(&cfg, &ck)?;
    let lines: Vec<String> = match (text, textfile) {
        (Some(t), _) => vec![t.to_string()],
        (None, Some(path)) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(bad_input)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, None) => unreachable!("clap requires one input"),
    };
    if lines.is_empty() {
        return Err(bad_input(anyhow::anyhow!("no text to synthesize")));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    println!("utterance,stop,decoder_steps,frames,seconds,text");
    for (i, line) in lines.iter().enumerate() {
        let utt = format!("utt_{i:03}");
        let result = synthesize(line, &ck.model, &ck.charset, &spectral, &cfg.synth).map_err(bad_input)?;
        export_diagnostics(&result, out, &utt)?;
        println!(
            "{utt},{},{},{},{:.3},{}",
            result.stop,
            result.decoder_steps,
            result.linear.rows(),
            result.waveform.duration_s(),
            result.text
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub enum InvertInput {
    Spectrogram { csv: PathBuf, magnitude: bool },
    RoundTrip { wav: PathBuf },
}

pub fn invert(input: InvertInput, out: &Path, power: f64, random_phase: bool, seed: u64, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = run_config(args)?;
    let dsp = &cfg.dsp;
    if !(power > 0.0 && power.is_finite()) {
        return Err(bad_input(anyhow::anyhow!("--power {power} must be positive")));
    }
    let init = if random_phase { PhaseInit::Random } else { PhaseInit::Zeros };
    let mut rng = Rng::new(seed);
    let (magnitude, length, emphasized) = match input {
        InvertInput::Spectrogram { csv, magnitude } => {
            let m = read_csv(&csv).map_err(bad_input)?;
            if m.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(bad_input(anyhow::anyhow!("{}: negative or non-finite magnitudes", csv.display())));
            }
            let m = if magnitude { m } else { exp_expand(&m.map(|v| v.min(1.0))) };
            (m, None, true)
        }
        InvertInput::RoundTrip { wav } => {
            let w = read_wav(&wav).map_err(bad_input)?;
            if w.sample_rate_hz != dsp.sample_rate_hz {
                return Err(bad_input(anyhow::anyhow!(
                    "{} is {} Hz, config expects {}",
                    wav.display(),
                    w.sample_rate_hz,
                    dsp.sample_rate_hz
                )));
            }
            let spec = stft(&w, dsp).map_err(bad_input)?;
            (MagnitudeSpectrogram::from_stft(&spec, dsp).frames, Some(w.len()), false)
        }
    };
    if magnitude.cols() != dsp.linear_bins() {
        return Err(bad_input(anyhow::anyhow!(
            "spectrogram has {} bins, dsp settings give {}",
            magnitude.cols(),
            dsp.linear_bins()
        )));
    }
    let sharpened: Tensor = magnitude.map(|v| v.powf(power));
    let mag = MagnitudeSpectrogram::new(sharpened).map_err(bad_input)?;
    let gl = griffin_lim(&mag, dsp, dsp.griffin_lim_iters, init, &mut rng, length)?;
    let mut wav = if emphasized { de_emphasis(&gl.waveform, dsp.preemphasis) } else { gl.waveform };
    let peak = wav.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if emphasized || peak > 1.0 {
        wav.peak_normalize(OUTPUT_PEAK);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_wav(out, &wav)?;
    println!("iteration,spectral_convergence");
    for (i, e) in gl.spectral_convergence.iter().enumerate() {
        println!("{i},{e:.6e}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(tolerance: f64, e2e_tolerance: f64, seed: u64) -> Result<ExitCode> {
    let mut failed = Vec::new();
    println!("check,max_rel_err,tolerance,status");
    let mut report = |name: &str, err: f64, tol: f64| {
        let ok = err < tol;
        println!("{name},{err:.3e},{tol:e},{}", if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    for r in primitive_suite(seed)? {
        report(&r.name, r.max_rel_err(), tolerance);
    }
    for variant in Variant::ALL {
        let r = end_to_end_gradcheck(variant, seed, 4)?;
        report(&r.name, r.max_rel_err(), e2e_tolerance);
    }
    // the checker must reject a deliberately wrong backward rule
    let control = corrupted_tanh_check(seed)?;
    let caught = !control.passed(tolerance.max(1e-3));
    println!(
        "negative_control,{:.3e},-,{}",
        control.max_rel_err(),
        if caught { "caught" } else { "MISSED" }
    );
    if !caught {
        failed.push("negative_control".into());
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

pub fn ablate(run_dir: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = run_config(args)?;
    cfg.write_echo(run_dir)?;
    let records = training_records(None, &cfg, run_dir)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let model_cfg = cfg.model.clone().with_variant(variant);
        let model = Tacotron::new(model_cfg, cfg.train.seed).map_err(bad_input)?;
        let mut trainer = Trainer::new(model, cfg.train.clone()).map_err(bad_input)?;
        let run = RunDir::new(run_dir.join(variant.name()));
        info!("ablation: training {variant} for {} steps", cfg.train.max_steps);
        let mut final_loss = f64::NAN;
        trainer.fit(&records, &cfg.dsp, &Charset::default(), Some(&run), |m| final_loss = m.total_loss())?;
        let scores: Vec<f64> = evaluate_alignments(&trainer.model, &records)?
            .iter()
            .map(|a| a.monotonicity())
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        rows.push((variant, final_loss, mean, min));
    }
    let mut table = String::from("variant,steps,final_loss,mean_monotonicity,min_monotonicity\n");
    for (variant, loss, mean, min) in &rows {
        table.push_str(&format!("{variant},{},{loss:.6},{mean:.4},{min:.4}\n", cfg.train.max_steps));
    }
    let path = run_dir.join("ablation.csv");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    let score = |v: Variant| rows.iter().find(|r| r.0 == v).map(|r| r.2).expect("all variants ran");
    let (full, vanilla) = (score(Variant::Full), score(Variant::Vanilla));
    if full >= vanilla {
        println!("full monotonicity {full:.4} >= vanilla {vanilla:.4}");
    } else {
        warn!("full monotonicity {full:.4} below vanilla {vanilla:.4}");
    }
    if rows.iter().any(|r| !r.1.is_finite()) {
        bail!("a variant finished with a non-finite loss");
    }
    Ok(ExitCode::SUCCESS)
}
