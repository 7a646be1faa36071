//! `tacotron`: featurize corpora, train, synthesize, invert spectrograms and
//! run verification suites.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! input error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tacotron", version, about = "Character-to-spectrogram TTS with Griffin-Lim synthesis")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Plain-text `key = value` file applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set model.r=5`; repeatable, rightmost wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute and cache features for every manifest entry.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache root.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a manifest or a generated tone corpus.
    Train {
        #[arg(long, conflicts_with = "toyset", required_unless_present = "toyset")]
        manifest: Option<PathBuf>,
        /// Generate the synthetic tone corpus into the run directory.
        #[arg(long)]
        toyset: bool,
        #[arg(long)]
        run_dir: PathBuf,
        /// full, vanilla or gru-encoder.
        #[arg(long)]
        variant: Option<String>,
        /// Reduction factor (frames per decoder step).
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Synthesize speech from text with a trained checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "textfile", required_unless_present = "textfile")]
        text: Option<String>,
        /// One utterance per non-empty line.
        #[arg(long)]
        textfile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Disable decoder pre-net dropout for repeatable output.
        #[arg(long)]
        no_inference_dropout: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Griffin-Lim inversion of a spectrogram CSV, or a WAV round trip.
    Invert {
        /// Normalized log-linear frames (one per row), as written by `synth`.
        #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
        spectrogram: Option<PathBuf>,
        /// Treat the CSV as raw magnitudes instead of normalized levels.
        #[arg(long, requires = "spectrogram")]
        magnitude: bool,
        #[arg(long, requires = "roundtrip")]
        wav: Option<PathBuf>,
        /// Invert the WAV's own STFT magnitude and report the error per iteration.
        #[arg(long, requires = "wav")]
        roundtrip: bool,
        #[arg(long)]
        out: PathBuf,
        /// Griffin-Lim iterations (default: dsp.griffin_lim_iters).
        #[arg(long)]
        iters: Option<usize>,
        /// Exponent applied to magnitudes before inversion.
        #[arg(long, default_value_t = 1.0)]
        power: f64,
        /// Start from random rather than zero phase.
        #[arg(long)]
        random_phase: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference gradient checks of every primitive and the model.
    Gradcheck {
        /// Bound on primitive relative errors.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Bound on end-to-end model relative errors.
        #[arg(long, default_value_t = 1e-3)]
        e2e_tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train all three variants on the tone corpus and compare alignments.
    Ablate {
        #[arg(long, required = true)]
        toyset: bool,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Marks an error as caused by the caller's input (exit code 2).
#[derive(Debug)]
pub struct BadInput;

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}

pub fn bad_input(e: impl Into<anyhow::Error>) -> anyhow::Error {
    e.into().context(BadInput)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Featurize { manifest, out, config } => commands::featurize(&manifest, &out, &config),
        Command::Train {
            manifest,
            toyset: _,
            run_dir,
            variant,
            r,
            seed,
            steps,
            resume,
            config,
        } => {
            let mut config = config;
            push(&mut config, "model.variant", variant);
            push(&mut config, "model.r", r);
            push(&mut config, "train.seed", seed);
            push(&mut config, "train.max_steps", steps);
            commands::train(manifest.as_deref(), &run_dir, resume.as_deref(), &config)
        }
        Command::Synth {
            checkpoint,
            text,
            textfile,
            out,
            no_inference_dropout,
            seed,
            config,
        } => {
            let mut config = config;
            push(&mut config, "synth.seed", seed);
            if no_inference_dropout {
                push(&mut config, "synth.inference_dropout", Some(false));
            }
            commands::synth(&checkpoint, text.as_deref(), textfile.as_deref(), &out, &config)
        }
        Command::Invert {
            spectrogram,
            magnitude,
            wav,
            roundtrip: _,
            out,
            iters,
            power,
            random_phase,
            seed,
            config,
        } => {
            let mut config = config;
            push(&mut config, "dsp.griffin_lim_iters", iters);
            let input = match (spectrogram, wav) {
                (Some(csv), _) => commands::InvertInput::Spectrogram { csv, magnitude },
                (None, Some(wav)) => commands::InvertInput::RoundTrip { wav },
                (None, None) => unreachable!("clap requires one input"),
            };
            commands::invert(input, &out, power, random_phase, seed, &config)
        }
        Command::Gradcheck {
            tolerance,
            e2e_tolerance,
            seed,
        } => commands::gradcheck(tolerance, e2e_tolerance, seed),
        Command::Ablate {
            toyset: _,
            run_dir,
            seed,
            steps,
            config,
        } => {
            let mut config = config;
            push(&mut config, "train.seed", seed);
            push(&mut config, "train.max_steps", steps);
            commands::ablate(&run_dir, &config)
        }
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            let input = err.downcast_ref::<BadInput>().is_some();
            let message: Vec<String> = err
                .chain()
                .map(|c| c.to_string())
                .filter(|m| *m != BadInput.to_string())
                .collect();
            eprintln!("error: {}", message.join(": "));
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}

fn push<T: ToString>(config: &mut ConfigArgs, key: &str, value: Option<T>) {
    if let Some(v) = value {
        config.set.push(format!("{key}={}", v.to_string()));
    }
}
