//! Text to waveform: free-running decode, post-net, magnitude sharpening,
//! Griffin-Lim and de-emphasis.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::export::{matrix_to_csv, matrix_to_pgm};
use crate::dsp::{de_emphasis, exp_expand, griffin_lim, write_wav, DspError, MagnitudeSpectrogram, PhaseInit, SpectralConfig, Waveform};
use crate::grad::ops::Mode;
use crate::grad::{GradError, Rng, Tape, Tensor};
use crate::model::{AlignmentMatrix, ModelError, Tacotron, Variant};
use crate::text::{Charset, TextError};

/// Peak level of the written waveform, leaving headroom for overshoot.
pub const OUTPUT_PEAK: f64 = 0.95;
/// Hard cap on decoder steps regardless of text length.
pub const MAX_DECODER_STEPS_CAP: usize = 2000;
/// Decoder steps allowed per input character (before dividing by `r`).
pub const STEPS_PER_CHAR: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("synthesis configuration: {0}")]
    Config(String),
    #[error("non-finite values in {stage} for {text:?}")]
    NonFinite { stage: &'static str, text: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Inference knobs. Griffin-Lim iterations and the magnitude power come from
/// [`SpectralConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Normalized level below which a frame counts as silent; 0 disables the
    /// silence stop.
    pub stop_threshold: f64,
    /// Consecutive silent frames that end decoding.
    pub stop_patience: usize,
    /// Fixed decoder step budget; `None` uses `ceil(30·L/r)` capped at 2000.
    pub max_decoder_steps: Option<usize>,
    /// Keep decoder pre-net dropout active at inference.
    pub inference_dropout: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stop_threshold: 0.02,
            stop_patience: 5,
            max_decoder_steps: None,
            inference_dropout: true,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..1.0).contains(&self.stop_threshold) {
            return Err(SynthError::Config(format!("stop_threshold {} outside [0,1)", self.stop_threshold)));
        }
        if self.stop_patience == 0 {
            return Err(SynthError::Config("stop_patience must be ≥ 1".into()));
        }
        if self.max_decoder_steps == Some(0) {
            return Err(SynthError::Config("max_decoder_steps must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Decoder step budget for `text_len` characters at reduction factor `r`.
    pub fn max_steps(&self, text_len: usize, r: usize) -> usize {
        self.max_decoder_steps
            .unwrap_or_else(|| (STEPS_PER_CHAR * text_len).div_ceil(r).clamp(1, MAX_DECODER_STEPS_CAP))
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        vec![
            ("stop_threshold".into(), self.stop_threshold.to_string()),
            ("stop_patience".into(), self.stop_patience.to_string()),
            (
                "max_decoder_steps".into(),
                self.max_decoder_steps.map_or("auto".into(), |s| s.to_string()),
            ),
            ("inference_dropout".into(), self.inference_dropout.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SynthError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| SynthError::Config(format!("synth.{key} = {value:?}: {e}")))
        }
        match key {
            "stop_threshold" => self.stop_threshold = parse(key, value)?,
            "stop_patience" => self.stop_patience = parse(key, value)?,
            "max_decoder_steps" if value.trim() == "auto" => self.max_decoder_steps = None,
            "max_decoder_steps" => self.max_decoder_steps = Some(parse(key, value)?),
            "inference_dropout" => self.inference_dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(SynthError::Config(format!("unknown key synth.{key}"))),
        }
        Ok(())
    }
}

/// True when each of the last `stop_patience` frames (rows) peaks below
/// `stop_threshold`. A zero threshold never stops.
pub fn stop_decision(recent: &[&[f64]], cfg: &SynthConfig) -> bool {
    let n = cfg.stop_patience;
    cfg.stop_threshold > 0.0
        && recent.len() >= n
        && recent[recent.len() - n..]
            .iter()
            .all(|f| f.iter().all(|&v| v < cfg.stop_threshold))
}

/// Streaming form of [`stop_decision`] over decoder output groups.
#[derive(Clone, Debug, Default)]
pub struct SilenceDetector {
    quiet: usize,
}

impl SilenceDetector {
    /// Feeds `[r×F]` frames; returns true once the quiet run reaches patience.
    pub fn observe(&mut self, group: &Tensor, cfg: &SynthConfig) -> bool {
        for r in 0..group.rows() {
            if group.row(r).iter().all(|&v| v < cfg.stop_threshold) {
                self.quiet += 1;
            } else {
                self.quiet = 0;
            }
        }
        cfg.stop_threshold > 0.0 && self.quiet >= cfg.stop_patience
    }

    /// Length of the current trailing run of silent frames.
    pub fn quiet_frames(&self) -> usize {
        self.quiet
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Silence,
    MaxSteps,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Silence => "silence",
            StopReason::MaxSteps => "max_steps",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthResult {
    pub text: String,
    pub waveform: Waveform,
    /// Decoder mel frames `[T×mel]`; absent for the vanilla variant.
    pub mel: Option<Tensor>,
    /// Normalized linear frames `[T×bins]`.
    pub linear: Tensor,
    pub alignment: AlignmentMatrix,
    pub stop: StopReason,
    /// Decoder steps actually run (including any trimmed silent tail).
    pub decoder_steps: usize,
    pub spectral_convergence: Vec<f64>,
}

fn check_finite(t: &Tensor, stage: &'static str, text: &str) -> Result<(), SynthError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(SynthError::NonFinite {
            stage,
            text: text.to_string(),
        })
    }
}

/// Synthesizes one utterance. With inference dropout off the result is a
/// pure function of the inputs; with it on, of the inputs and `cfg.seed`.
///
/// When decoding ends on silence the quiet frames that triggered the stop are
/// dropped before inversion.
pub fn synthesize(
    text: &str,
    model: &Tacotron,
    charset: &Charset,
    spectral: &SpectralConfig,
    cfg: &SynthConfig,
) -> Result<SynthResult, SynthError> {
    cfg.validate()?;
    let normalized = charset.normalize(text)?;
    let encoded = charset.encode(&normalized)?;
    let r = model.r();
    let max_steps = cfg.max_steps(encoded.len(), r);

    let tape = Tape::no_grad();
    let mut rng = Rng::new(cfg.seed);
    let mut ctx = model.ctx(&tape, Mode::Infer, rng.fork());
    ctx.inference_dropout = cfg.inference_dropout;
    let memory = model.encode(&mut ctx, std::slice::from_ref(&encoded.ids))?;
    let mut detector = SilenceDetector::default();
    let (frames, weights, stopped) = model
        .decoder
        .decode_free_running(&mut ctx, &memory, max_steps, |g| detector.observe(g, cfg))?;
    check_finite(&frames, "decoder frames", &normalized)?;
    let decoder_steps = weights.rows();
    let stop = if stopped { StopReason::Silence } else { StopReason::MaxSteps };
    let keep = if stopped {
        frames.rows().saturating_sub(detector.quiet_frames()).max(1)
    } else {
        frames.rows()
    };
    let frames = Tensor::matrix(keep, frames.cols(), frames.data()[..keep * frames.cols()].to_vec())?;

    let (mel, linear) = match model.variant() {
        Variant::Vanilla => (None, frames),
        _ => {
            let mel_var = tape.constant(frames.clone());
            let linear = (*model.postnet(&mut ctx, mel_var, 1)?.value()).clone();
            (Some(frames), linear)
        }
    };
    check_finite(&linear, "post-net output", &normalized)?;

    let linear = linear.map(|v| v.clamp(0.0, 1.0));
    let power = spectral.magnitude_power;
    let magnitude = MagnitudeSpectrogram::new(exp_expand(&linear).map(|m| m.powf(power)))?;
    let gl = griffin_lim(&magnitude, spectral, spectral.griffin_lim_iters, PhaseInit::Random, &mut rng, None)?;
    let mut waveform = de_emphasis(&gl.waveform, spectral.preemphasis);
    if waveform.samples.iter().any(|x| !x.is_finite()) {
        return Err(SynthError::NonFinite {
            stage: "waveform",
            text: normalized,
        });
    }
    waveform.peak_normalize(OUTPUT_PEAK);
    Ok(SynthResult {
        text: normalized,
        waveform,
        mel,
        linear,
        alignment: AlignmentMatrix { weights },
        stop,
        decoder_steps,
        spectral_convergence: gl.spectral_convergence,
    })
}

/// Writes `<utt>.alignment.{csv,pgm}`, `<utt>.mel.csv`, `<utt>.linear.{csv,pgm}`
/// and `<utt>.wav` into `dir`; returns the paths written. Spectrogram images
/// have one row per frame.
pub fn export_diagnostics(result: &SynthResult, dir: impl AsRef<Path>, utt: &str) -> Result<Vec<PathBuf>, SynthError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut put = |kind: &str, bytes: Vec<u8>| -> Result<(), SynthError> {
        let path = dir.join(format!("{utt}.{kind}"));
        fs::write(&path, bytes).map_err(io(&path))?;
        written.push(path);
        Ok(())
    };
    put("alignment.csv", matrix_to_csv(&result.alignment.weights).into_bytes())?;
    put("alignment.pgm", matrix_to_pgm(&result.alignment.weights))?;
    if let Some(mel) = &result.mel {
        put("mel.csv", matrix_to_csv(mel).into_bytes())?;
    }
    put("linear.csv", matrix_to_csv(&result.linear).into_bytes())?;
    put("linear.pgm", matrix_to_pgm(&result.linear))?;
    let wav = dir.join(format!("{utt}.wav"));
    write_wav(&wav, &result.waveform)?;
    written.push(wav);
    Ok(written)
}
