//! Waveform I/O and spectral processing.

pub mod export;
mod griffin_lim;
mod levels;
mod mel;
mod stft;
mod wav;

use std::path::PathBuf;

pub use griffin_lim::{griffin_lim, GriffinLimOutput, PhaseInit};
pub use levels::{exp_expand, log_compress, MIN_LEVEL_DB};
pub use mel::{hz_to_mel, linear_to_mel, mel_to_hz, MelFilterbank};
pub use stft::{istft, stft, ComplexFrames, SpectralEngine};
pub use wav::{read_wav, write_wav};

use crate::grad::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid spectral configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
}

/// Analysis/synthesis settings shared by feature extraction and inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub window: Window,
    pub mel_bands: usize,
    pub mel_fmin_hz: f64,
    /// Upper mel edge; `None` means Nyquist.
    pub mel_fmax_hz: Option<f64>,
    pub griffin_lim_iters: usize,
    pub magnitude_power: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            frame_length_ms: 50.0,
            frame_shift_ms: 12.5,
            fft_size: 2048,
            preemphasis: 0.97,
            window: Window::Hann,
            mel_bands: 80,
            mel_fmin_hz: 0.0,
            mel_fmax_hz: None,
            griffin_lim_iters: 50,
            magnitude_power: 1.2,
        }
    }
}

impl SpectralConfig {
    pub fn frame_length_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn linear_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }

    pub fn mel_fmax(&self) -> f64 {
        self.mel_fmax_hz.unwrap_or_else(|| self.nyquist_hz())
    }

    /// Number of frames the centered STFT produces for `samples` samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        1 + samples / self.frame_shift_samples()
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidConfig(m));
        let frame = self.frame_length_samples();
        let hop = self.frame_shift_samples();
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if frame == 0 || hop == 0 {
            return bad(format!("frame length {frame} and shift {hop} must be positive"));
        }
        if hop > frame {
            return bad(format!("frame shift {hop} exceeds frame length {frame}"));
        }
        if frame > self.fft_size {
            return bad(format!("frame length {frame} exceeds FFT size {}", self.fft_size));
        }
        if self.mel_bands == 0 {
            return bad("mel_bands must be ≥ 1".into());
        }
        if !(0.0..=self.nyquist_hz()).contains(&self.mel_fmin_hz) || self.mel_fmax() <= self.mel_fmin_hz || self.mel_fmax() > self.nyquist_hz() {
            return bad(format!("mel range {}..{} Hz invalid", self.mel_fmin_hz, self.mel_fmax()));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("pre-emphasis {} outside [0,1)", self.preemphasis));
        }
        if self.magnitude_power <= 0.0 {
            return bad(format!("magnitude power {} must be > 0", self.magnitude_power));
        }
        Ok(())
    }

    /// Analysis window of `frame_length_samples` points (periodic Hann).
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length_samples();
        match self.window {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }

    /// Scale applied to raw `|STFT|` so a full-scale sinusoid peaks near 0.5
    /// (one over the window sum).
    pub fn magnitude_scale(&self) -> f64 {
        1.0 / self.window().iter().sum::<f64>()
    }

    /// Stable `key=value` dump, used for cache keys and config echoes.
    pub fn key_values(&self) -> Vec<(String, String)> {
        vec![
            ("sample_rate_hz".into(), self.sample_rate_hz.to_string()),
            ("frame_length_ms".into(), self.frame_length_ms.to_string()),
            ("frame_shift_ms".into(), self.frame_shift_ms.to_string()),
            ("fft_size".into(), self.fft_size.to_string()),
            ("preemphasis".into(), self.preemphasis.to_string()),
            ("window".into(), "hann".into()),
            ("mel_bands".into(), self.mel_bands.to_string()),
            ("mel_fmin_hz".into(), self.mel_fmin_hz.to_string()),
            ("mel_fmax_hz".into(), self.mel_fmax_hz.map_or("nyquist".into(), |f| f.to_string())),
            ("griffin_lim_iters".into(), self.griffin_lim_iters.to_string()),
            ("magnitude_power".into(), self.magnitude_power.to_string()),
        ]
    }

    /// Sets one field by its key as listed in [`SpectralConfig::key_values`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DspError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, DspError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| DspError::InvalidConfig(format!("dsp.{key} = {value:?}: {e}")))
        }
        match key {
            "sample_rate_hz" => self.sample_rate_hz = parse(key, value)?,
            "frame_length_ms" => self.frame_length_ms = parse(key, value)?,
            "frame_shift_ms" => self.frame_shift_ms = parse(key, value)?,
            "fft_size" => self.fft_size = parse(key, value)?,
            "preemphasis" => self.preemphasis = parse(key, value)?,
            "window" if value.trim() == "hann" => self.window = Window::Hann,
            "window" => return Err(DspError::InvalidConfig(format!("dsp.window = {value:?}: only hann is supported"))),
            "mel_bands" => self.mel_bands = parse(key, value)?,
            "mel_fmin_hz" => self.mel_fmin_hz = parse(key, value)?,
            "mel_fmax_hz" if value.trim() == "nyquist" => self.mel_fmax_hz = None,
            "mel_fmax_hz" => self.mel_fmax_hz = Some(parse(key, value)?),
            "griffin_lim_iters" => self.griffin_lim_iters = parse(key, value)?,
            "magnitude_power" => self.magnitude_power = parse(key, value)?,
            _ => return Err(DspError::InvalidConfig(format!("unknown key dsp.{key}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Scales so the peak absolute sample equals `peak` (no-op on silence).
    pub fn peak_normalize(&mut self, peak: f64) {
        let max = self.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if max > 0.0 {
            let s = peak / max;
            self.samples.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] − a·x[n−1]`.
pub fn pre_emphasis(x: &Waveform, a: f64) -> Waveform {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &s in &x.samples {
        out.push(s - a * prev);
        prev = s;
    }
    Waveform::new(out, x.sample_rate_hz)
}

/// Inverse of [`pre_emphasis`]: `x[n] = y[n] + a·x[n−1]`.
pub fn de_emphasis(y: &Waveform, a: f64) -> Waveform {
    let mut out = Vec::with_capacity(y.len());
    let mut prev = 0.0;
    for &s in &y.samples {
        prev = s + a * prev;
        out.push(prev);
    }
    Waveform::new(out, y.sample_rate_hz)
}

/// Linear-frequency magnitudes `[T×bins]`, nonnegative, in units scaled by
/// [`SpectralConfig::magnitude_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub frames: Tensor,
}

impl MagnitudeSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self, DspError> {
        if frames.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(DspError::InvalidInput("magnitudes must be finite and ≥ 0".into()));
        }
        Ok(Self { frames })
    }

    /// Scaled magnitude of an analysis STFT.
    pub fn from_stft(frames: &ComplexFrames, cfg: &SpectralConfig) -> Self {
        let scale = cfg.magnitude_scale();
        let data = frames.data.iter().map(|c| c.norm() * scale).collect();
        Self {
            frames: Tensor::matrix(frames.frames, frames.bins, data).expect("frame grid"),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Normalized log-mel features `[T×mel_bands]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
}
