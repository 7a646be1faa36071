use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{DspError, SpectralConfig, Waveform};

/// One-sided complex spectra `[frames×bins]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFrames {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexFrames {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|c| c * s).collect(),
            ..self.clone()
        }
    }
}

/// Planned forward/inverse FFTs plus the analysis window for one config.
pub struct SpectralEngine {
    frame_len: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl SpectralEngine {
    pub fn new(cfg: &SpectralConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame_len: cfg.frame_length_samples(),
            hop: cfg.frame_shift_samples(),
            fft_size: cfg.fft_size,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// Half a frame of padding on each side of the analysed signal.
    pub fn center_pad(&self) -> usize {
        self.frame_len / 2
    }

    /// Length of the signal spanned by `frames` uncentered frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    /// Frames starting at `t·hop`, windowed, zero-padded to the FFT size.
    /// The signal must span at least one frame.
    pub fn analyze(&self, signal: &[f64]) -> ComplexFrames {
        let frames = if signal.len() < self.frame_len {
            1
        } else {
            1 + (signal.len() - self.frame_len) / self.hop
        };
        let bins = self.bins();
        let mut out = ComplexFrames::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < self.frame_len {
                    signal.get(start + i).copied().unwrap_or(0.0) * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex64::new(v, 0.0);
            }
            self.forward.process(&mut buf);
            out.data[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
        }
        out
    }

    /// Least-squares inverse of [`analyze`](Self::analyze): weighted
    /// overlap-add divided by the summed squared window. Returns
    /// `span(frames)` samples.
    pub fn synthesize(&self, frames: &ComplexFrames) -> Vec<f64> {
        let len = self.span(frames.frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        let n = self.fft_size;
        for t in 0..frames.frames {
            let spec = frames.frame(t);
            buf[..spec.len()].copy_from_slice(spec);
            for k in spec.len()..n {
                buf[k] = spec[n - k].conj();
            }
            // the imaginary parts at DC and Nyquist cannot belong to a real frame
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.frame_len {
                let w = self.window[i];
                out[start + i] += w * buf[i].re / n as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-10 {
                *o /= w;
            }
        }
        out
    }

    /// Centered analysis: reflect-pad by half a frame on both sides, then frame.
    pub fn stft(&self, x: &[f64]) -> Result<ComplexFrames, DspError> {
        if x.is_empty() {
            return Err(DspError::EmptySignal);
        }
        let pad = self.center_pad();
        let n = x.len() as isize;
        let padded: Vec<f64> = (-(pad as isize)..n + pad as isize)
            .map(|i| x[reflect_index(i, n) as usize])
            .collect();
        Ok(self.analyze(&padded))
    }

    /// Inverse of [`stft`](Self::stft); `length` trims to the original length,
    /// otherwise `(T−1)·hop` samples are returned.
    pub fn istft(&self, frames: &ComplexFrames, length: Option<usize>) -> Vec<f64> {
        let full = self.synthesize(frames);
        let pad = self.center_pad();
        let len = length.unwrap_or(frames.frames.saturating_sub(1) * self.hop);
        (0..len).map(|i| full.get(pad + i).copied().unwrap_or(0.0)).collect()
    }
}

/// Mirror index without repeating the edge sample, valid for any offset.
fn reflect_index(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn stft(x: &Waveform, cfg: &SpectralConfig) -> Result<ComplexFrames, DspError> {
    SpectralEngine::new(cfg)?.stft(&x.samples)
}

pub fn istft(frames: &ComplexFrames, cfg: &SpectralConfig, length: Option<usize>) -> Result<Waveform, DspError> {
    let engine = SpectralEngine::new(cfg)?;
    Ok(Waveform::new(engine.istft(frames, length), cfg.sample_rate_hz))
}
