use rustfft::num_complex::Complex64;

use super::stft::{ComplexFrames, SpectralEngine};
use super::{DspError, MagnitudeSpectrogram, SpectralConfig, Waveform};
use crate::grad::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhaseInit {
    #[default]
    Zeros,
    /// Uniform phase drawn from the caller's generator.
    Random,
}

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// `‖|STFT(x_k)| − M‖_F / ‖M‖_F` for `k = 0..=iters`, measured over the
    /// two-sided spectrum; `x_0` is the inverse of the initial phase guess.
    pub spectral_convergence: Vec<f64>,
}

/// Two-sided Frobenius norms of `|X| − M` and of `M`.
fn distance(frames: &ComplexFrames, target: &Tensor, fft_size: usize) -> (f64, f64) {
    let bins = frames.bins;
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..frames.frames {
        let spec = frames.frame(t);
        let m = target.row(t);
        for k in 0..bins {
            let w = if k == 0 || (fft_size % 2 == 0 && k == bins - 1) { 1.0 } else { 2.0 };
            let d = spec[k].norm() - m[k];
            num += w * d * d;
            den += w * m[k] * m[k];
        }
    }
    (num.sqrt(), den.sqrt())
}

/// Estimates a waveform whose STFT magnitude matches `mag` by alternating
/// between the target magnitude and the set of consistent spectrograms.
///
/// `mag` is in the scaled units of [`MagnitudeSpectrogram`] on the centered
/// analysis grid; the output has `(T−1)·hop` samples unless `length` is set.
pub fn griffin_lim(
    mag: &MagnitudeSpectrogram,
    cfg: &SpectralConfig,
    iters: usize,
    init: PhaseInit,
    rng: &mut Rng,
    length: Option<usize>,
) -> Result<GriffinLimOutput, DspError> {
    let engine = SpectralEngine::new(cfg)?;
    let frames = mag.frames.rows();
    let bins = engine.bins();
    if mag.frames.cols() != bins {
        return Err(DspError::InvalidInput(format!(
            "magnitude has {} bins, config expects {bins}",
            mag.frames.cols()
        )));
    }
    if frames == 0 {
        return Err(DspError::EmptySignal);
    }
    let target = mag.frames.scale(1.0 / cfg.magnitude_scale());

    let mut spec = ComplexFrames::zeros(frames, bins);
    for (slot, &m) in spec.data.iter_mut().zip(target.data()) {
        let phase = match init {
            PhaseInit::Zeros => 0.0,
            PhaseInit::Random => rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI),
        };
        *slot = Complex64::from_polar(m, phase);
    }

    let mut errors = Vec::with_capacity(iters + 1);
    let mut signal = engine.synthesize(&spec);
    for k in 0..=iters {
        let rebuilt = engine.analyze(&signal);
        let (num, den) = distance(&rebuilt, &target, cfg.fft_size);
        errors.push(if den > 0.0 { num / den } else { num });
        if k == iters {
            break;
        }
        for ((slot, x), &m) in spec.data.iter_mut().zip(&rebuilt.data).zip(target.data()) {
            let n = x.norm();
            *slot = if n > 0.0 { x * (m / n) } else { Complex64::new(m, 0.0) };
        }
        signal = engine.synthesize(&spec);
    }

    let pad = engine.center_pad();
    let len = length.unwrap_or((frames - 1) * engine.hop());
    let samples = (0..len).map(|i| signal.get(pad + i).copied().unwrap_or(0.0)).collect();
    Ok(GriffinLimOutput {
        waveform: Waveform::new(samples, cfg.sample_rate_hz),
        spectral_convergence: errors,
    })
}
