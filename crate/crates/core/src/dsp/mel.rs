use super::{DspError, MagnitudeSpectrogram, SpectralConfig};
use crate::grad::Tensor;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centers uniform on the HTK mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `[mel_bands×linear_bins]`.
    pub weights: Tensor,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// `mel_bands + 2` edge frequencies; filter `m` peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectralConfig) -> Result<Self, DspError> {
        if cfg.mel_bands < 1 {
            return Err(DspError::InvalidConfig("mel_bands must be ≥ 1".into()));
        }
        cfg.validate()?;
        let (fmin, fmax) = (cfg.mel_fmin_hz, cfg.mel_fmax());
        let bands = cfg.mel_bands;
        let bins = cfg.linear_bins();
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges_hz: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
        let mut weights = Tensor::zeros(&[bands, bins]);
        for m in 0..bands {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let row = weights.row_mut(m);
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                *w = rise.min(fall).max(0.0);
            }
        }
        Ok(Self {
            weights,
            fmin_hz: fmin,
            fmax_hz: fmax,
            edges_hz,
        })
    }

    pub fn bands(&self) -> usize {
        self.weights.rows()
    }

    pub fn bins(&self) -> usize {
        self.weights.cols()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }
}

/// `frames · weightsᵀ`: `[T×bins]` to `[T×bands]`.
pub fn linear_to_mel(mag: &MagnitudeSpectrogram, fb: &MelFilterbank) -> Result<Tensor, DspError> {
    if mag.frames.cols() != fb.bins() {
        return Err(DspError::InvalidInput(format!(
            "spectrogram has {} bins, filterbank expects {}",
            mag.frames.cols(),
            fb.bins()
        )));
    }
    mag.frames
        .matmul(&fb.weights.transpose())
        .map_err(|e| DspError::InvalidInput(e.to_string()))
}
