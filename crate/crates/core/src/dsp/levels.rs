use crate::grad::Tensor;

/// Floor of the dB scale; maps to normalized 0.
pub const MIN_LEVEL_DB: f64 = -100.0;
const MIN_MAGNITUDE: f64 = 1e-5;

/// `clip((20·log10(max(m, 1e-5)) + 100) / 100, 0, 1)` elementwise.
pub fn log_compress(m: &Tensor) -> Tensor {
    m.map(|v| {
        let db = 20.0 * v.max(MIN_MAGNITUDE).log10();
        ((db - MIN_LEVEL_DB) / -MIN_LEVEL_DB).clamp(0.0, 1.0)
    })
}

/// Inverse of [`log_compress`] on its non-clipped range.
pub fn exp_expand(features: &Tensor) -> Tensor {
    features.map(|f| {
        let db = f * -MIN_LEVEL_DB + MIN_LEVEL_DB;
        10f64.powf(db / 20.0)
    })
}
