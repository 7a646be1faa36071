use super::{GradError, ParamStore, Tensor};

/// Adam moments and step counter. Moments are kept at `f32` precision so a
/// checkpoint round trip is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update of every parameter. `grads[i]` belongs to
    /// parameter `i`; `None` means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<(), GradError> {
        if !(lr > 0.0) {
            return Err(GradError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(GradError::InvalidArgument(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let p = params.get_mut(id);
            if p.numel() != m.len() {
                return Err(GradError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(GradError::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
            for j in 0..m.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let x = &mut p.data_mut()[j];
                *x = (*x - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32 as f64;
            }
        }
        Ok(())
    }
}
