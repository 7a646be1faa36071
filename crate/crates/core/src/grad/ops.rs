//! Layer-level primitives composed from tape ops.

use super::{GradError, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Same-padded 1-D convolution of `batch` sequences stored as `[(B·T)×Cin]`.
///
/// `weight` is `[(width·Cin)×Cout]`; row `j·Cin + c` is tap `j` of input
/// channel `c`, where tap `j` reads time offset `j − ⌊(width−1)/2⌋`.
pub fn conv1d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    batch: usize,
    width: usize,
) -> Result<Var<'t>, GradError> {
    let cin = x.cols();
    if weight.rows() != width * cin {
        return Err(GradError::ShapeMismatch {
            op: "conv1d",
            left: x.shape(),
            right: weight.shape(),
        });
    }
    let cols = if width == 1 { x } else { x.im2col(batch, width)? };
    let y = cols.matmul(weight)?;
    match bias {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

pub fn maxpool1d(x: Var<'_>, batch: usize) -> Result<Var<'_>, GradError> {
    x.maxpool2(batch)
}

/// Batch-norm running statistics, updated as `s ← momentum·s + (1−momentum)·batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;

/// Batch normalization over rows of `[N×C]`, then `γ⊙x̂ + β`.
///
/// Train mode normalizes with batch moments and returns them so the caller
/// can fold them into its running statistics; infer mode uses `running`.
pub fn batchnorm1d<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var<'t>, Option<RunningStats>), GradError> {
    let (normed, batch) = match mode {
        Mode::Train => {
            let (y, mean, var) = x.batch_standardize(BATCH_NORM_EPS)?;
            (y, Some(RunningStats { mean, var }))
        }
        Mode::Infer => {
            let c = x.cols();
            if running.mean.len() != c {
                return Err(GradError::ShapeMismatch {
                    op: "batchnorm1d",
                    left: x.shape(),
                    right: vec![running.mean.len()],
                });
            }
            let scale: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = running.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let tape = x.tape();
            let scaled = x.mul_row(tape.constant(Tensor::matrix(1, c, scale)?))?;
            (scaled.add_row(tape.constant(Tensor::matrix(1, c, shift)?))?, None)
        }
    };
    Ok((normed.mul_row(gamma)?.add_row(beta)?, batch))
}

impl RunningStats {
    pub fn init(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &RunningStats) {
        let m = BATCH_NORM_MOMENTUM;
        for (s, b) in self.mean.iter_mut().zip(&batch.mean) {
            *s = m * *s + (1.0 - m) * b;
        }
        for (s, b) in self.var.iter_mut().zip(&batch.var) {
            *s = m * *s + (1.0 - m) * b;
        }
    }
}

/// Inverted dropout: in train mode zero each element with probability `rate`
/// and scale survivors by `1/(1−rate)`; identity otherwise.
pub fn dropout<'t>(x: Var<'t>, rate: f64, rng: &mut Rng, active: bool) -> Result<Var<'t>, GradError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GradError::InvalidArgument(format!("dropout rate must be in [0,1), got {rate}")));
    }
    if !active || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = x.shape();
    let n = shape.iter().product();
    let mask = (0..n).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    x.mul_const(Tensor::new(shape, mask)?)
}

/// GRU weights for one cell. Gates are packed `[z | r | candidate]` along
/// columns: `w_input` is `[Din×3H]`, `w_hidden` is `[H×3H]`, `bias` is `[1×3H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights<'t> {
    pub w_input: Var<'t>,
    pub w_hidden: Var<'t>,
    pub bias: Var<'t>,
}

/// Input half of the gate pre-activations, `x·W + b` (`[B×3H]`). Sequence
/// code computes this for all time steps in one matmul.
pub fn gru_input_gates<'t>(x: Var<'t>, w: &GruWeights<'t>) -> Result<Var<'t>, GradError> {
    x.matmul(w.w_input)?.add_row(w.bias)
}

/// One GRU step from precomputed input gates:
/// `z = σ(Wz·x + Uz·h + bz)`, `r = σ(Wr·x + Ur·h + br)`,
/// `h̃ = tanh(Wh·x + Uh·(r⊙h) + bh)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step<'t>(gates_x: Var<'t>, h: Var<'t>, w: &GruWeights<'t>) -> Result<Var<'t>, GradError> {
    let hidden = h.cols();
    let u_zr = w.w_hidden.slice_cols(0, 2 * hidden)?;
    let u_c = w.w_hidden.slice_cols(2 * hidden, hidden)?;
    let zr = gates_x.slice_cols(0, 2 * hidden)?.add(h.matmul(u_zr)?)?.sigmoid();
    let z = zr.slice_cols(0, hidden)?;
    let r = zr.slice_cols(hidden, hidden)?;
    let candidate = gates_x
        .slice_cols(2 * hidden, hidden)?
        .add(r.mul(h)?.matmul(u_c)?)?
        .tanh();
    // h + z⊙(h̃ − h)
    h.add(z.mul(candidate.sub(h)?)?)
}

pub fn gru_cell<'t>(x: Var<'t>, h: Var<'t>, w: &GruWeights<'t>) -> Result<Var<'t>, GradError> {
    let hidden = h.cols();
    if w.w_hidden.shape() != [hidden, 3 * hidden] || w.w_input.cols() != 3 * hidden || x.rows() != h.rows() {
        return Err(GradError::ShapeMismatch {
            op: "gru_cell",
            left: x.shape(),
            right: h.shape(),
        });
    }
    let gx = gru_input_gates(x, w)?;
    gru_step(gx, h, w)
}

pub fn l1_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>, GradError> {
    pred.l1_loss(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;

    #[test]
    fn identity_kernel_conv() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 1, vec![1., -2., 3., 0.5]).unwrap());
        let w = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let y = conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv_width_beyond_length_keeps_length() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10, 2], 1.0));
        let w = tape.constant(Tensor::full(&[16 * 2, 3], 0.1));
        let y = conv1d(x, w, None, 1, 16).unwrap();
        assert_eq!(y.shape(), vec![10, 3]);
    }

    #[test]
    fn conv_impulse_matches_sliding_window() {
        // impulse at t=2 under a width-3 kernel [a,b,c]: y[t] = Σ_j k[j]·x[t+j−1]
        let tape = Tape::new();
        let mut xs = vec![0.0; 5];
        xs[2] = 1.0;
        let k = [0.2, -0.7, 1.3];
        let x = tape.constant(Tensor::matrix(5, 1, xs.clone()).unwrap());
        let w = tape.constant(Tensor::matrix(3, 1, k.to_vec()).unwrap());
        let y = conv1d(x, w, None, 1, 3).unwrap().value();
        for t in 0..5 {
            let mut expect = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let src = t as isize + j as isize - 1;
                if (0..5).contains(&src) {
                    expect += kj * xs[src as usize];
                }
            }
            assert!((y.data()[t] - expect).abs() < 1e-15);
        }
        // the response is the kernel reversed around the impulse
        assert_eq!(&y.data()[1..4], &[1.3, -0.7, 0.2]);
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 1, vec![1., 3., 2.]).unwrap());
        assert_eq!(maxpool1d(x, 1).unwrap().value().data(), &[3., 3., 2.]);
        let z = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(maxpool1d(z, 1).unwrap().value().data().iter().all(|&v| v == 0.0));
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(maxpool1d(empty, 1).is_err());
    }

    #[test]
    fn maxpool_matches_pairwise_oracle() {
        let mut rng = Rng::new(5);
        let (b, t, c) = (2, 7, 3);
        let data: Vec<f64> = (0..b * t * c).map(|_| rng.uniform()).collect();
        let tape = Tape::new();
        let y = maxpool1d(tape.constant(Tensor::matrix(b * t, c, data.clone()).unwrap()), b)
            .unwrap()
            .value();
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let here = data[(bi * t + ti) * c + ci];
                    let next = if ti + 1 < t { data[(bi * t + ti + 1) * c + ci] } else { 0.0 };
                    assert_eq!(y.get(bi * t + ti, ci), here.max(next));
                }
            }
        }
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[6, 2], 3.5));
        let gamma = tape.constant(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let beta = tape.constant(Tensor::matrix(1, 2, vec![0.25, 0.5]).unwrap());
        let (y, stats) = batchnorm1d(x, gamma, beta, &RunningStats::init(2), Mode::Train).unwrap();
        for r in 0..6 {
            assert_eq!(y.value().row(r), &[0.25, 0.5]);
        }
        assert_eq!(stats.unwrap().mean, vec![3.5, 3.5]);
    }

    #[test]
    fn batchnorm_train_output_moments() {
        let mut rng = Rng::new(11);
        let (n, c) = (64, 4);
        let data = (0..n * c).map(|_| 3.0 * rng.normal() + 1.5).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(n, c, data).unwrap());
        let ones = tape.constant(Tensor::full(&[1, c], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, c]));
        let (y, _) = batchnorm1d(x, ones, zeros, &RunningStats::init(c), Mode::Train).unwrap();
        let y = y.value();
        for j in 0..c {
            let col: Vec<f64> = (0..n).map(|r| y.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_infer_uses_running_stats() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![3.0, 5.0]).unwrap());
        let one = tape.constant(Tensor::full(&[1, 1], 1.0));
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BATCH_NORM_EPS],
        };
        let (y, batch) = batchnorm1d(x, one, zero, &stats, Mode::Infer).unwrap();
        assert!(batch.is_none());
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let tape = Tape::new();
        let mut rng = Rng::new(0);
        let x = tape.constant(Tensor::full(&[3, 3], 2.0));
        assert_eq!(dropout(x, 0.0, &mut rng, true).unwrap().id(), x.id());
        assert_eq!(dropout(x, 0.5, &mut rng, false).unwrap().id(), x.id());
        assert!(dropout(x, 1.0, &mut rng, true).is_err());
        let y = dropout(x, 0.5, &mut rng, true).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_drop_fraction() {
        let tape = Tape::new();
        let mut rng = Rng::new(17);
        let n = 1_000_000;
        let x = tape.constant(Tensor::full(&[1000, n / 1000], 1.0));
        let y = dropout(x, 0.5, &mut rng, true).unwrap().value();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.5).abs() < 0.005, "dropped {dropped}");
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = Rng::new(23);
        let tape = Tape::new();
        let input: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.1).collect();
        let input_mean = input.iter().sum::<f64>() / 10.0;
        let x = tape.constant(Tensor::matrix(1, 10, input).unwrap());
        let trials = 100_000;
        let mut total = 0.0;
        for _ in 0..trials / 10 {
            // 10 trials per mask batch keeps the tape small
            let big = x.repeat_rows(10).unwrap();
            total += dropout(big, 0.5, &mut rng, true).unwrap().value().sum();
        }
        let mean = total / (trials as f64 * 10.0);
        assert!((mean - input_mean).abs() / input_mean < 0.01, "{mean} vs {input_mean}");
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let tape = Tape::new();
        let w = GruWeights {
            w_input: tape.constant(Tensor::zeros(&[3, 6])),
            w_hidden: tape.constant(Tensor::zeros(&[2, 6])),
            bias: tape.constant(Tensor::zeros(&[1, 6])),
        };
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -1.0, 2.0]).unwrap());
        let h = tape.constant(Tensor::matrix(1, 2, vec![0.8, -0.4]).unwrap());
        let out = gru_cell(x, h, &w).unwrap().value();
        assert_eq!(out.data(), &[0.4, -0.2]);
    }

    #[test]
    fn gru_matches_scalar_recomputation() {
        let mut rng = Rng::new(99);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect() };
        let (wi, wh, b, xv, hv) = (draw(12), draw(12), draw(6), draw(2), draw(2));
        let tape = Tape::new();
        let w = GruWeights {
            w_input: tape.constant(Tensor::matrix(2, 6, wi.clone()).unwrap()),
            w_hidden: tape.constant(Tensor::matrix(2, 6, wh.clone()).unwrap()),
            bias: tape.constant(Tensor::matrix(1, 6, b.clone()).unwrap()),
        };
        let x = tape.constant(Tensor::matrix(1, 2, xv.clone()).unwrap());
        let h = tape.constant(Tensor::matrix(1, 2, hv.clone()).unwrap());
        let out = gru_cell(x, h, &w).unwrap().value();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // column index for gate g (0=z,1=r,2=c) and unit u
        let col = |g: usize, u: usize| g * 2 + u;
        let wx = |g: usize, u: usize| (0..2).map(|i| wi[i * 6 + col(g, u)] * xv[i]).sum::<f64>();
        let uh = |g: usize, u: usize, v: &[f64]| (0..2).map(|i| wh[i * 6 + col(g, u)] * v[i]).sum::<f64>();
        let z: Vec<f64> = (0..2).map(|u| sig(wx(0, u) + uh(0, u, &hv) + b[col(0, u)])).collect();
        let r: Vec<f64> = (0..2).map(|u| sig(wx(1, u) + uh(1, u, &hv) + b[col(1, u)])).collect();
        let rh: Vec<f64> = (0..2).map(|u| r[u] * hv[u]).collect();
        let c: Vec<f64> = (0..2).map(|u| (wx(2, u) + uh(2, u, &rh) + b[col(2, u)]).tanh()).collect();
        for u in 0..2 {
            let expect = (1.0 - z[u]) * hv[u] + z[u] * c[u];
            assert!((out.data()[u] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn l1_examples() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let t = Tensor::zeros(&[1, 2]);
        assert_eq!(l1_loss(p, &t).unwrap().value().item(), 1.5);
        assert_eq!(l1_loss(p, &p.value()).unwrap().value().item(), 0.0);
        assert!(l1_loss(p, &Tensor::zeros(&[2, 1])).is_err());
    }
}
