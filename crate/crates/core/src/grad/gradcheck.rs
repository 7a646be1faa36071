//! Central finite-difference checks of tape gradients.

use std::fmt;

use super::ops::{self, GruWeights, Mode, RunningStats};
use super::{GradError, ParamStore, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub leaf: String,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub leaves: Vec<LeafCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16} max rel err {:.3e}", self.name, self.max_rel_err())
    }
}

/// Norm-wise relative error; falls back to the absolute error when both
/// gradients are essentially zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-7 {
        diff
    } else {
        diff / denom
    }
}

/// Checks `f` with respect to every element of every input.
pub fn gradcheck<F>(name: &str, inputs: &[(&str, Tensor)], f: F) -> Result<GradcheckReport, GradError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, GradError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64, GradError> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut leaves = Vec::with_capacity(inputs.len());
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for (i, (leaf, _)) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[i]);
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        leaves.push(LeafCheck {
            leaf: leaf.to_string(),
            rel_err: relative_error(analytic.data(), &numeric),
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        leaves,
    })
}

/// Checks `f` with respect to a sample of up to `per_param` elements of every
/// parameter in `store`. `f` must be deterministic (reseed any dropout inside).
pub fn gradcheck_params<F>(
    name: &str,
    store: &ParamStore,
    per_param: usize,
    rng: &mut Rng,
    f: F,
) -> Result<GradcheckReport, GradError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, GradError>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut leaves = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic_full = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = f(&Tape::no_grad(), &work)?.value().item();
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = f(&Tape::no_grad(), &work)?.value().item();
            work.get_mut(id).data_mut()[j] = orig;
            analytic.push(analytic_full.data()[j]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        leaves.push(LeafCheck {
            leaf: store.name(id).to_string(),
            rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        leaves,
    })
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("shape")
}

/// Projects a tensor output onto a fixed random direction so the check sees
/// every output element with a distinct weight.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>, GradError> {
    let mut rng = Rng::new(seed);
    let w = random(&mut rng, &y.shape());
    Ok(y.mul_const(w)?.sum())
}

fn prefixed(prefix: &str, names: &[&str]) -> Vec<String> {
    names.iter().map(|n| format!("{prefix}{n}")).collect()
}

/// Runs each primitive on three shapes.
fn check_shapes<F>(
    name: &str,
    shapes: &[Vec<Vec<usize>>],
    names: &[&str],
    rng: &mut Rng,
    f: F,
) -> Result<GradcheckReport, GradError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, GradError>,
{
    let mut leaves = Vec::new();
    for (k, shape_set) in shapes.iter().enumerate() {
        let labels = prefixed(&format!("s{k}."), names);
        let owned: Vec<(String, Tensor)> = labels
            .iter()
            .zip(shape_set)
            .map(|(l, s)| (l.clone(), random(rng, s)))
            .collect();
        let inputs: Vec<(&str, Tensor)> = owned.iter().map(|(l, t)| (l.as_str(), t.clone())).collect();
        leaves.extend(gradcheck(name, &inputs, &f)?.leaves);
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        leaves,
    })
}

/// Gradient checks of every primitive, each on three input shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradcheckReport>, GradError> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    out.push(check_shapes(
        "matmul",
        &[
            vec![vec![2, 3], vec![3, 2]],
            vec![vec![1, 4], vec![4, 5]],
            vec![vec![5, 2], vec![2, 1]],
        ],
        &["a", "b"],
        &mut rng,
        |_, v| project(v[0].matmul(v[1])?, 1),
    )?);

    out.push(check_shapes(
        "conv1d",
        &[
            vec![vec![5, 2], vec![2, 3], vec![1, 3]],
            vec![vec![8, 3], vec![9, 2], vec![1, 2]],
            vec![vec![6, 1], vec![4, 2], vec![1, 2]],
        ],
        &["x", "w", "b"],
        &mut rng,
        |_, v| {
            let cin = v[0].cols();
            let width = v[1].rows() / cin;
            let batch = if v[0].rows() % 2 == 0 && width == 3 { 2 } else { 1 };
            project(ops::conv1d(v[0], v[1], Some(v[2]), batch, width)?, 2)
        },
    )?);

    out.push(check_shapes(
        "maxpool1d",
        &[vec![vec![4, 1]], vec![vec![6, 3]], vec![vec![9, 2]]],
        &["x"],
        &mut rng,
        |_, v| {
            let batch = if v[0].rows() % 3 == 0 { 3 } else { 1 };
            project(ops::maxpool1d(v[0], batch)?, 3)
        },
    )?);

    out.push(check_shapes(
        "batchnorm1d",
        &[
            vec![vec![6, 2], vec![1, 2], vec![1, 2]],
            vec![vec![10, 3], vec![1, 3], vec![1, 3]],
            vec![vec![4, 1], vec![1, 1], vec![1, 1]],
        ],
        &["x", "gamma", "beta"],
        &mut rng,
        |_, v| {
            let stats = RunningStats::init(v[0].cols());
            let (y, _) = ops::batchnorm1d(v[0], v[1], v[2], &stats, Mode::Train)?;
            project(y, 4)
        },
    )?);

    let act_shapes = [vec![vec![3, 2]], vec![vec![1, 7]], vec![vec![4, 4]]];
    out.push(check_shapes("relu", &act_shapes, &["x"], &mut rng, |_, v| project(v[0].relu(), 5))?);
    out.push(check_shapes("sigmoid", &act_shapes, &["x"], &mut rng, |_, v| project(v[0].sigmoid(), 6))?);
    out.push(check_shapes("tanh", &act_shapes, &["x"], &mut rng, |_, v| project(v[0].tanh(), 7))?);

    out.push(check_shapes("dropout", &act_shapes, &["x"], &mut rng, |_, v| {
        let mut mask_rng = Rng::new(8);
        project(ops::dropout(v[0], 0.5, &mut mask_rng, true)?, 9)
    })?);

    out.push(check_shapes(
        "embedding",
        &[vec![vec![5, 3]], vec![vec![2, 4]], vec![vec![7, 1]]],
        &["table"],
        &mut rng,
        |tape, v| {
            let vocab = v[0].rows();
            let ids: Vec<usize> = [0, vocab - 1, 1 % vocab, 0].to_vec();
            project(tape.embedding(v[0], &ids)?, 10)
        },
    )?);

    out.push(check_shapes(
        "gru_cell",
        &[
            vec![vec![1, 2], vec![1, 2], vec![2, 6], vec![2, 6], vec![1, 6]],
            vec![vec![3, 4], vec![3, 3], vec![4, 9], vec![3, 9], vec![1, 9]],
            vec![vec![2, 1], vec![2, 2], vec![1, 6], vec![2, 6], vec![1, 6]],
        ],
        &["x", "h0", "w_input", "w_hidden", "bias"],
        &mut rng,
        |_, v| {
            let w = GruWeights {
                w_input: v[2],
                w_hidden: v[3],
                bias: v[4],
            };
            // three unrolled steps sharing weights and input
            let mut h = v[1];
            for _ in 0..3 {
                h = ops::gru_cell(v[0], h, &w)?;
            }
            project(h, 11)
        },
    )?);

    out.push(check_shapes(
        "l1_loss",
        &[vec![vec![2, 3]], vec![vec![1, 5]], vec![vec![4, 2]]],
        &["pred"],
        &mut rng,
        |_, v| {
            let mut trng = Rng::new(12);
            let target = random(&mut trng, &v[0].shape());
            ops::l1_loss(v[0], &target)
        },
    )?);

    out.push(check_shapes(
        "attention",
        &[
            vec![vec![2, 3], vec![6, 2]],
            vec![vec![1, 4], vec![4, 3]],
            vec![vec![3, 2], vec![6, 1]],
        ],
        &["scores", "memory"],
        &mut rng,
        |_, v| {
            let (b, l) = (v[0].rows(), v[0].cols());
            let lengths: Vec<usize> = (0..b).map(|i| l - (i % l.max(2)).min(l - 1)).collect();
            let w = v[0].masked_softmax(&lengths)?;
            project(w.weighted_sum(v[1])?, 13)
        },
    )?);

    out.push(check_shapes(
        "tensor_plumbing",
        &[
            vec![vec![2, 3], vec![2, 2], vec![1, 5]],
            vec![vec![1, 1], vec![1, 4], vec![1, 5]],
            vec![vec![3, 2], vec![3, 1], vec![1, 3]],
        ],
        &["a", "b", "row"],
        &mut rng,
        |tape, v| {
            let cat = tape.concat_cols(&[v[0], v[1]])?;
            let w = cat.cols();
            let row = v[2].slice_cols(0, w)?;
            let y = cat.mul_row(row)?.add_row(row)?.affine(0.5, 1.0);
            let y = y.mul(cat)?.sub(cat)?.add(cat)?;
            let rep = y.repeat_rows(2)?;
            let picked = rep.gather_rows(&[0, rep.rows() - 1, 1])?;
            let stacked = tape.stack_steps(&[picked, picked.slice_cols(0, w)?])?;
            project(stacked.reshape(&[stacked.rows() * w, 1])?, 14)
        },
    )?);

    Ok(out)
}

/// A tanh whose backward rule is deliberately wrong; used as a negative
/// control for the checker itself.
pub fn corrupted_tanh_check(seed: u64) -> Result<GradcheckReport, GradError> {
    let mut rng = Rng::new(seed);
    let x = random(&mut rng, &[3, 3]);
    gradcheck("corrupted_tanh", &[("x", x)], |tape, v| {
        let value = v[0].value().map(f64::tanh);
        let y = tape.custom(
            &[v[0]],
            value,
            Box::new(|_, y, g| vec![y.zip_map(g, |o, s| s * (1.0 - o))]),
        );
        project(y, 15)
    })
}
