//! Building blocks shared by the encoder, decoder and post-net.

use crate::grad::ops::{self, batchnorm1d, conv1d, dropout, GruWeights, Mode, RunningStats};
use crate::grad::{glorot_uniform, orthogonal, BufferId, GradError, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Per-forward context: where parameters live, the train/infer switch, the
/// dropout stream, and batch-norm statistics gathered in train mode.
pub struct Ctx<'s, 't> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub mode: Mode,
    pub rng: Rng,
    /// Decoder pre-net dropout at inference.
    pub inference_dropout: bool,
    pub bn_updates: Vec<(BufferId, BufferId, RunningStats)>,
}

impl<'s, 't> Ctx<'s, 't> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode, rng: Rng) -> Self {
        Self {
            tape,
            store,
            mode,
            rng,
            inference_dropout: true,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Folds gathered batch statistics into the stored running averages (kept
/// at f32 precision like the parameters).
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(BufferId, BufferId, RunningStats)]) {
    for (mean_id, var_id, batch) in updates {
        let mut running = RunningStats {
            mean: store.buffer(*mean_id).data().to_vec(),
            var: store.buffer(*var_id).data().to_vec(),
        };
        running.update(batch);
        store.buffer_mut(*mean_id).data_mut().copy_from_slice(&running.mean);
        store.buffer_mut(*var_id).data_mut().copy_from_slice(&running.var);
        store.buffer_mut(*mean_id).quantize_f32();
        store.buffer_mut(*var_id).quantize_f32();
    }
}

/// Parameter factory that prefixes names with the owning layer path.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = glorot_uniform(self.rng, rows, cols, rows, cols);
        self.store.add(name, t)
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::full(&[rows, cols], value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, bias: Option<f64>) -> Self {
        Self {
            weight: b.glorot(&format!("{name}.weight"), din, dout),
            bias: bias.map(|v| b.full(&format!("{name}.bias"), 1, dout, v)),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let y = x.matmul(ctx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(ctx.p(b)),
            None => Ok(y),
        }
    }
}

/// FC-ReLU-Dropout stages.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub layers: Vec<Linear>,
    pub rate: f64,
}

impl Prenet {
    pub fn new(b: &mut Builder, name: &str, din: usize, widths: &[usize], rate: f64) -> Self {
        let mut layers = Vec::new();
        let mut d = din;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(b, &format!("{name}.fc{i}"), d, w, Some(0.0)));
            d = w;
        }
        Self { layers, rate }
    }

    pub fn apply<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>, dropout_active: bool) -> Result<Var<'t>, GradError> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.apply(ctx, h)?.relu();
            h = dropout(h, self.rate, &mut ctx.rng, dropout_active)?;
        }
        Ok(h)
    }
}

/// Valid rows of a padded batch `[(B·T)×C]`, for layers that would otherwise
/// let padding positions leak into real ones.
#[derive(Clone, Debug)]
pub struct SeqMask {
    /// Indices of real rows, in order.
    valid: Vec<usize>,
    /// For every padded-layout row, its index in `valid` (0 for padding).
    scatter: Vec<usize>,
    /// 1 on real rows, 0 on padding; one column.
    keep: Vec<f64>,
}

impl SeqMask {
    /// `None` when no sequence is padded.
    pub fn new(lengths: &[usize], steps: usize) -> Option<Self> {
        if lengths.iter().all(|&l| l == steps) {
            return None;
        }
        let mut valid = Vec::new();
        let mut scatter = Vec::with_capacity(lengths.len() * steps);
        let mut keep = Vec::with_capacity(lengths.len() * steps);
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..steps {
                if t < len {
                    scatter.push(valid.len());
                    valid.push(b * steps + t);
                    keep.push(1.0);
                } else {
                    scatter.push(0);
                    keep.push(0.0);
                }
            }
        }
        Some(Self { valid, scatter, keep })
    }

    /// Zeroes padding rows.
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let c = x.cols();
        let mask = self.keep.iter().flat_map(|&k| std::iter::repeat_n(k, c)).collect();
        x.mul_const(Tensor::matrix(self.keep.len(), c, mask)?)
    }

    /// Expands compact rows `[valid×C]` to the padded layout, zero on padding.
    fn expand<'t>(&self, compact: Var<'t>) -> Result<Var<'t>, GradError> {
        self.apply(compact.gather_rows(&self.scatter)?)
    }
}

/// Conv1D → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub width: usize,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(b: &mut Builder, name: &str, width: usize, cin: usize, cout: usize, relu: bool) -> Self {
        let weight = {
            let t = glorot_uniform(b.rng, width * cin, cout, width * cin, cout);
            b.store.add(format!("{name}.weight"), t)
        };
        Self {
            weight,
            gamma: b.full(&format!("{name}.bn.gamma"), 1, cout, 1.0),
            beta: b.full(&format!("{name}.bn.beta"), 1, cout, 0.0),
            running_mean: b.store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[1, cout])),
            running_var: b.store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[1, cout], 1.0)),
            width,
            relu,
        }
    }

    /// With a `mask`, batch statistics cover real rows only and padding rows
    /// come out zero, so results match running each sequence unpadded.
    pub fn apply<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        x: Var<'t>,
        batch: usize,
        mask: Option<&SeqMask>,
    ) -> Result<Var<'t>, GradError> {
        let y = conv1d(x, ctx.p(self.weight), None, batch, self.width)?;
        let y = match mask {
            Some(m) if ctx.training() => y.gather_rows(&m.valid)?,
            _ => y,
        };
        let running = RunningStats {
            mean: ctx.store.buffer(self.running_mean).data().to_vec(),
            var: ctx.store.buffer(self.running_var).data().to_vec(),
        };
        let (y, stats) = batchnorm1d(y, ctx.p(self.gamma), ctx.p(self.beta), &running, ctx.mode)?;
        if let Some(stats) = stats {
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
        }
        let y = if self.relu { y.relu() } else { y };
        match mask {
            Some(m) if ctx.training() => m.expand(y),
            Some(m) => m.apply(y),
            None => Ok(y),
        }
    }
}

/// `y = T⊙H(x) + (1−T)⊙x` with `H` a ReLU layer and `T` a sigmoid gate.
#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

pub const HIGHWAY_GATE_BIAS: f64 = -1.0;

impl Highway {
    pub fn new(b: &mut Builder, name: &str, width: usize) -> Self {
        Self {
            transform: Linear::new(b, &format!("{name}.h"), width, width, Some(0.0)),
            gate: Linear::new(b, &format!("{name}.t"), width, width, Some(HIGHWAY_GATE_BIAS)),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>, GradError> {
        let h = self.transform.apply(ctx, x)?.relu();
        let t = self.gate.apply(ctx, x)?.sigmoid();
        // x + T⊙(H − x)
        x.add(t.mul(h.sub(x)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub units: usize,
}

impl GruParams {
    pub fn new(b: &mut Builder, name: &str, din: usize, units: usize) -> Self {
        let w_input = b.glorot(&format!("{name}.w_input"), din, 3 * units);
        let mut hidden = Tensor::zeros(&[units, 3 * units]);
        for g in 0..3 {
            let q = orthogonal(b.rng, units);
            for r in 0..units {
                hidden.row_mut(r)[g * units..(g + 1) * units].copy_from_slice(q.row(r));
            }
        }
        Self {
            w_input,
            w_hidden: b.store.add(format!("{name}.w_hidden"), hidden),
            bias: b.full(&format!("{name}.bias"), 1, 3 * units, 0.0),
            units,
        }
    }

    pub fn weights<'t>(&self, ctx: &Ctx<'_, 't>) -> GruWeights<'t> {
        GruWeights {
            w_input: ctx.p(self.w_input),
            w_hidden: ctx.p(self.w_hidden),
            bias: ctx.p(self.bias),
        }
    }

    pub fn zero_state<'t>(&self, ctx: &Ctx<'_, 't>, batch: usize) -> Var<'t> {
        ctx.tape.constant(Tensor::zeros(&[batch, self.units]))
    }

    /// Runs over `[(B·T)×D]` sequences. Positions at or past an utterance's
    /// length leave the state untouched, so a reverse pass over a padded
    /// batch starts from zero at each utterance's true last position.
    pub fn run<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        x: Var<'t>,
        batch: usize,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var<'t>, GradError> {
        let steps = x.rows() / batch;
        let w = self.weights(ctx);
        let gates = ops::gru_input_gates(x, &w)?;
        let mut h = self.zero_state(ctx, batch);
        let mut outputs = vec![None; steps];
        let ragged = lengths.iter().any(|&l| l != steps);
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            let rows: Vec<usize> = (0..batch).map(|b| b * steps + t).collect();
            let g = gates.gather_rows(&rows)?;
            let next = ops::gru_step(g, h, &w)?;
            h = if ragged && lengths.iter().any(|&l| t >= l) {
                let mut mask = Tensor::zeros(&[batch, self.units]);
                for (b, &l) in lengths.iter().enumerate() {
                    if t < l {
                        mask.row_mut(b).fill(1.0);
                    }
                }
                h.add(next.sub(h)?.mul_const(mask)?)?
            } else {
                next
            };
            outputs[t] = Some(h);
        }
        let outputs: Vec<Var<'t>> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        ctx.tape.stack_steps(&outputs)
    }
}

/// Forward and backward GRUs with outputs concatenated `[fw | bw]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiGru {
    pub fn new(b: &mut Builder, name: &str, din: usize, units: usize) -> Self {
        Self {
            forward: GruParams::new(b, &format!("{name}.fw"), din, units),
            backward: GruParams::new(b, &format!("{name}.bw"), din, units),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>, batch: usize, lengths: &[usize]) -> Result<Var<'t>, GradError> {
        let fw = self.forward.run(ctx, x, batch, lengths, false)?;
        let bw = self.backward.run(ctx, x, batch, lengths, true)?;
        ctx.tape.concat_cols(&[fw, bw])
    }

    pub fn output_width(&self) -> usize {
        self.forward.units + self.backward.units
    }
}
