//! Content-based tanh attention and the recurrent frame decoder.

use super::layers::{Builder, Ctx, GruParams, Linear, Prenet};
use super::ModelConfig;
use crate::grad::ops::{self, GruWeights};
use crate::grad::{GradError, ParamId, Tensor, Var};

/// Encoder output for a padded batch, rows `b·L + l`.
#[derive(Clone, Debug)]
pub struct EncoderMemory<'t> {
    pub values: Var<'t>,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl EncoderMemory<'_> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// `e_l = vᵀ·tanh(W_m·m_l + W_q·q + b)`, weights = softmax over valid `l`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub memory_proj: Linear,
    pub query_proj: Linear,
    pub score: ParamId,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, memory_dim: usize, query_dim: usize, hidden: usize) -> Self {
        Self {
            memory_proj: Linear::new(b, &format!("{name}.memory"), memory_dim, hidden, None),
            query_proj: Linear::new(b, &format!("{name}.query"), query_dim, hidden, Some(0.0)),
            score: b.glorot(&format!("{name}.v"), hidden, 1),
        }
    }

    /// Memory-side projection; constant across decoder steps.
    pub fn keys<'t>(&self, ctx: &Ctx<'_, 't>, memory: &EncoderMemory<'t>) -> Result<Var<'t>, GradError> {
        self.memory_proj.apply(ctx, memory.values)
    }

    /// Context `[B×D]` and weights `[B×L]` for queries `[B×Q]`.
    pub fn attend<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        memory: &EncoderMemory<'t>,
        keys: Var<'t>,
        query: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), GradError> {
        let q = self.query_proj.apply(ctx, query)?.repeat_rows(memory.steps)?;
        let energies = keys
            .add(q)?
            .tanh()
            .matmul(ctx.p(self.score))?
            .reshape(&[memory.batch(), memory.steps])?;
        let weights = energies.masked_softmax(&memory.lengths)?;
        let context = weights.weighted_sum(memory.values)?;
        Ok((context, weights))
    }
}

/// Recurrent state carried between decoder steps.
#[derive(Clone, Debug)]
pub struct DecoderState<'t> {
    pub attention_hidden: Var<'t>,
    pub context: Var<'t>,
    pub hiddens: Vec<Var<'t>>,
    pub step: usize,
}

/// Output of one decoder step.
pub struct StepOutput<'t> {
    /// Top residual-GRU output `[B×decoder_rnn]`.
    pub hidden: Var<'t>,
    pub weights: Var<'t>,
}

/// Feedback policy during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feedback {
    /// Every step reads the last ground-truth frame of the previous group.
    TeacherForcing,
    /// Each step draws ground truth with probability `rate`, otherwise the
    /// model's own (detached) previous prediction.
    Scheduled { rate: f64 },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub prenet: Option<Prenet>,
    /// Attention-RNN weights; `w_input` acts on the (pre-net) frame.
    pub attention_rnn: GruParams,
    /// Attention-RNN input weights for the previous context.
    pub attention_rnn_context: ParamId,
    pub attention: Attention,
    pub projection: Linear,
    pub layers: Vec<GruParams>,
    pub output: Linear,
    pub r: usize,
    pub frame_dim: usize,
}

/// Draws whether a scheduled-sampling step reads ground truth.
fn use_ground_truth(rng: &mut crate::grad::Rng, rate: f64) -> bool {
    rng.bernoulli(rate)
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let frame_dim = cfg.decoder_frame_dim();
        let memory_dim = cfg.memory_dim();
        let prenet = cfg
            .has_prenets()
            .then(|| Prenet::new(b, "decoder.prenet", frame_dim, &cfg.decoder_prenet, cfg.prenet_dropout));
        let rnn_in = prenet.as_ref().map_or(frame_dim, |_| *cfg.decoder_prenet.last().expect("nonempty"));
        let attention_rnn = GruParams::new(b, "decoder.attention_rnn", rnn_in, cfg.attention_rnn);
        let attention_rnn_context = b.glorot("decoder.attention_rnn.w_context", memory_dim, 3 * cfg.attention_rnn);
        let attention = Attention::new(b, "decoder.attention", memory_dim, cfg.attention_rnn, cfg.attention_hidden);
        let projection = Linear::new(
            b,
            "decoder.projection",
            memory_dim + cfg.attention_rnn,
            cfg.decoder_rnn,
            Some(0.0),
        );
        let layers = (0..cfg.decoder_layers)
            .map(|i| GruParams::new(b, &format!("decoder.gru{i}"), cfg.decoder_rnn, cfg.decoder_rnn))
            .collect();
        let output = Linear::new(b, "decoder.output", cfg.decoder_rnn, cfg.r * frame_dim, Some(0.0));
        Self {
            prenet,
            attention_rnn,
            attention_rnn_context,
            attention,
            projection,
            layers,
            output,
            r: cfg.r,
            frame_dim,
        }
    }

    pub fn initial_state<'t>(&self, ctx: &Ctx<'_, 't>, batch: usize, memory_dim: usize) -> DecoderState<'t> {
        DecoderState {
            attention_hidden: self.attention_rnn.zero_state(ctx, batch),
            context: ctx.tape.constant(Tensor::zeros(&[batch, memory_dim])),
            hiddens: self.layers.iter().map(|l| l.zero_state(ctx, batch)).collect(),
            step: 0,
        }
    }

    /// Frame-side attention-RNN gate inputs for frames `[N×F]`.
    pub fn frame_gates<'t>(&self, ctx: &mut Ctx<'_, 't>, frames: Var<'t>) -> Result<Var<'t>, GradError> {
        let x = match &self.prenet {
            Some(p) => {
                let active = ctx.training() || ctx.inference_dropout;
                p.apply(ctx, frames, active)?
            }
            None => frames,
        };
        x.matmul(ctx.p(self.attention_rnn.w_input))?
            .add_row(ctx.p(self.attention_rnn.bias))
    }

    /// One step from precomputed frame gates `[B×3H]`.
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        state: &mut DecoderState<'t>,
        frame_gates: Var<'t>,
        memory: &EncoderMemory<'t>,
        keys: Var<'t>,
    ) -> Result<StepOutput<'t>, GradError> {
        let att = GruWeights {
            w_input: ctx.p(self.attention_rnn.w_input),
            w_hidden: ctx.p(self.attention_rnn.w_hidden),
            bias: ctx.p(self.attention_rnn.bias),
        };
        let gates = frame_gates.add(state.context.matmul(ctx.p(self.attention_rnn_context))?)?;
        let query = ops::gru_step(gates, state.attention_hidden, &att)?;
        let (context, weights) = self.attention.attend(ctx, memory, keys, query)?;
        let mut x = self.projection.apply(ctx, ctx.tape.concat_cols(&[context, query])?)?;
        for (layer, h) in self.layers.iter().zip(state.hiddens.iter_mut()) {
            *h = ops::gru_cell(x, *h, &layer.weights(ctx))?;
            x = h.add(x)?;
        }
        state.attention_hidden = query;
        state.context = context;
        state.step += 1;
        Ok(StepOutput { hidden: x, weights })
    }

    /// Maps top hiddens `[N×dec]` to `r` frames each, `[(N·r)×F]`.
    pub fn emit<'t>(&self, ctx: &Ctx<'_, 't>, hidden: Var<'t>) -> Result<Var<'t>, GradError> {
        let n = hidden.rows();
        self.output.apply(ctx, hidden)?.reshape(&[n * self.r, self.frame_dim])
    }

    /// Teacher-forced decode over padded targets `[(B·T)×F]`, `T = frames`.
    /// Returns predictions of the same shape and per-step weights `[B×L]`.
    pub fn decode_teacher_forced<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        memory: &EncoderMemory<'t>,
        targets: &Tensor,
        frames: usize,
        feedback: Feedback,
    ) -> Result<(Var<'t>, Vec<Tensor>), GradError> {
        let batch = memory.batch();
        if frames == 0 || frames % self.r != 0 || targets.rows() != batch * frames || targets.cols() != self.frame_dim {
            return Err(GradError::InvalidArgument(format!(
                "targets {:?} are not {batch} padded sequences of {frames} frames (multiple of r={}) × {}",
                targets.shape(),
                self.r,
                self.frame_dim
            )));
        }
        let steps = frames / self.r;
        let keys = self.attention.keys(ctx, memory)?;
        let mut state = self.initial_state(ctx, batch, memory.values.cols());
        let mut alignments = Vec::with_capacity(steps);
        let fd = self.frame_dim;
        // ground-truth input for step s: frame s·r − 1, zeros (GO) at s = 0
        let teacher_input = |s: usize, b: usize| -> &[f64] {
            if s == 0 {
                &[]
            } else {
                targets.row(b * frames + s * self.r - 1)
            }
        };

        match feedback {
            Feedback::TeacherForcing => {
                let mut inputs = Tensor::zeros(&[batch * steps, fd]);
                for b in 0..batch {
                    for s in 1..steps {
                        inputs.row_mut(b * steps + s).copy_from_slice(teacher_input(s, b));
                    }
                }
                let inputs = ctx.tape.constant(inputs);
                let gates = self.frame_gates(ctx, inputs)?;
                let mut hiddens = Vec::with_capacity(steps);
                for s in 0..steps {
                    let rows: Vec<usize> = (0..batch).map(|b| b * steps + s).collect();
                    let out = self.step(ctx, &mut state, gates.gather_rows(&rows)?, memory, keys)?;
                    alignments.push((*out.weights.value()).clone());
                    hiddens.push(out.hidden);
                }
                let stacked = ctx.tape.stack_steps(&hiddens)?;
                Ok((self.emit(ctx, stacked)?, alignments))
            }
            Feedback::Scheduled { rate } => {
                let mut previous: Option<Tensor> = None;
                let mut groups = Vec::with_capacity(steps);
                for s in 0..steps {
                    let mut input = Tensor::zeros(&[batch, fd]);
                    if s > 0 {
                        let own = previous.as_ref().filter(|_| !use_ground_truth(&mut ctx.rng, rate));
                        for b in 0..batch {
                            let src = match own {
                                Some(p) => p.row(b * self.r + self.r - 1),
                                None => teacher_input(s, b),
                            };
                            input.row_mut(b).copy_from_slice(src);
                        }
                    }
                    let input = ctx.tape.constant(input);
                    let gates = self.frame_gates(ctx, input)?;
                    let out = self.step(ctx, &mut state, gates, memory, keys)?;
                    alignments.push((*out.weights.value()).clone());
                    let group = self.output.apply(ctx, out.hidden)?;
                    previous = Some((*group.value()).clone().reshape(&[batch * self.r, fd])?);
                    groups.push(group);
                }
                let stacked = ctx.tape.stack_steps(&groups)?;
                Ok((stacked.reshape(&[batch * frames, fd])?, alignments))
            }
        }
    }

    /// Autoregressive decode of a single utterance. `stop` sees each new
    /// group of `r` frames (`[r×F]`) and returns true to end decoding.
    /// Returns frames `[(steps·r)×F]`, weights `[steps×L]` and whether `stop`
    /// fired before `max_steps`.
    pub fn decode_free_running<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        memory: &EncoderMemory<'t>,
        max_steps: usize,
        mut stop: impl FnMut(&Tensor) -> bool,
    ) -> Result<(Tensor, Tensor, bool), GradError> {
        if memory.batch() != 1 || max_steps == 0 {
            return Err(GradError::InvalidArgument(format!(
                "free-running decode needs one utterance and max_steps ≥ 1 (got {}, {max_steps})",
                memory.batch()
            )));
        }
        let fd = self.frame_dim;
        let keys = self.attention.keys(ctx, memory)?;
        let mut state = self.initial_state(ctx, 1, memory.values.cols());
        let mut input = Tensor::zeros(&[1, fd]);
        let mut frames = Vec::new();
        let mut weights = Vec::new();
        let mut stopped = false;
        for _ in 0..max_steps {
            let fed = ctx.tape.constant(input.clone());
            let gates = self.frame_gates(ctx, fed)?;
            let out = self.step(ctx, &mut state, gates, memory, keys)?;
            weights.extend_from_slice(out.weights.value().data());
            let group = (*self.emit(ctx, out.hidden)?.value()).clone();
            frames.extend_from_slice(group.data());
            // feed back the last frame of the group, clamped to the feature range
            input = Tensor::matrix(1, fd, group.row(self.r - 1).iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            if stop(&group) {
                stopped = true;
                break;
            }
        }
        let steps = state.step;
        Ok((
            Tensor::matrix(steps * self.r, fd, frames)?,
            Tensor::matrix(steps, memory.steps, weights)?,
            stopped,
        ))
    }
}
