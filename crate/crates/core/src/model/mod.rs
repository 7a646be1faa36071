//! The attention sequence-to-sequence spectrogram predictor.
//!
//! All activations are 2-D: a batch of `B` sequences of length `T` with `C`
//! channels is stored as `[(B·T)×C]` with row `b·T + t`.

mod cbhg;
mod config;
mod decoder;
mod layers;

pub use cbhg::Cbhg;
pub use config::{CbhgConfig, ModelConfig, Variant};
pub use decoder::{Attention, Decoder, DecoderState, EncoderMemory, Feedback, StepOutput};
pub use layers::{apply_bn_updates, BiGru, Builder, ConvBn, Ctx, GruParams, Highway, Linear, Prenet, SeqMask, HIGHWAY_GATE_BIAS};

use crate::grad::gradcheck::{gradcheck_params, GradcheckReport};
use crate::grad::ops::Mode;
use crate::grad::{GradError, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Debug)]
pub enum Encoder {
    /// Pre-net followed by a CBHG block.
    Cbhg { prenet: Prenet, cbhg: Cbhg },
    /// Optional pre-net, a linear projection to the GRU output width, then
    /// bidirectional GRU layers each wrapped in a residual connection.
    ResidualGru {
        prenet: Option<Prenet>,
        input: Linear,
        layers: Vec<BiGru>,
    },
}

pub const ENCODER_GRU_LAYERS: usize = 2;

impl Encoder {
    fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let prenet_out = *cfg.encoder_prenet.last().expect("validated");
        match cfg.variant {
            Variant::Full => Encoder::Cbhg {
                prenet: Prenet::new(b, "encoder.prenet", cfg.embed_dim, &cfg.encoder_prenet, cfg.prenet_dropout),
                cbhg: Cbhg::new(b, "encoder.cbhg", prenet_out, &cfg.encoder_cbhg),
            },
            Variant::GruEncoder | Variant::Vanilla => {
                let prenet = (cfg.variant == Variant::GruEncoder).then(|| {
                    Prenet::new(b, "encoder.prenet", cfg.embed_dim, &cfg.encoder_prenet, cfg.prenet_dropout)
                });
                let din = if prenet.is_some() { prenet_out } else { cfg.embed_dim };
                let width = cfg.memory_dim();
                let input = Linear::new(b, "encoder.input", din, width, Some(0.0));
                let layers = (0..ENCODER_GRU_LAYERS)
                    .map(|i| BiGru::new(b, &format!("encoder.gru{i}"), width, cfg.encoder_cbhg.gru_units))
                    .collect();
                Encoder::ResidualGru { prenet, input, layers }
            }
        }
    }

    fn apply<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>, lengths: &[usize]) -> Result<Var<'t>, GradError> {
        let batch = lengths.len();
        let active = ctx.training();
        match self {
            Encoder::Cbhg { prenet, cbhg } => {
                let h = prenet.apply(ctx, x, active)?;
                cbhg.apply(ctx, h, batch, lengths)
            }
            Encoder::ResidualGru { prenet, input, layers } => {
                let h = match prenet {
                    Some(p) => p.apply(ctx, x, active)?,
                    None => x,
                };
                let mut h = input.apply(ctx, h)?;
                for layer in layers {
                    h = layer.apply(ctx, h, batch, lengths)?.add(h)?;
                }
                Ok(h)
            }
        }
    }
}

/// CBHG over predicted mel frames followed by a projection to linear bins.
#[derive(Clone, Debug)]
pub struct Postnet {
    pub cbhg: Cbhg,
    pub output: Linear,
}

/// Attention weights of one utterance, `[decoder_steps × text_length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub weights: Tensor,
}

/// Backward jumps of the attention peak larger than this count as violations.
pub const MONOTONIC_BACKTRACK_TOLERANCE: usize = 2;

impl AlignmentMatrix {
    pub fn decoder_steps(&self) -> usize {
        self.weights.rows()
    }

    pub fn text_len(&self) -> usize {
        self.weights.cols()
    }

    /// Memory position of the largest weight at each decoder step.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.decoder_steps())
            .map(|s| {
                let row = self.weights.row(s);
                (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect()
    }

    /// Fraction of consecutive steps whose peak does not move back by more
    /// than [`MONOTONIC_BACKTRACK_TOLERANCE`] positions.
    pub fn monotonicity(&self) -> f64 {
        let path = self.argmax_path();
        if path.len() < 2 {
            return 1.0;
        }
        let violations = path
            .windows(2)
            .filter(|w| w[1] + MONOTONIC_BACKTRACK_TOLERANCE < w[0])
            .count();
        1.0 - violations as f64 / (path.len() - 1) as f64
    }
}

/// Predictions of a teacher-forced pass over a padded batch.
pub struct ModelOutput<'t> {
    /// `[(B·T)×mel_bands]`; absent for the vanilla variant.
    pub mel: Option<Var<'t>>,
    /// `[(B·T)×linear_bins]`.
    pub linear: Var<'t>,
    pub alignments: Vec<AlignmentMatrix>,
}

#[derive(Clone, Debug)]
pub struct Tacotron {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub postnet: Option<Postnet>,
}

impl Tacotron {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let embedding = {
            let t = Tensor::new(
                vec![config.vocab_size, config.embed_dim],
                (0..config.vocab_size * config.embed_dim).map(|_| 0.3 * b.rng.normal()).collect(),
            )?;
            b.store.add("embedding", t)
        };
        let encoder = Encoder::new(&mut b, &config);
        let decoder = Decoder::new(&mut b, &config);
        let postnet = (config.variant != Variant::Vanilla).then(|| Postnet {
            cbhg: Cbhg::new(&mut b, "postnet.cbhg", config.mel_bands, &config.postnet_cbhg),
            output: Linear::new(
                &mut b,
                "postnet.output",
                2 * config.postnet_cbhg.gru_units,
                config.linear_bins,
                Some(0.0),
            ),
        });
        params.quantize_f32();
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            decoder,
            postnet,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn r(&self) -> usize {
        self.config.r
    }

    /// Forward context bound to this model's parameters.
    pub fn ctx<'s, 't>(&'s self, tape: &'t Tape, mode: Mode, rng: Rng) -> Ctx<'s, 't> {
        Ctx::new(tape, &self.params, mode, rng)
    }

    /// Embeds and encodes a batch of id sequences, padding with id 0.
    pub fn encode<'t>(&self, ctx: &mut Ctx<'_, 't>, ids: &[Vec<usize>]) -> Result<EncoderMemory<'t>, ModelError> {
        if ids.is_empty() || ids.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("text ids"));
        }
        let steps = ids.iter().map(Vec::len).max().expect("nonempty");
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let mut flat = Vec::with_capacity(ids.len() * steps);
        for seq in ids {
            flat.extend_from_slice(seq);
            flat.extend(std::iter::repeat_n(0, steps - seq.len()));
        }
        let x = ctx.tape.embedding(ctx.p(self.embedding), &flat)?;
        let values = self.encoder.apply(ctx, x, &lengths)?;
        Ok(EncoderMemory { values, lengths, steps })
    }

    /// Linear-frequency frames `[(B·T)×linear_bins]` from mel frames.
    pub fn postnet<'t>(&self, ctx: &mut Ctx<'_, 't>, mel: Var<'t>, batch: usize) -> Result<Var<'t>, ModelError> {
        let post = self
            .postnet
            .as_ref()
            .ok_or_else(|| ModelError::Config("the vanilla variant has no post-net".into()))?;
        if mel.rows() == 0 || mel.rows() % batch != 0 {
            return Err(ModelError::EmptyInput("mel frames"));
        }
        let frames = mel.rows() / batch;
        let h = post.cbhg.apply(ctx, mel, batch, &vec![frames; batch])?;
        Ok(post.output.apply(ctx, h)?)
    }

    /// Teacher-forced pass. `decoder_targets` holds padded frames of the
    /// decoder's own feature type (mel, or linear for the vanilla variant).
    pub fn forward<'t>(
        &self,
        ctx: &mut Ctx<'_, 't>,
        ids: &[Vec<usize>],
        decoder_targets: &Tensor,
        frames: usize,
        feedback: Feedback,
    ) -> Result<ModelOutput<'t>, ModelError> {
        let memory = self.encode(ctx, ids)?;
        let (pred, steps) = self
            .decoder
            .decode_teacher_forced(ctx, &memory, decoder_targets, frames, feedback)?;
        let alignments = split_alignments(&steps, &memory.lengths);
        let batch = ids.len();
        Ok(match self.variant() {
            Variant::Vanilla => ModelOutput {
                mel: None,
                linear: pred,
                alignments,
            },
            _ => ModelOutput {
                mel: Some(pred),
                linear: self.postnet(ctx, pred, batch)?,
                alignments,
            },
        })
    }
}

/// Per-step `[B×L]` weights to one matrix per utterance, cropped to its length.
fn split_alignments(steps: &[Tensor], lengths: &[usize]) -> Vec<AlignmentMatrix> {
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut data = Vec::with_capacity(steps.len() * len);
            for w in steps {
                data.extend_from_slice(&w.row(b)[..len]);
            }
            AlignmentMatrix {
                weights: Tensor::matrix(steps.len(), len, data).expect("consistent sizes"),
            }
        })
        .collect()
}

/// Sum of ℓ1 losses against every target the variant predicts.
pub fn model_loss<'t>(out: &ModelOutput<'t>, mel: Option<&Tensor>, linear: &Tensor) -> Result<Var<'t>, GradError> {
    let lin = out.linear.l1_loss(linear)?;
    match (out.mel, mel) {
        (Some(p), Some(t)) => p.l1_loss(t)?.add(lin),
        _ => Ok(lin),
    }
}

/// Finite-difference check of the full model's loss with respect to a
/// sample of every parameter, on [`ModelConfig::gradcheck`] with the
/// given variant.
pub fn end_to_end_gradcheck(variant: Variant, seed: u64, per_param: usize) -> Result<GradcheckReport, ModelError> {
    let cfg = ModelConfig::gradcheck().with_variant(variant);
    let mut model = Tacotron::new(cfg.clone(), seed)?;
    let mut rng = Rng::new(seed ^ 0x9e37);
    // move off the initial point: zero biases put ReLUs of all-zero inputs
    // (the GO frame) exactly on their kink, where one-sided and central
    // differences disagree
    let ids_list: Vec<ParamId> = model.params.ids().collect();
    for id in ids_list {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.uniform_range(-0.1, 0.1);
        }
    }
    let ids: Vec<Vec<usize>> = [3, 2]
        .iter()
        .map(|&n| (0..n).map(|_| 1 + rng.below(cfg.vocab_size - 1)).collect())
        .collect();
    let frames = 2 * cfg.r;
    let mut random = |cols: usize| {
        Tensor::matrix(ids.len() * frames, cols, (0..ids.len() * frames * cols).map(|_| rng.uniform()).collect())
            .expect("shape")
    };
    let mel = random(cfg.mel_bands);
    let linear = random(cfg.linear_bins);
    let decoder_targets = if variant == Variant::Vanilla { linear.clone() } else { mel.clone() };
    // scheduled sampling feeds detached predictions, which finite
    // differences would see through, so the check always teacher-forces
    let feedback = Feedback::TeacherForcing;
    let mut pick = Rng::new(seed ^ 0x51ed);
    let report = gradcheck_params(
        &format!("end_to_end.{variant}"),
        &model.params,
        per_param,
        &mut pick,
        |tape, store| {
            let mut ctx = Ctx::new(tape, store, Mode::Train, Rng::new(seed));
            let out = model
                .forward(&mut ctx, &ids, &decoder_targets, frames, feedback)
                .map_err(|e| GradError::InvalidArgument(e.to_string()))?;
            model_loss(&out, Some(&mel), &linear)
        },
    )?;
    Ok(report)
}
