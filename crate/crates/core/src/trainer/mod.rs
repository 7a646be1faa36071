//! Optimization loop: learning-rate schedule, losses, feedback policy,
//! checkpoints and training logs.

mod checkpoint;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use metrics::{write_alignment_snapshot, MetricsLog, METRICS_HEADER};

use crate::corpus::{pad_batch, Batch, BatchPlan, CorpusError, FeatureRecord};
use crate::dsp::SpectralConfig;
use crate::grad::ops::Mode;
use crate::text::Charset;
use crate::grad::{AdamState, GradError, Rng, Tape, Tensor, Var};
use crate::model::{apply_bn_updates, AlignmentMatrix, Feedback, ModelError, Tacotron, Variant};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step} (utterances {utterances:?})")]
    NonFinite {
        what: &'static str,
        step: u64,
        utterances: Vec<String>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(step, lr)` pairs, strictly increasing in step and decreasing in lr.
    pub lr_milestones: Vec<(u64, f64)>,
    /// Multiplies every milestone step; small values suit small corpora.
    pub milestone_scale: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Probability of feeding ground truth per decoder step (vanilla only).
    pub scheduled_sampling_rate: f64,
    pub checkpoint_every: u64,
    pub alignment_every: u64,
    /// Record real elapsed time in the metrics log (breaks byte-identical logs).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 0.001,
            lr_milestones: vec![(500_000, 0.0005), (1_000_000, 0.0003), (2_000_000, 0.0001)],
            milestone_scale: 1.0,
            max_steps: 1000,
            seed: 1,
            clip_norm: Some(1.0),
            scheduled_sampling_rate: 0.5,
            checkpoint_every: 1000,
            alignment_every: 100,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be > 0", self.base_lr));
        }
        let mut prev = (0u64, self.base_lr);
        for (i, &(step, lr)) in self.lr_milestones.iter().enumerate() {
            if (i > 0 && step <= prev.0) || !(lr > 0.0 && lr < prev.1) {
                return bad(format!(
                    "milestones must increase in step and decrease in lr: {:?}",
                    self.lr_milestones
                ));
            }
            prev = (step, lr);
        }
        if !(self.milestone_scale > 0.0) {
            return bad(format!("milestone_scale {} must be > 0", self.milestone_scale));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling_rate) {
            return bad(format!("scheduled_sampling_rate {} outside [0,1]", self.scheduled_sampling_rate));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be > 0".into());
        }
        Ok(())
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let milestones = self
            .lr_milestones
            .iter()
            .map(|(s, lr)| format!("{s}:{lr}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("lr_milestones".into(), milestones),
            ("milestone_scale".into(), self.milestone_scale.to_string()),
            ("max_steps".into(), self.max_steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("clip_norm".into(), self.clip_norm.map_or("off".into(), |c| c.to_string())),
            ("scheduled_sampling_rate".into(), self.scheduled_sampling_rate.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("alignment_every".into(), self.alignment_every.to_string()),
            ("log_wall_time".into(), self.log_wall_time.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| TrainError::Config(format!("train.{key} = {value:?}: {e}")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|pair| {
                        let (s, lr) = pair.split_once(':').ok_or_else(|| {
                            TrainError::Config(format!("train.lr_milestones: expected step:lr, got {pair:?}"))
                        })?;
                        Ok((parse(key, s)?, parse(key, lr)?))
                    })
                    .collect::<Result<_, TrainError>>()?
            }
            "milestone_scale" => self.milestone_scale = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" if value.trim() == "off" => self.clip_norm = None,
            "clip_norm" => self.clip_norm = Some(parse(key, value)?),
            "scheduled_sampling_rate" => self.scheduled_sampling_rate = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "alignment_every" => self.alignment_every = parse(key, value)?,
            "log_wall_time" => self.log_wall_time = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `base_lr` until the first (scaled) milestone,
/// then each milestone's rate until the next.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.base_lr;
    for &(at, rate) in &cfg.lr_milestones {
        if step as f64 >= at as f64 * cfg.milestone_scale {
            lr = rate;
        }
    }
    lr
}

/// Total loss plus its parts as plain numbers.
pub struct Loss<'t> {
    pub total: Var<'t>,
    /// Absent for the vanilla variant.
    pub mel: Option<f64>,
    pub linear: f64,
}

/// `ℓ1(mel) + ℓ1(linear)` with equal weights, or the linear term alone when
/// there is no mel prediction. Padded frames count like any other.
pub fn compute_loss<'t>(
    pred_mel: Option<Var<'t>>,
    target_mel: &Tensor,
    pred_linear: Var<'t>,
    target_linear: &Tensor,
) -> Result<Loss<'t>, GradError> {
    let linear = pred_linear.l1_loss(target_linear)?;
    let linear_value = linear.value().item();
    match pred_mel {
        Some(p) => {
            let mel = p.l1_loss(target_mel)?;
            let mel_value = mel.value().item();
            Ok(Loss {
                total: mel.add(linear)?,
                mel: Some(mel_value),
                linear: linear_value,
            })
        }
        None => Ok(Loss {
            total: linear,
            mel: None,
            linear: linear_value,
        }),
    }
}

/// Whether a scheduled-sampling decoder step reads ground truth, drawn with
/// probability `rate`. Only the vanilla variant trains this way.
pub fn scheduled_sampling_choose(variant: Variant, rate: f64, rng: &mut Rng) -> Result<bool, TrainError> {
    if variant != Variant::Vanilla {
        return Err(TrainError::Config(format!(
            "scheduled sampling is reserved for the vanilla variant, not {variant}"
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(TrainError::Config(format!("sampling rate {rate} outside [0,1]")));
    }
    Ok(rng.bernoulli(rate))
}

/// Per-step training record.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    /// Global step after the update (1 for the first batch).
    pub step: u64,
    pub lr: f64,
    pub mel_loss: Option<f64>,
    pub linear_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub alignments: Vec<AlignmentMatrix>,
    pub utterances: Vec<String>,
}

impl StepMetrics {
    pub fn total_loss(&self) -> f64 {
        self.mel_loss.unwrap_or(0.0) + self.linear_loss
    }
}

/// Running state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    /// Exponential averages of the losses (factor 0.98).
    pub avg_mel_loss: f64,
    pub avg_linear_loss: f64,
    pub last_alignment: Option<AlignmentMatrix>,
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Tacotron,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Tacotron, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self::resume(model, adam, 0, config))
    }

    /// Continues from a saved step; the schedule picks up at `lr_at_step(step)`.
    pub fn resume(model: Tacotron, adam: AdamState, step: u64, config: TrainConfig) -> Self {
        Self {
            model,
            adam,
            config,
            state: TrainState {
                step,
                avg_mel_loss: 0.0,
                avg_linear_loss: 0.0,
                last_alignment: None,
            },
        }
    }

    fn feedback(&self) -> Feedback {
        match self.model.variant() {
            Variant::Vanilla => Feedback::Scheduled {
                rate: self.config.scheduled_sampling_rate,
            },
            _ => Feedback::TeacherForcing,
        }
    }

    /// Forward, backward, clip and one Adam update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics, TrainError> {
        let step = self.state.step;
        let lr = lr_at_step(step, &self.config);
        let variant = self.model.variant();
        let non_finite = |what| TrainError::NonFinite {
            what,
            step,
            utterances: batch.utterance_ids.clone(),
        };
        let decoder_targets = if variant == Variant::Vanilla { &batch.linear } else { &batch.mel };
        let tape = Tape::new();
        let (loss_parts, alignments, bn_updates, grads) = {
            let mut ctx = self.model.ctx(&tape, Mode::Train, Rng::derived(self.config.seed, step));
            let out = self
                .model
                .forward(&mut ctx, &batch.ids, decoder_targets, batch.frames, self.feedback())?;
            let loss = compute_loss(out.mel, &batch.mel, out.linear, &batch.linear)?;
            if !loss.total.value().is_finite() {
                return Err(non_finite("loss"));
            }
            let grads = tape.backward(loss.total)?;
            let per_param: Vec<Option<Tensor>> = self.model.params.ids().map(|id| grads.param(id).cloned()).collect();
            ((loss.mel, loss.linear), out.alignments, std::mem::take(&mut ctx.bn_updates), per_param)
        };
        let mut grads = grads;
        let grad_norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(non_finite("gradient"));
        }
        let clipped = match self.config.clip_norm {
            Some(max) if grad_norm > max => {
                let s = max / grad_norm;
                for g in grads.iter_mut().flatten() {
                    *g = g.scale(s);
                }
                log::debug!("step {step}: clipped gradient norm {grad_norm:.4} to {max}");
                true
            }
            _ => false,
        };
        self.adam.step(&mut self.model.params, &grads, lr)?;
        apply_bn_updates(&mut self.model.params, &bn_updates);

        self.state.step += 1;
        let (mel, linear) = loss_parts;
        let decay = if step == 0 { 0.0 } else { 0.98 };
        self.state.avg_mel_loss = decay * self.state.avg_mel_loss + (1.0 - decay) * mel.unwrap_or(0.0);
        self.state.avg_linear_loss = decay * self.state.avg_linear_loss + (1.0 - decay) * linear;
        self.state.last_alignment = alignments.first().cloned();
        Ok(StepMetrics {
            step: self.state.step,
            lr,
            mel_loss: mel,
            linear_loss: linear,
            grad_norm,
            clipped,
            alignments,
            utterances: batch.utterance_ids.clone(),
        })
    }
}

/// Teacher-forced alignments of each record, decoded one utterance at a time
/// with dropout off.
pub fn evaluate_alignments(model: &Tacotron, records: &[FeatureRecord]) -> Result<Vec<AlignmentMatrix>, TrainError> {
    records
        .iter()
        .map(|rec| {
            let batch = pad_batch(&[rec], model.r())?;
            let targets = if model.variant() == Variant::Vanilla { &batch.linear } else { &batch.mel };
            let tape = Tape::no_grad();
            let mut ctx = model.ctx(&tape, Mode::Infer, Rng::new(0));
            ctx.inference_dropout = false;
            let out = model.forward(&mut ctx, &batch.ids, targets, batch.frames, Feedback::TeacherForcing)?;
            Ok(out.alignments.into_iter().next().expect("one utterance"))
        })
        .collect()
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn alignments(&self) -> PathBuf {
        self.root.join("alignments")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    /// Copy of the most recent checkpoint.
    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest.ckpt")
    }
}

impl Trainer {
    /// Trains until `config.max_steps`, iterating length-bucketed batches in a
    /// seeded order. Writes metrics, alignment snapshots (first utterance of
    /// the batch) and checkpoints under `run` when given; `on_step` sees every
    /// step's metrics.
    pub fn fit(
        &mut self,
        records: &[FeatureRecord],
        spectral: &SpectralConfig,
        charset: &Charset,
        run: Option<&RunDir>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<(), TrainError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyBatch.into());
        }
        let frame_counts: Vec<usize> = records.iter().map(FeatureRecord::frames).collect();
        let plan = BatchPlan::new(&frame_counts, self.config.batch_size, self.config.seed);
        let mut log = match run {
            Some(run) => {
                let dir = run.root.join("checkpoints");
                std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io { path: dir, source })?;
                Some(MetricsLog::open(run.metrics())?)
            }
            None => None,
        };
        let started = Instant::now();
        let r = self.model.r();
        while self.state.step < self.config.max_steps {
            let picked: Vec<&FeatureRecord> = plan.batch_at(self.state.step).into_iter().map(|i| &records[i]).collect();
            let batch = pad_batch(&picked, r)?;
            let metrics = self.train_step(&batch)?;
            on_step(&metrics);
            let step = metrics.step;
            if let Some(run) = run {
                let wall_ms = if self.config.log_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                };
                if let Some(log) = log.as_mut() {
                    log.append(&metrics, wall_ms)?;
                }
                if self.config.alignment_every > 0 && step % self.config.alignment_every == 0 {
                    if let Some(a) = metrics.alignments.first() {
                        write_alignment_snapshot(run.alignments(), &format!("step_{step:08}"), a)?;
                    }
                }
                let last = step == self.config.max_steps;
                if last || (self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0) {
                    if let Some(log) = log.as_mut() {
                        log.flush()?;
                    }
                    self.save(run.checkpoint(step), spectral, charset)?;
                    self.save(run.latest(), spectral, charset)?;
                }
            }
        }
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, spectral: &SpectralConfig, charset: &Charset) -> Result<(), TrainError> {
        save_checkpoint(path, &self.model, &self.adam, self.state.step, spectral, charset)
    }
}

#[cfg(test)]
mod tests;
