//! Manifests, cached feature extraction, padded batching and the synthetic
//! tone corpus.

mod cache;
mod toyset;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub use cache::{config_hash, FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use toyset::{generate_toyset, render_toy_text, ToysetSpec};

use crate::dsp::{self, log_compress, DspError, MagnitudeSpectrogram, MelFilterbank, SpectralConfig, Waveform};
use crate::grad::{Rng, Tensor};
use crate::text::{Charset, TextError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: duplicate utterance id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{path}: sample rate {actual} Hz, expected {expected} Hz")]
    SampleRate { path: PathBuf, expected: u32, actual: u32 },
    #[error("{path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid toy corpus spec: {0}")]
    Toyset(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("utterance {id}: {source}")]
    Text {
        id: String,
        #[source]
        source: TextError,
    },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub wav_path: PathBuf,
    /// Normalized text.
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `id|wav_path|text` lines; blank lines are skipped. Relative WAV paths
    /// resolve against `base_dir`. `origin` only labels errors.
    pub fn parse(text: &str, base_dir: &Path, origin: &Path, charset: &Charset) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| CorpusError::Manifest {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.splitn(3, '|').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected id|wav_path|text, found {} field(s)", fields.len())));
            }
            let id = fields[0].trim();
            let wav = fields[1].trim();
            if id.is_empty() || wav.is_empty() {
                return Err(err("empty id or wav path".into()));
            }
            if id.contains(['/', '\\']) {
                return Err(err(format!("id {id:?} must not contain path separators")));
            }
            if !seen.insert(id.to_string()) {
                return Err(CorpusError::DuplicateId {
                    path: origin.to_path_buf(),
                    line: line_no,
                    id: id.to_string(),
                });
            }
            let text = charset.normalize(fields[2]).map_err(|e| err(e.to_string()))?;
            let wav_path = Path::new(wav);
            records.push(ManifestRecord {
                id: id.to_string(),
                wav_path: if wav_path.is_absolute() {
                    wav_path.to_path_buf()
                } else {
                    base_dir.join(wav_path)
                },
                text,
            });
        }
        Ok(Self { records })
    }

    /// Writes `id|wav_path|text` lines with paths relative to `dir` when possible.
    pub fn to_text(&self, dir: &Path) -> String {
        let mut out = String::new();
        for r in &self.records {
            let p = r.wav_path.strip_prefix(dir).unwrap_or(&r.wav_path);
            out.push_str(&format!("{}|{}|{}\n", r.id, p.display(), r.text));
        }
        out
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Manifest::parse(&text, base, path, &Charset::default())
}

/// Normalized features of one utterance; both matrices share `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub text: String,
    pub ids: Vec<usize>,
    /// `[T×mel_bands]` in `[0,1]`.
    pub mel: Tensor,
    /// `[T×linear_bins]` in `[0,1]`.
    pub linear: Tensor,
}

impl FeatureRecord {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }
}

/// Spectral front end with its filterbank built once.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub config: SpectralConfig,
    pub filterbank: MelFilterbank,
}

impl Featurizer {
    pub fn new(config: SpectralConfig) -> Result<Self, DspError> {
        let filterbank = MelFilterbank::new(&config)?;
        Ok(Self { config, filterbank })
    }

    /// Pre-emphasis → STFT → scaled magnitude → log-compressed linear and
    /// mel features, rounded to f32 so cached and fresh values agree.
    pub fn features(&self, wav: &Waveform) -> Result<(Tensor, Tensor), DspError> {
        let emphasized = dsp::pre_emphasis(wav, self.config.preemphasis);
        let spec = dsp::stft(&emphasized, &self.config)?;
        let mag = MagnitudeSpectrogram::from_stft(&spec, &self.config);
        let mut mel = log_compress(&dsp::linear_to_mel(&mag, &self.filterbank)?);
        let mut linear = log_compress(&mag.frames);
        mel.quantize_f32();
        linear.quantize_f32();
        Ok((mel, linear))
    }

    /// Features for one manifest record, through `cache` when given.
    pub fn featurize(
        &self,
        record: &ManifestRecord,
        charset: &Charset,
        cache: Option<&FeatureCache>,
    ) -> Result<FeatureRecord, CorpusError> {
        let cached = match cache {
            Some(c) => c.load(&record.id)?,
            None => None,
        };
        let (mel, linear) = match cached {
            Some(features) => features,
            None => {
                let wav = dsp::read_wav(&record.wav_path)?;
                if wav.sample_rate_hz != self.config.sample_rate_hz {
                    return Err(CorpusError::SampleRate {
                        path: record.wav_path.clone(),
                        expected: self.config.sample_rate_hz,
                        actual: wav.sample_rate_hz,
                    });
                }
                let features = self.features(&wav)?;
                if let Some(c) = cache {
                    c.store(&record.id, &features.0, &features.1)?;
                }
                features
            }
        };
        let encoded = charset.encode(&record.text).map_err(|source| CorpusError::Text {
            id: record.id.clone(),
            source,
        })?;
        Ok(FeatureRecord {
            id: record.id.clone(),
            text: record.text.clone(),
            ids: encoded.ids,
            mel,
            linear,
        })
    }

    /// Featurizes every record across worker threads, preserving order.
    pub fn featurize_all(
        &self,
        manifest: &Manifest,
        charset: &Charset,
        cache: Option<&FeatureCache>,
    ) -> Vec<Result<FeatureRecord, CorpusError>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
        let records = &manifest.records;
        let chunk = records.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| self.featurize(r, charset, cache)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("featurize worker panicked"))
                .collect()
        })
    }
}

/// A padded training batch. Sequences are stacked `[(B·T)×C]` with row
/// `b·T + t`; padding frames are exactly zero and carry no mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub utterance_ids: Vec<String>,
    pub ids: Vec<Vec<usize>>,
    /// Unpadded frame count of each utterance.
    pub frame_lengths: Vec<usize>,
    /// Padded frame count, a multiple of `r`.
    pub frames: usize,
    pub mel: Tensor,
    pub linear: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }
}

/// Pads a group of records to a common length rounded up to a multiple of `r`.
pub fn pad_batch(records: &[&FeatureRecord], r: usize) -> Result<Batch, CorpusError> {
    let first = records.first().ok_or(CorpusError::EmptyBatch)?;
    let r = r.max(1);
    let longest = records.iter().map(|x| x.frames()).max().unwrap_or(0);
    let frames = longest.div_ceil(r) * r;
    let (mel_dim, lin_dim) = (first.mel.cols(), first.linear.cols());
    let mut mel = Tensor::zeros(&[records.len() * frames, mel_dim]);
    let mut linear = Tensor::zeros(&[records.len() * frames, lin_dim]);
    for (b, rec) in records.iter().enumerate() {
        let t = rec.frames();
        let start = b * frames;
        mel.data_mut()[start * mel_dim..(start + t) * mel_dim].copy_from_slice(rec.mel.data());
        linear.data_mut()[start * lin_dim..(start + t) * lin_dim].copy_from_slice(rec.linear.data());
    }
    Ok(Batch {
        utterance_ids: records.iter().map(|x| x.id.clone()).collect(),
        ids: records.iter().map(|x| x.ids.clone()).collect(),
        frame_lengths: records.iter().map(|x| x.frames()).collect(),
        frames,
        mel,
        linear,
    })
}

/// Length-bucketed batch order: records sorted by frame count are cut into
/// consecutive groups of `batch_size`; each epoch visits the groups in an
/// order shuffled by `Rng::derived(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    buckets: Vec<Vec<usize>>,
    seed: u64,
}

impl BatchPlan {
    pub fn new(frame_counts: &[usize], batch_size: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..frame_counts.len()).collect();
        order.sort_by_key(|&i| (frame_counts[i], i));
        let buckets = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        Self { buckets, seed }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.buckets.len()
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut out = self.buckets.clone();
        Rng::derived(self.seed, epoch).shuffle(&mut out);
        out
    }

    /// Record indices of the batch consumed at a global step.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let n = self.buckets.len().max(1) as u64;
        self.epoch(step / n).swap_remove((step % n) as usize)
    }
}

#[cfg(test)]
mod tests;
