//! Versioned binary checkpoint.
//!
//! ```text
//! "TACOFRG1" | u32 version | u64 step | u64 tensor count
//! per tensor: u64 name length | name | u64 rank | u64 dims… | f32 values…
//! Adam: f64 beta1, beta2, eps | u64 step | u64 slots | per slot: u64 len | f32 m… | f32 v…
//! u64 config length | UTF-8 key=value lines
//! ```
//! Integers and floats are little-endian. Batch-norm running statistics are
//! stored in the tensor table under a `buffer:` prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::TrainError;
use crate::dsp::SpectralConfig;
use crate::grad::{AdamState, Tensor};
use crate::model::{ModelConfig, Tacotron};
use crate::text::Charset;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TACOFRG1";
pub const CHECKPOINT_VERSION: u32 = 1;
const BUFFER_PREFIX: &str = "buffer:";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Tacotron,
    pub adam: AdamState,
    pub step: u64,
    pub spectral: SpectralConfig,
    pub charset: Charset,
}

impl Checkpoint {
    /// Errors unless the stored configs equal the given ones.
    pub fn ensure_matches(&self, model: &ModelConfig, spectral: &SpectralConfig) -> Result<(), TrainError> {
        let diff = |a: Vec<(String, String)>, b: Vec<(String, String)>, prefix: &str| -> Vec<String> {
            a.iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|((k, v), (_, w))| format!("{prefix}.{k}: checkpoint {v}, requested {w}"))
                .collect()
        };
        let mut problems = diff(self.model.config.key_values(), model.key_values(), "model");
        problems.extend(diff(self.spectral.key_values(), spectral.key_values(), "dsp"));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::ConfigMismatch(problems.join("; ")))
        }
    }
}

fn charset_value(cs: &Charset) -> String {
    cs.symbols()
        .iter()
        .map(|s| {
            if s.chars().count() == 1 {
                format!("U+{:04X}", s.chars().next().expect("one char") as u32)
            } else {
                s.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_charset(value: &str) -> Result<Charset, String> {
    let symbols = value
        .split(' ')
        .map(|tok| match tok.strip_prefix("U+") {
            Some(hex) => u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .map(String::from)
                .ok_or_else(|| format!("bad charset symbol {tok:?}")),
            None => Ok(tok.to_string()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Charset::from_symbols(symbols).map_err(|e| e.to_string())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_f32s(out, t.data().iter().map(|&v| v as f32));
}

pub fn encode_checkpoint(
    model: &Tacotron,
    adam: &AdamState,
    step: u64,
    spectral: &SpectralConfig,
    charset: &Charset,
) -> Vec<u8> {
    let p = &model.params;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, step);
    put_u64(&mut out, (p.len() + p.buffer_ids().count()) as u64);
    for id in p.ids() {
        put_tensor(&mut out, p.name(id), p.get(id));
    }
    for id in p.buffer_ids() {
        put_tensor(&mut out, &format!("{BUFFER_PREFIX}{}", p.buffer_name(id)), p.buffer(id));
    }

    for v in [adam.beta1, adam.beta2, adam.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut out, adam.step);
    put_u64(&mut out, adam.first_moment.len() as u64);
    for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
        put_u64(&mut out, m.len() as u64);
        put_f32s(&mut out, m.iter().copied());
        put_f32s(&mut out, v.iter().copied());
    }

    let mut config = String::new();
    for (k, v) in model.config.key_values() {
        config.push_str(&format!("model.{k}={v}\n"));
    }
    for (k, v) in spectral.key_values() {
        config.push_str(&format!("dsp.{k}={v}\n"));
    }
    config.push_str(&format!("charset={}\n", charset_value(charset)));
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(config.as_bytes());
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Tacotron,
    adam: &AdamState,
    step: u64,
    spectral: &SpectralConfig,
    charset: &Charset,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let bytes = encode_checkpoint(model, adam, step, spectral, charset);
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("implausible length {v}"))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("bad magic: not a checkpoint".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format!("format version {version}, this build reads {CHECKPOINT_VERSION}"));
    }
    let mut r = Reader { bytes, pos: 12 };
    let step = r.u64()?;
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8")?
            .to_string();
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let data = r.f32s(n)?.into_iter().map(f64::from).collect();
        tensors.insert(name, Tensor::new(dims, data).map_err(|e| e.to_string())?);
    }

    let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
    let adam_step = r.u64()?;
    let slots = r.len()?;
    let mut first_moment = Vec::with_capacity(slots);
    let mut second_moment = Vec::with_capacity(slots);
    for _ in 0..slots {
        let n = r.len()?;
        first_moment.push(r.f32s(n)?);
        second_moment.push(r.f32s(n)?);
    }

    let config_len = r.len()?;
    let config = std::str::from_utf8(r.take(config_len)?).map_err(|_| "config block is not UTF-8")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut model_cfg = ModelConfig::default();
    let mut spectral = SpectralConfig::default();
    let mut charset = None;
    for line in config.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| format!("bad config line {line:?}"))?;
        if let Some(k) = key.strip_prefix("model.") {
            model_cfg.set(k, value).map_err(|e| e.to_string())?;
        } else if let Some(k) = key.strip_prefix("dsp.") {
            spectral.set(k, value).map_err(|e| e.to_string())?;
        } else if key == "charset" {
            charset = Some(parse_charset(value)?);
        } else {
            return Err(format!("unknown config key {key:?}"));
        }
    }
    let charset = charset.ok_or("config block lacks a charset")?;

    let mut model = Tacotron::new(model_cfg, 0).map_err(|e| e.to_string())?;
    let expected = model.params.len() + model.params.buffer_ids().count();
    if tensors.len() != expected {
        return Err(format!("{} tensors stored, model has {expected}", tensors.len()));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let t = tensors.remove(&name).ok_or_else(|| format!("missing tensor {name}"))?;
        model.params.set(id, t).map_err(|e| format!("{name}: {e}"))?;
    }
    for id in model.params.buffer_ids().collect::<Vec<_>>() {
        let name = format!("{BUFFER_PREFIX}{}", model.params.buffer_name(id));
        let t = tensors.remove(&name).ok_or_else(|| format!("missing tensor {name}"))?;
        if t.shape() != model.params.buffer(id).shape() {
            return Err(format!("{name}: shape {:?}, expected {:?}", t.shape(), model.params.buffer(id).shape()));
        }
        *model.params.buffer_mut(id) = t;
    }
    let sizes: Vec<usize> = model.params.ids().map(|id| model.params.get(id).numel()).collect();
    if first_moment.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err("Adam moments do not match the parameter shapes".into());
    }
    let adam = AdamState {
        beta1,
        beta2,
        eps,
        step: adam_step,
        first_moment,
        second_moment,
    };
    Ok(Checkpoint {
        model,
        adam,
        step,
        spectral,
        charset,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|message| TrainError::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}
