//! On-disk feature cache: `<root>/<config-hash>/<utterance_id>.feat`.
//!
//! Layout: magic, u32 version, u64 frames, u64 mel width, u64 linear width
//! (all little-endian), then mel and linear values as f32 LE, row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{io_err, CorpusError};
use crate::dsp::SpectralConfig;
use crate::grad::Tensor;

pub const CACHE_MAGIC: &[u8; 8] = b"TACOFEAT";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 3 * 8;

/// First 16 hex digits of the SHA-256 of the config's `key=value` lines.
pub fn config_hash(cfg: &SpectralConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in cfg.key_values() {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    /// Cache under `root` for features computed with `cfg`.
    pub fn new(root: impl AsRef<Path>, cfg: &SpectralConfig) -> Result<Self, CorpusError> {
        let dir = root.as_ref().join(config_hash(cfg));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.feat"))
    }

    pub fn load(&self, id: &str) -> Result<Option<(Tensor, Tensor)>, CorpusError> {
        let path = self.path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        decode(&bytes).map(Some).map_err(|message| CorpusError::Cache { path, message })
    }

    /// Writes to a temporary file and renames it into place.
    pub fn store(&self, id: &str, mel: &Tensor, linear: &Tensor) -> Result<(), CorpusError> {
        let path = self.path(id);
        let tmp = self.dir.join(format!(".{id}.feat.{}.tmp", std::process::id()));
        let bytes = encode(mel, linear);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io_err(&path, e)
        })
    }
}

fn encode(mel: &Tensor, linear: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (mel.numel() + linear.numel()));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for d in [mel.rows(), mel.cols(), linear.cols()] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in mel.data().iter().chain(linear.data()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(Tensor, Tensor), String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CACHE_MAGIC {
        return Err("not a feature cache file".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(format!("cache version {version}, expected {CACHE_VERSION}"));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (frames, mel_dim, lin_dim) = (dim(0), dim(1), dim(2));
    let expected = frames
        .checked_mul(mel_dim + lin_dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or("dimensions overflow")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(format!("payload is {} bytes, header implies {expected}", body.len()));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let split = frames * mel_dim;
    let mel = Tensor::matrix(frames, mel_dim, values[..split].to_vec()).map_err(|e| e.to_string())?;
    let linear = Tensor::matrix(frames, lin_dim, values[split..].to_vec()).map_err(|e| e.to_string())?;
    Ok((mel, linear))
}
