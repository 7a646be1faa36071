//! Append-only metrics CSV and alignment snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{StepMetrics, TrainError};
use crate::dsp::export::{matrix_to_csv, matrix_to_pgm};
use crate::model::AlignmentMatrix;

pub const METRICS_HEADER: &str = "step,lr,mel_loss,linear_loss,grad_norm,wall_ms";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header if the file is new or empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref().to_path_buf();
        let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}").map_err(io(&path))?;
        }
        Ok(Self { path, out })
    }

    /// One row; `mel_loss` is empty for models without a mel output.
    pub fn append(&mut self, m: &StepMetrics, wall_ms: u64) -> Result<(), TrainError> {
        let mel = m.mel_loss.map_or(String::new(), |v| format!("{v:.6e}"));
        writeln!(
            self.out,
            "{},{:e},{mel},{:.6e},{:.6e},{wall_ms}",
            m.step, m.lr, m.linear_loss, m.grad_norm
        )
        .map_err(io(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(io(&self.path))
    }
}

/// Writes `<stem>.csv` and `<stem>.pgm` (decoder steps × text length).
pub fn write_alignment_snapshot(dir: impl AsRef<Path>, stem: &str, a: &AlignmentMatrix) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, matrix_to_csv(&a.weights)).map_err(io(&csv))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, matrix_to_pgm(&a.weights)).map_err(io(&pgm))
}
