//! Matrix export: CSV (one row per line, 6 significant digits) and 8-bit
//! binary PGM with each row scaled to its own maximum.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DspError;
use crate::grad::Tensor;

fn io_err(path: &Path, source: std::io::Error) -> DspError {
    DspError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.5e}")
    }
}

pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| format_sig6(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, m: &Tensor) -> Result<(), DspError> {
    let path = path.as_ref();
    fs::write(path, matrix_to_csv(m)).map_err(|e| io_err(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Tensor, DspError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv(&text).map_err(|message| DspError::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_csv(text: &str) -> Result<Tensor, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no rows".into());
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

/// Binary PGM (P5); image row `i` is matrix row `i`.
pub fn matrix_to_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.rows(), m.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        let row = m.row(r);
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        for &v in row {
            let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
            out.push(level as u8);
        }
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, m: &Tensor) -> Result<(), DspError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&matrix_to_pgm(m)).map_err(|e| io_err(path, e))
}

/// Width and height from a PGM header.
pub fn pgm_dimensions(bytes: &[u8]) -> Option<(usize, usize)> {
    let text = std::str::from_utf8(&bytes[..bytes.len().min(64)]).ok().or_else(|| {
        let end = bytes.iter().position(|&b| b > 127)?;
        std::str::from_utf8(&bytes[..end]).ok()
    })?;
    let mut it = text.split_ascii_whitespace();
    if it.next()? != "P5" {
        return None;
    }
    Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
}
