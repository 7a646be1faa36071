use std::path::Path;

use super::{DspError, Waveform};

fn format_err(path: &Path, message: impl Into<String>) -> DspError {
    DspError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn hound_err(path: &Path, e: hound::Error) -> DspError {
    match e {
        hound::Error::IoError(source) => DspError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other.to_string()),
    }
}

/// Reads a mono 16-bit PCM WAV file; samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, DspError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!("expected 16-bit PCM, found {}-bit {:?}", spec.bits_per_sample, spec.sample_format),
        ));
    }
    if spec.channels != 1 {
        return Err(format_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| hound_err(path, e))?;
    if samples.is_empty() {
        return Err(format_err(path, "data chunk holds no samples"));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM; samples are scaled by 32768 and clamped.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<(), DspError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &wav.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}
