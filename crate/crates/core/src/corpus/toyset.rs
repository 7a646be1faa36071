//! Synthetic corpus: each character is a pure tone of fixed duration, so the
//! text-to-audio alignment is known exactly.

use std::fs;
use std::path::Path;

use super::{io_err, CorpusError, Manifest, ManifestRecord};
use crate::dsp::{write_wav, Waveform};
use crate::grad::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ToysetSpec {
    pub alphabet: Vec<char>,
    pub tone_base_hz: f64,
    pub tone_step_hz: f64,
    pub char_duration_ms: f64,
    pub crossfade_ms: f64,
    pub amplitude: f64,
    pub utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for ToysetSpec {
    fn default() -> Self {
        Self {
            alphabet: "abcdefgh".chars().collect(),
            tone_base_hz: 200.0,
            tone_step_hz: 40.0,
            char_duration_ms: 100.0,
            crossfade_ms: 5.0,
            amplitude: 0.5,
            utterances: 10,
            min_chars: 3,
            max_chars: 8,
            sample_rate_hz: 24_000,
            seed: 1,
        }
    }
}

impl ToysetSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Toyset(m));
        if self.alphabet.is_empty() {
            return bad("alphabet is empty".into());
        }
        let top = self.tone_hz(self.alphabet.len() - 1);
        if top >= self.sample_rate_hz as f64 / 2.0 || self.tone_base_hz <= 0.0 {
            return bad(format!("tone range {}..{top} Hz must lie in (0, Nyquist)", self.tone_base_hz));
        }
        if self.char_duration_ms <= 0.0 || self.crossfade_ms < 0.0 || self.crossfade_ms > self.char_duration_ms {
            return bad("durations must be positive with crossfade ≤ character duration".into());
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return bad(format!("character range {}..={} invalid", self.min_chars, self.max_chars));
        }
        Ok(())
    }

    /// Tone frequency of the `index`-th alphabet character.
    pub fn tone_hz(&self, index: usize) -> f64 {
        self.tone_base_hz + self.tone_step_hz * index as f64
    }

    pub fn char_tone_hz(&self, c: char) -> Option<f64> {
        self.alphabet.iter().position(|&a| a == c).map(|i| self.tone_hz(i))
    }

    pub fn samples_per_char(&self) -> usize {
        (self.sample_rate_hz as f64 * self.char_duration_ms / 1000.0).round() as usize
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        vec![
            ("alphabet".into(), self.alphabet.iter().collect()),
            ("tone_base_hz".into(), self.tone_base_hz.to_string()),
            ("tone_step_hz".into(), self.tone_step_hz.to_string()),
            ("char_duration_ms".into(), self.char_duration_ms.to_string()),
            ("crossfade_ms".into(), self.crossfade_ms.to_string()),
            ("amplitude".into(), self.amplitude.to_string()),
            ("utterances".into(), self.utterances.to_string()),
            ("min_chars".into(), self.min_chars.to_string()),
            ("max_chars".into(), self.max_chars.to_string()),
            ("sample_rate_hz".into(), self.sample_rate_hz.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CorpusError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CorpusError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| CorpusError::Toyset(format!("toyset.{key} = {value:?}: {e}")))
        }
        match key {
            "alphabet" => self.alphabet = value.trim().chars().collect(),
            "tone_base_hz" => self.tone_base_hz = parse(key, value)?,
            "tone_step_hz" => self.tone_step_hz = parse(key, value)?,
            "char_duration_ms" => self.char_duration_ms = parse(key, value)?,
            "crossfade_ms" => self.crossfade_ms = parse(key, value)?,
            "amplitude" => self.amplitude = parse(key, value)?,
            "utterances" => self.utterances = parse(key, value)?,
            "min_chars" => self.min_chars = parse(key, value)?,
            "max_chars" => self.max_chars = parse(key, value)?,
            "sample_rate_hz" => self.sample_rate_hz = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(CorpusError::Toyset(format!("unknown key toyset.{key}"))),
        }
        Ok(())
    }
}

/// Concatenated tones for `text`, with linear crossfades centred on each
/// character boundary. Characters outside the alphabet are an error.
pub fn render_toy_text(text: &str, spec: &ToysetSpec) -> Result<Waveform, CorpusError> {
    spec.validate()?;
    let freqs = text
        .chars()
        .map(|c| spec.char_tone_hz(c).ok_or_else(|| CorpusError::Toyset(format!("{c:?} not in toy alphabet"))))
        .collect::<Result<Vec<f64>, _>>()?;
    let seg = spec.samples_per_char();
    let sr = spec.sample_rate_hz as f64;
    let half_fade = spec.crossfade_ms / 1000.0 * sr / 2.0;
    let tone = |f: f64, n: usize| spec.amplitude * (2.0 * std::f64::consts::PI * f * n as f64 / sr).sin();
    let samples = (0..freqs.len() * seg)
        .map(|n| {
            let k = n / seg;
            let pos = (n % seg) as f64 + 0.5;
            // weight of the neighbouring tone near either boundary
            if k > 0 && pos < half_fade {
                let w = 0.5 + 0.5 * pos / half_fade;
                w * tone(freqs[k], n) + (1.0 - w) * tone(freqs[k - 1], n)
            } else if k + 1 < freqs.len() && seg as f64 - pos < half_fade {
                let w = 0.5 + 0.5 * (seg as f64 - pos) / half_fade;
                w * tone(freqs[k], n) + (1.0 - w) * tone(freqs[k + 1], n)
            } else {
                tone(freqs[k], n)
            }
        })
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate_hz))
}

/// Random utterances over the alphabet, written as `toy_NNN.wav` plus
/// `manifest.txt` in `out_dir`. Deterministic in `spec`.
pub fn generate_toyset(spec: &ToysetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut rng = Rng::new(spec.seed);
    let mut records = Vec::with_capacity(spec.utterances);
    for i in 0..spec.utterances {
        let len = spec.min_chars + rng.below(spec.max_chars - spec.min_chars + 1);
        let text: String = (0..len).map(|_| spec.alphabet[rng.below(spec.alphabet.len())]).collect();
        let id = format!("toy_{i:03}");
        let wav_path = out_dir.join(format!("{id}.wav"));
        write_wav(&wav_path, &render_toy_text(&text, spec)?)?;
        records.push(ManifestRecord { id, wav_path, text });
    }
    let manifest = Manifest { records };
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest.to_text(out_dir)).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
