//! Effective run settings: defaults, then a `key = value` file, then
//! command-line overrides, with the rightmost assignment winning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tacotron_core::corpus::ToysetSpec;
use tacotron_core::dsp::SpectralConfig;
use tacotron_core::model::ModelConfig;
use tacotron_core::synth::SynthConfig;
use tacotron_core::trainer::TrainConfig;

pub const ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Base model sizes (`default` or `tiny`) before individual model keys.
    pub preset: String,
    pub model: ModelConfig,
    pub dsp: SpectralConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub toyset: ToysetSpec,
    /// Dotted keys assigned explicitly (by file or flag).
    pub explicit: BTreeSet<String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{origin}:{}: expected key = value, got {raw:?}", i + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("--set expects key=value, got {arg:?}"),
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => bail!("unknown model.preset {name:?} (expected default or tiny)"),
    }
}

impl RunConfig {
    /// Applies `assignments` in order over the defaults.
    pub fn from_assignments(assignments: &[(String, String)]) -> Result<Self> {
        let preset_name = assignments
            .iter()
            .rev()
            .find(|(k, _)| k == "model.preset")
            .map_or("default", |(_, v)| v.as_str())
            .to_string();
        let mut cfg = RunConfig {
            model: preset(&preset_name)?,
            preset: preset_name,
            dsp: SpectralConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            toyset: ToysetSpec::default(),
            explicit: BTreeSet::new(),
        };
        for (key, value) in assignments {
            cfg.set(key, value)?;
        }
        cfg.reconcile()?;
        Ok(cfg)
    }

    /// Defaults ← `file` ← `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut all = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                parse_assignments(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        all.extend(overrides.iter().cloned());
        Self::from_assignments(&all)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((section, name)) = key.split_once('.') else {
            bail!("config key {key:?} needs a section prefix (model., dsp., train., synth., toyset.)");
        };
        match section {
            "model" if name == "preset" => {}
            "model" => self.model.set(name, value)?,
            "dsp" => self.dsp.set(name, value)?,
            "train" => self.train.set(name, value)?,
            "synth" => self.synth.set(name, value)?,
            "toyset" => self.toyset.set(name, value)?,
            _ => bail!("unknown config section in {key:?}"),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Ties model output widths to the spectral settings unless set explicitly.
    fn reconcile(&mut self) -> Result<()> {
        let mel = self.dsp.mel_bands;
        let bins = self.dsp.linear_bins();
        if !self.is_set("model.mel_bands") {
            self.model.mel_bands = mel;
            if !self.is_set("model.postnet_projection") {
                self.model.postnet_cbhg.projection[1] = mel;
            }
        }
        if !self.is_set("model.linear_bins") {
            self.model.linear_bins = bins;
        }
        if self.model.mel_bands != mel || self.model.linear_bins != bins {
            bail!(
                "model predicts {}/{} mel/linear bins but dsp settings give {mel}/{bins}",
                self.model.mel_bands,
                self.model.linear_bins
            );
        }
        self.dsp.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.toyset.validate()?;
        Ok(())
    }

    /// Every effective setting, loadable as a config file.
    pub fn echo(&self) -> String {
        let mut out = format!("model.preset = {}\n", self.preset);
        let sections = [
            ("model", self.model.key_values()),
            ("dsp", self.dsp.key_values()),
            ("train", self.train.key_values()),
            ("synth", self.synth.key_values()),
            ("toyset", self.toyset.key_values()),
        ];
        for (section, kv) in sections {
            for (k, v) in kv {
                out.push_str(&format!("{section}.{k} = {v}\n"));
            }
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.echo()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn rightmost_wins_and_echo_round_trips() {
        let cfg = RunConfig::from_assignments(&kv(&[
            ("model.preset", "tiny"),
            ("model.r", "5"),
            ("train.seed", "3"),
            ("train.seed", "7"),
            ("dsp.griffin_lim_iters", "30"),
        ]))
        .unwrap();
        assert_eq!(cfg.model.r, 5);
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.dsp.griffin_lim_iters, 30);
        let again = RunConfig::from_assignments(&parse_assignments(&cfg.echo(), "echo").unwrap()).unwrap();
        assert_eq!(again.echo(), cfg.echo());
        assert_eq!(again.model, cfg.model);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for bad in [("model.rr", "2"), ("dsp.fft", "1"), ("nosection", "1"), ("x.y", "1"), ("train.seed", "abc")] {
            assert!(RunConfig::from_assignments(&kv(&[bad])).is_err(), "{bad:?}");
        }
        assert!(parse_assignments("a = 1\njunk\n", "f").unwrap_err().to_string().contains("f:2"));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn spectral_widths_follow_dsp() {
        let cfg = RunConfig::from_assignments(&kv(&[("model.preset", "tiny"), ("dsp.mel_bands", "40")])).unwrap();
        assert_eq!(cfg.model.mel_bands, 40);
        assert_eq!(cfg.model.postnet_cbhg.projection[1], 40);
        assert!(RunConfig::from_assignments(&kv(&[("model.linear_bins", "10")])).is_err());
    }
}
