//! Run configuration: model and training settings plus the output
//! directory, read from flat `key=value` text.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::train::{TrainConfig, TRAIN_KEYS};

/// File name of the effective-config echo inside a run directory.
pub const ECHO_NAME: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::default(), out: None }
    }
}

impl RunConfig {
    /// Every accepted key, model keys first.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        MODEL_KEYS.into_iter().chain(TRAIN_KEYS).chain(["out"])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if MODEL_KEYS.contains(&key) {
            self.model.set(key, value)
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, value)
        } else if key == "out" {
            self.out = (!value.is_empty()).then(|| PathBuf::from(value));
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    /// Applies `key=value` lines on top of the current values. Blank lines
    /// and lines starting with `#` are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its effective value; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# model\n");
        for (k, v) in self.model.to_kv() {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str("# training\n");
        for (k, v) in self.train.to_kv() {
            let _ = writeln!(s, "{k}={v}");
        }
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out={}", out.display());
        }
        s
    }

    /// Writes the echo into `dir`, creating it if needed.
    pub fn write_echo(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_NAME);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("gate_mode=add\nsteps = 7\n# note\n\nout=/tmp/x\nstage_dims=8,16").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.steps, 7);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(RunConfig::parse("colour=red").is_err());
        assert!(RunConfig::parse("steps=1\nsteps=2").is_err());
        assert!(RunConfig::parse("steps").is_err());
        assert!(RunConfig::parse("gate_mode=sideways").is_err());
    }

    #[test]
    fn every_key_is_settable_from_its_echo() {
        let cfg = RunConfig { out: Some("runs/a".into()), ..Default::default() };
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).filter_map(|l| l.split_once('=')).map(|(k, _)| k).collect();
        assert_eq!(keys, RunConfig::keys().collect::<Vec<_>>());
    }
}
