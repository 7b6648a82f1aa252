//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key of [`RunConfig`] has a
//! default; unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rollout::RolloutConfig;
use crate::synthdata::DataGenConfig;
use crate::training::TrainConfig;

/// Splits `text` into `(key, value, line_number)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[derive(Default)]
pub struct KvWriter {
    text: String,
}

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.text.push_str(&format!("{key} = {value}\n"));
    }

    pub fn comment(&mut self, c: &str) {
        self.text.push_str(&format!("# {c}\n"));
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Everything an experiment needs besides command-line paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub data: DataGenConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value, line) in parse_kv(text)? {
            let known = cfg.model.set(&key, &value)?
                || cfg.train.set(&key, &value)?
                || cfg.rollout.set(&key, &value)?
                || cfg.data.set(&key, &value)?;
            if !known {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Full listing of every key with its current value.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        w.comment("model");
        self.model.write_kv(&mut w);
        w.comment("training");
        self.train.write_kv(&mut w);
        w.comment("rollout");
        self.rollout.write_kv(&mut w);
        w.comment("data generation");
        self.data.write_kv(&mut w);
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_skipped() {
        let kv = parse_kv("# header\n\n a = 1 # trailing\nb=two\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into(), 3), ("b".into(), "two".into(), 4)]
        );
    }

    #[test]
    fn missing_equals_rejected() {
        assert!(matches!(parse_kv("oops"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = RunConfig::parse("learning_rate = 0.001\ncontext_ratio = 0.25\ninr_width = 8\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.rollout.rho, 0.25);
        assert_eq!(cfg.model.inr.width, 8);
        let err = RunConfig::parse("learning_rat = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
    }
}
