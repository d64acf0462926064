//! Experiment configuration files.
//!
//! A TOML document with top-level `output_dir` and `checkpoint_every` keys
//! and `[gps]` / `[sim]` sections mirroring [`GpsConfig`] and [`SimParams`].
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::SimParams;
use crate::error::{Error, Result};
use crate::gps::GpsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Write checkpoints every this many outer iterations (and always at
    /// the end of a run); `0` keeps only the final one.
    pub checkpoint_every: usize,
    pub gps: GpsConfig,
    pub sim: SimParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1,
            gps: GpsConfig::default(),
            sim: SimParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config {
                field: "output_dir".into(),
                message: "must not be empty".into(),
            });
        }
        self.gps.validate()?;
        self.sim.validate()
    }

    /// Parses and validates; errors carry the offending line when known.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| format!(" (line {})", line_of(text, s.start)))
                .unwrap_or_default();
            Error::Config {
                field: "<file>".into(),
                message: format!("{}{location}", e.message()),
            }
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { field, message } => {
                let message = match find_key_line(text, &field) {
                    Some(line) => format!("{message} (line {line})"),
                    None => message,
                };
                Error::Config { field, message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration, defaults expanded.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            field: "<file>".into(),
            message: e.to_string(),
        })
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `a.b.key` inside section `[a.b]`, if written explicitly.
fn find_key_line(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", field),
    };
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_field_is_named_with_line() {
        let err = ExperimentConfig::from_toml("[gps]\ntrajectories = 3\nhorizon = 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gps.horizon"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("[gps]\nhorizn = 50\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizn"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn infinite_threshold_parses() {
        let cfg = ExperimentConfig::from_toml("[gps]\nconvergence_threshold = inf\n").unwrap();
        assert!(cfg.gps.convergence_threshold.is_infinite());
    }
}
