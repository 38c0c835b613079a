//! Service configuration: a flat TOML key-value file.
//!
//! ```toml
//! data_dir = "/var/lib/petition"
//! checkpoint = "model.ckpt"
//! rules = "rules.jsonl"          # optional, built-in table otherwise
//! templates = "templates/en"     # optional, built-in templates otherwise
//! threshold = 0.8
//! workers = 1
//! bind = "127.0.0.1:8080"
//! fsync = true
//!
//! [proposer]
//! saliency_threshold = 0.12
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! `PETITION_DATA_DIR` overrides `data_dir`.

use std::path::{Path, PathBuf};

use petition_core::regions::ProposerSettings;
use petition_core::workflow::{validate_threshold, DEFAULT_TRIAGE_THRESHOLD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATA_DIR_ENV: &str = "PETITION_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub rules: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub threshold: f64,
    pub workers: usize,
    pub bind: String,
    /// Flush every log append to stable storage.
    pub fsync: bool,
    pub proposer: ProposerSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            rules: None,
            templates: None,
            threshold: DEFAULT_TRIAGE_THRESHOLD,
            workers: 1,
            bind: "127.0.0.1:8080".into(),
            fsync: true,
            proposer: ProposerSettings::default(),
        }
    }
}

impl ServiceConfig {
    /// Parses `text`; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self, ConfigError> {
        let mut c: ServiceConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), reason: e.to_string() })?;
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut c.data_dir);
        anchor(&mut c.checkpoint);
        c.rules.as_mut().map(anchor);
        c.templates.as_mut().map(anchor);
        c.validate()?;
        Ok(c)
    }

    /// Reads the file, then applies the data-directory override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut c = Self::parse(&text, base, &path.display().to_string())?;
        c.apply_env(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
        Ok(c)
    }

    pub fn apply_env(&mut self, data_dir: Option<PathBuf>) {
        if let Some(d) = data_dir.filter(|d| !d.as_os_str().is_empty()) {
            self.data_dir = d;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_threshold(self.threshold).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_and_relative_paths() {
        let text = "data_dir = \"d\"\ncheckpoint = \"/abs/m.ckpt\"\nrules = \"r.jsonl\"\nthreshold = 0.7\nworkers = 2\n\n[proposer]\nmin_area = 100\n";
        let c = ServiceConfig::parse(text, Path::new("/etc/petition"), "test").unwrap();
        assert_eq!(c.data_dir, PathBuf::from("/etc/petition/d"));
        assert_eq!(c.checkpoint, PathBuf::from("/abs/m.ckpt"));
        assert_eq!(c.rules, Some(PathBuf::from("/etc/petition/r.jsonl")));
        assert_eq!(c.threshold, 0.7);
        assert_eq!(c.workers, 2);
        assert_eq!(c.proposer.min_area, 100);
        assert_eq!(c.proposer.nms_iou, ProposerSettings::default().nms_iou);
    }

    #[test]
    fn bad_values_are_rejected() {
        let base = Path::new("/");
        assert!(matches!(ServiceConfig::parse("threshold = 1.5", base, "t"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ServiceConfig::parse("workers = 0", base, "t"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ServiceConfig::parse("colour = 1", base, "t"), Err(ConfigError::Parse { .. })));
        assert!(matches!(ServiceConfig::parse("threshold = ", base, "t"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn environment_overrides_data_dir() {
        let mut c = ServiceConfig::default();
        c.apply_env(Some(PathBuf::from("/tmp/elsewhere")));
        assert_eq!(c.data_dir, PathBuf::from("/tmp/elsewhere"));
        c.apply_env(Some(PathBuf::new()));
        assert_eq!(c.data_dir, PathBuf::from("/tmp/elsewhere"));
    }
}
