//! Run configuration file and run manifest.

use crate::analysis::AnalysisConfig;
use crate::backbone::BackboneConfig;
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::io;
use crate::prompt::PromptConfig;
use crate::training::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Every section is optional; missing keys take the defaults of the section type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Pretrained backbone for `tune`, `sweep-alpha` and `grid-search`.
    pub backbone_checkpoint: Option<PathBuf>,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub data: TaskSpec,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            backbone_checkpoint: None,
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            data: TaskSpec::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Dotted `section.key` of the entry on the line containing byte `at`.
fn key_at(text: &str, at: usize) -> Option<String> {
    let line_start = text[..at.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next()?.trim();
    let key = key.trim_matches(|c| c == '"' || c == '[' || c == ']');
    if key.is_empty() {
        return None;
    }
    if line.trim_start().starts_with('[') {
        return Some(key.to_string());
    }
    let section = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match section {
        Some(s) => format!("{s}.{key}"),
        None => key.to_string(),
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|s| key_at(text, s.start))
                .unwrap_or_else(|| "config".into());
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt.validate(self.backbone.depth)?;
        self.train.validate()?;
        self.data.validate()?;
        self.pretrain.task.validate()?;
        self.analysis.validate()?;
        if self.data.image_size != self.backbone.image_size {
            return Err(Error::config("data.image_size", "must equal backbone.image_size"));
        }
        if self.pretrain.task.num_classes != self.backbone.num_classes_pretrain {
            return Err(Error::config(
                "pretrain.task.num_classes",
                "must equal backbone.num_classes_pretrain",
            ));
        }
        Ok(())
    }
}

/// Build identifier baked in at compile time.
pub fn build_id() -> &'static str {
    env!("VFPT_BUILD_ID")
}

/// Everything needed to repeat a run: resolved config, seed, build and artifact hashes.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub build_id: String,
    pub config: String,
    /// File name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            seed: config.seed,
            build_id: build_id().into(),
            config: config.to_toml(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Writes `bytes` atomically into `dir` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        io::write_atomic(dir.join(name), bytes)?;
        self.artifacts.insert(name.into(), io::sha256_hex(bytes));
        Ok(())
    }

    /// Records a file already written into `dir`.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.artifacts.insert(name.into(), io::sha256_file(dir.join(name))?);
        Ok(())
    }

    pub fn finish(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        io::write_atomic(dir.join("manifest.json"), json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.prompt.alpha = 0.3;
        c.train.epochs = 17;
        c.data.noise_std = 0.25;
        c.backbone_checkpoint = Some("bb.vfpt".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::from_toml("seed = 1\n[prompt]\nlenght = 3\n").unwrap_err();
        match err {
            Error::Config { key, msg } => {
                assert_eq!(key, "prompt.lenght");
                assert!(msg.contains("unknown field"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = RunConfig::from_toml("[train]\nepochs = 3\nbase_lr = \"fast\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.base_lr"), "{err:?}");
        let err = RunConfig::from_toml("[prompt]\nalpha = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "prompt.alpha"), "{err:?}");
    }

    #[test]
    fn nested_section_keys() {
        let err = RunConfig::from_toml("[pretrain.task]\nkind = \"mystery\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "pretrain.task.kind"), "{err:?}");
    }
}
