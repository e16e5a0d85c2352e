//! One TOML file configuring every stage of a run. Each table is optional and
//! falls back to its defaults.
//!
//! ```toml
//! [model]
//! backbone_channels = [8, 16, 24, 32]
//! adjusted_channels = 32
//!
//! [train]
//! epochs = 5
//! batch_size = 8
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{OfflineConfig, OnlineConfig};
use crate::datapipe::{DriftProfile, SamplerConfig};
use crate::error::{FearError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;

/// Synthetic dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_videos: usize,
    pub val_videos: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// `none`, `mild` or `strong`.
    pub drift: String,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_videos: 8,
            val_videos: 2,
            frames: 300,
            width: 256,
            height: 192,
            drift: "mild".into(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_videos == 0 {
            return Err(FearError::config("train_videos", "must be at least 1"));
        }
        if self.frames == 0 {
            return Err(FearError::config("frames", "must be at least 1"));
        }
        if self.width < 64 || self.height < 64 {
            return Err(FearError::config("width", "frames must be at least 64x64"));
        }
        self.drift_profile()?;
        Ok(())
    }

    pub fn drift_profile(&self) -> Result<DriftProfile> {
        DriftProfile::by_name(&self.drift)
            .ok_or_else(|| FearError::config("drift", "expected none, mild or strong"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    pub online: OnlineConfig,
    pub offline: OfflineConfig,
    pub data: DataConfig,
}

fn scoped(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        FearError::InvalidConfig { field, reason } => FearError::InvalidConfig {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FearError::InvalidConfig {
            field: "<file>".into(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section; errors name the offending field as
    /// `section.field`.
    pub fn validate(&self) -> Result<()> {
        scoped("model", self.model.validate())?;
        scoped("train", self.train.validate())?;
        scoped("loss", self.loss.validate())?;
        scoped("sampler", self.sampler.validate())?;
        scoped("tracker", self.tracker.validate())?;
        scoped("online", self.online.validate())?;
        scoped("offline", self.offline.validate())?;
        scoped("data", self.data.validate())?;
        if self.sampler.template_size != self.model.template_size {
            return Err(FearError::config(
                "sampler.template_size",
                "must match model.template_size",
            ));
        }
        if self.sampler.search_size != self.model.search_size {
            return Err(FearError::config(
                "sampler.search_size",
                "must match model.search_size",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("[train]\nepochs = 3\n[model]\nfinal_stride = 8\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.final_stride, 8);
        assert_eq!(c.loss, LossConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let c = RunConfig::from_toml_str("[train]\nlearning_rate = -1.0\n").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("train.learning_rate"), "{msg}");
        let err = RunConfig::from_toml_str("[loss]\nmargn = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("margn"), "{err}");
        let c = RunConfig::from_toml_str("[data]\ndrift = \"wild\"\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("data.drift"));
    }

    #[test]
    fn crop_sizes_must_agree() {
        let c = RunConfig::from_toml_str("[model]\ntemplate_size = 64\nsearch_size = 128\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("sampler.template_size"));
    }
}
