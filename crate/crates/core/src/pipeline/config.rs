//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgan::MaskGanConfig;
use crate::metrics::{RegionConfig, SsimConfig};
use crate::phantomdata::PhantomConfig;
use crate::translator::TranslatorConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LUNGSYNTH_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub samples: usize,
    pub train_ratio: u32,
    pub test_ratio: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples: 64,
            train_ratio: 4,
            test_ratio: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Absolute step at which mask GAN training stops; defaults to the end
    /// of the progressive schedule.
    pub maskgan_steps: Option<u64>,
    /// Absolute translator step limit; defaults to `epochs × |train|`.
    pub translator_steps: Option<u64>,
    /// Extra numbered checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub ssim: SsimConfig,
    pub region: RegionConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub precision: Precision,
    pub dataset: DatasetConfig,
    pub phantom: PhantomConfig,
    pub maskgan: MaskGanConfig,
    pub translator: TranslatorConfig,
    pub training: TrainingConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.maskgan.validate()?;
        self.translator.validate()?;
        if self.dataset.samples == 0 || self.dataset.train_ratio == 0 || self.dataset.test_ratio == 0 {
            return Err(Error::config("dataset samples and split ratio parts must be positive"));
        }
        if self.metrics.ssim.dynamic_range <= 0.0 || self.metrics.ssim.window.size() == 0 {
            return Err(Error::config("SSIM window and dynamic range must be positive"));
        }
        Ok(())
    }

    /// Copy with the phantom seed tied to the run seed.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.phantom.seed = cfg.seed;
        cfg
    }
}

/// `--out`, then the config's `out`, then `$LUNGSYNTH_OUT/<command>`, then
/// `runs/<command>`.
pub fn resolve_out(flag: Option<&Path>, cfg: &RunConfig, env_root: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out {
        return p.clone();
    }
    env_root.unwrap_or(Path::new("runs")).join(command)
}
