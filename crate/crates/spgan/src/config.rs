//! Run configuration: a strict TOML file with [generator], [training],
//! [eval], and [data] sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::util::fnv64;

fn default_batch_size() -> usize {
    16
}
fn default_total_kimg() -> u64 {
    20
}
fn default_lr() -> f32 {
    2e-4
}
fn default_beta1() -> f32 {
    0.0
}
fn default_beta2() -> f32 {
    0.99
}
fn default_adam_eps() -> f32 {
    1e-8
}
fn default_eval_every_kimg() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Training length in thousands of generated samples shown.
    #[serde(default = "default_total_kimg")]
    pub total_kimg: u64,
    #[serde(default = "default_lr")]
    pub lr_g: f32,
    #[serde(default = "default_lr")]
    pub lr_d: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every_kimg")]
    pub eval_every_kimg: u64,
    /// Exponential moving average of generator weights; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_beta: Option<f32>,
    /// Projection-network seed; derived from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: default_batch_size(),
            total_kimg: default_total_kimg(),
            lr_g: default_lr(),
            lr_d: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            eval_every_kimg: default_eval_every_kimg(),
            ema_beta: None,
            proj_seed: None,
        }
    }
}

fn default_extractor_seed() -> u64 {
    77
}
fn default_eval_n_fake() -> usize {
    256
}
fn default_kid_block() -> usize {
    256
}
fn default_pr_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_extractor_seed")]
    pub extractor_seed: u64,
    #[serde(default = "default_eval_n_fake")]
    pub n_fake: usize,
    #[serde(default = "default_kid_block")]
    pub kid_block: usize,
    #[serde(default = "default_pr_k")]
    pub pr_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            extractor_seed: default_extractor_seed(),
            n_fake: default_eval_n_fake(),
            kid_block: default_kid_block(),
            pr_k: default_pr_k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Folder,
    TwoModeBlobs,
    Checkerboard,
    GaussianRings,
}

fn default_data_count() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Image folder for `source = "folder"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Synthetic sample count.
    #[serde(default = "default_data_count")]
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub training: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let t = &self.training;
        if t.batch_size == 0 || t.total_kimg == 0 || t.eval_every_kimg == 0 {
            return Err(Error::config(
                "batch_size, total_kimg, and eval_every_kimg must be positive".to_string(),
            ));
        }
        if t.lr_g <= 0.0 || t.lr_d <= 0.0 {
            return Err(Error::config("learning rates must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)".to_string()));
        }
        if let Some(b) = t.ema_beta {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config("ema_beta must lie in [0, 1)".to_string()));
            }
        }
        if t.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (batch statistics)".to_string(),
            ));
        }
        match self.data.source {
            DataSource::Folder => {
                if self.data.path.is_none() {
                    return Err(Error::config(
                        "data.source = \"folder\" requires data.path".to_string(),
                    ));
                }
            }
            _ => {
                if self.data.count < self.training.batch_size {
                    return Err(Error::config(format!(
                        "synthetic data.count {} is below batch_size {}",
                        self.data.count, self.training.batch_size
                    )));
                }
            }
        }
        if self.eval.pr_k == 0 || self.eval.kid_block < 2 {
            return Err(Error::config("eval.pr_k must be >= 1 and eval.kid_block >= 2".to_string()));
        }
        Ok(())
    }

    /// Canonical serialized form; field order is fixed by the structs.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Stable digest of the canonical form.
    pub fn digest(&self) -> u64 {
        fnv64(self.canonical_toml().as_bytes())
    }

    pub fn proj_seed(&self) -> u64 {
        self.training.proj_seed.unwrap_or_else(|| {
            crate::util::stream_seed(self.training.seed, "projection", 0)
        })
    }
}
