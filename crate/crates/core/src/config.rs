//! Run configuration: one TOML document with sections `data`, `schedule`,
//! `model`, `train`, `saf`, `sample`, `eval`.
//!
//! Every field mirrors a module config; unknown keys are rejected so typos
//! fail fast. A content digest of the file stamps all outputs, making two
//! runs comparable by hash + seed alone.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::saf::OutputMode;
use crate::schedule::{Schedule, ScheduleError};
use crate::toy::ToyConfig;
use crate::train::{TeacherSpec, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub saf: SafSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub blob_width: f64,
    pub velocity_sets: Vec<Vec<i64>>,
    /// Clip count written by `gen-data`.
    pub clips: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let toy = ToyConfig::default();
        Self {
            frames: toy.frames,
            dim: toy.dim,
            classes: toy.classes,
            blob_width: toy.blob_width,
            velocity_sets: toy.velocity_sets,
            clips: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// "bridge_gmax" or "vp".
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub horizon: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: "bridge_gmax".into(),
            beta_min: 0.1,
            beta_max: 20.0,
            beta0: 0.01,
            beta1: 50.0,
            horizon: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: crate::denoiser::DEFAULT_HIDDEN,
            time_embed_dim: crate::denoiser::DEFAULT_TIME_EMBED,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "diffusion", "bridge", "bridge_saf" or "prior".
    pub mode: String,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub t_margin: f64,
    pub lambda_weight: f64,
    pub eval_every: usize,
    pub eval_clips: usize,
    pub eval_seed: Option<u64>,
    pub checkpoint_every: usize,
    /// "replicated" or "neural".
    pub prior: String,
    /// Trained prior network for `prior = "neural"`.
    pub prior_checkpoint: Option<String>,
    /// Diffusion teacher weights for `finetune`.
    pub teacher_checkpoint: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: "bridge".into(),
            batch_size: 16,
            iterations: 2000,
            learning_rate: 1e-3,
            seed: 0,
            t_margin: 1e-4,
            lambda_weight: 1.0,
            eval_every: 200,
            eval_clips: 128,
            eval_seed: None,
            checkpoint_every: 0,
            prior: "replicated".into(),
            prior_checkpoint: None,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SafSection {
    pub enabled: bool,
    /// Teacher schedule kind; only "vp" is supported.
    pub teacher_schedule: String,
    pub teacher_beta_min: f64,
    pub teacher_beta_max: f64,
    /// 0 inverts the continuous schedule; n > 0 uses an n-step SNR table.
    pub teacher_discrete_steps: usize,
    /// "eps" or "v".
    pub output_mode: String,
}

impl Default for SafSection {
    fn default() -> Self {
        Self {
            enabled: false,
            teacher_schedule: "vp".into(),
            teacher_beta_min: 0.1,
            teacher_beta_max: 20.0,
            teacher_discrete_steps: 0,
            output_mode: "eps".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
    /// "model", "analytic" or "zero".
    pub score_source: String,
    pub analytic_mean: f64,
    pub analytic_variance: f64,
    pub deterministic_last_step: bool,
    /// Also write a per-frame CSV dump next to the dataset.
    pub dump_csv: bool,
    pub checkpoint: Option<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            count: 64,
            seed: 0,
            score_source: "model".into(),
            analytic_mean: 0.0,
            analytic_variance: 1.0,
            deterministic_last_step: true,
            dump_csv: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generated dataset to score.
    pub data: Option<String>,
    /// Seed for the regenerated reference clip set.
    pub reference_seed: u64,
    pub reference_clips: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            data: None,
            reference_seed: 0xEA51,
            reference_clips: 256,
        }
    }
}

impl RunConfig {
    /// Parse a config file and return it with its content digest.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(
            std::str::from_utf8(&bytes)
                .map_err(|e| ConfigError::Invalid(format!("config is not utf-8: {e}")))?,
        )?;
        config.validate()?;
        Ok((config, hash_bytes(&bytes)))
    }

    pub fn from_str_for_tests(text: &str) -> Result<(Self, String), ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok((config, hash_bytes(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.toy_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule()?;
        self.train_mode()?;
        self.output_mode()?;
        match self.train.prior.as_str() {
            "replicated" | "neural" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "train.prior must be replicated or neural, got {other}"
                )))
            }
        }
        match self.sample.score_source.as_str() {
            "model" | "analytic" | "zero" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "sample.score_source must be model, analytic or zero, got {other}"
                )))
            }
        }
        if self.saf.teacher_schedule != "vp" {
            return Err(ConfigError::Invalid(format!(
                "saf.teacher_schedule supports only vp, got {}",
                self.saf.teacher_schedule
            )));
        }
        Ok(())
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            frames: self.data.frames,
            dim: self.data.dim,
            classes: self.data.classes,
            blob_width: self.data.blob_width,
            velocity_sets: self.data.velocity_sets.clone(),
        }
    }

    pub fn schedule(&self) -> Result<Schedule, ConfigError> {
        Ok(match self.schedule.kind.as_str() {
            "vp" => Schedule::new(
                crate::schedule::ScheduleKind::Vp {
                    beta_min: self.schedule.beta_min,
                    beta_max: self.schedule.beta_max,
                },
                self.schedule.horizon,
            )?,
            "bridge_gmax" => Schedule::new(
                crate::schedule::ScheduleKind::BridgeGmax {
                    beta0: self.schedule.beta0,
                    beta1: self.schedule.beta1,
                },
                self.schedule.horizon,
            )?,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "schedule.kind must be vp or bridge_gmax, got {other}"
                )))
            }
        })
    }

    pub fn teacher_schedule(&self) -> Result<Schedule, ConfigError> {
        Ok(Schedule::new(
            crate::schedule::ScheduleKind::Vp {
                beta_min: self.saf.teacher_beta_min,
                beta_max: self.saf.teacher_beta_max,
            },
            self.schedule.horizon,
        )?)
    }

    fn train_mode(&self) -> Result<TrainMode, ConfigError> {
        Ok(match self.train.mode.as_str() {
            "diffusion" => TrainMode::Diffusion,
            "bridge" => {
                if self.saf.enabled {
                    TrainMode::BridgeSaf
                } else {
                    TrainMode::Bridge
                }
            }
            "bridge_saf" => TrainMode::BridgeSaf,
            "prior" => TrainMode::Prior,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "train.mode must be diffusion, bridge, bridge_saf or prior, got {other}"
                )))
            }
        })
    }

    pub fn output_mode(&self) -> Result<OutputMode, ConfigError> {
        Ok(match self.saf.output_mode.as_str() {
            "eps" => OutputMode::EpsPrediction,
            "v" => OutputMode::VPrediction,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "saf.output_mode must be eps or v, got {other}"
                )))
            }
        })
    }

    /// Assemble the training config for the mode in `train.mode` (or an
    /// explicit override, used by the dedicated train subcommands).
    pub fn train_config(&self, mode_override: Option<TrainMode>) -> Result<TrainConfig, ConfigError> {
        let mode = match mode_override {
            Some(m) => m,
            None => self.train_mode()?,
        };
        let schedule = match mode {
            TrainMode::Diffusion => {
                // the diffusion baseline runs on the teacher-style VP schedule
                if self.schedule.kind == "vp" {
                    self.schedule()?
                } else {
                    self.teacher_schedule()?
                }
            }
            _ => self.schedule()?,
        };
        let mut cfg = TrainConfig::new(mode, schedule, self.toy_config());
        cfg.batch_size = self.train.batch_size;
        cfg.iterations = self.train.iterations;
        cfg.learning_rate = self.train.learning_rate;
        cfg.seed = self.train.seed;
        cfg.t_margin = self.train.t_margin;
        cfg.lambda_weight = self.train.lambda_weight;
        cfg.hidden = self.model.hidden;
        cfg.time_embed_dim = self.model.time_embed_dim;
        cfg.eval_every = self.train.eval_every;
        cfg.eval_clips = self.train.eval_clips;
        cfg.eval_seed = self.train.eval_seed;
        cfg.checkpoint_every = self.train.checkpoint_every;
        cfg.output_mode = self.output_mode()?;
        if mode == TrainMode::BridgeSaf {
            cfg.teacher = Some(TeacherSpec {
                schedule: self.teacher_schedule()?,
                discrete_steps: if self.saf.teacher_discrete_steps == 0 {
                    None
                } else {
                    Some(self.saf.teacher_discrete_steps)
                },
            });
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// First 12 hex characters of the SHA-256 of the raw config bytes.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}
