use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::date::DateConfig;
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{LabError, Result};
use crate::guidance::GuidanceConfig;
use crate::models::TrainConfig;
use crate::task::DeskParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            kind: ScheduleKind::Linear,
            beta_lo: 1e-3,
            beta_hi: 0.12,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind, self.beta_lo, self.beta_hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// The analytic desk mixture itself.
    Desk {
        #[serde(default)]
        params: DeskParams,
    },
    /// A saved model; prompts and the reference distribution come from the
    /// desk task built with `params`.
    Checkpoint {
        path: PathBuf,
        #[serde(default)]
        params: DeskParams,
    },
}

impl ModelSpec {
    pub fn desk_params(&self) -> &DeskParams {
        match self {
            Self::Desk { params } | Self::Checkpoint { params, .. } => params,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling.
    Ddpm,
    /// Deterministic `x + ½β(x + s)` step.
    Alg1,
    /// Deterministic DDIM, η = 0.
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedHSpec {
    pub h: HSpec,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HSpec {
    Cosine,
    Quadratic { sign: f64 },
    Composite { members: Vec<WeightedHSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub prompt: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    /// Number of DDIM steps; ignored by the other samplers.
    #[serde(default)]
    pub sampler_steps: Option<usize>,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub date: Option<DateConfig>,
    #[serde(default = "default_h")]
    pub h: HSpec,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Ddpm
}

fn default_h() -> HSpec {
    HSpec::Cosine
}

fn default_samples() -> usize {
    200
}

fn invalid(path: &str, msg: impl Into<String>) -> LabError {
    LabError::Config {
        path: path.to_string(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Desk model, the given prompt, everything else at defaults.
    pub fn desk(prompt: usize) -> Self {
        Self {
            seed: 0,
            schedule: ScheduleSpec::default(),
            model: ModelSpec::Desk {
                params: DeskParams::default(),
            },
            prompt,
            sampler: default_sampler(),
            sampler_steps: None,
            guidance: GuidanceConfig::default(),
            date: None,
            h: default_h(),
            n_samples: default_samples(),
            output_dir: None,
            train: TrainConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks ranges, reporting the offending key path.
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        self.schedule.build().map_err(|e| invalid("schedule", e.to_string()))?;
        if let Some(n) = self.sampler_steps {
            if n == 0 || n > self.schedule.steps {
                return Err(invalid("sampler_steps", format!("must lie in 1..={}", self.schedule.steps)));
            }
        }
        if self.prompt >= crate::task::NUM_PROMPTS {
            return Err(invalid("prompt", format!("must be below {}", crate::task::NUM_PROMPTS)));
        }
        let p = self.model.desk_params();
        if !(p.embed_scale > 0.0 && p.radius > 0.0 && p.var > 0.0) {
            return Err(invalid("model.params", "embed_scale, radius and var must be positive"));
        }
        if let ModelSpec::Checkpoint { path, .. } = &self.model {
            if !path.exists() {
                return Err(invalid("model.path", format!("{} does not exist", path.display())));
            }
        }
        self.guidance
            .validate()
            .map_err(|e| invalid("guidance", e.to_string()))?;
        if let Some(d) = &self.date {
            d.validate().map_err(|e| invalid("date", e.to_string()))?;
        }
        validate_h(&self.h, "h")?;
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(invalid("train", "batch and lr must be positive"));
        }
        Ok(())
    }
}

fn validate_h(h: &HSpec, path: &str) -> Result<()> {
    match h {
        HSpec::Cosine => Ok(()),
        HSpec::Quadratic { sign } if *sign == 1.0 || *sign == -1.0 => Ok(()),
        HSpec::Quadratic { .. } => Err(invalid(&format!("{path}.sign"), "must be 1 or -1")),
        HSpec::Composite { members } if members.is_empty() => Err(invalid(&format!("{path}.members"), "must be nonempty")),
        HSpec::Composite { members } => members.iter().enumerate().try_for_each(|(i, m)| {
            if !m.weight.is_finite() {
                return Err(invalid(&format!("{path}.members[{i}].weight"), "must be finite"));
            }
            validate_h(&m.h, &format!("{path}.members[{i}].h"))
        }),
    }
}

/// Reads, parses and validates a config file. Relative checkpoint paths are
/// resolved against the config's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| invalid("<root>", e.to_string()))?;
    if let ModelSpec::Checkpoint { path: ck, .. } = &mut cfg.model {
        if ck.is_relative() {
            if let Some(dir) = path.parent() {
                *ck = dir.join(&*ck);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
