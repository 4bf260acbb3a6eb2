use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ImageFormat, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::explain::ExplainConfig;
use crate::models::Modality;
use crate::training::TrainConfig;

/// Environment variable consulted when neither flag nor config file sets a
/// seed.
pub const SEED_ENV: &str = "MMXAI_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    ThreeStage,
    OneStage,
    /// Drop the tabular branch.
    AblateTabular,
    /// Drop the image branch.
    AblateImage,
}

impl Mode {
    pub fn modality(self) -> Modality {
        match self {
            Mode::ThreeStage | Mode::OneStage => Modality::Both,
            Mode::AblateTabular => Modality::ImageOnly,
            Mode::AblateImage => Modality::TabularOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FoldScheme {
    /// One stratified 70/20/10 split.
    #[default]
    Single,
    Cv10,
    /// One fold per group.
    Loco,
}

/// Every tunable, flat. Unset keys fall back to library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,

    pub n_samples: Option<usize>,
    pub tabular_dim: Option<usize>,
    pub image_side: Option<usize>,
    pub informative_features: Option<usize>,
    pub categorical_features: Option<usize>,
    pub region_size: Option<usize>,
    pub separation: Option<f64>,
    pub noise: Option<f64>,
    pub groups: Option<usize>,
    pub group_sizes: Option<Vec<usize>>,
    pub missing_rate: Option<f64>,
    pub image_format: Option<ImageFormat>,

    pub mode: Option<Mode>,
    pub folds: Option<FoldScheme>,
    pub tabular_latent: Option<usize>,
    pub image_latent: Option<usize>,
    /// Side images are resized to before entering the model.
    pub model_image_side: Option<usize>,
    pub learning_rate: Option<f64>,
    pub plateau_patience: Option<usize>,
    pub lr_decay: Option<f64>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub augment: Option<bool>,
    pub min_delta: Option<f64>,

    pub step: Option<f64>,
    pub lambda_max: Option<f64>,
    pub threshold: Option<f64>,
    pub normalize: Option<bool>,
    pub occlusion_patch: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `over` replace those in `self`.
    pub fn overlay(self, over: &RunConfig) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        let top = serde_json::to_value(over)?;
        if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
            for (k, v) in t {
                if !v.is_null() {
                    b.insert(k, v);
                }
            }
        }
        Ok(serde_json::from_value(base)?)
    }

    /// Flag or file value, then the environment, then 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            tabular_dim: self.tabular_dim.unwrap_or(d.tabular_dim),
            image_side: self.image_side.unwrap_or(d.image_side),
            informative_features: self.informative_features.unwrap_or(d.informative_features),
            categorical_features: self.categorical_features.unwrap_or(d.categorical_features),
            region_size: self.region_size.unwrap_or(d.region_size),
            separation: self.separation.unwrap_or(d.separation),
            noise: self.noise.unwrap_or(d.noise),
            groups: self.groups.unwrap_or(d.groups),
            group_sizes: self.group_sizes.clone().or(d.group_sizes),
            missing_rate: self.missing_rate.unwrap_or(d.missing_rate),
            seed: self.resolved_seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            plateau_patience: self.plateau_patience.unwrap_or(d.plateau_patience),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            early_stop_patience: self.early_stop_patience.unwrap_or(d.early_stop_patience),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.resolved_seed()?,
            augment: self.augment.unwrap_or(d.augment),
            min_delta: self.min_delta.unwrap_or(d.min_delta),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let d = ExplainConfig::default();
        let explain = ExplainConfig {
            step: self.step.unwrap_or(d.step),
            lambda_max: self.lambda_max.unwrap_or(d.lambda_max),
            threshold: self.threshold.unwrap_or(d.threshold),
            normalize: self.normalize.unwrap_or(d.normalize),
        };
        explain.validate()?;
        Ok(EvalOptions {
            explain,
            occlusion_patch: self.occlusion_patch.unwrap_or(EvalOptions::default().occlusion_patch),
        })
    }
}
