//! TOML run configuration: architecture, training schedule, and
//! regularization, mapped onto the core types.

use pdenet_core::dynamics::{DynamicsSpec, Family};
use pdenet_core::layers::{Activation, StepNorm, TV_EPS_DEFAULT};
use pdenet_core::training::{RegParams, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub regularization: RegSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub family: String,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub final_width: usize,
    #[serde(default = "default_steps")]
    pub steps_per_block: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default = "default_tv_eps")]
    pub tv_eps: f64,
}

fn default_in_channels() -> usize {
    3
}
fn default_steps() -> usize {
    3
}
fn default_dt() -> f64 {
    1.0
}
fn default_activation() -> String {
    "relu".into()
}
fn default_norm() -> String {
    "tv".into()
}
fn default_tv_eps() -> f64 {
    TV_EPS_DEFAULT
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub stage_epochs: Vec<usize>,
    pub stage_lr: Vec<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub val_fraction: f64,
    pub limit_epochs: Option<usize>,
    pub early_stop_val_accuracy: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            stage_epochs: vec![60, 20, 20],
            stage_lr: vec![0.1, 0.02, 0.004],
            momentum: 0.9,
            batch_size: 125,
            augment: true,
            val_fraction: 0.2,
            limit_epochs: None,
            early_stop_val_accuracy: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
}

impl Default for RegSection {
    fn default() -> Self {
        RegSection {
            alpha1: 2e-4,
            alpha2: 2e-4,
            tau: 1e-3,
        }
    }
}

pub fn parse_family(name: &str) -> Result<Family, String> {
    match name {
        "parabolic" => Ok(Family::Parabolic),
        "hamiltonian" => Ok(Family::Hamiltonian),
        "second-order" | "second_order" => Ok(Family::SecondOrder),
        other => Err(format!(
            "unknown family '{other}' (expected parabolic|hamiltonian|second-order)"
        )),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn spec(&self) -> Result<DynamicsSpec, String> {
        let d = &self.dynamics;
        let family = parse_family(&d.family)?;
        let activation = match d.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => return Err(format!("unknown activation '{other}'")),
        };
        let step_norm = match d.norm.as_str() {
            "tv" => StepNorm::Tv { eps: d.tv_eps },
            "none" => StepNorm::None,
            other => return Err(format!("unknown step norm '{other}' (expected tv|none)")),
        };
        let spec = DynamicsSpec {
            family,
            in_channels: d.in_channels,
            image_height: d.image_size,
            image_width: d.image_size,
            widths: d.widths.clone(),
            final_width: d.final_width,
            steps_per_block: d.steps_per_block,
            dt: d.dt,
            num_classes: d.num_classes,
            activation,
            step_norm,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, String> {
        let t = &self.training;
        let cfg = TrainConfig {
            stage_epochs: t.stage_epochs.clone(),
            stage_lr: t.stage_lr.clone(),
            momentum: t.momentum,
            batch_size: t.batch_size,
            augment: t.augment,
            seed,
            limit_epochs: t.limit_epochs,
            early_stop_val_accuracy: t.early_stop_val_accuracy,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn reg_params(&self) -> Result<RegParams, String> {
        let r = RegParams {
            alpha1: self.regularization.alpha1,
            alpha2: self.regularization.alpha2,
            tau: self.regularization.tau,
        };
        r.validate().map_err(|e| e.to_string())?;
        Ok(r)
    }

    pub fn val_fraction(&self) -> f64 {
        self.training.val_fraction
    }
}
