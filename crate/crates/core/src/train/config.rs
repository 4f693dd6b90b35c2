use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::network::{NetworkConfig, VoteMode};
use crate::selftrain::Paradigm;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Both paths, DDM, adversarial alignment and self-training.
    #[default]
    Full,
    /// Source backbone and decoder trained on source labels only.
    SourceOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - step / max_iters) ^ lr_power`
    Poly,
}

/// Flat, versioned training configuration. Every key has a default, so an
/// empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub method: Method,
    pub precision: Precision,

    pub backbone: String,
    pub decoder: String,
    pub feature_channels: usize,
    pub backbone_width: usize,
    pub downsample: usize,
    pub decoder_hidden: usize,
    pub num_classes: usize,
    pub ddm_reduction: usize,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub disc_optimizer: OptimizerKind,
    pub disc_lr: f64,
    pub disc_beta1: f64,
    pub disc_beta2: f64,

    pub lr_schedule: LrSchedule,
    pub lr_power: f64,

    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub paradigm: Paradigm,
    pub vote: VoteMode,
    /// EMA update every this many steps.
    pub ema_interval: u64,
    /// Steps before the self-training terms are switched on.
    pub st_burn_in: u64,

    pub max_iters: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            version: CONFIG_VERSION,
            method: Method::Full,
            precision: Precision::F32,
            backbone: net.backbone,
            decoder: net.decoder,
            feature_channels: net.feature_channels,
            backbone_width: net.backbone_width,
            downsample: net.downsample,
            decoder_hidden: net.decoder_hidden,
            num_classes: net.num_classes,
            ddm_reduction: net.ddm_reduction,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            disc_optimizer: OptimizerKind::Adam,
            disc_lr: 2.5e-4,
            disc_beta1: 0.9,
            disc_beta2: 0.99,
            lr_schedule: LrSchedule::Constant,
            lr_power: 0.9,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            alpha: 0.99,
            paradigm: Paradigm::DecoderOnly,
            vote: VoteMode::Probabilities,
            ema_interval: 1,
            st_burn_in: 0,
            max_iters: 1000,
            batch_size: 1,
            patch_size: 64,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

/// Parse the right-hand side of a `key=value` override as a TOML value,
/// falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            backbone: self.backbone.clone(),
            decoder: self.decoder.clone(),
            in_channels: 3,
            feature_channels: self.feature_channels,
            backbone_width: self.backbone_width,
            downsample: self.downsample,
            decoder_hidden: self.decoder_hidden,
            num_classes: self.num_classes,
            ddm_reduction: self.ddm_reduction,
        }
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if !(self.lr > 0.0) || !(self.disc_lr > 0.0) {
            return fail(format!("learning rates must be positive (lr={}, disc_lr={})", self.lr, self.disc_lr));
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return fail(format!("lambda and beta must be non-negative (lambda={}, beta={})", self.lambda, self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.batch_size == 0 || self.ema_interval == 0 {
            return fail("batch_size and ema_interval must be at least 1".into());
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return fail(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.feature_channels == 0 || self.ddm_reduction == 0 {
            return fail("feature_channels and ddm_reduction must be positive".into());
        }
        if self.downsample == 0 || self.patch_size == 0 || self.patch_size % self.downsample != 0 {
            return fail(format!(
                "patch_size {} must be a positive multiple of downsample {}",
                self.patch_size, self.downsample
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Defaults, overlaid by an optional TOML file, overlaid by `key=value`
    /// overrides (overrides win).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Poly if self.max_iters == 0 => 1.0,
            LrSchedule::Poly => (1.0 - step as f64 / self.max_iters as f64)
                .max(0.0)
                .powf(self.lr_power),
        }
    }
}
