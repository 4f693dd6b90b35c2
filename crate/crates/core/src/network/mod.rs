//! Backbones, decoders and discriminators, and the dual-path student ensemble.
//!
//! Backbones and decoders are trait objects built through a [`Registry`], so
//! that larger networks can be plugged in by name. The built-in pair is a
//! small strided CNN and a convolutional head with bilinear upsampling.

mod builtin;
mod discriminator;
mod ensemble;

use std::collections::BTreeMap;
use std::fmt;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NamedParams, ParamInit};

pub use builtin::{ConvHeadDecoder, TinyCnnBackbone};
pub use discriminator::{
    BlockSpec, Discriminator, DISC_CHANNELS, DISC_KERNEL, DISC_LEAKY_SLOPE, DISC_PADDING,
    DISC_STRIDES,
};
pub use ensemble::{
    discriminate, ensemble_predict, segment, soft_vote, DomainPass, ForwardOutput, StudentEnsemble,
    StylePair, VoteMode,
};

/// Feature extractor contract: `[B, 3, H, W] -> [B, C, H/s, W/s]`.
pub trait Backbone: Send + Sync + fmt::Debug {
    fn kind(&self) -> &str;
    fn out_channels(&self) -> usize;
    /// Spatial reduction factor `s`; input sides must be divisible by it.
    fn downsample(&self) -> usize;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn params(&self, prefix: &str) -> NamedParams;
    /// Deep copy backed by fresh variables.
    fn duplicate(&self) -> Result<Box<dyn Backbone>>;
}

/// Segmentation head contract: `[B, C, h, w] -> [B, K, H, W]` logits at the
/// requested output resolution.
pub trait Decoder: Send + Sync + fmt::Debug {
    fn kind(&self) -> &str;
    fn in_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn forward(&self, features: &Tensor, out_size: (usize, usize)) -> Result<Tensor>;
    fn params(&self, prefix: &str) -> NamedParams;
    fn duplicate(&self) -> Result<Box<dyn Decoder>>;
}

/// Architecture hyper-parameters shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: String,
    pub decoder: String,
    pub in_channels: usize,
    /// `C`, channels of the backbone output and of the DDM.
    pub feature_channels: usize,
    /// Width of the first backbone layer; doubles per stride-2 stage up to `C`.
    pub backbone_width: usize,
    /// `s`, a power of two.
    pub downsample: usize,
    pub decoder_hidden: usize,
    pub num_classes: usize,
    pub ddm_reduction: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny_cnn".into(),
            decoder: "conv_head".into(),
            in_channels: 3,
            feature_channels: 32,
            backbone_width: 16,
            downsample: 4,
            decoder_hidden: 32,
            num_classes: 6,
            ddm_reduction: 4,
        }
    }
}

pub type BackboneBuilder = fn(&NetworkConfig, &mut ParamInit<'_>) -> Result<Box<dyn Backbone>>;
pub type DecoderBuilder = fn(&NetworkConfig, &mut ParamInit<'_>) -> Result<Box<dyn Decoder>>;

/// Name-keyed constructors for backbones and decoders.
#[derive(Clone)]
pub struct Registry {
    backbones: BTreeMap<String, BackboneBuilder>,
    decoders: BTreeMap<String, DecoderBuilder>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            backbones: BTreeMap::new(),
            decoders: BTreeMap::new(),
        };
        r.register_backbone("tiny_cnn", |cfg, init| {
            Ok(Box::new(TinyCnnBackbone::new(init, cfg)?))
        });
        r.register_decoder("conv_head", |cfg, init| {
            Ok(Box::new(ConvHeadDecoder::new(init, cfg)?))
        });
        r
    }
}

impl Registry {
    pub fn register_backbone(&mut self, name: &str, builder: BackboneBuilder) {
        self.backbones.insert(name.to_string(), builder);
    }

    pub fn register_decoder(&mut self, name: &str, builder: DecoderBuilder) {
        self.decoders.insert(name.to_string(), builder);
    }

    pub fn backbone_names(&self) -> Vec<&str> {
        self.backbones.keys().map(String::as_str).collect()
    }

    pub fn decoder_names(&self) -> Vec<&str> {
        self.decoders.keys().map(String::as_str).collect()
    }

    pub fn build_backbone(
        &self,
        config: &NetworkConfig,
        init: &mut ParamInit<'_>,
    ) -> Result<Box<dyn Backbone>> {
        let builder = self.backbones.get(&config.backbone).ok_or_else(|| {
            Error::Config(format!(
                "unknown backbone `{}` (registered: {:?})",
                config.backbone,
                self.backbone_names()
            ))
        })?;
        let b = builder(config, init)?;
        if b.out_channels() != config.feature_channels || b.downsample() != config.downsample {
            return Err(Error::Config(format!(
                "backbone `{}` produced C={} s={}, config asks for C={} s={}",
                config.backbone,
                b.out_channels(),
                b.downsample(),
                config.feature_channels,
                config.downsample
            )));
        }
        Ok(b)
    }

    pub fn build_decoder(
        &self,
        config: &NetworkConfig,
        init: &mut ParamInit<'_>,
    ) -> Result<Box<dyn Decoder>> {
        let builder = self.decoders.get(&config.decoder).ok_or_else(|| {
            Error::Config(format!(
                "unknown decoder `{}` (registered: {:?})",
                config.decoder,
                self.decoder_names()
            ))
        })?;
        builder(config, init)
    }
}
