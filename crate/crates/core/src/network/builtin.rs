use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, NamedParams, ParamInit};

use super::{Backbone, Decoder, NetworkConfig};

/// Strided 3x3 convolutions with ReLU: `log2(s)` stride-2 stages followed by
/// one stride-1 stage producing `C` channels.
#[derive(Debug)]
pub struct TinyCnnBackbone {
    layers: Vec<Conv2d>,
    downsample: usize,
}

impl TinyCnnBackbone {
    pub fn new(init: &mut ParamInit<'_>, cfg: &NetworkConfig) -> Result<Self> {
        if !cfg.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample must be a power of two, got {}",
                cfg.downsample
            )));
        }
        let stages = cfg.downsample.trailing_zeros() as usize;
        let mut layers = Vec::with_capacity(stages + 1);
        let mut in_ch = cfg.in_channels;
        let mut width = cfg.backbone_width.max(1);
        for _ in 0..stages {
            let out = width.min(cfg.feature_channels);
            layers.push(Conv2d::new(init, in_ch, out, 3, 2, 1, true)?);
            in_ch = out;
            width *= 2;
        }
        layers.push(Conv2d::new(init, in_ch, cfg.feature_channels, 3, 1, 1, true)?);
        Ok(Self {
            layers,
            downsample: cfg.downsample,
        })
    }
}

impl Backbone for TinyCnnBackbone {
    fn kind(&self) -> &str {
        "tiny_cnn"
    }

    fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, Conv2d::out_channels)
    }

    fn downsample(&self) -> usize {
        self.downsample
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    fn params(&self, prefix: &str) -> NamedParams {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.conv{i}")))
            .collect()
    }

    fn duplicate(&self) -> Result<Box<dyn Backbone>> {
        Ok(Box::new(Self {
            layers: self.layers.iter().map(Conv2d::duplicate).collect::<Result<_>>()?,
            downsample: self.downsample,
        }))
    }
}

/// 3x3 conv + ReLU, 1x1 classifier, bilinear upsampling to the patch size.
#[derive(Debug)]
pub struct ConvHeadDecoder {
    hidden: Conv2d,
    classifier: Conv2d,
}

impl ConvHeadDecoder {
    pub fn new(init: &mut ParamInit<'_>, cfg: &NetworkConfig) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(init, cfg.feature_channels, cfg.decoder_hidden, 3, 1, 1, true)?,
            classifier: Conv2d::new(init, cfg.decoder_hidden, cfg.num_classes, 1, 1, 0, true)?,
        })
    }
}

impl Decoder for ConvHeadDecoder {
    fn kind(&self) -> &str {
        "conv_head"
    }

    fn in_channels(&self) -> usize {
        self.hidden.in_channels()
    }

    fn num_classes(&self) -> usize {
        self.classifier.out_channels()
    }

    fn forward(&self, features: &Tensor, out_size: (usize, usize)) -> Result<Tensor> {
        let h = self.hidden.forward(features)?.relu()?;
        let logits = self.classifier.forward(&h)?;
        nn::upsample_bilinear(&logits, out_size.0, out_size.1)
    }

    fn params(&self, prefix: &str) -> NamedParams {
        let mut p = self.hidden.params(&format!("{prefix}.hidden"));
        p.extend(self.classifier.params(&format!("{prefix}.classifier")));
        p
    }

    fn duplicate(&self) -> Result<Box<dyn Decoder>> {
        Ok(Box::new(Self {
            hidden: self.hidden.duplicate()?,
            classifier: self.classifier.duplicate()?,
        }))
    }
}
