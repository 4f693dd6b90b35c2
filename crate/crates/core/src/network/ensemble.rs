use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddm::{self, DdmConfig, DdmParams};
use crate::error::{shape_err, Result};
use crate::nn::{self, NamedParams, ParamInit};

use super::{Backbone, Decoder, Discriminator, NetworkConfig, Registry};

/// The same image seen by both styles (or the two styles' predictions).
#[derive(Debug, Clone)]
pub struct StylePair {
    pub source_style: Tensor,
    pub target_style: Tensor,
}

/// Everything computed for one domain's images.
#[derive(Debug, Clone)]
pub struct DomainPass {
    /// Raw backbone features, e.g. `F_{S-t}` / `F_{T-t}` for the target domain.
    pub features: StylePair,
    /// DDM outputs, `F'`.
    pub disentangled: StylePair,
    /// `H_S(F'_S)` and `H_T(F'_T)`.
    pub logits: StylePair,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub source: DomainPass,
    pub target: DomainPass,
}

/// How two class-score maps are merged before the argmax.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Mean of the two softmax maps.
    #[default]
    Probabilities,
    /// Mean of the raw logits.
    Logits,
}

/// Student networks: two backbones, two decoders, the DDM and the two
/// feature discriminators.
#[derive(Debug)]
pub struct StudentEnsemble {
    pub config: NetworkConfig,
    pub backbone_source: Box<dyn Backbone>,
    pub backbone_target: Box<dyn Backbone>,
    pub decoder_source: Box<dyn Decoder>,
    pub decoder_target: Box<dyn Decoder>,
    pub ddm: DdmParams,
    pub disc_source: Discriminator,
    pub disc_target: Discriminator,
}

impl StudentEnsemble {
    /// Build and initialise every component from one seeded stream, in a
    /// fixed order.
    pub fn new(config: &NetworkConfig, registry: &Registry, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit {
            rng: &mut rng,
            dtype,
            device: Device::Cpu,
        };
        let backbone_source = registry.build_backbone(config, &mut init)?;
        let backbone_target = registry.build_backbone(config, &mut init)?;
        let decoder_source = registry.build_decoder(config, &mut init)?;
        let decoder_target = registry.build_decoder(config, &mut init)?;
        let ddm = DdmParams::new(
            &mut init,
            DdmConfig {
                channels: config.feature_channels,
                reduction: config.ddm_reduction,
            },
        )?;
        let disc_source = Discriminator::new(&mut init, config.feature_channels)?;
        let disc_target = Discriminator::new(&mut init, config.feature_channels)?;
        Ok(Self {
            config: config.clone(),
            backbone_source,
            backbone_target,
            decoder_source,
            decoder_target,
            ddm,
            disc_source,
            disc_target,
        })
    }

    fn check_image(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.downsample;
        if c != self.config.in_channels {
            return Err(shape_err(format!(
                "expected {}-channel images, got {c}",
                self.config.in_channels
            )));
        }
        if h % s != 0 || w % s != 0 {
            return Err(shape_err(format!(
                "image {h}x{w} is not divisible by the backbone downsample {s}"
            )));
        }
        Ok((h, w))
    }

    /// Both backbones on one domain's images.
    pub fn extract_domain(&self, x: &Tensor) -> Result<StylePair> {
        self.check_image(x)?;
        Ok(StylePair {
            source_style: self.backbone_source.forward(x)?,
            target_style: self.backbone_target.forward(x)?,
        })
    }

    /// `(F_{S-s}, F_{T-s})` for the source images and `(F_{S-t}, F_{T-t})`
    /// for the target images.
    pub fn extract_features(&self, x_source: &Tensor, x_target: &Tensor) -> Result<(StylePair, StylePair)> {
        Ok((self.extract_domain(x_source)?, self.extract_domain(x_target)?))
    }

    /// DDM and both decoders on already-extracted features of one domain.
    pub fn pass_from_features(&self, features: StylePair, out_size: (usize, usize)) -> Result<DomainPass> {
        let (ds, dt) = ddm::ddm_forward(&features.source_style, &features.target_style, &self.ddm)?;
        let logits = StylePair {
            source_style: segment(self.decoder_source.as_ref(), &ds, out_size)?,
            target_style: segment(self.decoder_target.as_ref(), &dt, out_size)?,
        };
        Ok(DomainPass {
            features,
            disentangled: StylePair {
                source_style: ds,
                target_style: dt,
            },
            logits,
        })
    }

    pub fn forward_domain(&self, x: &Tensor) -> Result<DomainPass> {
        let size = self.check_image(x)?;
        let features = self.extract_domain(x)?;
        self.pass_from_features(features, size)
    }

    pub fn forward_full(&self, x_source: &Tensor, x_target: &Tensor) -> Result<ForwardOutput> {
        Ok(ForwardOutput {
            source: self.forward_domain(x_source)?,
            target: self.forward_domain(x_target)?,
        })
    }

    /// Soft-voted class map of both paths, `[B, H, W]` (u32).
    pub fn predict(&self, x: &Tensor, vote: VoteMode) -> Result<Tensor> {
        let pass = self.forward_domain(x)?;
        soft_vote(&pass.logits.source_style, &pass.logits.target_style, vote)?
            .argmax(1)
            .map_err(Into::into)
    }

    /// Source backbone and decoder only, no DDM: the plain segmentation path.
    pub fn forward_single_path(&self, x: &Tensor) -> Result<Tensor> {
        let size = self.check_image(x)?;
        let f = self.backbone_source.forward(x)?;
        self.decoder_source.forward(&f, size)
    }

    pub fn student_params(&self) -> NamedParams {
        let mut p = self.backbone_source.params("backbone_source");
        p.extend(self.backbone_target.params("backbone_target"));
        p.extend(self.decoder_source.params("decoder_source"));
        p.extend(self.decoder_target.params("decoder_target"));
        p.extend(self.ddm.params("ddm"));
        p
    }

    pub fn disc_params(&self) -> NamedParams {
        let mut p = self.disc_source.params("disc_source");
        p.extend(self.disc_target.params("disc_target"));
        p
    }

    pub fn all_params(&self) -> NamedParams {
        let mut p = self.student_params();
        p.extend(self.disc_params());
        p
    }
}

/// Decoder logits at full patch resolution; no normalization applied.
pub fn segment(decoder: &dyn Decoder, features: &Tensor, out_size: (usize, usize)) -> Result<Tensor> {
    let c = features.dims4()?.1;
    if c != decoder.in_channels() {
        return Err(shape_err(format!(
            "decoder expects {} channels, got {c}",
            decoder.in_channels()
        )));
    }
    decoder.forward(features, out_size)
}

/// Patch logit map, `[B, 1, h', w']`.
pub fn discriminate(disc: &Discriminator, features: &Tensor) -> Result<Tensor> {
    disc.forward(features)
}

/// Merged class scores of two `[B, K, H, W]` logit maps.
pub fn soft_vote(a: &Tensor, b: &Tensor, vote: VoteMode) -> Result<Tensor> {
    if a.dims() != b.dims() || a.rank() != 4 {
        return Err(shape_err(format!(
            "soft vote needs equal [B, K, H, W] maps, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let merged = match vote {
        VoteMode::Probabilities => (nn::softmax(a, 1)? + nn::softmax(b, 1)?)?,
        VoteMode::Logits => (a + b)?,
    };
    Ok((merged * 0.5)?)
}

/// Argmax of the mean class-probability map, `[B, H, W]` (u32).
pub fn ensemble_predict(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(soft_vote(a, b, VoteMode::Probabilities)?.argmax(1)?)
}
