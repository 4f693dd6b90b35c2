//! Segmentation, self-training and adversarial loss terms, and their
//! weighted sum `L = L_seg + lambda * L_st + beta * L_adv`.
//!
//! Every term is a mean: cross-entropy over non-ignored pixels and binary
//! cross-entropy over discriminator patch elements, so the weights do not
//! depend on the patch size.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::selftrain::PseudoLabel;

pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 0.005;

/// Discriminator logits are clamped to this magnitude before the BCE, which
/// bounds a saturated generator term at about this value.
pub const LOGIT_CLAMP: f64 = 80.0;

/// Mean pixel cross-entropy of `logits: [B, K, H, W]` against class ids
/// `labels: [B, H, W]`; pixels equal to `ignore_index` are skipped. A batch
/// with no scored pixel yields zero and a warning.
pub fn seg_loss(logits: &Tensor, labels: &Tensor, ignore_index: u32) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(shape_err(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let ids = labels.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
    let mut safe = Vec::with_capacity(ids.len());
    let mut mask = Vec::with_capacity(ids.len());
    for &id in &ids {
        if id == ignore_index {
            safe.push(0u32);
            mask.push(0.0f64);
        } else if (id as usize) < k {
            safe.push(id);
            mask.push(1.0);
        } else {
            return Err(Error::InvalidArgument(format!(
                "label {id} is neither a class in 0..{k} nor the ignore index {ignore_index}"
            )));
        }
    }
    let scored = mask.iter().filter(|&&m| m > 0.0).count();
    if scored == 0 {
        log::warn!("every pixel of a {b}x{h}x{w} label batch is ignored; segmentation loss set to 0");
        return Ok((logits.sum_all()? * 0.0)?);
    }
    let dev = logits.device();
    let index = Tensor::from_vec(safe, (b, 1, h, w), dev)?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), dev)?.to_dtype(logits.dtype())?;
    let picked = nn::log_softmax(logits, 1)?.gather(&index, 1)?;
    Ok(((picked * mask)?.sum_all()?.neg()? / scored as f64)?)
}

/// Self-training cross-entropy against a pseudo-label; the same arithmetic
/// as [`seg_loss`] with no ignored pixels.
pub fn st_loss(logits: &Tensor, pseudo: &PseudoLabel) -> Result<Tensor> {
    seg_loss(logits, &pseudo.labels, u32::MAX)
}

/// Mean binary cross-entropy of logits against a constant target in
/// `[0, 1]`, via `max(x, 0) - x t + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let x = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?;
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((x.relu()? - (&x * target)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// Loss for one discriminator: real patches towards 1, fake towards 0,
/// averaged over the two halves.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(shape_err(format!(
            "discriminator maps differ: real {:?}, fake {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    Ok(((bce_with_logits(real, 1.0)? + bce_with_logits(fake, 0.0)?)? * 0.5)?)
}

/// Non-saturating generator loss: fake patches towards 1.
pub fn generator_loss(fake: &Tensor) -> Result<Tensor> {
    bce_with_logits(fake, 1.0)
}

#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    pub generator: Tensor,
    pub discriminator: Tensor,
}

pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> Result<AdversarialTerms> {
    Ok(AdversarialTerms {
        discriminator: discriminator_loss(real, fake)?,
        generator: generator_loss(fake)?,
    })
}

/// Unweighted loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "seg_S")]
    pub seg_s: f64,
    #[serde(rename = "seg_T")]
    pub seg_t: f64,
    #[serde(rename = "st_S")]
    pub st_s: f64,
    #[serde(rename = "st_T")]
    pub st_t: f64,
    #[serde(rename = "adv_S")]
    pub adv_s: f64,
    #[serde(rename = "adv_T")]
    pub adv_t: f64,
    #[serde(rename = "disc_S")]
    pub disc_s: f64,
    #[serde(rename = "disc_T")]
    pub disc_t: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("seg_S", self.seg_s),
            ("seg_T", self.seg_t),
            ("st_S", self.st_s),
            ("st_T", self.st_t),
            ("adv_S", self.adv_s),
            ("adv_T", self.adv_t),
            ("disc_S", self.disc_s),
            ("disc_T", self.disc_t),
        ]
    }
}

/// Loss parts plus their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(flatten)]
    pub parts: LossParts,
    pub combined: f64,
    pub lambda: f64,
    pub beta: f64,
}

pub fn combined_value(parts: &LossParts, lambda: f64, beta: f64) -> f64 {
    (parts.seg_s + parts.seg_t) + lambda * (parts.st_s + parts.st_t) + beta * (parts.adv_s + parts.adv_t)
}

/// Weighted combination of the parts; any non-finite part is an error that
/// names it.
pub fn combine(parts: LossParts, lambda: f64, beta: f64) -> Result<LossBundle> {
    let bad: Vec<String> = parts
        .named()
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, v)| format!("{n}={v}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite {
            step: 0,
            detail: bad.join(", "),
        });
    }
    Ok(LossBundle {
        parts,
        combined: combined_value(&parts, lambda, beta),
        lambda,
        beta,
    })
}

/// The differentiable student-side terms of one step. Terms that are
/// switched off are `None` and contribute nothing.
#[derive(Debug, Clone)]
pub struct StudentTerms {
    pub seg_s: Tensor,
    pub seg_t: Tensor,
    pub st_s: Option<Tensor>,
    pub st_t: Option<Tensor>,
    pub adv_s: Option<Tensor>,
    pub adv_t: Option<Tensor>,
}

/// Scalar tensor of the combined objective, for backpropagation.
pub fn combined_objective(terms: &StudentTerms, lambda: f64, beta: f64) -> Result<Tensor> {
    let mut total = (&terms.seg_s + &terms.seg_t)?;
    for (t, weight) in [
        (&terms.st_s, lambda),
        (&terms.st_t, lambda),
        (&terms.adv_s, beta),
        (&terms.adv_t, beta),
    ] {
        if let Some(t) = t {
            if weight != 0.0 {
                total = (total + (t * weight)?)?;
            }
        }
    }
    Ok(total)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn all_ignored_gives_zero() {
        let logits = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let labels = Tensor::full(255u32, (1, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(scalar(&seg_loss(&logits, &labels, 255).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let labels = Tensor::full(3u32, (1, 1, 1), &Device::Cpu).unwrap();
        assert!(seg_loss(&logits, &labels, 255).is_err());
    }

    #[test]
    fn perfect_discriminator_saturates_generator() {
        let real = Tensor::full(1e6f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let fake = Tensor::full(-1e6f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let t = adversarial_losses(&real, &fake).unwrap();
        assert!(scalar(&t.discriminator).unwrap() < 1e-30);
        let g = scalar(&t.generator).unwrap();
        assert!(g.is_finite() && (g - LOGIT_CLAMP).abs() < 1e-9);
    }

    #[test]
    fn non_finite_part_is_named() {
        let parts = LossParts {
            adv_t: f64::NAN,
            ..Default::default()
        };
        let err = combine(parts, 0.25, 0.005).unwrap_err().to_string();
        assert!(err.contains("adv_T"), "{err}");
    }
}
