//! Domain disentangled module.
//!
//! Takes a source-style and a target-style feature map computed from the
//! *same* image (by the two student backbones) and produces refreshed
//! features for each style:
//!
//! 1. fusion: `F_ST = F_S + F_T`, prototype `z = reduce(avg(F_ST))`,
//!    fused map `Z = fuse_conv(F_ST)`;
//! 2. unique part: per-channel gates from a two-way softmax of
//!    `expand_S(z)` and `expand_T(z)`, applied channel-wise to each input;
//! 3. invariant part: channel relation masks `softmax_i(<F^i, Z^j>)` for each
//!    style, averaged into a shared mask that mixes the channels of each input;
//! 4. the unique and invariant parts are concatenated (2C channels) and
//!    projected back to C channels by a per-style 1x1 convolution.
//!
//! All tensors are batched: feature maps are `[B, C, h, w]`, prototypes
//! `[B, C/r]`, gates `[B, C]` and relation masks `[B, C, C]` with rows indexed
//! by the output channel `j` and columns by the input channel `i`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{self, Conv2d, Linear, NamedParams, ParamInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdmConfig {
    pub channels: usize,
    /// Reduction ratio of the prototype layer; the prototype has
    /// `max(1, channels / reduction)` entries.
    pub reduction: usize,
}

impl DdmConfig {
    pub fn reduced(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }
}

/// Trainable parameters of the module.
#[derive(Debug)]
pub struct DdmParams {
    pub reduce: Linear,
    pub expand_source: Linear,
    pub expand_target: Linear,
    pub fuse: Conv2d,
    pub project_source: Conv2d,
    pub project_target: Conv2d,
}

impl DdmParams {
    pub fn new(init: &mut ParamInit<'_>, config: DdmConfig) -> Result<Self> {
        let c = config.channels;
        let r = config.reduced();
        Ok(Self {
            reduce: Linear::new(init, c, r, true)?,
            expand_source: Linear::new(init, r, c, true)?,
            expand_target: Linear::new(init, r, c, true)?,
            fuse: Conv2d::new(init, c, c, 3, 1, 1, true)?,
            project_source: Conv2d::new(init, 2 * c, c, 1, 1, 0, true)?,
            project_target: Conv2d::new(init, 2 * c, c, 1, 1, 0, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut p = self.reduce.params(&format!("{prefix}.reduce"));
        p.extend(self.expand_source.params(&format!("{prefix}.expand_source")));
        p.extend(self.expand_target.params(&format!("{prefix}.expand_target")));
        p.extend(self.fuse.params(&format!("{prefix}.fuse")));
        p.extend(self.project_source.params(&format!("{prefix}.project_source")));
        p.extend(self.project_target.params(&format!("{prefix}.project_target")));
        p
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(Self {
            reduce: self.reduce.duplicate()?,
            expand_source: self.expand_source.duplicate()?,
            expand_target: self.expand_target.duplicate()?,
            fuse: self.fuse.duplicate()?,
            project_source: self.project_source.duplicate()?,
            project_target: self.project_target.duplicate()?,
        })
    }
}

/// Output of the fusion block.
#[derive(Debug, Clone)]
pub struct Fused {
    /// `z_ST`, `[B, C/r]`.
    pub prototype: Tensor,
    /// `Z_ST`, `[B, C, h, w]`.
    pub map: Tensor,
}

/// Complementary channel gates, `v_S + v_T = 1` elementwise.
#[derive(Debug, Clone)]
pub struct ChannelGates {
    pub source: Tensor,
    pub target: Tensor,
}

/// Row-stochastic channel relation masks.
#[derive(Debug, Clone)]
pub struct RelationMasks {
    pub source: Tensor,
    pub target: Tensor,
    /// `(M_S + M_T) / 2`
    pub shared: Tensor,
}

/// Every intermediate of one forward pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct DdmTrace {
    pub fused: Fused,
    pub gates: ChannelGates,
    pub unique_source: Tensor,
    pub unique_target: Tensor,
    pub masks: RelationMasks,
    pub invariant_source: Tensor,
    pub invariant_target: Tensor,
    pub output_source: Tensor,
    pub output_target: Tensor,
}

fn check_feature(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let dims = t.dims();
    if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
        return Err(shape_err(format!(
            "{what} must be a non-empty [B, C, h, w] feature map, got {dims:?}"
        )));
    }
    Ok((dims[0], dims[1], dims[2], dims[3]))
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    let da = check_feature(a, what)?;
    let db = check_feature(b, what)?;
    if da != db {
        return Err(shape_err(format!(
            "{what}: source-style {:?} and target-style {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(da)
}

/// Fusion block: prototype from pooled `F_S + F_T`, fused map by convolution.
pub fn fuse(source: &Tensor, target: &Tensor, params: &DdmParams) -> Result<Fused> {
    let (_, c, _, _) = check_pair(source, target, "fuse")?;
    if c != params.channels() {
        return Err(shape_err(format!(
            "fuse: features have {c} channels, module expects {}",
            params.channels()
        )));
    }
    let sum = (source + target)?;
    let prototype = params.reduce.forward(&nn::global_avg_pool(&sum)?)?;
    let map = params.fuse.forward(&sum)?;
    Ok(Fused { prototype, map })
}

/// Two-way softmax over the style-specific expansions of the prototype.
pub fn unique_gates(prototype: &Tensor, params: &DdmParams) -> Result<ChannelGates> {
    let z_source = params.expand_source.forward(prototype)?;
    let z_target = params.expand_target.forward(prototype)?;
    let max = z_source.maximum(&z_target)?.detach();
    let e_source = z_source.broadcast_sub(&max)?.exp()?;
    let e_target = z_target.broadcast_sub(&max)?.exp()?;
    let denom = (&e_source + &e_target)?;
    Ok(ChannelGates {
        source: (e_source / &denom)?,
        target: (e_target / &denom)?,
    })
}

/// Scale every channel of each input by its gate.
pub fn apply_gates(source: &Tensor, target: &Tensor, gates: &ChannelGates) -> Result<(Tensor, Tensor)> {
    let (b, c, _, _) = check_pair(source, target, "apply_gates")?;
    for g in [&gates.source, &gates.target] {
        if g.dims() != [b, c] {
            return Err(shape_err(format!(
                "apply_gates: gate shape {:?} does not match {c} channels (batch {b})",
                g.dims()
            )));
        }
    }
    let scale = |f: &Tensor, g: &Tensor| -> Result<Tensor> {
        Ok(f.broadcast_mul(&g.reshape((b, c, 1, 1))?)?)
    };
    Ok((scale(source, &gates.source)?, scale(target, &gates.target)?))
}

fn relation_mask(features: &Tensor, fused_map: &Tensor) -> Result<Tensor> {
    let f = features.flatten_from(2)?; // [B, C, N]
    let z = fused_map.flatten_from(2)?;
    // logits[b, j, i] = <Z^j, F^i>
    let logits = z.matmul(&f.transpose(1, 2)?.contiguous()?)?;
    nn::softmax(&logits, 2)
}

/// Softmax-normalised dot products between every input channel and every
/// fused channel, for both styles, plus their mean.
pub fn relation_masks(source: &Tensor, target: &Tensor, fused_map: &Tensor) -> Result<RelationMasks> {
    check_pair(source, target, "relation_masks")?;
    check_pair(source, fused_map, "relation_masks")?;
    let source_mask = relation_mask(source, fused_map)?;
    let target_mask = relation_mask(target, fused_map)?;
    let shared = ((&source_mask + &target_mask)? * 0.5)?;
    Ok(RelationMasks {
        source: source_mask,
        target: target_mask,
        shared,
    })
}

/// Output channel `j` is `sum_i shared[j, i] * F^i`.
pub fn invariant_features(source: &Tensor, target: &Tensor, shared: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = check_pair(source, target, "invariant_features")?;
    if shared.dims() != [b, c, c] {
        return Err(shape_err(format!(
            "invariant_features: mask {:?} does not match [{b}, {c}, {c}]",
            shared.dims()
        )));
    }
    let mix = |f: &Tensor| -> Result<Tensor> {
        Ok(shared.matmul(&f.flatten_from(2)?)?.reshape((b, c, h, w))?)
    };
    Ok((mix(source)?, mix(target)?))
}

/// Full module, returning every intermediate.
pub fn ddm_forward_traced(source: &Tensor, target: &Tensor, params: &DdmParams) -> Result<DdmTrace> {
    let fused = fuse(source, target, params)?;
    let gates = unique_gates(&fused.prototype, params)?;
    let (unique_source, unique_target) = apply_gates(source, target, &gates)?;
    let masks = relation_masks(source, target, &fused.map)?;
    let (invariant_source, invariant_target) = invariant_features(source, target, &masks.shared)?;
    let output_source = params
        .project_source
        .forward(&Tensor::cat(&[&unique_source, &invariant_source], 1)?)?;
    let output_target = params
        .project_target
        .forward(&Tensor::cat(&[&unique_target, &invariant_target], 1)?)?;
    Ok(DdmTrace {
        fused,
        gates,
        unique_source,
        unique_target,
        masks,
        invariant_source,
        invariant_target,
        output_source,
        output_target,
    })
}

/// `(F'_S, F'_T)`, both with the input shape.
pub fn ddm_forward(source: &Tensor, target: &Tensor, params: &DdmParams) -> Result<(Tensor, Tensor)> {
    let t = ddm_forward_traced(source, target, params)?;
    Ok((t.output_source, t.output_target))
}

/// Largest deviation of `v_S + v_T` from one.
pub fn gate_sum_error(gates: &ChannelGates) -> Result<f64> {
    let s = (&gates.source + &gates.target)?;
    Ok(nn::to_f64_vec(&s)?
        .into_iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max))
}

/// Largest deviation of any mask row sum from one.
pub fn mask_row_error(mask: &Tensor) -> Result<f64> {
    let sums = mask.sum(D::Minus1)?;
    Ok(nn::to_f64_vec(&sums)?
        .into_iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, c: usize) -> DdmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit {
            rng: &mut rng,
            dtype: DType::F64,
            device: Device::Cpu,
        };
        DdmParams::new(&mut init, DdmConfig { channels: c, reduction: 2 }).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        nn::to_f64_vec(t).unwrap()
    }

    #[test]
    fn cancelling_inputs_pool_to_the_reduce_bias() {
        let p = params(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(&mut rng, &[1, 4, 3, 3]);
        let fused = fuse(&f, &f.neg().unwrap(), &p).unwrap();
        let bias = values(p.reduce.bias.as_ref().unwrap().as_tensor());
        assert_eq!(values(&fused.prototype), bias);
    }

    #[test]
    fn constant_inputs_pool_to_their_sum() {
        let p = params(1, 4);
        let a = Tensor::full(0.75f64, (1, 4, 2, 5), &Device::Cpu).unwrap();
        let b = Tensor::full(-2.0f64, (1, 4, 2, 5), &Device::Cpu).unwrap();
        let pooled = nn::global_avg_pool(&(&a + &b).unwrap()).unwrap();
        for v in values(&pooled) {
            assert!((v + 1.25).abs() < 1e-15);
        }
        assert_eq!(fuse(&a, &b, &p).unwrap().map.dims(), &[1, 4, 2, 5]);
    }

    #[test]
    fn identical_expansions_give_half_gates() {
        let p = params(3, 6);
        let p_sym = DdmParams {
            expand_target: p.expand_source.duplicate().unwrap(),
            ..p
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, &[2, 3]);
        let g = unique_gates(&z, &p_sym).unwrap();
        assert!(values(&g.source).iter().all(|&v| v == 0.5));
        assert!(values(&g.target).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_gates_stay_finite_and_complementary() {
        let p = params(5, 3);
        // push z_S - z_T to +1e4 through the biases
        p.expand_source.bias.as_ref().unwrap().set(&Tensor::full(5e3f64, 3, &Device::Cpu).unwrap()).unwrap();
        p.expand_target.bias.as_ref().unwrap().set(&Tensor::full(-5e3f64, 3, &Device::Cpu).unwrap()).unwrap();
        let z = Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap();
        let g = unique_gates(&z, &p).unwrap();
        assert_eq!(values(&g.source), vec![1.0; 3]);
        assert_eq!(values(&g.target), vec![0.0; 3]);
        assert!(gate_sum_error(&g).unwrap() < 1e-12);
    }

    #[test]
    fn half_gates_halve_the_inputs_and_extremes_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fs = random(&mut rng, &[2, 3, 2, 2]);
        let ft = random(&mut rng, &[2, 3, 2, 2]);
        let half = Tensor::full(0.5f64, (2, 3), &Device::Cpu).unwrap();
        let (us, ut) = apply_gates(&fs, &ft, &ChannelGates { source: half.clone(), target: half }).unwrap();
        assert_eq!(values(&us), values(&(&fs * 0.5).unwrap()));
        assert_eq!(values(&ut), values(&(&ft * 0.5).unwrap()));

        let ones = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let (us, ut) = apply_gates(&fs, &ft, &ChannelGates { source: ones, target: zeros }).unwrap();
        assert_eq!(values(&us), values(&fs));
        assert!(values(&ut).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_length_mismatch_is_rejected() {
        let f = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        let gates = ChannelGates { source: g.clone(), target: g };
        assert!(apply_gates(&f, &f, &gates).is_err());
    }

    #[test]
    fn identical_channels_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plane = random(&mut rng, &[1, 1, 3, 3]);
        let fs = Tensor::cat(&[&plane, &plane, &plane, &plane], 1).unwrap();
        let ft = random(&mut rng, &[1, 4, 3, 3]);
        let z = random(&mut rng, &[1, 4, 3, 3]);
        let m = relation_masks(&fs, &ft, &z).unwrap();
        for v in values(&m.source) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_styles_give_equal_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random(&mut rng, &[2, 3, 2, 2]);
        let z = random(&mut rng, &[2, 3, 2, 2]);
        let m = relation_masks(&f, &f, &z).unwrap();
        assert_eq!(values(&m.source), values(&m.target));
        assert_eq!(values(&m.source), values(&m.shared));
        assert!(mask_row_error(&m.shared).unwrap() < 1e-12);
    }

    #[test]
    fn identity_and_uniform_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs = random(&mut rng, &[1, 3, 2, 2]);
        let ft = random(&mut rng, &[1, 3, 2, 2]);
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let (is, it) = invariant_features(&fs, &ft, &eye).unwrap();
        assert_eq!(values(&is), values(&fs));
        assert_eq!(values(&it), values(&ft));

        let uniform = Tensor::full(1.0f64 / 3.0, (1, 3, 3), &Device::Cpu).unwrap();
        let (is, _) = invariant_features(&fs, &ft, &uniform).unwrap();
        let mean = fs.mean_keepdim(1).unwrap();
        let is = values(&is);
        let mean = values(&mean);
        for ch in 0..3 {
            for k in 0..4 {
                assert!((is[ch * 4 + k] - mean[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (c, h, w) in [(1, 1, 1), (4, 3, 3), (5, 2, 4), (8, 4, 4)] {
            let p = params(c as u64, c);
            let fs = random(&mut rng, &[2, c, h, w]);
            let ft = random(&mut rng, &[2, c, h, w]);
            let (os, ot) = ddm_forward(&fs, &ft, &p).unwrap();
            assert_eq!(os.dims(), &[2, c, h, w]);
            assert_eq!(ot.dims(), &[2, c, h, w]);
        }
    }

    #[test]
    fn zero_inputs_zero_the_disentangled_parts() {
        let p = params(11, 4);
        let z = Tensor::zeros((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let t = ddm_forward_traced(&z, &z, &p).unwrap();
        for part in [&t.unique_source, &t.unique_target, &t.invariant_source, &t.invariant_target] {
            assert!(values(part).iter().all(|&v| v == 0.0));
        }
        // outputs are the projection of zeros, i.e. its bias broadcast
        let bias = values(p.project_source.bias.as_ref().unwrap().as_tensor());
        let out = values(&t.output_source);
        for ch in 0..4 {
            assert!(out[ch * 9..(ch + 1) * 9].iter().all(|&v| v == bias[ch]));
        }
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let p = params(12, 4);
        let a = Tensor::zeros((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 4, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(ddm_forward(&a, &b, &p).is_err());
        let wrong_c = Tensor::zeros((1, 3, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(fuse(&wrong_c, &wrong_c, &p).is_err());
    }
}
