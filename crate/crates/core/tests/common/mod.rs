//! Helpers shared by the integration tests: seeded tensors, tiny configs and
//! a plain scalar-loop reimplementation of the disentangling module.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segadapt::ddm::{DdmConfig, DdmParams};
use segadapt::nn::{self, Conv2d, Linear, ParamInit};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn tensor(data: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    tensor(uniform(rng, n, 1.0), dims)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    nn::to_f64_vec(t).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ddm_params(seed: u64, channels: usize, reduction: usize) -> DdmParams {
    let mut r = rng(seed);
    let mut init = ParamInit {
        rng: &mut r,
        dtype: DType::F64,
        device: Device::Cpu,
    };
    DdmParams::new(&mut init, DdmConfig { channels, reduction }).unwrap()
}

fn linear(l: &Linear) -> (Vec<f64>, Vec<f64>, usize) {
    let w = values(l.weight.as_tensor());
    let b = values(l.bias.as_ref().unwrap().as_tensor());
    let input = l.weight.dims()[1];
    (w, b, input)
}

fn conv(c: &Conv2d) -> (Vec<f64>, Vec<f64>, [usize; 4]) {
    let d = c.weight.dims();
    (
        values(c.weight.as_tensor()),
        values(c.bias.as_ref().unwrap().as_tensor()),
        [d[0], d[1], d[2], d[3]],
    )
}

/// Everything the oracle computes for one batch element.
#[derive(Debug, Clone)]
pub struct OracleOut {
    pub gate_source: Vec<f64>,
    pub gate_target: Vec<f64>,
    /// `[C][C]`, row `j` over input channels `i`.
    pub mask_source: Vec<Vec<f64>>,
    pub mask_target: Vec<Vec<f64>>,
    pub mask_shared: Vec<Vec<f64>>,
    /// `[C * h * w]`
    pub out_source: Vec<f64>,
    pub out_target: Vec<f64>,
}

/// Disentangling module for a single `[C, h, w]` pair, written as nested
/// loops over the textbook definitions.
pub fn ddm_oracle(fs: &[f64], ft: &[f64], c: usize, h: usize, w: usize, p: &DdmParams) -> OracleOut {
    let n = h * w;
    let at = |f: &[f64], ch: usize, y: usize, x: usize| f[ch * n + y * w + x];

    let sum: Vec<f64> = fs.iter().zip(ft).map(|(a, b)| a + b).collect();

    // prototype
    let (wr, br, _) = linear(&p.reduce);
    let r = br.len();
    let pooled: Vec<f64> = (0..c)
        .map(|ch| (0..n).map(|k| sum[ch * n + k]).sum::<f64>() / n as f64)
        .collect();
    let z: Vec<f64> = (0..r)
        .map(|k| br[k] + (0..c).map(|ch| wr[k * c + ch] * pooled[ch]).sum::<f64>())
        .collect();

    // gates
    let (wes, bes, _) = linear(&p.expand_source);
    let (wet, bet, _) = linear(&p.expand_target);
    let mut gate_source = vec![0.0; c];
    let mut gate_target = vec![0.0; c];
    for ch in 0..c {
        let zs = bes[ch] + (0..r).map(|k| wes[ch * r + k] * z[k]).sum::<f64>();
        let zt = bet[ch] + (0..r).map(|k| wet[ch * r + k] * z[k]).sum::<f64>();
        gate_source[ch] = 1.0 / (1.0 + (zt - zs).exp());
        gate_target[ch] = 1.0 / (1.0 + (zs - zt).exp());
    }

    // fused map: 3x3 convolution, zero padding 1
    let (wf, bf, [_, _, kh, kw]) = conv(&p.fuse);
    let pad = p.fuse.padding as isize;
    let mut fused = vec![0.0; c * n];
    for o in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bf[o];
                for i in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let yy = y as isize + dy as isize - pad;
                            let xx = x as isize + dx as isize - pad;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += wf[((o * c + i) * kh + dy) * kw + dx] * at(&sum, i, yy as usize, xx as usize);
                        }
                    }
                }
                fused[o * n + y * w + x] = acc;
            }
        }
    }

    // relation masks
    let mask = |f: &[f64]| -> Vec<Vec<f64>> {
        (0..c)
            .map(|j| {
                let dots: Vec<f64> = (0..c)
                    .map(|i| (0..n).map(|k| fused[j * n + k] * f[i * n + k]).sum())
                    .collect();
                let m = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = dots.iter().map(|d| (d - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    };
    let mask_source = mask(fs);
    let mask_target = mask(ft);
    let mask_shared: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..c).map(|i| 0.5 * (mask_source[j][i] + mask_target[j][i])).collect())
        .collect();

    let project = |f: &[f64], gate: &[f64], proj: &Conv2d| -> Vec<f64> {
        let (wp, bp, _) = conv(proj);
        let mut unique = vec![0.0; c * n];
        let mut invariant = vec![0.0; c * n];
        for j in 0..c {
            for k in 0..n {
                unique[j * n + k] = gate[j] * f[j * n + k];
                invariant[j * n + k] = (0..c).map(|i| mask_shared[j][i] * f[i * n + k]).sum();
            }
        }
        let mut out = vec![0.0; c * n];
        for o in 0..c {
            for k in 0..n {
                let mut acc = bp[o];
                for i in 0..c {
                    acc += wp[o * 2 * c + i] * unique[i * n + k];
                    acc += wp[o * 2 * c + c + i] * invariant[i * n + k];
                }
                out[o * n + k] = acc;
            }
        }
        out
    };
    let out_source = project(fs, &gate_source, &p.project_source);
    let out_target = project(ft, &gate_target, &p.project_target);

    OracleOut {
        gate_source,
        gate_target,
        mask_source,
        mask_target,
        mask_shared,
        out_source,
        out_target,
    }
}

/// Largest relative error between analytic and central-difference
/// gradients of `loss` with respect to `var`, measured as
/// `|a - n| / max(|a|, |n|, floor)` per entry.
pub fn finite_difference_error(var: &Var, analytic: &[f64], eps: f64, floor: f64, loss: &dyn Fn() -> f64) -> f64 {
    let base = values(var.as_tensor());
    let dims = var.dims().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        var.set(&tensor(plus, &dims)).unwrap();
        let lp = loss();
        let mut minus = base.clone();
        minus[i] -= eps;
        var.set(&tensor(minus, &dims)).unwrap();
        let lm = loss();
        let numeric = (lp - lm) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    var.set(&tensor(base, &dims)).unwrap();
    worst
}
