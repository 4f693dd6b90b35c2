//! Differentiable building blocks shared by every network in the crate.
//!
//! Convolutions are lowered to `im2col` + batched matmul. The unfold and its
//! adjoint (`col2im`) are registered as custom ops so that the backward pass
//! of a convolution is two matmuls and a scatter, which is much cheaper on
//! CPU than the transposed convolution candle uses by default.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

pub type NamedParams = Vec<(String, Var)>;

/// Spatial bookkeeping for one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length of a strided window, or `None` when the kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let out_h = conv_output_len(height, kernel, stride, padding);
        let out_w = conv_output_len(width, kernel, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(shape_err(format!(
                "input {height}x{width} too small for kernel {kernel} (stride {stride}, padding {padding})"
            ))),
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(padding)?;
        (pos < extent).then_some(pos)
    }
}

fn im2col<T: Copy + Default>(x: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let rows = g.patch_len();
    let cols = g.out_len();
    let plane = g.height * g.width;
    let mut out = vec![T::default(); batch * rows * cols];
    for b in 0..batch {
        for c in 0..g.channels {
            let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut out[(b * rows + row) * cols..(b * rows + row + 1) * cols];
                    for oy in 0..g.out_h {
                        let Some(iy) = ConvGeometry::source(oy, ki, g.stride, g.padding, g.height)
                        else {
                            continue;
                        };
                        for ox in 0..g.out_w {
                            if let Some(ix) =
                                ConvGeometry::source(ox, kj, g.stride, g.padding, g.width)
                            {
                                dst[oy * g.out_w + ox] = src[iy * g.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(
    cols_buf: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let rows = g.patch_len();
    let cols = g.out_len();
    let plane = g.height * g.width;
    let mut out = vec![T::default(); batch * g.channels * plane];
    for b in 0..batch {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let src = &cols_buf[(b * rows + row) * cols..(b * rows + row + 1) * cols];
                    for oy in 0..g.out_h {
                        let Some(iy) = ConvGeometry::source(oy, ki, g.stride, g.padding, g.height)
                        else {
                            continue;
                        };
                        for ox in 0..g.out_w {
                            if let Some(ix) =
                                ConvGeometry::source(ox, kj, g.stride, g.padding, g.width)
                            {
                                dst[iy * g.width + ix] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout, "im2col")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout, "im2col")?, batch, g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, Shape::from((batch, g.patch_len(), g.out_len()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout, "col2im")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout, "col2im")?, batch, g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution of `x: [B, C, H, W]` with `weight: [O, C, k, k]`.
///
/// The kernel is materialised once per batch item before the batched matmul:
/// the CPU matmul does not honour zero batch strides from `broadcast_as`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_ch, in_ch, kh, kw) = weight.dims4()?;
    if in_ch != channels {
        return Err(shape_err(format!(
            "conv2d expects {in_ch} input channels, got {channels}"
        )));
    }
    if kh != kw {
        return Err(shape_err(format!("conv2d needs a square kernel, got {kh}x{kw}")));
    }
    let g = ConvGeometry::new(channels, height, width, kh, stride, padding)?;
    let cols = if kh == 1 && stride == 1 && padding == 0 {
        x.reshape((batch, channels, height * width))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let kernel = weight.reshape((1, out_ch, g.patch_len()))?;
    let out = kernel
        .broadcast_as((batch, out_ch, g.patch_len()))?
        .contiguous()?
        .matmul(&cols)?
        .reshape((batch, out_ch, g.out_h, g.out_w))?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, out_ch, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Row-stochastic interpolation matrix `[out, in]` for half-pixel-centred
/// bilinear resampling (the `align_corners = false` convention).
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += 1.0 - frac;
        m[o * input + hi] += frac;
    }
    m
}

/// Bilinear resize of `[B, C, h, w]` to `[B, C, out_h, out_w]`, written as two
/// matmuls so that autograd handles the backward pass.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dtype, dev) = (x.dtype(), x.device());
    let rows = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let cols = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let x = x.reshape((b * c * h, w))?.matmul(&cols)?; // [B*C*h, out_w]
    let x = x.reshape((b * c, h, out_w))?;
    let rows = rows.unsqueeze(0)?.broadcast_as((b * c, out_h, h))?.contiguous()?;
    Ok(rows.matmul(&x)?.reshape((b, c, out_h, out_w))?)
}

/// Softmax along `dim` with max subtraction.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Channel-wise global average pooling, `[B, C, h, w] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

/// Seeded parameter factory. Every tensor it creates is drawn from one
/// ChaCha stream, so a network built from the same seed is bit-identical.
pub struct ParamInit<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl ParamInit<'_> {
    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-1.0..1.0) * bound)
            .collect();
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&mut self, dims: &[usize]) -> Result<Var> {
        Ok(Var::zeros(dims, self.dtype, &self.device)?)
    }
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weights (suited to rectifier activations), PyTorch-style bias.
    pub fn new(
        init: &mut ParamInit<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = init.uniform(&[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt())?;
        let bias = if bias {
            Some(init.uniform(&[out_ch], 1.0 / fan_in.sqrt())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
            self.padding,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut p = vec![(format!("{prefix}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            p.push((format!("{prefix}.bias"), b.clone()));
        }
        p
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(Self {
            weight: copy_var(&self.weight)?,
            bias: self.bias.as_ref().map(copy_var).transpose()?,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

/// Fully connected layer, `weight: [out, in]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform(&[out_dim, in_dim], bound)?;
        let bias = if bias {
            Some(init.uniform(&[out_dim], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut p = vec![(format!("{prefix}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            p.push((format!("{prefix}.bias"), b.clone()));
        }
        p
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(Self {
            weight: copy_var(&self.weight)?,
            bias: self.bias.as_ref().map(copy_var).transpose()?,
        })
    }
}

/// Fresh variable holding a copy of `v`'s current value.
pub fn copy_var(v: &Var) -> Result<Var> {
    Ok(Var::from_tensor(&v.as_tensor().copy()?.detach())?)
}

/// Flatten a tensor to `f64` values regardless of storage dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
