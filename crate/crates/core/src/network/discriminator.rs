use candle_core::Tensor;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::nn::{self, conv_output_len, Conv2d, NamedParams, ParamInit};

pub const DISC_KERNEL: usize = 4;
pub const DISC_STRIDES: [usize; 4] = [2, 2, 1, 1];
pub const DISC_CHANNELS: [usize; 4] = [64, 128, 256, 1];
pub const DISC_PADDING: usize = 1;
pub const DISC_LEAKY_SLOPE: f64 = 0.2;

/// One convolution block as actually built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Fully convolutional patch discriminator over backbone features. Leaky
/// ReLU after the first three blocks, no normalization, raw logits out.
#[derive(Debug)]
pub struct Discriminator {
    blocks: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(init: &mut ParamInit<'_>, in_channels: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        let mut c = in_channels;
        for (out, stride) in DISC_CHANNELS.into_iter().zip(DISC_STRIDES) {
            blocks.push(Conv2d::new(init, c, out, DISC_KERNEL, stride, DISC_PADDING, true)?);
            c = out;
        }
        Ok(Self { blocks })
    }

    pub fn architecture(&self) -> Vec<BlockSpec> {
        self.blocks
            .iter()
            .map(|b| BlockSpec {
                in_channels: b.in_channels(),
                out_channels: b.out_channels(),
                kernel: b.kernel(),
                stride: b.stride,
                padding: b.padding,
            })
            .collect()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    /// Patch-map size for an `h x w` input, or `None` if it is too small.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.blocks.iter().try_fold((h, w), |(h, w), b| {
            Some((
                conv_output_len(h, b.kernel(), b.stride, b.padding)?,
                conv_output_len(w, b.kernel(), b.stride, b.padding)?,
            ))
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(shape_err(format!(
                "discriminator expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        if self.output_size(h, w).is_none() {
            return Err(shape_err(format!(
                "{h}x{w} input is too small for four {DISC_KERNEL}x{DISC_KERNEL} discriminator blocks"
            )));
        }
        let last = self.blocks.len() - 1;
        let mut out = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            out = b.forward(&out)?;
            if i < last {
                out = nn::leaky_relu(&out, DISC_LEAKY_SLOPE)?;
            }
        }
        Ok(out)
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.params(&format!("{prefix}.block{i}")))
            .collect()
    }
}
