use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// An 8-bit, channel-first tile before cropping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTile {
    /// `[3, height, width]`, row-major.
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// `[height, width]` class ids, `IGNORE_INDEX` allowed.
    pub label: Option<Vec<u8>>,
    pub tile_id: String,
    pub domain: Domain,
}

impl RawTile {
    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        if self.pixels.len() != 3 * plane {
            return Err(shape_err(format!(
                "tile {}: {} pixel values for a 3x{}x{} image",
                self.tile_id,
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(label) = &self.label {
            if label.len() != plane {
                return Err(shape_err(format!(
                    "tile {}: label has {} entries, image is {}x{}",
                    self.tile_id,
                    label.len(),
                    self.height,
                    self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub tile_id: String,
    pub row: usize,
    pub col: usize,
}

/// A cropped patch still in 8-bit form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPatch {
    /// `[3, size, size]`
    pub pixels: Vec<u8>,
    pub size: usize,
    /// `[size, size]`
    pub label: Option<Vec<u8>>,
    pub origin: PatchOrigin,
}

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    /// `[3, P, P]` normalised.
    pub image: Tensor,
    /// `[P, P]` u32 class ids or the ignore index.
    pub label: Tensor,
    pub origin: PatchOrigin,
}

#[derive(Debug, Clone)]
pub struct UnlabeledPatch {
    pub image: Tensor,
    pub origin: PatchOrigin,
}

#[derive(Debug, Clone)]
pub enum Patch {
    Labeled(LabeledPatch),
    Unlabeled(UnlabeledPatch),
}

impl Patch {
    pub fn image(&self) -> &Tensor {
        match self {
            Patch::Labeled(p) => &p.image,
            Patch::Unlabeled(p) => &p.image,
        }
    }

    pub fn origin(&self) -> &PatchOrigin {
        match self {
            Patch::Labeled(p) => &p.origin,
            Patch::Unlabeled(p) => &p.origin,
        }
    }
}

/// Per-channel affine normalisation applied to `v / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// The ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, channel: usize, value: u8) -> f64 {
        (value as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// `[1, 3, H, W]` tensor from one channel-first 8-bit image.
    pub fn image(&self, pixels: &[u8], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
        let plane = height * width;
        if pixels.len() != 3 * plane || plane == 0 {
            return Err(shape_err(format!(
                "{} values for a 3x{height}x{width} image",
                pixels.len()
            )));
        }
        let data: Vec<f64> = pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| self.apply(i / plane, v))
            .collect();
        Ok(Tensor::from_vec(data, (1, 3, height, width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `[B, 3, P, P]` tensor from channel-first 8-bit patches.
    pub fn batch(&self, patches: &[&RawPatch], dtype: DType) -> Result<Tensor> {
        let first = patches
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let size = first.size;
        let plane = size * size;
        let mut data = Vec::with_capacity(patches.len() * 3 * plane);
        for p in patches {
            if p.size != size {
                return Err(shape_err(format!(
                    "mixed patch sizes {} and {} in one batch",
                    size, p.size
                )));
            }
            for (i, &v) in p.pixels.iter().enumerate() {
                data.push(self.apply(i / plane, v));
            }
        }
        Ok(Tensor::from_vec(data, (patches.len(), 3, size, size), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Row-major offsets of every full `patch x patch` window at the given stride.
pub fn tile_grid(height: usize, width: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    if patch > height || patch > width {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} exceeds tile dimensions {height}x{width}"
        )));
    }
    let rows = (height - patch) / stride + 1;
    let cols = (width - patch) / stride + 1;
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect())
}

/// Number of grid offsets without materialising them.
pub fn patch_count(height: usize, width: usize, patch: usize, stride: usize) -> Result<usize> {
    if stride == 0 || patch == 0 || patch > height || patch > width {
        return tile_grid(height, width, patch, stride).map(|g| g.len());
    }
    Ok(((height - patch) / stride + 1) * ((width - patch) / stride + 1))
}

/// Cut a tile into 8-bit patches, label cropped with the same window.
pub fn crop_tile_raw(tile: &RawTile, patch: usize, stride: usize) -> Result<Vec<RawPatch>> {
    tile.validate()?;
    let grid = tile_grid(tile.height, tile.width, patch, stride)?;
    let plane = tile.height * tile.width;
    let mut out = Vec::with_capacity(grid.len());
    for (row, col) in grid {
        let mut pixels = Vec::with_capacity(3 * patch * patch);
        for c in 0..3 {
            for y in row..row + patch {
                let start = c * plane + y * tile.width + col;
                pixels.extend_from_slice(&tile.pixels[start..start + patch]);
            }
        }
        let label = tile.label.as_ref().map(|l| {
            let mut v = Vec::with_capacity(patch * patch);
            for y in row..row + patch {
                let start = y * tile.width + col;
                v.extend_from_slice(&l[start..start + patch]);
            }
            v
        });
        out.push(RawPatch {
            pixels,
            size: patch,
            label,
            origin: PatchOrigin {
                tile_id: tile.tile_id.clone(),
                row,
                col,
            },
        });
    }
    Ok(out)
}

/// Cut and normalise; labelled tiles give [`Patch::Labeled`].
pub fn crop_tile(
    tile: &RawTile,
    patch: usize,
    stride: usize,
    norm: &Normalization,
    dtype: DType,
) -> Result<Vec<Patch>> {
    crop_tile_raw(tile, patch, stride)?
        .into_iter()
        .map(|raw| {
            let image = norm.batch(&[&raw], dtype)?.squeeze(0)?;
            Ok(match &raw.label {
                Some(l) => Patch::Labeled(LabeledPatch {
                    image,
                    label: Tensor::from_vec(
                        l.iter().map(|&v| v as u32).collect::<Vec<_>>(),
                        (patch, patch),
                        &Device::Cpu,
                    )?,
                    origin: raw.origin,
                }),
                None => Patch::Unlabeled(UnlabeledPatch {
                    image,
                    origin: raw.origin,
                }),
            })
        })
        .collect()
}
