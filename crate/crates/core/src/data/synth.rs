use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::label::Palette;
use super::manifest::{Dataset, LabelUse};
use super::tile::{Domain, RawTile};

pub const SYNTH_CLASS_NAMES: [&str; 6] = [
    "impervious_surface",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
];

/// Mean colour per class. Every channel is either high or low, so a channel
/// permutation maps most class colours onto another class's colour.
const CLASS_COLORS: [[u8; 3]; 6] = [
    [200, 60, 60],
    [60, 200, 60],
    [60, 60, 200],
    [200, 200, 60],
    [60, 200, 200],
    [200, 60, 200],
];

/// Distinct palette used for label images (not the scene colours).
const LABEL_COLORS: [[u8; 3]; 6] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Domain shift applied to source scenes to produce the target domain:
/// a channel permutation (sensor band order) and a zoom factor (ground
/// sampling distance). `target[c] = source[permutation[c]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub permutation: [usize; 3],
    pub scale: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            permutation: [0, 1, 2],
            scale: 1.0,
        }
    }

    pub fn permute(permutation: [usize; 3]) -> Self {
        Self {
            permutation,
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.permutation == [0, 1, 2] && self.scale == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &c in &self.permutation {
            if c > 2 || seen[c] {
                return Err(Error::InvalidArgument(format!(
                    "{:?} is not a permutation of 0,1,2",
                    self.permutation
                )));
            }
            seen[c] = true;
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "shift scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            return write!(f, "identity");
        }
        let mut parts = Vec::new();
        if self.permutation != [0, 1, 2] {
            let [a, b, c] = self.permutation;
            parts.push(format!("permute:{a},{b},{c}"));
        }
        if self.scale != 1.0 {
            parts.push(format!("scale:{}", self.scale));
        }
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;

    /// `identity`, `permute:2,0,1`, `scale:1.5`, or several joined by `+`.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::identity();
        for part in s.split('+').map(str::trim) {
            let bad = || Error::InvalidArgument(format!("cannot parse shift `{part}`"));
            if part == "identity" {
                continue;
            }
            let (kind, value) = part.split_once(':').ok_or_else(bad)?;
            match kind {
                "permute" => {
                    let idx: Vec<usize> = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    spec.permutation = idx.try_into().map_err(|_| bad())?;
                }
                "scale" => spec.scale = value.trim().parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub tile_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Rectangles placed over the background class per tile (inclusive range).
    pub objects: (usize, usize),
    /// Side-length range of each rectangle, in pixels.
    pub object_size: (usize, usize),
    /// Amplitude of the luminance texture that identifies each class.
    pub texture_amplitude: f64,
    /// Half-width of uniform per-pixel noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            tile_size: 128,
            patch_size: 64,
            stride: 64,
            objects: (10, 16),
            object_size: (10, 36),
            texture_amplitude: 45.0,
            noise: 15.0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size > self.tile_size || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} / stride {} do not fit a {} tile",
                self.patch_size, self.stride, self.tile_size
            )));
        }
        if self.objects.0 > self.objects.1
            || self.object_size.0 == 0
            || self.object_size.0 > self.object_size.1
        {
            return Err(Error::InvalidArgument("empty object count or size range".into()));
        }
        Ok(())
    }
}

/// Luminance pattern in `[-1, 1]` that identifies a class independently of
/// colour.
fn texture(class: u8, y: usize, x: usize, hash: u64) -> f64 {
    let sq = |b: bool| if b { 1.0 } else { -1.0 };
    match class {
        0 => 0.0,
        1 => sq((y / 3) % 2 == 0),
        2 => sq((x / 3) % 2 == 0),
        3 => sq((y / 4 + x / 4) % 2 == 0),
        4 => sq(((x + y) / 3) % 2 == 0),
        _ => sq(hash & 1 == 0),
    }
}

struct Scene {
    size: usize,
    label: Vec<u8>,
    pixels: Vec<u8>,
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize, params: &SynthParams) -> Scene {
    let mut label = vec![0u8; size * size];
    let n = rng.random_range(params.objects.0..=params.objects.1);
    for _ in 0..n {
        let class = rng.random_range(1..SYNTH_CLASS_NAMES.len() as u8);
        let h = rng.random_range(params.object_size.0..=params.object_size.1).min(size);
        let w = rng.random_range(params.object_size.0..=params.object_size.1).min(size);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        for y in y0..y0 + h {
            label[y * size + x0..y * size + x0 + w].fill(class);
        }
    }
    let plane = size * size;
    let mut pixels = vec![0u8; 3 * plane];
    for i in 0..plane {
        let class = label[i];
        let (y, x) = (i / size, i % size);
        let tex = params.texture_amplitude * texture(class, y, x, rng.random::<u64>());
        for c in 0..3 {
            let noise = rng.random_range(-1.0..=1.0) * params.noise;
            let v = CLASS_COLORS[class as usize][c] as f64 + tex + noise;
            pixels[c * plane + i] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Scene { size, label, pixels }
}

/// Crop the scene to `tile` pixels, optionally zoomed by `scale` (nearest
/// neighbour) and channel-permuted.
fn view(scene: &Scene, tile: usize, shift: &ShiftSpec) -> (Vec<u8>, Vec<u8>) {
    let plane = tile * tile;
    let src_plane = scene.size * scene.size;
    let mut pixels = vec![0u8; 3 * plane];
    let mut label = vec![0u8; plane];
    for y in 0..tile {
        let sy = ((y as f64 / shift.scale).floor() as usize).min(scene.size - 1);
        for x in 0..tile {
            let sx = ((x as f64 / shift.scale).floor() as usize).min(scene.size - 1);
            let s = sy * scene.size + sx;
            label[y * tile + x] = scene.label[s];
            for c in 0..3 {
                pixels[c * plane + y * tile + x] = scene.pixels[shift.permutation[c] * src_plane + s];
            }
        }
    }
    (pixels, label)
}

/// Deterministic paired source/target datasets. Both domains show the same
/// scenes; the target ones pass through `shift` and their labels are marked
/// evaluation-only.
pub fn synth_dataset(seed: u64, n_tiles: usize, shift: ShiftSpec, params: &SynthParams) -> Result<(Dataset, Dataset)> {
    if n_tiles == 0 {
        return Err(Error::InvalidArgument("n_tiles must be at least 1".into()));
    }
    shift.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_size = params
        .tile_size
        .max((params.tile_size as f64 / shift.scale).ceil() as usize);
    let mut source = Vec::with_capacity(n_tiles);
    let mut target = Vec::with_capacity(n_tiles);
    for i in 0..n_tiles {
        let scene = render_scene(&mut rng, scene_size, params);
        let tile_id = format!("synth{seed}_{i:03}");
        let (sp, sl) = view(&scene, params.tile_size, &ShiftSpec::identity());
        let (tp, tl) = view(&scene, params.tile_size, &shift);
        source.push(RawTile {
            pixels: sp,
            height: params.tile_size,
            width: params.tile_size,
            label: Some(sl),
            tile_id: tile_id.clone(),
            domain: Domain::Source,
        });
        target.push(RawTile {
            pixels: tp,
            height: params.tile_size,
            width: params.tile_size,
            label: Some(tl),
            tile_id,
            domain: Domain::Target,
        });
    }
    let names: Vec<String> = SYNTH_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let palette = Palette::new(LABEL_COLORS.iter().enumerate().map(|(i, &c)| (i as u32, c)))?;
    let build = |tiles: &[RawTile], domain, labels| {
        Dataset::from_tiles(
            tiles,
            params.patch_size,
            params.stride,
            domain,
            names.clone(),
            palette.clone(),
            labels,
            None,
        )
    };
    Ok((
        build(&source, Domain::Source, LabelUse::Train)?,
        build(&target, Domain::Target, LabelUse::EvalOnly)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_round_trips_through_text() {
        for s in ["identity", "permute:2,0,1", "scale:1.5", "permute:1,0,2+scale:0.5"] {
            let spec: ShiftSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("permute:0,0,1".parse::<ShiftSpec>().is_err());
        assert!("scale:-1".parse::<ShiftSpec>().is_err());
        assert!("rotate:90".parse::<ShiftSpec>().is_err());
    }
}
