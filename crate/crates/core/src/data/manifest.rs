use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::label::{encode_label, Palette};
use super::tile::{crop_tile_raw, Domain, Normalization, PatchOrigin, RawPatch, RawTile};
use super::IGNORE_INDEX;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Whether a dataset's labels may be used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelUse {
    Train,
    /// Labels exist but only evaluation may read them.
    EvalOnly,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub tile_id: String,
    pub row: usize,
    pub col: usize,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub label: Option<String>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub domain: Domain,
    pub class_names: Vec<String>,
    pub palette: Palette,
    pub patch_size: usize,
    pub stride: usize,
    pub ignore_index: u32,
    pub normalization: Normalization,
    pub labels: LabelUse,
    pub patches: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `<root>/meta.json`: class names, palette and split lists of tile ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub class_names: Vec<String>,
    pub palette: Palette,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl SceneMeta {
    fn split_of(&self, tile_id: &str) -> Option<String> {
        self.splits
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == tile_id))
            .map(|(name, _)| name.clone())
    }
}

/// A manifest with its patches held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub patches: Vec<RawPatch>,
}

fn patch_id(origin: &PatchOrigin) -> String {
    format!("{}_r{}_c{}", origin.tile_id, origin.row, origin.col)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut chw = vec![0u8; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            chw[c * plane + i] = px.0[c];
        }
    }
    Ok((chw, h, w))
}

fn write_rgb(path: &Path, chw: &[u8], h: usize, w: usize) -> Result<()> {
    let plane = h * w;
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([chw[i], chw[plane + i], chw[2 * plane + i]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_gray(path: &Path, values: &[u8], h: usize, w: usize) -> Result<()> {
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, values.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} values for a {h}x{w} map", values.len())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_gray(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

impl Dataset {
    /// Crop every tile, in the given order, into one dataset.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tiles(
        tiles: &[RawTile],
        patch_size: usize,
        stride: usize,
        domain: Domain,
        class_names: Vec<String>,
        palette: Palette,
        labels: LabelUse,
        splits: Option<&SceneMeta>,
    ) -> Result<Self> {
        let mut patches = Vec::new();
        let mut records = Vec::new();
        for tile in tiles {
            for p in crop_tile_raw(tile, patch_size, stride)? {
                let id = patch_id(&p.origin);
                records.push(PatchRecord {
                    image: format!("images/{id}.png"),
                    label: p.label.as_ref().map(|_| format!("labels/{id}.png")),
                    split: splits.and_then(|m| m.split_of(&tile.tile_id)),
                    tile_id: tile.tile_id.clone(),
                    row: p.origin.row,
                    col: p.origin.col,
                    id,
                });
                patches.push(p);
            }
        }
        let has_labels = patches.iter().any(|p| p.label.is_some());
        Ok(Self {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                domain,
                class_names,
                palette,
                patch_size,
                stride,
                ignore_index: IGNORE_INDEX,
                normalization: Normalization::default(),
                labels: if has_labels { labels } else { LabelUse::Absent },
                patches: records,
            },
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.patches.is_empty() && self.patches.iter().all(|p| p.label.is_some())
    }

    /// Patches whose tile belongs to `split`.
    pub fn split(&self, name: &str) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.manifest.patches[i].split.as_deref() == Some(name))
            .collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.patches = indices.iter().map(|&i| self.manifest.patches[i].clone()).collect();
        Self {
            manifest,
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
        }
    }

    /// `[B, 3, P, P]` normalised images.
    pub fn images(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let refs: Vec<&RawPatch> = indices.iter().map(|&i| &self.patches[i]).collect();
        self.manifest.normalization.batch(&refs, dtype)
    }

    /// `[B, P, P]` u32 class ids.
    pub fn labels(&self, indices: &[usize]) -> Result<Tensor> {
        let p = self.manifest.patch_size;
        let mut data = Vec::with_capacity(indices.len() * p * p);
        for &i in indices {
            let label = self.patches[i].label.as_ref().ok_or_else(|| {
                Error::Data(format!("patch {} has no label", self.manifest.patches[i].id))
            })?;
            data.extend(label.iter().map(|&v| v as u32));
        }
        Ok(Tensor::from_vec(data, (indices.len(), p, p), &Device::Cpu)?)
    }

    /// Write `manifest.json`, `images/*.png` (RGB) and `labels/*.png`
    /// (class ids as 8-bit grey).
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let p = self.manifest.patch_size;
        for (rec, patch) in self.manifest.patches.iter().zip(&self.patches) {
            write_rgb(&dir.join(&rec.image), &patch.pixels, p, p)?;
            if let (Some(path), Some(label)) = (&rec.label, &patch.label) {
                write_gray(&dir.join(path), label, p, p)?;
            }
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let p = manifest.patch_size;
        let mut patches = Vec::with_capacity(manifest.patches.len());
        for rec in &manifest.patches {
            let img_path = dir.join(&rec.image);
            let (pixels, h, w) = read_rgb(&img_path)?;
            if (h, w) != (p, p) {
                return Err(Error::Data(format!(
                    "{}: patch is {h}x{w}, manifest says {p}x{p}",
                    img_path.display()
                )));
            }
            let label = match &rec.label {
                Some(path) => {
                    let path = dir.join(path);
                    let (v, h, w) = read_gray(&path)?;
                    if (h, w) != (p, p) {
                        return Err(Error::Data(format!(
                            "{}: label is {h}x{w}, manifest says {p}x{p}",
                            path.display()
                        )));
                    }
                    Some(v)
                }
                None => None,
            };
            patches.push(RawPatch {
                pixels,
                size: p,
                label,
                origin: PatchOrigin {
                    tile_id: rec.tile_id.clone(),
                    row: rec.row,
                    col: rec.col,
                },
            });
        }
        Ok(Self { manifest, patches })
    }
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Read `<root>/meta.json`, every `<root>/images/*.{png,tif,tiff}` (sorted
/// by file name) and the colour-coded `<root>/labels/<stem>.png` where
/// present. `palette` overrides the one in `meta.json`.
pub fn scan_directory(root: &Path, domain: Domain, palette: Option<Palette>) -> Result<(Vec<RawTile>, SceneMeta)> {
    let mut meta: SceneMeta = read_json(&root.join("meta.json"))?;
    if let Some(p) = palette {
        meta.palette = p;
    }
    let image_dir = root.join("images");
    let images = if image_dir.is_dir() {
        sorted_files(&image_dir, &["png", "tif", "tiff"])?
    } else {
        Vec::new()
    };
    if images.is_empty() {
        return Err(Error::Data(format!("no tiles found in {}", image_dir.display())));
    }
    let mut tiles = Vec::with_capacity(images.len());
    let mut unknown = 0;
    for path in images {
        let tile_id = stem(&path);
        let (pixels, height, width) = read_rgb(&path)?;
        let label_path = root.join("labels").join(format!("{tile_id}.png"));
        let label = if label_path.is_file() {
            let (rgb, h, w) = read_rgb(&label_path)?;
            if (h, w) != (height, width) {
                return Err(Error::Data(format!(
                    "{}: label is {h}x{w} but image {} is {height}x{width}",
                    label_path.display(),
                    path.display()
                )));
            }
            let enc = encode_label(&rgb, h, w, &meta.palette)?;
            unknown += enc.unknown_pixels;
            Some(enc.indices)
        } else {
            None
        };
        tiles.push(RawTile {
            pixels,
            height,
            width,
            label,
            tile_id,
            domain,
        });
    }
    if unknown > 0 {
        log::warn!("{unknown} label pixels in {} were off-palette", root.display());
    }
    Ok((tiles, meta))
}

/// Scan, crop and (optionally) write a patch dataset.
pub fn tile_directory(
    root: &Path,
    patch_size: usize,
    stride: usize,
    domain: Domain,
    palette: Option<Palette>,
) -> Result<Dataset> {
    let (tiles, meta) = scan_directory(root, domain, palette)?;
    for t in &tiles {
        if patch_size > t.height || patch_size > t.width {
            return Err(Error::Data(format!(
                "tile {} is {}x{}, smaller than the {patch_size}px patch",
                t.tile_id, t.height, t.width
            )));
        }
    }
    let label_use = match domain {
        Domain::Source => LabelUse::Train,
        Domain::Target => LabelUse::EvalOnly,
    };
    Dataset::from_tiles(
        &tiles,
        patch_size,
        stride,
        domain,
        meta.class_names.clone(),
        meta.palette.clone(),
        label_use,
        Some(&meta),
    )
}
