use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::IGNORE_INDEX;

/// Class index to RGB colour. Serialised with string keys in index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub BTreeMap<u32, [u8; 3]>);

impl Palette {
    pub fn new(colors: impl IntoIterator<Item = (u32, [u8; 3])>) -> Result<Self> {
        let map: BTreeMap<u32, [u8; 3]> = colors.into_iter().collect();
        let mut seen = HashMap::new();
        for (&k, &c) in &map {
            if k >= IGNORE_INDEX {
                return Err(Error::InvalidArgument(format!(
                    "class index {k} collides with the ignore index"
                )));
            }
            if let Some(prev) = seen.insert(c, k) {
                return Err(Error::InvalidArgument(format!(
                    "classes {prev} and {k} share colour {c:?}"
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn color(&self, class: u32) -> Option<[u8; 3]> {
        self.0.get(&class).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLabel {
    /// `[H, W]` class ids.
    pub indices: Vec<u8>,
    /// Pixels whose colour is not in the palette (now `IGNORE_INDEX`).
    pub unknown_pixels: usize,
}

/// Map a channel-first RGB label image `[3, H, W]` to class ids. Unknown
/// colours become the ignore index and are counted.
pub fn encode_label(rgb: &[u8], height: usize, width: usize, palette: &Palette) -> Result<EncodedLabel> {
    let plane = height * width;
    if rgb.len() != 3 * plane {
        return Err(Error::Shape(format!(
            "{} values for a 3x{height}x{width} label image",
            rgb.len()
        )));
    }
    let lookup: HashMap<[u8; 3], u8> = palette.0.iter().map(|(&k, &c)| (c, k as u8)).collect();
    let mut unknown = 0;
    let indices = (0..plane)
        .map(|i| {
            let c = [rgb[i], rgb[plane + i], rgb[2 * plane + i]];
            lookup.get(&c).copied().unwrap_or_else(|| {
                unknown += 1;
                IGNORE_INDEX as u8
            })
        })
        .collect();
    if unknown > 0 {
        log::warn!("{unknown} label pixels have colours outside the palette; marked as ignored");
    }
    Ok(EncodedLabel {
        indices,
        unknown_pixels: unknown,
    })
}

/// Inverse of [`encode_label`] on palette classes; ignored or unknown ids
/// become black.
pub fn decode_label(indices: &[u8], palette: &Palette) -> Vec<u8> {
    let plane = indices.len();
    let mut rgb = vec![0u8; 3 * plane];
    for (i, &k) in indices.iter().enumerate() {
        if let Some(c) = palette.color(k as u32) {
            for ch in 0..3 {
                rgb[ch * plane + i] = c[ch];
            }
        }
    }
    rgb
}
