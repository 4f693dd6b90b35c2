//! Tiles, patches, labels and datasets.
//!
//! Large tiles are cut into square patches on a regular grid; trailing
//! pixels past the last full patch are dropped. Pixels stay 8-bit inside a
//! [`Dataset`] and are normalised per channel as `(v / 255 - mean) / std`
//! when a batch is assembled.

mod label;
mod manifest;
mod synth;
mod tile;

pub use label::{decode_label, encode_label, EncodedLabel, Palette};
pub use manifest::{
    scan_directory, tile_directory, Dataset, DatasetManifest, LabelUse, PatchRecord, SceneMeta,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use synth::{synth_dataset, ShiftSpec, SynthParams, SYNTH_CLASS_NAMES};
pub use tile::{
    crop_tile, crop_tile_raw, patch_count, tile_grid, Domain, LabeledPatch, Normalization, Patch,
    PatchOrigin, RawPatch, RawTile, UnlabeledPatch,
};

/// Label value excluded from every loss and metric.
pub const IGNORE_INDEX: u32 = 255;
