//! Dataset ingestion: PNG storage, manifests, four-patch stitching, split
//! sizing and the synthetic corpus generator.

mod image_io;
mod manifest;
mod split;
mod stitch;
mod synthetic;

pub use image_io::{overlay, quantize, read_mask, read_patch, write_mask, write_patch};
pub use manifest::{load_sample, Manifest, ManifestDataset, ManifestRow, DATA_ROOT_ENV, MANIFEST_HEADER};
pub use split::{assign_splits, split_counts};
pub use stitch::{crop_mask_quadrants, crop_quadrants, stitch4, stitch4_masks, STITCH_PATCH_SIDE};
pub use synthetic::{background_patch, gen_synthetic, generate, rasterize, samples_in, Shape, SyntheticItem, SyntheticSpec};
