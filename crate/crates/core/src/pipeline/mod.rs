//! Slide preprocessing: threshold, mask, patch, embed, and the bag/manifest
//! formats that feed training.

pub mod bagfile;
pub mod embed;
pub mod manifest;
pub mod otsu;
pub mod slide;

pub use bagfile::{read_bag, write_bag, BAG_MAGIC, BAG_VERSION};
pub use embed::{embed_bag, Embedder, StubEmbedder};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use otsu::{otsu_threshold, HIST_BINS};
pub use slide::{extract_patches, foreground_mask, gray_to_rgb, ForegroundMask, Patch, SlideImage, SlideMode};
