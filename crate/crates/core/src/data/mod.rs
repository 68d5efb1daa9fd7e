//! Dataset layouts, image files and the procedural texture corpus.

mod dataset;
mod io;
mod textures;

pub use dataset::{load_dataset, scan_dataset, DatasetManifest, Layout, ManifestEntry, Sample, Split};
pub use io::{read_image, read_mask, write_gray, write_image, write_mask, write_rgb, tensor_to_rgb, ResizePolicy};
pub use textures::{natural_corpus, write_mvtec_layout, ObjectTexture, TextureKind, TextureParams};
