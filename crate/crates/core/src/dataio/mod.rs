//! Images, manifests, dataset splits and the synthetic tip generator.

pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use image::GrayImage;
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, Sample, Split, TipLabels};
pub use split::{assign_splits, split, split_sizes};
pub use synth::{generate_synthetic, render_tip, write_dataset, SynthSpec, TipGeometry};
