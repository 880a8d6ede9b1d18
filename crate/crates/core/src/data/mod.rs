//! Images, the synthetic identity benchmark, dataset manifests and the
//! identity-balanced batch sampler.

mod image;
mod manifest;
mod sampler;
mod synth;

pub use image::{image_level_rotate, pad_crop, random_erasing, RgbImage, RotateMode};
pub use manifest::{DatasetManifest, ManifestRecord, Split};
pub use sampler::{PkBatch, PkSampler};
pub use synth::{channel_stats, synth_generate, SynthDataset, SynthSpec};
