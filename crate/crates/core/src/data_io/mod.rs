//! Dataset records, on-disk formats and the synthetic fingerprint source.

mod image;
mod manifest;
mod minutiae;
pub mod synth;

pub use self::image::{load_image, save_image, FingerprintImage, Liveness};
pub use self::manifest::{
    assign_splits, load_manifest, write_manifest, DatasetManifest, ManifestRecord, Split,
};
pub use self::minutiae::{normalize_angle, parse_minutiae, read_minutiae, write_minutiae, Minutia};
pub use self::synth::{synth_generate, RigidTransform, SynthParams};
