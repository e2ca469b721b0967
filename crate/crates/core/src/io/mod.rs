//! Serialization of clouds, images, datasets and run manifests.

pub mod dataset;
pub mod manifest;
pub mod ply;
pub mod ppm;

pub use dataset::{read_dataset, write_dataset, CameraRecord, Dataset, StateData};
pub use manifest::{fingerprint_hex, replay, RunManifest};
pub use ply::{read_ply, write_ply};
pub use ppm::{read_ppm, write_ppm};
