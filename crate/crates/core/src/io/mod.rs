//! File formats: checkpoints, PPM images and dataset manifests.

pub mod checkpoint;
pub mod manifests;
pub mod ppm;
