//! Filesystem and orchestration layer for the weakseg pipeline: config
//! loading with presets and overrides, CSV manifests, PNG image/mask/saliency
//! IO, binary checkpoints, overlay panels and the stage runners themselves.
//! All numerics live in `weakseg-core`; this crate only moves bytes and
//! wires stages together.

pub mod checkpoint;
pub mod config;
pub mod imageio;
pub mod manifest;
pub mod overlay;
pub mod stages;
pub mod store;
