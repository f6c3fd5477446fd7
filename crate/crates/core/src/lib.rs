//! Neural implicit surface reconstruction from posed photo collections.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`geometry`]: vectors, rays, the sparse voxel envelope built from SfM
//!   points and the octree that backs the SDF cache.
//! * [`scene_io`]: COLMAP text ingestion, PNG images and masks, PLY files and
//!   the JSON scene configuration.
//! * [`field`]: the geometry and color MLPs with per-image appearance
//!   embeddings, analytic input gradients and parameter gradients.
//! * [`sampling`]: sphere, voxel-guided, surface-guided, importance and hybrid
//!   ray sampling, plus ray pruning and the SDF cache.
//! * [`renderer`]: SDF-to-opacity conversion and compositing.
//! * [`trainer`]: losses, ray batches, the bootstrap-then-hybrid schedule and
//!   checkpoints.
//! * [`meshing`]: marching cubes restricted to the voxel envelope.
//! * [`bench`]: ICP alignment, visibility filtering and the thresholded
//!   precision / recall / F1 protocol with AUC.
//! * [`synth`]: analytic test scenes written in the same on-disk layout as a
//!   real capture.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod exec;
pub mod field;
pub mod geometry;
pub mod meshing;
pub mod renderer;
pub mod sampling;
pub mod scene_io;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{Aabb, Ray, Vec3};
