//! Dense panoptic mapping: per-entity TSDF submaps with voxel-level panoptic
//! label fusion, inter-submap exclusivity management, mean-field label
//! refinement, meshing, and evaluation.
//!
//! Data flow: labeled frames → segments → submap association → bundled
//! ray-tracing integration → (on inactivity) overlap resolution + voxel
//! reassignment → CRF label refinement → meshing / metrics.

pub mod audit;
pub mod block;
pub mod config;
pub mod crf;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod integrator;
pub mod layer;
pub mod manager;
pub mod math;
pub mod mc_tables;
pub mod mesher;
pub mod pipeline;
pub mod ply;
pub mod submap;
pub mod synth;
pub mod tracker;
pub mod voxel;

pub use error::{Error, ErrorCategory, Result};
