//! Mesh-anchored neural radiance fields for head avatars.
//!
//! The crate implements a complete desk-scale avatar pipeline:
//!
//! * a toy morphable head model with an expression basis ([`mesh`]),
//! * UV-space displacement maps rasterized from posed meshes ([`uv`]),
//! * convolutional feature generators producing per-vertex feature anchors
//!   ([`features`]),
//! * a radiance field that aggregates anchored features at query points and
//!   renders by emission-absorption compositing ([`field`]),
//! * a tape-based reverse-mode autodiff engine with a closed op vocabulary
//!   and a finite-difference oracle ([`diff`]),
//! * a synthetic multi-view, multi-expression corpus generator ([`synth`]),
//! * auto-decoder prior training over that corpus ([`train`]), and
//! * few-shot adaptation to unseen subjects with differentiable fitting
//!   corrections ([`adapt`]).
//!
//! Everything is `f64`, seeded, and single-binary friendly: no GPU, no
//! external ML runtime.

pub mod adapt;
pub mod camera;
pub mod checkpoint;
pub mod diff;
pub mod config;
pub mod error;
pub mod features;
pub mod field;
pub mod imageio;
pub mod knn;
pub mod mesh;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod metrics;
pub mod uv;

pub use error::{Error, Result};
