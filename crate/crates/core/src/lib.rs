//! Pixel super-resolution from the joint probability distribution (JPD) of
//! spatially entangled photon pairs.

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the maths
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod frames;
pub mod holography;
pub mod image;
pub mod jpd;
pub mod optics;
pub mod superres;

pub use error::{Error, Result};
pub use frames::{Dtype, FrameSource, FrameStack};
pub use image::{Grid, Image};
pub use jpd::{
    accumulate_jpd, DiagonalKind, EntryState, EstimatorConfig, Geometry, Jpd, JpdAccumulator, Mode,
    Plane, ProjectionKind, Unmeasurable,
};
pub use optics::{CameraKind, CameraModel, Scene, Simulation};
pub use superres::{super_resolve_jpd, SuperResConfig};
