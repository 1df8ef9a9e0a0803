//! Kernel-independent fast multipole method (KIFMM) for the 3D Laplace kernel.
//!
//! The engine is organised as a set of array-oriented modules driven by a
//! single orchestrator, [`Fmm`]:
//!
//! - [`morton`]: 64-bit node identifiers for the linear octree.
//! - [`tree`]: adaptive, 2:1-balanced linear octree built from a point cloud.
//! - [`lists`]: the U, V, W and X interaction lists.
//! - [`kernel`]: Laplace Green's function and the direct particle-to-particle operator.
//! - [`surface`]: check and equivalent surface grids.
//! - [`operators`]: precomputed operator matrices and the eight FMM operators.
//! - [`persistence`]: on-disk operator cache and the binary particle format.
//! - [`generators`]: synthetic point clouds.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the common double-precision choice.

pub mod error;
pub mod fmm;
pub mod generators;
pub mod kernel;
pub mod linalg;
pub mod lists;
pub mod morton;
pub mod operators;
pub mod persistence;
pub mod scalar;
pub mod surface;
pub mod tree;

pub use error::{FmmError, Result};
pub use fmm::{direct, relative_error, run, CallCounters, Fmm, FmmConfig, FmmOutput, Timings};
pub use generators::{sample, Distribution, DistributionKind};
pub use lists::{InteractionLists, ListStats, SizeStats};
pub use morton::{Domain, MortonKey, MAX_LEVEL};
pub use operators::{Expansions, OperatorCache};
pub use scalar::Scalar;
pub use surface::SurfaceGrid;
pub use tree::{LinearTree, ParticleSet};

/// Double-precision FMM, the configuration used for all reported experiments.
pub type Fmm64 = Fmm<f64>;
/// Single-precision FMM.
pub type Fmm32 = Fmm<f32>;
pub type ParticleSet64 = ParticleSet<f64>;
pub type ParticleSet32 = ParticleSet<f32>;
pub type LinearTree64 = LinearTree<f64>;
pub type Domain64 = Domain<f64>;
pub type OperatorCache64 = OperatorCache<f64>;
pub type OperatorCache32 = OperatorCache<f32>;
