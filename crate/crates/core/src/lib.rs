//! Deep-equilibrium reconstruction for single-shot video compressive sensing.
//!
//! A video cube `x` of `B` frames is coded by per-frame masks and summed
//! into one snapshot `y = Phi x`. Reconstruction looks for a fixed point of a
//! map built from the measurement operators and a learned denoiser, solved
//! by Picard or Anderson iteration and trained by implicit differentiation.

pub mod analysis;
pub mod bench;
pub mod cube;
pub mod denoise;
pub mod error;
pub mod fixed_point;
pub mod kv;
pub mod maps;
pub mod metrics;
pub mod scene;
pub mod sensing;
pub mod tensor_io;
pub mod train;

pub use cube::VideoCube;
pub use denoise::Denoiser;
pub use error::{Error, Result};
pub use fixed_point::{FixedPointConfig, IterationTrace, SolveResult, SolverKind};
pub use sensing::{DeadPixelPolicy, Measurement, SensingMask};
