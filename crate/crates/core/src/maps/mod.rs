//! Iteration maps `f_theta(x; y, Phi)` whose fixed points are
//! reconstructions, plus the classical PnP-GAP and PnP-ADMM baselines.

mod baselines;
mod degap;
mod dernn;

pub use baselines::{
    pnp_admm_solve, pnp_admm_step, pnp_gap_solve, AdmmState, PnpGapConfig,
};
pub use degap::{de_gap_apply, DeGapMap};
pub use dernn::{
    de_rnn_apply, read_cell_checkpoint, write_cell_checkpoint, CellKind, DeRnnMap,
    RecurrentCellParams,
};

use crate::cube::VideoCube;
use crate::error::{Error, Result};

/// A shape-preserving map on video cubes.
pub trait IterationMap {
    /// `[frames, height, width]` of the cubes this map acts on.
    fn shape(&self) -> [usize; 3];

    fn apply(&self, x: &VideoCube) -> Result<VideoCube>;

    /// Evaluates the map at `x` and keeps what is needed for
    /// vector-Jacobian products there.
    fn linearize(&self, _x: &VideoCube) -> Result<Box<dyn MapLinearization + '_>> {
        Err(Error::Unsupported("map has no vector-Jacobian product".into()))
    }
}

/// A map evaluated at a fixed point `x`.
pub trait MapLinearization {
    /// `f(x)`.
    fn output(&self) -> &VideoCube;

    /// `(df/dx)^T v`.
    fn vjp_input(&self, v: &VideoCube) -> Result<VideoCube>;

    /// `(df/dtheta)^T v`.
    fn vjp_params(&self, v: &VideoCube) -> Result<Vec<f64>>;
}

/// Wraps a closure as an [`IterationMap`] without derivatives.
pub struct FnMap<F> {
    shape: [usize; 3],
    f: F,
}

impl<F> FnMap<F>
where
    F: Fn(&VideoCube) -> Result<VideoCube>,
{
    pub fn new(shape: [usize; 3], f: F) -> Self {
        Self { shape, f }
    }
}

impl<F> IterationMap for FnMap<F>
where
    F: Fn(&VideoCube) -> Result<VideoCube>,
{
    fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn apply(&self, x: &VideoCube) -> Result<VideoCube> {
        (self.f)(x)
    }
}

pub(crate) fn check_shape(shape: [usize; 3], x: &VideoCube) -> Result<()> {
    if x.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            found: x.shape().to_vec(),
        });
    }
    Ok(())
}
