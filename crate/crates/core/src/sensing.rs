//! The snapshot measurement model `y = Phi x + e`.
//!
//! `Phi` is the horizontal concatenation of `B` diagonal matrices, one per
//! mask frame, so `Phi Phi^T` is diagonal with entries `q[i] = sum_b m_b[i]^2`.
//! Every operator here works elementwise on that structure and never forms
//! `Phi` explicitly.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cube::VideoCube;
use crate::error::{Error, Result};

/// Default floor used by [`DeadPixelPolicy::Floor`].
pub const DEFAULT_DEAD_PIXEL_FLOOR: f64 = 1e-6;

/// What to do with pixels no mask frame ever exposes (`q[i] = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeadPixelPolicy {
    /// Refuse to build the mask.
    Reject,
    /// Divide by `max(q[i], tau)` instead of `q[i]`.
    Floor(f64),
}

impl Default for DeadPixelPolicy {
    fn default() -> Self {
        DeadPixelPolicy::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Each entry is 1 with probability `p`, otherwise 0.
    Bernoulli(f64),
    AllOnes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingMask {
    frames: Array3<f64>,
    q_diag: Array2<f64>,
    policy: DeadPixelPolicy,
}

impl SensingMask {
    /// Builds a mask from `[frames, height, width]` modulation values.
    pub fn new(frames: Array3<f64>, policy: DeadPixelPolicy) -> Result<Self> {
        if frames.shape().contains(&0) {
            return Err(Error::invalid(format!(
                "mask dimensions must be >= 1, got {:?}",
                frames.shape()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(if v.is_finite() {
                Error::invalid(format!("mask values must be nonnegative, found {v}"))
            } else {
                Error::NonFinite("mask frames".into())
            });
        }
        if let DeadPixelPolicy::Floor(tau) = policy {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!("dead pixel floor must be > 0, got {tau}")));
            }
        }
        let frames = frames.as_standard_layout().into_owned();
        let q_diag = frames.map_axis(Axis(0), |col| col.iter().map(|m| m * m).sum::<f64>());
        if policy == DeadPixelPolicy::Reject {
            if let Some(((row, col), _)) = q_diag.indexed_iter().find(|(_, q)| **q == 0.0) {
                return Err(Error::DeadPixel { row, col });
            }
        }
        Ok(Self {
            frames,
            q_diag,
            policy,
        })
    }

    pub fn generate(
        seed: u64,
        height: usize,
        width: usize,
        frames: usize,
        kind: MaskKind,
        policy: DeadPixelPolicy,
    ) -> Result<Self> {
        if height == 0 || width == 0 || frames == 0 {
            return Err(Error::invalid("mask dimensions must be >= 1"));
        }
        let data = match kind {
            MaskKind::AllOnes => Array3::ones((frames, height, width)),
            MaskKind::Bernoulli(p) => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::invalid(format!(
                        "bernoulli probability must lie in (0, 1], got {p}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Array3::from_shape_simple_fn((frames, height, width), || {
                    if rng.random_bool(p) {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        };
        Self::new(data, policy)
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn q_diag(&self) -> &Array2<f64> {
        &self.q_diag
    }

    pub fn policy(&self) -> DeadPixelPolicy {
        self.policy
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Number of pixels `n = H * W`.
    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Pixels with `q[i] > 0`.
    pub fn live_pixels(&self) -> usize {
        self.q_diag.iter().filter(|q| **q > 0.0).count()
    }

    /// Divisor applied in place of `q[i]` under the active policy.
    pub fn divisor(&self, q: f64) -> f64 {
        match self.policy {
            DeadPixelPolicy::Reject => q,
            DeadPixelPolicy::Floor(tau) => q.max(tau),
        }
    }

    /// Elementwise `max(q, tau)` (or `q` under the reject policy).
    pub fn divisors(&self) -> Array2<f64> {
        self.q_diag.mapv(|q| self.divisor(q))
    }

    pub fn check_cube(&self, x: &VideoCube) -> Result<()> {
        let expected = self.frames.shape();
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn check_measurement(&self, y: &Measurement) -> Result<()> {
        let expected = [self.height(), self.width()];
        if y.data.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                found: y.data.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub data: Array2<f64>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
}

impl Measurement {
    pub fn noiseless(data: Array2<f64>) -> Self {
        Self {
            data,
            noise_sigma: 0.0,
            seed: None,
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// `y[i] = sum_b m_b[i] x_b[i]`.
pub fn forward(mask: &SensingMask, x: &VideoCube) -> Result<Measurement> {
    mask.check_cube(x)?;
    Ok(Measurement::noiseless(collapse(mask, x)))
}

fn collapse(mask: &SensingMask, x: &VideoCube) -> Array2<f64> {
    let mut y = Array2::zeros((mask.height(), mask.width()));
    for (m, xb) in mask
        .frames
        .axis_iter(Axis(0))
        .zip(x.data().axis_iter(Axis(0)))
    {
        Zip::from(&mut y)
            .and(&m)
            .and(&xb)
            .for_each(|y, &m, &x| *y += m * x);
    }
    y
}

/// `x_b[i] = m_b[i] y[i]`.
pub fn adjoint(mask: &SensingMask, y: &Measurement) -> Result<VideoCube> {
    mask.check_measurement(y)?;
    Ok(spread(mask, &y.data))
}

fn spread(mask: &SensingMask, y: &Array2<f64>) -> VideoCube {
    let mut out = VideoCube::zeros(mask.num_frames(), mask.height(), mask.width());
    for (mut ob, m) in out
        .data_mut()
        .axis_iter_mut(Axis(0))
        .zip(mask.frames.axis_iter(Axis(0)))
    {
        Zip::from(&mut ob)
            .and(&m)
            .and(y)
            .for_each(|o, &m, &y| *o = m * y);
    }
    out
}

/// Canonical starting point `x0 = Phi^T y` for every solver.
pub fn init_estimate(mask: &SensingMask, y: &Measurement) -> Result<VideoCube> {
    adjoint(mask, y)
}

/// Applies `Phi^T Phi` to a cube: `(Phi^T Phi x)_b[i] = m_b[i] sum_c m_c[i] x_c[i]`.
pub fn gram(mask: &SensingMask, x: &VideoCube) -> Result<VideoCube> {
    mask.check_cube(x)?;
    Ok(spread(mask, &collapse(mask, x)))
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma`.
pub fn add_noise(y: &Measurement, sigma: f64, seed: u64) -> Result<Measurement> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut data = y.data.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(Measurement {
        data,
        noise_sigma: sigma,
        seed: Some(seed),
    })
}

/// Euclidean projection onto `{x : Phi x = y}`:
/// `v + Phi^T (Phi Phi^T)^{-1} (y - Phi v)`.
pub fn gap_project(mask: &SensingMask, y: &Measurement, v: &VideoCube) -> Result<VideoCube> {
    mask.check_cube(v)?;
    mask.check_measurement(y)?;
    let mut scaled = &y.data - &collapse(mask, v);
    Zip::from(&mut scaled)
        .and(&mask.q_diag)
        .for_each(|r, &q| *r /= mask.divisor(q));
    let mut out = spread(mask, &scaled);
    out.axpy(1.0, v);
    Ok(out)
}

/// Applies the linear part of [`gap_project`], `I - Phi^T Q^{-1} Phi`.
/// The operator is symmetric, so it is also its own transpose.
pub fn null_project(mask: &SensingMask, v: &VideoCube) -> Result<VideoCube> {
    mask.check_cube(v)?;
    let mut scaled = collapse(mask, v);
    Zip::from(&mut scaled)
        .and(&mask.q_diag)
        .for_each(|r, &q| *r = -*r / mask.divisor(q));
    let mut out = spread(mask, &scaled);
    out.axpy(1.0, v);
    Ok(out)
}

/// Closed-form ADMM data step: `z + Phi^T (rho I + Q)^{-1} (y - Phi z)`, which
/// minimizes `1/2 ||y - Phi x||^2 + rho/2 ||x - z||^2`.
pub fn admm_data_step(
    mask: &SensingMask,
    y: &Measurement,
    z: &VideoCube,
    rho: f64,
) -> Result<VideoCube> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be > 0, got {rho}")));
    }
    mask.check_cube(z)?;
    mask.check_measurement(y)?;
    let mut scaled = &y.data - &collapse(mask, z);
    Zip::from(&mut scaled)
        .and(&mask.q_diag)
        .for_each(|r, &q| *r /= rho + q);
    let mut out = spread(mask, &scaled);
    out.axpy(1.0, z);
    Ok(out)
}
