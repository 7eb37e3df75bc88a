//! Hand-tuned plug-and-play baselines: PnP-GAP with a TV denoiser whose
//! strength follows a schedule, and PnP-ADMM with a fixed denoiser.

use crate::cube::VideoCube;
use crate::denoise::{tv_denoise, Denoiser};
use crate::error::{Error, Result};
use crate::fixed_point::{run_steps, FixedPointConfig, Probe, SolveResult};
use crate::sensing::{self, Measurement, SensingMask};

#[derive(Debug, Clone, PartialEq)]
pub struct PnpGapConfig {
    /// TV weight per iteration, cycled when shorter than the iteration count.
    pub schedule: Vec<f64>,
    pub tv_iters: usize,
    pub iterations: usize,
}

impl PnpGapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::invalid("pnp-gap schedule must have at least one entry"));
        }
        if let Some(bad) = self.schedule.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("pnp-gap schedule entries must be >= 0, got {bad}")));
        }
        if self.tv_iters == 0 || self.iterations == 0 {
            return Err(Error::invalid("pnp-gap iteration counts must be >= 1"));
        }
        Ok(())
    }
}

/// Starting from `init_estimate`, alternates `x = gap_project(v)` and
/// `v = tv_denoise(x, lambda_k)` for exactly `iterations` steps.
pub fn pnp_gap_solve(
    mask: &SensingMask,
    y: &Measurement,
    gap: &PnpGapConfig,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult> {
    gap.validate()?;
    let x0 = sensing::init_estimate(mask, y)?;
    run_steps(
        |k, v| {
            let lambda = gap.schedule[(k - 1) % gap.schedule.len()];
            let x = sensing::gap_project(mask, y, v)?;
            if lambda == 0.0 {
                Ok(x)
            } else {
                tv_denoise(&x, lambda, gap.tv_iters)
            }
        },
        x0,
        gap.iterations,
        cfg,
        probe,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: VideoCube,
    pub v: VideoCube,
    pub u: VideoCube,
    pub rho: f64,
}

impl AdmmState {
    /// `x = v = x0`, `u = 0`.
    pub fn new(x0: VideoCube, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be > 0, got {rho}")));
        }
        Ok(Self {
            u: VideoCube::zeros_like(&x0),
            v: x0.clone(),
            x: x0,
            rho,
        })
    }
}

/// One PnP-ADMM sweep:
///
/// ```text
/// x <- argmin 1/2 ||y - Phi x||^2 + rho/2 ||x - (v - u/rho)||^2
/// v <- D(x + u/rho)
/// u <- u + rho (x - v)
/// ```
pub fn pnp_admm_step(
    state: &AdmmState,
    mask: &SensingMask,
    y: &Measurement,
    denoiser: &Denoiser,
) -> Result<AdmmState> {
    let rho = state.rho;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be > 0, got {rho}")));
    }
    state.x.ensure_same_shape(&state.v)?;
    state.x.ensure_same_shape(&state.u)?;
    let mut z = state.v.clone();
    z.axpy(-1.0 / rho, &state.u);
    let x = sensing::admm_data_step(mask, y, &z, rho)?;
    drop(z);
    let mut shifted = x.clone();
    shifted.axpy(1.0 / rho, &state.u);
    let v = denoiser.denoise(&shifted)?;
    drop(shifted);
    let mut u = state.u.clone();
    for ((u, xv), vv) in u.as_slice_mut().iter_mut().zip(x.as_slice()).zip(v.as_slice()) {
        *u += rho * (xv - vv);
    }
    Ok(AdmmState { x, v, u, rho })
}

/// Runs `iterations` ADMM sweeps from `init_estimate`, tracing `v`.
pub fn pnp_admm_solve(
    mask: &SensingMask,
    y: &Measurement,
    denoiser: &Denoiser,
    rho: f64,
    iterations: usize,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult> {
    let x0 = sensing::init_estimate(mask, y)?;
    let mut state = AdmmState::new(x0.clone(), rho)?;
    run_steps(
        |_, _| {
            state = pnp_admm_step(&state, mask, y, denoiser)?;
            Ok(state.v.clone())
        },
        x0,
        iterations,
        cfg,
        probe,
    )
}
