//! Implicit differentiation through fixed points, and an SGD training loop.
//!
//! For a reconstruction `x_hat = f(x_hat)` and loss `l(x_hat)`, the
//! parameter gradient is `(df/dtheta)^T a` where `a` solves the adjoint
//! fixed-point equation `a = (df/dx)^T a + dl/dx_hat`. No forward iterates
//! are stored, so memory does not grow with the forward iteration count.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cube::VideoCube;
use crate::denoise::Denoiser;
use crate::error::{Error, Result};
use crate::fixed_point::{self, FixedPointConfig, SolveResult, SolverKind};
use crate::maps::{DeGapMap, DeRnnMap, IterationMap, RecurrentCellParams};
use crate::metrics;
use crate::sensing::{self, Measurement, SensingMask};

/// `1/2 ||x_hat - x_star||^2`.
pub fn mse_loss(x_hat: &VideoCube, x_star: &VideoCube) -> Result<f64> {
    x_hat.ensure_same_shape(x_star)?;
    Ok(0.5
        * x_hat
            .as_slice()
            .iter()
            .zip(x_star.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// Solves `a = J^T a + g` with the fixed-point engine, where `vjp` applies
/// `J^T`.
///
/// Iteration starts from `g`, which is the first iterate from `a = 0`; a
/// zero Jacobian therefore converges on the first evaluation.
pub fn backward_fixed_point<F>(
    mut vjp: F,
    g: &VideoCube,
    cfg: &FixedPointConfig,
    solver: SolverKind,
) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    g.check_finite("backward right-hand side")?;
    fixed_point::solve(
        solver,
        |a| {
            let mut next = vjp(a)?;
            next.axpy(1.0, g);
            Ok(next)
        },
        g.clone(),
        cfg,
        None,
    )
}

/// `sum_{p=0..P} (J^T)^p g`.
pub fn neumann_backward<F>(mut vjp: F, g: &VideoCube, terms: usize) -> Result<VideoCube>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    let mut sum = g.clone();
    let mut term = g.clone();
    for _ in 0..terms {
        term = vjp(&term)?;
        sum.axpy(1.0, &term);
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    FixedPoint,
    /// Truncated Neumann series with `P` extra terms.
    Neumann(usize),
}

impl BackwardMode {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "fixed_point" {
            return Some(BackwardMode::FixedPoint);
        }
        let p = s.strip_prefix("neumann(")?.strip_suffix(')')?;
        p.trim().parse().ok().map(BackwardMode::Neumann)
    }

    pub fn name(&self) -> String {
        match self {
            BackwardMode::FixedPoint => "fixed_point".into(),
            BackwardMode::Neumann(p) => format!("neumann({p})"),
        }
    }
}

/// A training example sharing its mask with others.
#[derive(Debug, Clone)]
pub struct Sample {
    pub mask: Arc<SensingMask>,
    pub y: Measurement,
    pub x_star: VideoCube,
}

impl Sample {
    /// Simulates `y = Phi x_star` plus optional Gaussian noise.
    pub fn simulate(mask: Arc<SensingMask>, x_star: VideoCube, noise_sigma: f64, noise_seed: u64) -> Result<Self> {
        let clean = sensing::forward(&mask, &x_star)?;
        let y = if noise_sigma > 0.0 {
            sensing::add_noise(&clean, noise_sigma, noise_seed)?
        } else {
            clean
        };
        Ok(Self { mask, y, x_star })
    }
}

/// A parameterized iteration map family.
pub trait EquilibriumModel {
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, theta: &[f64]) -> Result<()>;

    /// Re-imposes parameter constraints after an update.
    fn normalize(&mut self, _n_iters: usize) {}

    fn map<'a>(&'a self, mask: &'a SensingMask, y: &'a Measurement) -> Result<Box<dyn IterationMap + 'a>>;

    fn initial_estimate(&self, mask: &SensingMask, y: &Measurement) -> Result<VideoCube> {
        sensing::init_estimate(mask, y)
    }
}

/// DE-GAP with a trainable denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DeGapModel {
    pub denoiser: Denoiser,
}

impl EquilibriumModel for DeGapModel {
    fn num_params(&self) -> usize {
        self.denoiser.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.denoiser.params()
    }

    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        self.denoiser.set_params(theta)
    }

    fn normalize(&mut self, n_iters: usize) {
        self.denoiser.spectral_normalize(n_iters);
    }

    fn map<'a>(&'a self, mask: &'a SensingMask, y: &'a Measurement) -> Result<Box<dyn IterationMap + 'a>> {
        Ok(Box::new(DeGapMap::new(&self.denoiser, mask, y)?))
    }
}

/// DE-RNN with a trainable recurrent cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DeRnnModel {
    pub cell: RecurrentCellParams,
}

impl EquilibriumModel for DeRnnModel {
    fn num_params(&self) -> usize {
        self.cell.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.cell.params()
    }

    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        self.cell.set_params(theta)
    }

    fn normalize(&mut self, n_iters: usize) {
        self.cell.spectral_normalize(n_iters);
    }

    fn map<'a>(&'a self, mask: &'a SensingMask, y: &'a Measurement) -> Result<Box<dyn IterationMap + 'a>> {
        Ok(Box::new(DeRnnMap::new(&self.cell, mask, y)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientConfig {
    pub forward: FixedPointConfig,
    pub forward_solver: SolverKind,
    pub backward_mode: BackwardMode,
    pub backward: FixedPointConfig,
    pub backward_solver: SolverKind,
}

impl Default for GradientConfig {
    fn default() -> Self {
        let quiet = FixedPointConfig {
            record_trace: false,
            record_timing: false,
            ..Default::default()
        };
        Self {
            forward: quiet.clone(),
            forward_solver: SolverKind::Anderson,
            backward_mode: BackwardMode::FixedPoint,
            backward: FixedPointConfig {
                tol: 1e-8,
                ..quiet
            },
            backward_solver: SolverKind::Anderson,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub forward_converged: bool,
    pub forward_iterations: usize,
    pub backward_converged: bool,
    pub backward_iterations: usize,
    /// The forward or backward solve stopped before reaching its tolerance.
    pub approximate: bool,
}

/// Forward solve only: the loss of the reconstruction the model produces.
pub fn pipeline_loss<M: EquilibriumModel + ?Sized>(model: &M, sample: &Sample, cfg: &GradientConfig) -> Result<f64> {
    let res = forward_solve(model, sample, &cfg.forward, cfg.forward_solver)?;
    mse_loss(&res.x_hat, &sample.x_star)
}

pub fn forward_solve<M: EquilibriumModel + ?Sized>(
    model: &M,
    sample: &Sample,
    cfg: &FixedPointConfig,
    solver: SolverKind,
) -> Result<SolveResult> {
    let map = model.map(&sample.mask, &sample.y)?;
    let x0 = model.initial_estimate(&sample.mask, &sample.y)?;
    fixed_point::solve(solver, |x| map.apply(x), x0, cfg, None)
}

/// `dl/dtheta` at the model's fixed point for one sample.
pub fn loss_gradient<M: EquilibriumModel + ?Sized>(
    model: &M,
    sample: &Sample,
    cfg: &GradientConfig,
) -> Result<GradientReport> {
    let map = model.map(&sample.mask, &sample.y)?;
    let x0 = model.initial_estimate(&sample.mask, &sample.y)?;
    let fwd = fixed_point::solve(cfg.forward_solver, |x| map.apply(x), x0, &cfg.forward, None)?;
    let x_hat = fwd.x_hat;
    let loss = mse_loss(&x_hat, &sample.x_star)?;
    let g = x_hat.sub(&sample.x_star);
    let lin = map.linearize(&x_hat)?;
    drop(x_hat);
    let (a, backward_converged, backward_iterations) = match cfg.backward_mode {
        BackwardMode::FixedPoint => {
            let res = backward_fixed_point(|v| lin.vjp_input(v), &g, &cfg.backward, cfg.backward_solver)?;
            (res.x_hat, res.converged, res.iterations)
        }
        BackwardMode::Neumann(p) => (neumann_backward(|v| lin.vjp_input(v), &g, p)?, true, p),
    };
    drop(g);
    let grad = lin.vjp_params(&a)?;
    Ok(GradientReport {
        loss,
        grad,
        forward_converged: fwd.converged,
        forward_iterations: fwd.iterations,
        backward_converged,
        backward_iterations,
        approximate: !(fwd.converged && backward_converged),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    /// Power iterations of spectral normalization after each update.
    pub sn_iters: usize,
    pub seed: u64,
    pub gradient: GradientConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 10,
            momentum: 0.0,
            sn_iters: 1,
            seed: 0,
            gradient: GradientConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid("epochs, batch size and decay period must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.gradient.forward.validate()?;
        self.gradient.backward.validate()
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(((epoch - 1) / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean PSNR of clamped validation reconstructions; `None` without a
    /// validation set.
    pub val_psnr: Option<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_psnr,skipped\n");
        for e in &self.epochs {
            let psnr = e.val_psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9e},{},{}", e.epoch, e.mean_loss, psnr, e.skipped);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean PSNR (peak 1) of the model's clamped reconstructions; samples whose
/// solve diverges count as 0 dB.
pub fn evaluate_psnr<M: EquilibriumModel + ?Sized>(
    model: &M,
    samples: &[Sample],
    cfg: &FixedPointConfig,
    solver: SolverKind,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += match forward_solve(model, s, cfg, solver) {
            Ok(res) => metrics::mean_psnr(&res.x_hat.clamped_unit(), &s.x_star)?,
            Err(Error::Diverged { .. }) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch SGD with optional heavy-ball momentum. Samples are visited in
/// a seeded random order each epoch; a sample whose forward solve diverges
/// is skipped, and an epoch skipping more than half its samples aborts.
pub fn train<M: EquilibriumModel + ?Sized>(
    model: &mut M,
    data: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut log = TrainLog::default();
    let mut velocity = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut losses: Vec<Option<f64>> = vec![None; data.len()];
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.num_params()];
            let mut used = 0usize;
            for &i in batch {
                match loss_gradient(&*model, &data[i], &cfg.gradient) {
                    Ok(rep) => {
                        losses[i] = Some(rep.loss);
                        grad.iter_mut().zip(&rep.grad).for_each(|(g, r)| *g += r);
                        used += 1;
                    }
                    Err(Error::Diverged { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            let mut theta = model.params();
            for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g / used as f64;
                *t -= lr * *v;
            }
            model.set_params(&theta)?;
            model.normalize(cfg.sn_iters);
        }
        let skipped = losses.iter().filter(|l| l.is_none()).count();
        if 2 * skipped > data.len() {
            return Err(Error::TrainingAborted {
                epoch,
                skipped,
                total: data.len(),
            });
        }
        let kept: Vec<f64> = losses.iter().flatten().copied().collect();
        let mean_loss = kept.iter().sum::<f64>() / kept.len() as f64;
        let val_psnr = if validation.is_empty() {
            None
        } else {
            Some(evaluate_psnr(&*model, validation, &cfg.gradient.forward, cfg.gradient.forward_solver)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_psnr,
            skipped,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel_err: f64,
    /// The analytic gradient came from a non-converged solve.
    pub approximate: bool,
}

impl GradCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,analytic,finite_diff,rel_err\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.12e},{:.12e},{:.6e}", r.index, r.analytic, r.finite_diff, r.rel_err);
        }
        out
    }
}

/// Relative error used by the gradient check; exact agreement (including
/// two zeros) scores 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Compares [`loss_gradient`] against central differences
/// `(l(theta + h e_i) - l(theta - h e_i)) / 2h` on `n_probe` coordinates
/// drawn without replacement (all of them when `n_probe` covers the vector).
/// A perturbed solve that fails is reported as an infinite error.
pub fn finite_diff_gradcheck<M: EquilibriumModel + Clone>(
    model: &M,
    sample: &Sample,
    cfg: &GradientConfig,
    h: f64,
    n_probe: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let report = loss_gradient(model, sample, cfg)?;
    let n = model.num_params();
    let picks: Vec<usize> = if n_probe >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, n, n_probe).into_vec();
        v.sort_unstable();
        v
    };
    let theta = model.params();
    let mut probe = model.clone();
    let mut loss_at = |i: usize, delta: f64| -> Result<f64> {
        let mut t = theta.clone();
        t[i] += delta;
        probe.set_params(&t)?;
        pipeline_loss(&probe, sample, cfg)
    };
    let mut rows = Vec::with_capacity(picks.len());
    for i in picks {
        let fd = match (loss_at(i, h), loss_at(i, -h)) {
            (Ok(p), Ok(m)) => (p - m) / (2.0 * h),
            (Err(Error::Diverged { .. }), _) | (_, Err(Error::Diverged { .. })) => f64::NAN,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let analytic = report.grad[i];
        let rel_err = if fd.is_finite() {
            relative_error(analytic, fd)
        } else {
            f64::INFINITY
        };
        rows.push(GradCheckRow {
            index: i,
            analytic,
            finite_diff: fd,
            rel_err,
        });
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        rows,
        max_rel_err,
        approximate: report.approximate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = VideoCube::from_elem(2, 2, 2, 0.3);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse_loss(&b, &a).unwrap() - 0.04).abs() < 1e-15);
        assert!(mse_loss(&a, &VideoCube::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn neumann_with_zero_terms_is_g() {
        let g = VideoCube::from_elem(1, 2, 2, 1.5);
        let a = neumann_backward(|v| Ok(v.map(|x| 0.5 * x)), &g, 0).unwrap();
        assert_eq!(a, g);
    }

    #[test]
    fn scalar_jacobian_backward() {
        let g = VideoCube::from_vec(1, 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let cfg = FixedPointConfig { tol: 1e-12, ..Default::default() };
        for solver in [SolverKind::Picard, SolverKind::Anderson] {
            let zero = backward_fixed_point(|v| Ok(v.map(|_| 0.0)), &g, &cfg, solver).unwrap();
            assert_eq!(zero.iterations, 1);
            assert_eq!(zero.x_hat, g);
            let half = backward_fixed_point(|v| Ok(v.map(|x| 0.5 * x)), &g, &cfg, solver).unwrap();
            assert!(half.x_hat.distance(&g.map(|x| 2.0 * x)) < 1e-10);
        }
        let p = 7;
        let part = neumann_backward(|v| Ok(v.map(|x| 0.5 * x)), &g, p).unwrap();
        let factor = (1.0 - 0.5f64.powi(p as i32 + 1)) / 0.5;
        assert!(part.distance(&g.map(|x| factor * x)) < 1e-14);
    }

    #[test]
    fn backward_mode_parsing() {
        assert_eq!(BackwardMode::parse("fixed_point"), Some(BackwardMode::FixedPoint));
        assert_eq!(BackwardMode::parse("neumann(12)"), Some(BackwardMode::Neumann(12)));
        assert_eq!(BackwardMode::parse("neumann(x)"), None);
        assert_eq!(BackwardMode::Neumann(3).name(), "neumann(3)");
    }

    #[test]
    fn learning_rate_decays_stepwise() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(10), 1e-3);
        assert!((cfg.lr_at(11) - 0.9e-3).abs() < 1e-18);
        assert!((cfg.lr_at(21) - 0.81e-3).abs() < 1e-18);
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.0), 1.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }
}
