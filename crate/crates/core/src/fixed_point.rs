//! Fixed-point solvers for maps `f: R^{nB} -> R^{nB}`: plain Picard
//! iteration and Anderson acceleration, with a shared stopping rule
//!
//! ```text
//! ||f(x_k) - x_k|| / (||x_k|| + 1e-12) <= tol
//! ```
//!
//! and per-iteration tracing. A solve that produces a non-finite value, or
//! whose residual grows by more than [`DIVERGENCE_FACTOR`] over its running
//! minimum, stops with [`Error::Diverged`] carrying the partial trace.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::cube::VideoCube;
use crate::error::{Error, Result};

pub const DIVERGENCE_FACTOR: f64 = 1e6;
const REL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Picard,
    Anderson,
}

impl SolverKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "picard" => Some(SolverKind::Picard),
            "anderson" => Some(SolverKind::Anderson),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Picard => "picard",
            SolverKind::Anderson => "anderson",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointConfig {
    /// Relative residual threshold.
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson history length `s`.
    pub anderson_memory: usize,
    /// Anderson damping `delta` in `(0, 1]`.
    pub anderson_damping: f64,
    /// Relative Tikhonov weight on the mixing normal equations.
    pub anderson_reg: f64,
    pub record_trace: bool,
    /// When false, `time_ms` is recorded as zero so traces are reproducible.
    pub record_timing: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 150,
            anderson_memory: 3,
            anderson_damping: 1.0,
            anderson_reg: 1e-8,
            record_trace: true,
            record_timing: true,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if self.anderson_memory == 0 {
            return Err(Error::invalid("anderson_memory must be >= 1"));
        }
        if !(self.anderson_damping > 0.0 && self.anderson_damping <= 1.0) {
            return Err(Error::invalid(format!(
                "anderson_damping must lie in (0, 1], got {}",
                self.anderson_damping
            )));
        }
        if !(self.anderson_reg >= 0.0) {
            return Err(Error::invalid("anderson_reg must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based count of map evaluations so far.
    pub iter: usize,
    /// `||f(x_k) - x_k||`.
    pub residual: f64,
    pub rel_residual: f64,
    /// Quality of `f(x_k)` against a reference, when a probe is supplied.
    pub psnr: Option<f64>,
    pub time_ms: f64,
    /// Anderson mixing weights used to form the next iterate (empty for Picard).
    pub alpha: Vec<f64>,
    /// The Anderson system was singular and a damped Picard step was taken.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// `iter,residual,rel_residual,psnr,time_ms`; psnr is empty without a
    /// reference.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,residual,rel_residual,psnr,time_ms\n");
        for r in &self.records {
            let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.9e},{:.9e},{},{:.3}",
                r.iter, r.residual, r.rel_residual, psnr, r.time_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x_hat: VideoCube,
    pub converged: bool,
    pub iterations: usize,
    pub final_rel_residual: f64,
    pub trace: IterationTrace,
}

/// Optional per-iteration quality probe, e.g. PSNR against ground truth.
pub type Probe<'a> = &'a dyn Fn(&VideoCube) -> f64;

struct Monitor<'a> {
    cfg: &'a FixedPointConfig,
    probe: Option<Probe<'a>>,
    trace: IterationTrace,
    min_residual: f64,
    clock: Instant,
}

impl<'a> Monitor<'a> {
    fn new(cfg: &'a FixedPointConfig, probe: Option<Probe<'a>>) -> Self {
        Self {
            cfg,
            probe,
            trace: IterationTrace::default(),
            min_residual: f64::INFINITY,
            clock: Instant::now(),
        }
    }

    /// Records one evaluation and returns the relative residual, or the
    /// divergence error.
    fn observe(&mut self, iter: usize, x: &VideoCube, fx: &VideoCube) -> Result<(f64, f64)> {
        let residual = fx.distance(x);
        let rel = residual / (x.norm() + REL_EPS);
        if self.cfg.record_trace {
            let time_ms = if self.cfg.record_timing {
                self.clock.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let psnr = self.probe.map(|p| p(fx));
            self.trace.records.push(IterationRecord {
                iter,
                residual,
                rel_residual: rel,
                psnr,
                time_ms,
                alpha: Vec::new(),
                fallback: false,
            });
        }
        if !fx.is_finite() || !residual.is_finite() {
            return Err(self.diverged(iter));
        }
        self.min_residual = self.min_residual.min(residual);
        if self.min_residual > 0.0 && residual > DIVERGENCE_FACTOR * self.min_residual {
            return Err(self.diverged(iter));
        }
        Ok((residual, rel))
    }

    fn annotate(&mut self, alpha: Vec<f64>, fallback: bool) {
        if let Some(last) = self.trace.records.last_mut() {
            last.alpha = alpha;
            last.fallback = fallback;
        }
    }

    fn diverged(&mut self, iteration: usize) -> Error {
        Error::Diverged {
            iteration,
            trace: Box::new(std::mem::take(&mut self.trace)),
        }
    }

    fn finish(self, x_hat: VideoCube, converged: bool, iterations: usize, rel: f64) -> SolveResult {
        SolveResult {
            x_hat,
            converged,
            iterations,
            final_rel_residual: rel,
            trace: self.trace,
        }
    }
}

/// Iterates `x_{k+1} = f(x_k)` until the relative residual at `x_k` drops
/// below `tol` (returning `x_k`) or `max_iter` evaluations are spent
/// (returning the last image `f(x_k)`).
pub fn picard_solve<F>(map: F, x0: VideoCube, cfg: &FixedPointConfig) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    picard_solve_probed(map, x0, cfg, None)
}

pub fn picard_solve_probed<F>(
    mut map: F,
    x0: VideoCube,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    cfg.validate()?;
    let mut mon = Monitor::new(cfg, probe);
    let mut x = x0;
    for k in 1..=cfg.max_iter {
        let fx = map(&x)?;
        x.ensure_same_shape(&fx)?;
        let (_, rel) = mon.observe(k, &x, &fx)?;
        if rel <= cfg.tol {
            return Ok(mon.finish(x, true, k, rel));
        }
        if k == cfg.max_iter {
            return Ok(mon.finish(fx, false, k, rel));
        }
        x = fx;
    }
    unreachable!("loop returns on its last iteration")
}

/// Anderson-accelerated fixed-point iteration.
///
/// Keeps the last `s` pairs `(x_{k-i}, f(x_{k-i}))`, picks mixing weights
/// `alpha` minimizing `||sum alpha_i (f(x_{k-i}) - x_{k-i})||` subject to
/// `sum alpha_i = 1` (see [`solve_alpha`]) and sets
///
/// ```text
/// x_{k+1} = (1 - delta) sum alpha_i x_{k-i} + delta sum alpha_i f(x_{k-i})
/// ```
///
/// If the mixing system is singular the iteration takes a damped Picard
/// step instead and flags it in the trace.
pub fn anderson_solve<F>(map: F, x0: VideoCube, cfg: &FixedPointConfig) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    anderson_solve_probed(map, x0, cfg, None)
}

pub fn anderson_solve_probed<F>(
    mut map: F,
    x0: VideoCube,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    cfg.validate()?;
    let s = cfg.anderson_memory;
    let delta = cfg.anderson_damping;
    let mut mon = Monitor::new(cfg, probe);
    // Most recent first.
    let mut xs: VecDeque<VideoCube> = VecDeque::with_capacity(s);
    let mut fs: VecDeque<VideoCube> = VecDeque::with_capacity(s);
    let mut x = x0;
    for k in 1..=cfg.max_iter {
        let fx = map(&x)?;
        x.ensure_same_shape(&fx)?;
        let (_, rel) = mon.observe(k, &x, &fx)?;
        if rel <= cfg.tol {
            return Ok(mon.finish(x, true, k, rel));
        }
        if k == cfg.max_iter {
            return Ok(mon.finish(fx, false, k, rel));
        }
        if xs.len() == s {
            xs.pop_back();
            fs.pop_back();
        }
        xs.push_front(x);
        fs.push_front(fx);

        let gram = residual_gram(&xs, &fs);
        let (alpha, fallback) = match alpha_from_gram(&gram, cfg.anderson_reg) {
            Ok(a) => (a, false),
            Err(Error::SingularAlpha) => {
                let mut a = vec![0.0; xs.len()];
                a[0] = 1.0;
                (a, true)
            }
            Err(e) => return Err(e),
        };
        let mut next = VideoCube::zeros_like(&xs[0]);
        {
            let out = next.as_slice_mut();
            for ((xi, fi), &a) in xs.iter().zip(&fs).zip(&alpha) {
                let wx = (1.0 - delta) * a;
                let wf = delta * a;
                for ((o, xv), fv) in out.iter_mut().zip(xi.as_slice()).zip(fi.as_slice()) {
                    *o += wx * xv + wf * fv;
                }
            }
        }
        mon.annotate(alpha, fallback);
        x = next;
    }
    unreachable!("loop returns on its last iteration")
}

/// Runs the selected solver.
pub fn solve<F>(
    kind: SolverKind,
    map: F,
    x0: VideoCube,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult>
where
    F: FnMut(&VideoCube) -> Result<VideoCube>,
{
    match kind {
        SolverKind::Picard => picard_solve_probed(map, x0, cfg, probe),
        SolverKind::Anderson => anderson_solve_probed(map, x0, cfg, probe),
    }
}

/// Runs exactly `steps` iterations of a step rule that may depend on the
/// (1-based) iteration index, tracing each one like the solvers do. There is
/// no early exit; `converged` reports whether the last step met `tol`.
pub fn run_steps<F>(
    mut step: F,
    x0: VideoCube,
    steps: usize,
    cfg: &FixedPointConfig,
    probe: Option<Probe<'_>>,
) -> Result<SolveResult>
where
    F: FnMut(usize, &VideoCube) -> Result<VideoCube>,
{
    if steps == 0 {
        return Err(Error::invalid("step count must be >= 1"));
    }
    let mut mon = Monitor::new(cfg, probe);
    let mut x = x0;
    let mut rel = f64::INFINITY;
    for k in 1..=steps {
        let fx = step(k, &x)?;
        x.ensure_same_shape(&fx)?;
        rel = mon.observe(k, &x, &fx)?.1;
        x = fx;
    }
    Ok(mon.finish(x, rel <= cfg.tol, steps, rel))
}

fn residual_gram(xs: &VecDeque<VideoCube>, fs: &VecDeque<VideoCube>) -> DMatrix<f64> {
    let m = xs.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v: f64 = xs[i]
                .as_slice()
                .iter()
                .zip(fs[i].as_slice())
                .zip(xs[j].as_slice().iter().zip(fs[j].as_slice()))
                .map(|((xi, fi), (xj, fj))| (fi - xi) * (fj - xj))
                .sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

/// Minimizes `||A alpha||^2` subject to `1^T alpha = 1` for the residual
/// matrix `A` given column by column.
///
/// Uses the regularized normal equations
/// `(A^T A + reg * tr(A^T A) / s * I) w = 1`, `alpha = w / (1^T w)`. A column
/// that is exactly zero attains the optimum on its own and gets all the
/// weight. Entries of `alpha` may be negative.
pub fn solve_alpha(columns: &[&[f64]], reg: f64) -> Result<Vec<f64>> {
    let s = columns.len();
    if s == 0 {
        return Err(Error::invalid("solve_alpha needs at least one column"));
    }
    let n = columns[0].len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("residual columns must have equal length"));
    }
    let mut gram = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..=i {
            let v: f64 = columns[i].iter().zip(columns[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    alpha_from_gram(&gram, reg)
}

fn alpha_from_gram(gram: &DMatrix<f64>, reg: f64) -> Result<Vec<f64>> {
    let s = gram.nrows();
    if let Some(zero) = (0..s).find(|&i| gram[(i, i)] == 0.0) {
        let mut alpha = vec![0.0; s];
        alpha[zero] = 1.0;
        return Ok(alpha);
    }
    let mut system = gram.clone();
    let shift = reg * gram.trace() / s as f64;
    for i in 0..s {
        system[(i, i)] += shift;
    }
    let ones = DVector::from_element(s, 1.0);
    let w = match system.clone().cholesky() {
        Some(ch) => ch.solve(&ones),
        None => system.lu().solve(&ones).ok_or(Error::SingularAlpha)?,
    };
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total.abs() < f64::MIN_POSITIVE || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularAlpha);
    }
    Ok(w.iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> VideoCube {
        VideoCube::from_elem(1, 1, 1, v)
    }

    #[test]
    fn config_validation() {
        assert!(FixedPointConfig::default().validate().is_ok());
        for bad in [
            FixedPointConfig { tol: 0.0, ..Default::default() },
            FixedPointConfig { max_iter: 0, ..Default::default() },
            FixedPointConfig { anderson_memory: 0, ..Default::default() },
            FixedPointConfig { anderson_damping: 0.0, ..Default::default() },
            FixedPointConfig { anderson_damping: 1.5, ..Default::default() },
            FixedPointConfig { anderson_reg: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn halving_map_converges_geometrically() {
        let res = picard_solve(|x| Ok(x.map(|v| 0.5 * v)), scalar(1.0), &Default::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 60, "{}", res.iterations);
        assert!(res.x_hat.norm() <= 1e-6);
        for w in res.trace.records.windows(2) {
            let ratio = w[1].residual / w[0].residual;
            assert!((ratio - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_map_converges_immediately() {
        let x0 = VideoCube::from_elem(2, 3, 3, 0.7);
        for solver in [SolverKind::Picard, SolverKind::Anderson] {
            let res = solve(solver, |x| Ok(x.clone()), x0.clone(), &Default::default(), None).unwrap();
            assert!(res.converged);
            assert_eq!(res.iterations, 1);
            assert_eq!(res.trace.records[0].residual, 0.0);
            assert_eq!(res.x_hat, x0);
        }
    }

    #[test]
    fn non_finite_map_reports_divergence_with_trace() {
        let mut calls = 0;
        let err = picard_solve(
            |x| {
                calls += 1;
                Ok(if calls < 3 { x.map(|v| v + 1.0) } else { x.map(|_| f64::NAN) })
            },
            scalar(0.0),
            &Default::default(),
        )
        .unwrap_err();
        match err {
            Error::Diverged { iteration, trace } => {
                assert_eq!(iteration, 3);
                assert_eq!(trace.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_growth_guard_trips() {
        let err = picard_solve(|x| Ok(x.map(|v| 10.0 * v)), scalar(1.0), &Default::default())
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn exhausted_budget_is_not_converged() {
        let cfg = FixedPointConfig { max_iter: 5, ..Default::default() };
        let res = picard_solve(|x| Ok(x.map(|v| 0.9 * v)), scalar(1.0), &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 5);
        assert_eq!(res.trace.len(), 5);
        assert!((res.x_hat.as_slice()[0] - 0.9f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn alpha_special_cases() {
        assert_eq!(solve_alpha(&[&[1.0, 2.0]], 1e-8).unwrap(), vec![1.0]);
        let a = solve_alpha(&[&[2.0, 0.0], &[0.0, 2.0]], 1e-8).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
        assert_eq!(solve_alpha(&[&[1.0, 1.0], &[0.0, 0.0]], 1e-8).unwrap(), vec![0.0, 1.0]);
        assert!(solve_alpha(&[], 1e-8).is_err());
    }

    #[test]
    fn collinear_columns_without_regularization_are_singular() {
        let err = solve_alpha(&[&[1.0, 2.0], &[2.0, 4.0]], 0.0);
        // Either a singular report or a valid constrained minimizer.
        if let Ok(alpha) = err {
            let s: f64 = alpha.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let res = picard_solve(|x| Ok(x.map(|v| 0.5 * v)), scalar(1.0), &FixedPointConfig {
            max_iter: 2,
            record_timing: false,
            ..Default::default()
        })
        .unwrap();
        let csv = res.trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,residual,rel_residual,psnr,time_ms");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,5.000000000e-1,"));
        assert!(lines[1].ends_with(",,0.000"));
    }
}
