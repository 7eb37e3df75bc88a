//! Reconstruction trajectories: PSNR per iteration for several methods on
//! synthetic scenes, written as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cube::VideoCube;
use crate::denoise::Denoiser;
use crate::error::{Error, Result};
use crate::fixed_point::{self, FixedPointConfig, SolveResult, SolverKind};
use crate::maps::{pnp_admm_solve, pnp_gap_solve, DeGapMap, DeRnnMap, IterationMap, PnpGapConfig, RecurrentCellParams};
use crate::metrics;
use crate::scene::{synth_video, SyntheticScene};
use crate::sensing::{self, DeadPixelPolicy, MaskKind, SensingMask};

#[derive(Debug, Clone, PartialEq)]
pub enum BenchMethod {
    PnpGap { schedule: Vec<f64>, tv_iters: usize },
    DeGap { label: String, denoiser: Denoiser },
    DeRnn { label: String, cell: RecurrentCellParams },
    Admm { rho: f64, denoiser: Denoiser },
}

impl BenchMethod {
    pub fn label(&self) -> String {
        match self {
            BenchMethod::PnpGap { .. } => "pnp_gap".into(),
            BenchMethod::DeGap { label, .. } => format!("de_gap_{label}"),
            BenchMethod::DeRnn { label, .. } => format!("de_rnn_{label}"),
            BenchMethod::Admm { .. } => "pnp_admm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub scenes: Vec<SyntheticScene>,
    pub mask_seed: u64,
    pub mask_density: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub methods: Vec<BenchMethod>,
    /// Iteration budget `K` for every method.
    pub iterations: usize,
    /// Solver for the equilibrium methods.
    pub solver: SolverKind,
    /// Stopping tolerance for the equilibrium methods.
    pub tol: f64,
    pub anderson_memory: usize,
    pub record_timing: bool,
    pub output_dir: PathBuf,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("benchmark needs at least one scene and one method"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("benchmark iteration count must be >= 1"));
        }
        self.solver_config().validate()
    }

    fn solver_config(&self) -> FixedPointConfig {
        FixedPointConfig {
            tol: self.tol,
            max_iter: self.iterations,
            anderson_memory: self.anderson_memory,
            record_trace: true,
            record_timing: self.record_timing,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scene: String,
    pub method: String,
    pub final_psnr: f64,
    pub max_psnr: f64,
    pub drop_db: f64,
    pub mean_ssim: f64,
    pub sec_per_meas: f64,
    pub iterations: usize,
    pub diverged: bool,
    pub trace_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary_path: PathBuf,
}

pub fn summary_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("scene,method,final_psnr,max_psnr,drop_db,mean_ssim,sec_per_meas\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.scene, r.method, r.final_psnr, r.max_psnr, r.drop_db, r.mean_ssim, r.sec_per_meas
        );
    }
    out
}

fn trace_csv(res: &SolveResult) -> String {
    let mut out = String::from("iter,psnr,residual,time_ms\n");
    for r in &res.trace.records {
        let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.9e},{:.3}", r.iter, psnr, r.residual, r.time_ms);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every method on every scene for at most `iterations` steps,
/// writing one trace CSV per pair and a `summary.csv`.
///
/// A method that diverges keeps its partial trace; its summary row reports
/// NaN for every quality column.
pub fn run_trajectory_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let cfg = spec.solver_config();
    let mut rows = Vec::new();
    for scene in &spec.scenes {
        let truth = synth_video(scene)?;
        let mask = SensingMask::generate(
            spec.mask_seed,
            scene.height,
            scene.width,
            scene.frames,
            MaskKind::Bernoulli(spec.mask_density),
            DeadPixelPolicy::Floor(sensing::DEFAULT_DEAD_PIXEL_FLOOR),
        )?;
        let clean = sensing::forward(&mask, &truth)?;
        let y = if spec.noise_sigma > 0.0 {
            sensing::add_noise(&clean, spec.noise_sigma, spec.noise_seed)?
        } else {
            clean
        };
        let probe = |x: &VideoCube| {
            metrics::mean_psnr(&x.clamped_unit(), &truth).unwrap_or(f64::NAN)
        };
        for method in &spec.methods {
            let clock = Instant::now();
            let outcome = match method {
                BenchMethod::PnpGap { schedule, tv_iters } => {
                    let gap = PnpGapConfig {
                        schedule: schedule.clone(),
                        tv_iters: *tv_iters,
                        iterations: spec.iterations,
                    };
                    pnp_gap_solve(&mask, &y, &gap, &cfg, Some(&probe))
                }
                BenchMethod::Admm { rho, denoiser } => {
                    pnp_admm_solve(&mask, &y, denoiser, *rho, spec.iterations, &cfg, Some(&probe))
                }
                BenchMethod::DeGap { denoiser, .. } => {
                    let map = DeGapMap::new(denoiser, &mask, &y)?;
                    solve_map(&map, &mask, &y, spec.solver, &cfg, &probe)
                }
                BenchMethod::DeRnn { cell, .. } => {
                    let map = DeRnnMap::new(cell, &mask, &y)?;
                    solve_map(&map, &mask, &y, spec.solver, &cfg, &probe)
                }
            };
            let seconds = if spec.record_timing {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let trace_path = spec
                .output_dir
                .join(format!("{}__{}.csv", scene.label(), method.label()));
            let row = match outcome {
                Ok(res) => {
                    write(&trace_path, &trace_csv(&res))?;
                    let psnrs: Vec<f64> = res.trace.records.iter().filter_map(|r| r.psnr).collect();
                    let final_psnr = *psnrs.last().unwrap_or(&f64::NAN);
                    let max_psnr = psnrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mean_ssim = metrics::ssim(&res.x_hat.clamped_unit(), &truth)
                        .map(|s| s.mean)
                        .unwrap_or(f64::NAN);
                    BenchRow {
                        scene: scene.label(),
                        method: method.label(),
                        final_psnr,
                        max_psnr,
                        drop_db: max_psnr - final_psnr,
                        mean_ssim,
                        sec_per_meas: seconds,
                        iterations: res.iterations,
                        diverged: false,
                        trace_path,
                    }
                }
                Err(Error::Diverged { iteration, trace }) => {
                    let partial = SolveResult {
                        x_hat: VideoCube::zeros(1, 1, 1),
                        converged: false,
                        iterations: iteration,
                        final_rel_residual: f64::NAN,
                        trace: *trace,
                    };
                    write(&trace_path, &trace_csv(&partial))?;
                    BenchRow {
                        scene: scene.label(),
                        method: method.label(),
                        final_psnr: f64::NAN,
                        max_psnr: f64::NAN,
                        drop_db: f64::NAN,
                        mean_ssim: f64::NAN,
                        sec_per_meas: seconds,
                        iterations: iteration,
                        diverged: true,
                        trace_path,
                    }
                }
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    let summary_path = spec.output_dir.join("summary.csv");
    write(&summary_path, &summary_csv(&rows))?;
    Ok(BenchReport { rows, summary_path })
}

fn solve_map(
    map: &dyn IterationMap,
    mask: &SensingMask,
    y: &sensing::Measurement,
    solver: SolverKind,
    cfg: &FixedPointConfig,
    probe: &dyn Fn(&VideoCube) -> f64,
) -> Result<SolveResult> {
    let x0 = sensing::init_estimate(mask, y)?;
    fixed_point::solve(solver, |x| map.apply(x), x0, cfg, Some(probe))
}
