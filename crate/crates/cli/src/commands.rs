//! Subcommand bodies.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use sci_deq::analysis::{estimate_rnn_contraction, projection_spectrum, LipschitzReport};
use sci_deq::bench::{run_trajectory_bench, BenchMethod, BenchSpec};
use sci_deq::denoise::{read_checkpoint, sidecar_path, write_checkpoint, Activation, ConvArch, ConvDenoiserParams};
use sci_deq::fixed_point::{self, FixedPointConfig, SolveResult, SolverKind};
use sci_deq::kv::KvFile;
use sci_deq::maps::{
    pnp_admm_solve, pnp_gap_solve, read_cell_checkpoint, write_cell_checkpoint, DeGapMap, DeRnnMap, IterationMap,
    PnpGapConfig, RecurrentCellParams,
};
use sci_deq::metrics;
use sci_deq::scene::{synth_video, SceneKind, SyntheticScene};
use sci_deq::sensing::{self, MaskKind};
use sci_deq::tensor_io::{read_cube, read_mask, read_measurement, write_cube, write_mask, write_measurement};
use sci_deq::train::{
    self, finite_diff_gradcheck, BackwardMode, DeGapModel, DeRnnModel, EquilibriumModel, GradientConfig, Sample,
    TrainConfig,
};
use sci_deq::{DeadPixelPolicy, Denoiser, Measurement, SensingMask, VideoCube};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const TRUTH_FILE: &str = "truth.vsci";
const MASK_FILE: &str = "mask.vsci";
const MEASUREMENT_FILE: &str = "measurement.vsci";
const META_FILE: &str = "simulate.meta";

fn timing(cfg: &RunConfig) -> Result<bool> {
    cfg.get("output.timing")
}

fn scene(cfg: &RunConfig, seed: u64) -> Result<SyntheticScene> {
    Ok(SyntheticScene {
        kind: cfg.choice("scene.kind", SceneKind::parse)?,
        seed,
        height: cfg.get("scene.height")?,
        width: cfg.get("scene.width")?,
        frames: cfg.get("scene.frames")?,
        amplitude: cfg.get("scene.amplitude")?,
    })
}

fn dead_pixel_policy(cfg: &RunConfig) -> Result<DeadPixelPolicy> {
    match cfg.raw("mask.dead_pixels") {
        "floor" => Ok(DeadPixelPolicy::Floor(cfg.get("mask.floor")?)),
        "reject" => Ok(DeadPixelPolicy::Reject),
        other => Err(CliError::Config(format!("unknown value {other:?} for mask.dead_pixels"))),
    }
}

fn build_mask(cfg: &RunConfig) -> Result<SensingMask> {
    let kind = match cfg.raw("mask.kind") {
        "bernoulli" => MaskKind::Bernoulli(cfg.get("mask.density")?),
        "all_ones" => MaskKind::AllOnes,
        other => return Err(CliError::Config(format!("unknown value {other:?} for mask.kind"))),
    };
    Ok(SensingMask::generate(
        cfg.get("mask.seed")?,
        cfg.get("scene.height")?,
        cfg.get("scene.width")?,
        cfg.get("scene.frames")?,
        kind,
        dead_pixel_policy(cfg)?,
    )?)
}

fn solver_config(cfg: &RunConfig) -> Result<(SolverKind, FixedPointConfig)> {
    let fp = FixedPointConfig {
        tol: cfg.get("solver.tol")?,
        max_iter: cfg.get("solver.max_iter")?,
        anderson_memory: cfg.get("solver.anderson_memory")?,
        anderson_damping: cfg.get("solver.anderson_damping")?,
        anderson_reg: cfg.get("solver.anderson_reg")?,
        record_trace: true,
        record_timing: timing(cfg)?,
    };
    fp.validate()?;
    Ok((cfg.choice("solver.kind", SolverKind::parse)?, fp))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&str> {
    match cfg.raw("method.checkpoint") {
        "" => Err(CliError::Config("method.checkpoint must name a checkpoint file".into())),
        p => Ok(p),
    }
}

fn denoiser(cfg: &RunConfig) -> Result<Denoiser> {
    match cfg.raw("method.denoiser") {
        "identity" => Ok(Denoiser::Identity),
        "tv" => Ok(Denoiser::Tv {
            lambda: cfg.get("method.tv_lambda")?,
            iters: cfg.get("method.tv_iters")?,
        }),
        "checkpoint" => Ok(read_checkpoint(checkpoint_path(cfg)?)?),
        other => Err(CliError::Config(format!("unknown value {other:?} for method.denoiser"))),
    }
}

fn cell(cfg: &RunConfig) -> Result<RecurrentCellParams> {
    Ok(read_cell_checkpoint(checkpoint_path(cfg)?)?)
}

fn gradient_config(cfg: &RunConfig) -> Result<GradientConfig> {
    let (kind, mut forward) = solver_config(cfg)?;
    forward.record_trace = false;
    forward.record_timing = false;
    let backward = FixedPointConfig {
        tol: cfg.get("train.backward_tol")?,
        max_iter: cfg.get("train.backward_max_iter")?,
        ..forward.clone()
    };
    Ok(GradientConfig {
        forward,
        forward_solver: kind,
        backward_mode: cfg.choice("train.backward_mode", BackwardMode::parse)?,
        backward,
        backward_solver: kind,
    })
}

#[derive(Debug, Clone)]
enum Model {
    Gap(DeGapModel),
    Rnn(DeRnnModel),
}

fn fresh_model(cfg: &RunConfig) -> Result<Model> {
    let grid = (cfg.get("scene.height")?, cfg.get("scene.width")?);
    let kernel: usize = cfg.get("model.kernel")?;
    let gamma: f64 = cfg.get("model.gamma")?;
    let seed: u64 = cfg.get("model.seed")?;
    let scale: f64 = cfg.get("model.init_scale")?;
    let sn: usize = cfg.get("model.init_sn_iters")?;
    match cfg.raw("model.kind") {
        "de_gap" => {
            let mut arch = ConvArch::tied(cfg.get("model.hidden")?);
            arch.kernel = kernel;
            arch.activation = cfg.choice("model.activation", Activation::parse)?;
            let mut p = ConvDenoiserParams::new(arch, gamma, seed, scale, grid)?;
            p.spectral_normalize(sn);
            Ok(Model::Gap(DeGapModel { denoiser: Denoiser::ConvResidual(p) }))
        }
        "de_rnn" => {
            let mut cell = RecurrentCellParams::gated_random(kernel, gamma, seed, scale, grid)?;
            cell.spectral_normalize(sn);
            Ok(Model::Rnn(DeRnnModel { cell }))
        }
        other => Err(CliError::Config(format!("unknown value {other:?} for model.kind"))),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let meta = KvFile::read(sidecar_path(path))?;
    if meta.get("kind") == Some("recurrent_cell") {
        Ok(Model::Rnn(DeRnnModel { cell: read_cell_checkpoint(path)? }))
    } else {
        Ok(Model::Gap(DeGapModel { denoiser: read_checkpoint(path)? }))
    }
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    match model {
        Model::Gap(m) => write_checkpoint(path, &m.denoiser)?,
        Model::Rnn(m) => write_cell_checkpoint(path, &m.cell)?,
    }
    Ok(())
}

fn samples(cfg: &RunConfig, mask: &Arc<SensingMask>, first: u64, count: u64) -> Result<Vec<Sample>> {
    let sigma: f64 = cfg.get("noise.sigma")?;
    let noise_seed: u64 = cfg.get("noise.seed")?;
    (first..first + count)
        .map(|s| {
            let x = synth_video(&scene(cfg, s)?)?;
            Ok(Sample::simulate(mask.clone(), x, sigma, noise_seed.wrapping_add(s))?)
        })
        .collect()
}

pub fn mask(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = build_mask(cfg)?;
    write_mask(out, &m)?;
    println!("mask {}x{}x{} live_pixels {}", m.num_frames(), m.height(), m.width(), m.live_pixels());
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| sci_deq::Error::Io { path: out.to_path_buf(), source: e })?;
    let sc = scene(cfg, cfg.get("scene.seed")?)?;
    let truth = synth_video(&sc)?;
    let m = build_mask(cfg)?;
    let clean = sensing::forward(&m, &truth)?;
    let sigma: f64 = cfg.get("noise.sigma")?;
    let y = if sigma > 0.0 {
        sensing::add_noise(&clean, sigma, cfg.get("noise.seed")?)?
    } else {
        clean
    };
    write_cube(out.join(TRUTH_FILE), &truth)?;
    write_mask(out.join(MASK_FILE), &m)?;
    write_measurement(out.join(MEASUREMENT_FILE), &y)?;
    let mut meta = KvFile::new();
    meta.set("scene", sc.label());
    meta.set("frames", sc.frames);
    meta.set("height", sc.height);
    meta.set("width", sc.width);
    meta.set("amplitude", sc.amplitude);
    meta.set("mask_seed", cfg.raw("mask.seed"));
    meta.set("noise_sigma", y.noise_sigma);
    if let Some(s) = y.seed {
        meta.set("noise_seed", s);
    }
    meta.write(out.join(META_FILE))?;
    println!("simulated {} into {}", sc.label(), out.display());
    Ok(())
}

fn consistency(m: &SensingMask, y: &Measurement, x: &VideoCube) -> Result<f64> {
    let fx = sensing::forward(m, x)?;
    Ok(fx.data.iter().zip(y.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn reconstruct(cfg: &RunConfig, input: &Path, out: &Path, trace: Option<&Path>) -> Result<()> {
    let m = read_mask(input.join(MASK_FILE), dead_pixel_policy(cfg)?)?;
    let y = read_measurement(input.join(MEASUREMENT_FILE))?;
    let truth_path = input.join(TRUTH_FILE);
    let truth = if truth_path.exists() { Some(read_cube(&truth_path)?) } else { None };
    let (kind, fp) = solver_config(cfg)?;
    let probe = |x: &VideoCube| match &truth {
        Some(t) => metrics::mean_psnr(&x.clamped_unit(), t).unwrap_or(f64::NAN),
        None => f64::NAN,
    };
    let probe_ref: Option<&dyn Fn(&VideoCube) -> f64> = if truth.is_some() { Some(&probe) } else { None };
    let clock = Instant::now();
    let method = cfg.raw("method.name");
    let res: SolveResult = match method {
        "de-gap" => {
            let d = denoiser(cfg)?;
            let map = DeGapMap::new(&d, &m, &y)?;
            solve_map(&map, &m, &y, kind, &fp, probe_ref)?
        }
        "de-rnn" => {
            let c = cell(cfg)?;
            let map = DeRnnMap::new(&c, &m, &y)?;
            solve_map(&map, &m, &y, kind, &fp, probe_ref)?
        }
        "pnp-gap" => {
            let gap = PnpGapConfig {
                schedule: cfg.list("method.pnp_schedule")?,
                tv_iters: cfg.get("method.tv_iters")?,
                iterations: fp.max_iter,
            };
            pnp_gap_solve(&m, &y, &gap, &fp, probe_ref)?
        }
        "pnp-admm" => pnp_admm_solve(&m, &y, &denoiser(cfg)?, cfg.get("method.rho")?, fp.max_iter, &fp, probe_ref)?,
        other => return Err(CliError::Config(format!("unknown value {other:?} for method.name"))),
    };
    write_cube(out, &res.x_hat)?;
    if let Some(t) = trace {
        std::fs::write(t, res.trace.to_csv()).map_err(|e| sci_deq::Error::Io { path: t.to_path_buf(), source: e })?;
    }
    println!("method {method}");
    println!("iterations {}", res.iterations);
    println!("converged {}", res.converged);
    println!("final_rel_residual {:.6e}", res.final_rel_residual);
    println!("consistency_residual {:.6e}", consistency(&m, &y, &res.x_hat)?);
    if let Some(t) = &truth {
        let clamped = res.x_hat.clamped_unit();
        println!("psnr {:.4}", metrics::mean_psnr(&clamped, t)?);
        if let Ok(s) = metrics::ssim(&clamped, t) {
            println!("ssim {:.6}", s.mean);
        }
    }
    if timing(cfg)? {
        println!("seconds {:.3}", clock.elapsed().as_secs_f64());
    }
    Ok(())
}

fn solve_map(
    map: &dyn IterationMap,
    m: &SensingMask,
    y: &Measurement,
    kind: SolverKind,
    fp: &FixedPointConfig,
    probe: Option<&dyn Fn(&VideoCube) -> f64>,
) -> Result<SolveResult> {
    let x0 = sensing::init_estimate(m, y)?;
    Ok(fixed_point::solve(kind, |x| map.apply(x), x0, fp, probe)?)
}

pub fn train(cfg: &RunConfig, out: &Path, log: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let m = Arc::new(build_mask(cfg)?);
    let data = samples(cfg, &m, cfg.get("scene.seed")?, cfg.get("train.samples")?)?;
    let val = samples(cfg, &m, cfg.get("train.val_seed")?, cfg.get("train.val_samples")?)?;
    let tc = TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        lr: cfg.get("train.lr")?,
        lr_decay: cfg.get("train.lr_decay")?,
        lr_decay_every: cfg.get("train.lr_decay_every")?,
        momentum: cfg.get("train.momentum")?,
        sn_iters: cfg.get("train.sn_iters")?,
        seed: cfg.get("train.seed")?,
        gradient: gradient_config(cfg)?,
    };
    let mut model = match init {
        Some(p) => load_model(p)?,
        None => fresh_model(cfg)?,
    };
    let result = match &mut model {
        Model::Gap(g) => train::train(g, &data, &val, &tc)?,
        Model::Rnn(r) => train::train(r, &data, &val, &tc)?,
    };
    for e in &result.epochs {
        let psnr = e.val_psnr.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        println!("epoch {} loss {:.6e} val_psnr {} skipped {}", e.epoch, e.mean_loss, psnr, e.skipped);
    }
    save_model(out, &model)?;
    if let Some(l) = log {
        result.write_csv(l)?;
    }
    Ok(())
}

fn run_gradcheck<M: EquilibriumModel + Clone>(
    model: &M,
    sample: &Sample,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<()> {
    let n_probe: usize = cfg.get("gradcheck.n_probe")?;
    let n = if n_probe == 0 { model.num_params() } else { n_probe };
    let report = finite_diff_gradcheck(
        model,
        sample,
        &gradient_config(cfg)?,
        cfg.get("gradcheck.h")?,
        n,
        cfg.get("gradcheck.seed")?,
    )?;
    if let Some(p) = out {
        std::fs::write(p, report.to_csv()).map_err(|e| sci_deq::Error::Io { path: p.to_path_buf(), source: e })?;
    }
    let threshold: f64 = cfg.get("gradcheck.threshold")?;
    println!("params {}", model.num_params());
    println!("probed {}", report.rows.len());
    println!("approximate {}", report.approximate);
    println!("max_rel_err {:.6e}", report.max_rel_err);
    if report.max_rel_err <= threshold {
        println!("gradcheck PASS (threshold {threshold:.1e})");
        Ok(())
    } else {
        Err(CliError::GradCheck { max_rel_err: report.max_rel_err, threshold })
    }
}

pub fn gradcheck(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let m = Arc::new(build_mask(cfg)?);
    let sample = samples(cfg, &m, cfg.get("scene.seed")?, 1)?.remove(0);
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => fresh_model(cfg)?,
    };
    match &model {
        Model::Gap(g) => run_gradcheck(g, &sample, cfg, out),
        Model::Rnn(r) => run_gradcheck(r, &sample, cfg, out),
    }
}

pub fn spectrum(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let m = build_mask(cfg)?;
    let truth = synth_video(&scene(cfg, cfg.get("scene.seed")?)?)?;
    let y = sensing::forward(&m, &truth)?;
    let spec = projection_spectrum(&m)?;
    let n_iters: usize = cfg.get("spectrum.n_iters")?;
    let seed: u64 = cfg.get("spectrum.seed")?;
    let n_pairs: usize = cfg.get("spectrum.n_pairs")?;
    let (kind, mut fp) = solver_config(cfg)?;
    fp.record_trace = false;
    let mut kv = KvFile::new();
    kv.set("eigen_count", spec.eigenvalues.len());
    kv.set("eigen_max", format!("{:.12}", spec.eigenvalues.first().copied().unwrap_or(f64::NAN)));
    kv.set("eigen_min", format!("{:.12}", spec.eigenvalues.last().copied().unwrap_or(f64::NAN)));
    kv.set("eigen_ones", spec.eigenvalues.iter().filter(|l| (*l - 1.0).abs() <= 1e-8).count());
    kv.set("live_pixels", spec.live_pixels);
    kv.set("trace", format!("{:.12}", spec.trace));
    kv.set("idempotence_defect", format!("{:.3e}", spec.idempotence_defect));
    if cfg.raw("method.name") == "de-rnn" {
        let c = cell(cfg)?;
        let map = DeRnnMap::new(&c, &m, &y)?;
        kv.set("rnn_c_hat", estimate_rnn_contraction(&map, seed, n_pairs)?);
    } else {
        let d = denoiser(cfg)?;
        let map = DeGapMap::new(&d, &m, &y)?;
        let x_hat = solve_map(&map, &m, &y, kind, &fp, None)?.x_hat;
        let report = LipschitzReport::for_de_gap(&d, &m, &y, &x_hat, n_iters, seed, n_pairs)?;
        for (k, v) in report.to_kv().iter() {
            kv.set(k, v);
        }
    }
    for (k, v) in kv.iter() {
        println!("{k} = {v}");
    }
    if let Some(p) = out {
        kv.write(p)?;
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let first: u64 = cfg.get("scene.seed")?;
    let count: u64 = cfg.get("bench.scenes")?;
    let scenes = (first..first + count).map(|s| scene(cfg, s)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = cfg.list("bench.methods")?;
    let mut methods = Vec::new();
    for name in &names {
        methods.push(match name.as_str() {
            "pnp-gap" => BenchMethod::PnpGap {
                schedule: cfg.list("method.pnp_schedule")?,
                tv_iters: cfg.get("method.tv_iters")?,
            },
            "pnp-admm" => BenchMethod::Admm {
                rho: cfg.get("method.rho")?,
                denoiser: Denoiser::Tv { lambda: cfg.get("method.tv_lambda")?, iters: cfg.get("method.tv_iters")? },
            },
            "de-gap-identity" => BenchMethod::DeGap { label: "identity".into(), denoiser: Denoiser::Identity },
            "de-gap" => BenchMethod::DeGap { label: "trained".into(), denoiser: read_checkpoint(checkpoint_path(cfg)?)? },
            "de-rnn" => BenchMethod::DeRnn { label: "trained".into(), cell: cell(cfg)? },
            other => return Err(CliError::Config(format!("unknown bench method {other:?} in bench.methods"))),
        });
    }
    let (solver, fp) = solver_config(cfg)?;
    let spec = BenchSpec {
        scenes,
        mask_seed: cfg.get("mask.seed")?,
        mask_density: cfg.get("mask.density")?,
        noise_sigma: cfg.get("noise.sigma")?,
        noise_seed: cfg.get("noise.seed")?,
        methods,
        iterations: cfg.get("bench.iterations")?,
        solver,
        tol: fp.tol,
        anderson_memory: fp.anderson_memory,
        record_timing: fp.record_timing,
        output_dir: out.to_path_buf(),
    };
    let report = run_trajectory_bench(&spec)?;
    print!("{}", sci_deq::bench::summary_csv(&report.rows));
    Ok(())
}

pub fn dump_config(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let text = cfg.dump();
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| sci_deq::Error::Io { path: p.to_path_buf(), source: e })?,
        None => print!("{text}"),
    }
    Ok(())
}
