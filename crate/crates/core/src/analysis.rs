//! Convergence diagnostics: sampled and power-iteration Lipschitz
//! estimates, the spectrum of the measurement-space projector
//! `P = Phi^T (Phi Phi^T)^{-1} Phi`, and the bound `(1 + eps) max |1 - lambda_i|`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cube::VideoCube;
use crate::denoise::{estimate_residual_lipschitz, Denoiser};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::maps::{DeGapMap, IterationMap};
use crate::sensing::{Measurement, SensingMask};

/// Largest `nB` for which dense matrices are formed.
pub const DENSE_LIMIT: usize = 4096;

/// Relative finite-difference step for Jacobian-vector products.
pub const JVP_STEP: f64 = 1e-6;

fn random_unit(shape: [usize; 3], rng: &mut ChaCha8Rng) -> VideoCube {
    let [b, h, w] = shape;
    let mut v = VideoCube::from_vec(b, h, w, (0..b * h * w).map(|_| rng.sample(StandardNormal)).collect())
        .expect("shape matches length");
    let n = v.norm();
    v.scale(1.0 / n);
    v
}

/// Forward-difference `J v` at `x` given `f(x)`.
fn jvp(map: &dyn IterationMap, x: &VideoCube, fx: &VideoCube, v: &VideoCube) -> Result<VideoCube> {
    let vn = v.norm();
    if vn == 0.0 {
        return Ok(VideoCube::zeros_like(v));
    }
    let xn = x.norm();
    let t = JVP_STEP * if xn > 0.0 { xn } else { 1.0 } / vn;
    let mut shifted = x.clone();
    shifted.axpy(t, v);
    let mut out = map.apply(&shifted)?;
    out.axpy(-1.0, fx);
    out.scale(1.0 / t);
    Ok(out)
}

/// Dense forward-difference Jacobian, used when the map has no VJP.
fn dense_jacobian(map: &dyn IterationMap, x: &VideoCube, fx: &VideoCube) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { size: n, limit: DENSE_LIMIT });
    }
    let mut jac = DMatrix::zeros(n, n);
    let mut e = VideoCube::zeros_like(x);
    for j in 0..n {
        e.as_slice_mut()[j] = 1.0;
        let col = jvp(map, x, fx, &e)?;
        e.as_slice_mut()[j] = 0.0;
        for (i, v) in col.as_slice().iter().enumerate() {
            jac[(i, j)] = *v;
        }
    }
    Ok(jac)
}

/// Power iteration on `J^T J` at `x`, with `J v` by forward differences
/// and `J^T w` from the map's VJP (or a dense finite-difference Jacobian
/// when the map has none). Returns the estimate of `||J||_2`.
pub fn estimate_map_lipschitz(map: &dyn IterationMap, x: &VideoCube, n_iters: usize, seed: u64) -> Result<f64> {
    if n_iters < 5 {
        return Err(Error::invalid(format!("power iteration needs >= 5 steps, got {n_iters}")));
    }
    let fx = map.apply(x)?;
    let lin = map.linearize(x).ok();
    let dense = match lin {
        Some(_) => None,
        None => Some(dense_jacobian(map, x, &fx)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_unit(x.shape(), &mut rng);
    let mut sigma = 0.0;
    for _ in 0..n_iters {
        let jv = jvp(map, x, &fx, &v)?;
        let jtjv = match (&lin, &dense) {
            (Some(l), _) => l.vjp_input(&jv)?,
            (None, Some(j)) => {
                let w = nalgebra::DVector::from_column_slice(jv.as_slice());
                let out = j.tr_mul(&w);
                let [b, h, wd] = x.shape();
                VideoCube::from_vec(b, h, wd, out.as_slice().to_vec())?
            }
            (None, None) => unreachable!("one Jacobian route is always set"),
        };
        let n = jtjv.norm();
        if n == 0.0 || !n.is_finite() {
            return Ok(if n == 0.0 { 0.0 } else { f64::NAN });
        }
        sigma = n.sqrt();
        v = jtjv;
        v.scale(1.0 / n);
    }
    Ok(sigma)
}

/// Largest sampled ratio `||f(x) - f(x')|| / ||x - x'||` over `n_pairs`
/// pairs. Even pairs are independent uniform cubes; odd pairs perturb a
/// uniform cube by `1e-2 N(0, 1)`. This is a lower bound on the global
/// Lipschitz constant.
pub fn sampled_lipschitz(map: &dyn IterationMap, seed: u64, n_pairs: usize) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::invalid("need at least one sample pair"));
    }
    let [b, h, w] = map.shape();
    let n = b * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for k in 0..n_pairs {
        let x = VideoCube::from_vec(b, h, w, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let xp = if k % 2 == 0 {
            VideoCube::from_vec(b, h, w, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?
        } else {
            let mut p = x.clone();
            for v in p.as_slice_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += 1e-2 * z;
            }
            p
        };
        let den = x.distance(&xp);
        if den == 0.0 {
            continue;
        }
        best = best.max(map.apply(&x)?.distance(&map.apply(&xp)?) / den);
    }
    Ok(best)
}

/// Sampled contraction constant of a recurrent map.
pub fn estimate_rnn_contraction(map: &dyn IterationMap, seed: u64, n_pairs: usize) -> Result<f64> {
    sampled_lipschitz(map, seed, n_pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpectrum {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Frobenius norm of `P^2 - P`.
    pub idempotence_defect: f64,
    pub trace: f64,
    pub live_pixels: usize,
}

/// Dense `P = Phi^T (Phi Phi^T)^{-1} Phi`, indexed like the flattened cube.
pub fn projection_matrix(mask: &SensingMask) -> Result<DMatrix<f64>> {
    let (b, h, w) = (mask.num_frames(), mask.height(), mask.width());
    let n = b * h * w;
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { size: n, limit: DENSE_LIMIT });
    }
    let plane = h * w;
    let frames = mask.frames();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..h {
        for j in 0..w {
            let d = mask.divisor(mask.q_diag()[[i, j]]);
            let pix = i * w + j;
            for fb in 0..b {
                for fc in 0..b {
                    p[(fb * plane + pix, fc * plane + pix)] = frames[[fb, i, j]] * frames[[fc, i, j]] / d;
                }
            }
        }
    }
    Ok(p)
}

pub fn projection_spectrum(mask: &SensingMask) -> Result<ProjectionSpectrum> {
    let p = projection_matrix(mask)?;
    let defect = (&p * &p - &p).norm();
    let trace = p.trace();
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(p).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    Ok(ProjectionSpectrum {
        eigenvalues,
        idempotence_defect: defect,
        trace,
        live_pixels: mask.live_pixels(),
    })
}

/// Eigenvalues of `P` without densifying: `P` is block diagonal over pixels
/// with rank-one blocks `m m^T / q`, whose eigenvalues are `|m|^2 / q` and
/// `B - 1` zeros.
pub fn projection_eigenvalues_blockwise(mask: &SensingMask) -> Vec<f64> {
    let b = mask.num_frames();
    let mut out = Vec::with_capacity(mask.pixels() * b);
    for &q in mask.q_diag().iter() {
        out.push(q / mask.divisor(q));
        out.extend(std::iter::repeat_n(0.0, b - 1));
    }
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// `(1 + eps) max_i |1 - lambda_i|`.
pub fn contraction_bound(epsilon: f64, eigenvalues: &[f64]) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if eigenvalues.is_empty() {
        return Err(Error::invalid("eigenvalue list is empty"));
    }
    let m = eigenvalues.iter().map(|l| (1.0 - l).abs()).fold(0.0, f64::max);
    Ok((1.0 + epsilon) * m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    /// Power-iteration estimate of `||df/dx||` at the evaluation point.
    pub sigma_hat: f64,
    /// Sampled lower bound on the Lipschitz constant of `D - I`.
    pub epsilon_hat: f64,
    /// Product-of-layer-norms upper bound on the same, when available.
    pub epsilon_upper: Option<f64>,
    /// `(1 + epsilon_hat) max |1 - lambda_i|`.
    pub eta_bound: f64,
    /// `(1 + epsilon_upper) max |1 - lambda_i|`.
    pub eta_upper: Option<f64>,
    pub max_abs_one_minus_lambda: f64,
    pub contraction_flag: bool,
    pub rnn_c_hat: Option<f64>,
}

impl LipschitzReport {
    /// Diagnostics for a DE-GAP map at `x_point`.
    pub fn for_de_gap(
        denoiser: &Denoiser,
        mask: &SensingMask,
        y: &Measurement,
        x_point: &VideoCube,
        n_iters: usize,
        seed: u64,
        n_pairs: usize,
    ) -> Result<Self> {
        let map = DeGapMap::new(denoiser, mask, y)?;
        let sigma_hat = estimate_map_lipschitz(&map, x_point, n_iters, seed)?;
        let epsilon_hat = estimate_residual_lipschitz(denoiser, seed, n_pairs, map.shape())?;
        let epsilon_upper = denoiser.residual_lipschitz_bound();
        let eigen = projection_eigenvalues_blockwise(mask);
        let max_abs = eigen.iter().map(|l| (1.0 - l).abs()).fold(0.0, f64::max);
        Ok(Self {
            sigma_hat,
            epsilon_hat,
            epsilon_upper,
            eta_bound: contraction_bound(epsilon_hat, &eigen)?,
            eta_upper: epsilon_upper.map(|e| (1.0 + e) * max_abs),
            max_abs_one_minus_lambda: max_abs,
            contraction_flag: sigma_hat < 1.0,
            rnn_c_hat: None,
        })
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("sigma_hat", self.sigma_hat);
        kv.set("epsilon_hat", self.epsilon_hat);
        if let Some(e) = self.epsilon_upper {
            kv.set("epsilon_upper", e);
        }
        kv.set("max_abs_one_minus_lambda", self.max_abs_one_minus_lambda);
        kv.set("eta_bound", self.eta_bound);
        if let Some(e) = self.eta_upper {
            kv.set("eta_upper", e);
        }
        // A contraction needs eta < 1; with a projector spectrum in
        // {0, 1} the bound is 1 + eps whenever some lambda is 0.
        kv.set("eta_below_one", self.eta_bound < 1.0);
        kv.set("contraction_flag", self.contraction_flag);
        if let Some(c) = self.rnn_c_hat {
            kv.set("rnn_c_hat", c);
        }
        kv
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().write(path)
    }
}
