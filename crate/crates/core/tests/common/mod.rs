//! Shared helpers for the integration tests: random instances and dense
//! matrix oracles built independently of the library's operators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sci_deq::sensing::{MaskKind, Measurement};
use sci_deq::{DeadPixelPolicy, SensingMask, VideoCube};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_cube(seed: u64, b: usize, h: usize, w: usize) -> VideoCube {
    let mut r = rng(seed);
    VideoCube::from_vec(b, h, w, (0..b * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn normal_cube(seed: u64, b: usize, h: usize, w: usize) -> VideoCube {
    let mut r = rng(seed);
    VideoCube::from_vec(b, h, w, (0..b * h * w).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

pub fn measurement(seed: u64, h: usize, w: usize) -> Measurement {
    let mut r = rng(seed);
    Measurement::noiseless(ndarray::Array2::from_shape_fn((h, w), |_| r.random_range(-1.0..2.0)))
}

/// Binary Bernoulli(0.5) mask; pixels that no frame sees are floored.
pub fn binary_mask(seed: u64, b: usize, h: usize, w: usize) -> SensingMask {
    SensingMask::generate(seed, h, w, b, MaskKind::Bernoulli(0.5), DeadPixelPolicy::Floor(1e-6)).unwrap()
}

/// Real-valued mask with entries in `[0.1, 1]` (no dead pixels).
pub fn real_mask(seed: u64, b: usize, h: usize, w: usize) -> SensingMask {
    let mut r = rng(seed);
    let frames = ndarray::Array3::from_shape_fn((b, h, w), |_| r.random_range(0.1..1.0));
    SensingMask::new(frames, DeadPixelPolicy::Reject).unwrap()
}

/// `Phi` as an `n x nB` matrix of concatenated diagonals, with the cube
/// flattened frame-major (`[frame][row][col]`).
pub fn dense_phi(mask: &SensingMask) -> DMatrix<f64> {
    let (b, h, w) = (mask.num_frames(), mask.height(), mask.width());
    let n = h * w;
    let mut phi = DMatrix::zeros(n, n * b);
    for f in 0..b {
        for i in 0..h {
            for j in 0..w {
                phi[(i * w + j, f * n + i * w + j)] = mask.frames()[[f, i, j]];
            }
        }
    }
    phi
}

pub fn vec_of(x: &VideoCube) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn vec_of_y(y: &Measurement) -> DVector<f64> {
    DVector::from_iterator(y.data.len(), y.data.iter().copied())
}

pub fn cube_of(v: &DVector<f64>, shape: [usize; 3]) -> VideoCube {
    VideoCube::from_vec(shape[0], shape[1], shape[2], v.as_slice().to_vec()).unwrap()
}

pub fn max_abs(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Random symmetric matrix rescaled to spectral norm `radius`.
pub fn symmetric_with_norm(seed: u64, n: usize, radius: f64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = (&a + a.transpose()) * 0.5;
    let norm = s.clone().symmetric_eigen().eigenvalues.amax();
    s * (radius / norm)
}

/// Random general matrix rescaled to spectral norm `radius`.
pub fn general_with_norm(seed: u64, n: usize, radius: f64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let norm = a.clone().svd(false, false).singular_values.max();
    a * (radius / norm)
}

/// Applies a dense matrix to a flattened `1 x 1 x n` cube.
pub fn matvec(m: &DMatrix<f64>, x: &VideoCube) -> VideoCube {
    let out = m * vec_of(x);
    cube_of(&out, x.shape())
}

pub fn line_cube(values: &[f64]) -> VideoCube {
    VideoCube::from_vec(1, 1, values.len(), values.to_vec()).unwrap()
}
