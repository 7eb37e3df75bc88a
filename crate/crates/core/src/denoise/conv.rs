//! Zero-padded "same" 2D convolutions over batches of multi-channel images,
//! together with their adjoint and kernel gradient.
//!
//! Buffers are laid out `[image][channel][row][col]`. Kernels are
//! `[c_out][c_in][k][k]` and are applied as cross-correlations.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Self {
            c_in,
            c_out,
            k,
            kernel: vec![0.0; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    /// Gaussian kernel entries with standard deviation `scale / sqrt(c_in k^2)`.
    pub fn random(c_in: usize, c_out: usize, k: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(c_in, c_out, k);
        let std = scale / ((c_in * k * k) as f64).sqrt();
        for w in &mut layer.kernel {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        layer
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    #[inline]
    fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.kernel[((co * self.c_in + ci) * self.k + ky) * self.k + kx]
    }
}

/// Valid output index range `[lo, hi)` for a tap at offset `d` along an axis
/// of length `n`, i.e. indices `i` with `0 <= i + d < n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// `out = conv(input) (+ bias)`. `out` is overwritten.
pub fn forward(
    layer: &ConvLayer,
    input: &[f64],
    images: usize,
    h: usize,
    w: usize,
    with_bias: bool,
    out: &mut [f64],
) {
    let plane = h * w;
    debug_assert_eq!(input.len(), images * layer.c_in * plane);
    debug_assert_eq!(out.len(), images * layer.c_out * plane);
    let r = (layer.k / 2) as isize;
    for img in 0..images {
        for co in 0..layer.c_out {
            let o_base = (img * layer.c_out + co) * plane;
            let o_plane = &mut out[o_base..o_base + plane];
            o_plane.fill(if with_bias { layer.bias[co] } else { 0.0 });
            for ci in 0..layer.c_in {
                let i_base = (img * layer.c_in + ci) * plane;
                let i_plane = &input[i_base..i_base + plane];
                for ky in 0..layer.k {
                    let dy = ky as isize - r;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..layer.k {
                        let wv = layer.weight(co, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - r;
                        let (x0, x1) = tap_range(dx, w);
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * w;
                            let dst = &mut o_plane[y * w + x0..y * w + x1];
                            let src = &i_plane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of the linear part of [`forward`]: `grad_in = conv^T(grad_out)`.
/// `grad_in` is overwritten.
pub fn adjoint(
    layer: &ConvLayer,
    grad_out: &[f64],
    images: usize,
    h: usize,
    w: usize,
    grad_in: &mut [f64],
) {
    let plane = h * w;
    debug_assert_eq!(grad_out.len(), images * layer.c_out * plane);
    debug_assert_eq!(grad_in.len(), images * layer.c_in * plane);
    grad_in.fill(0.0);
    let r = (layer.k / 2) as isize;
    for img in 0..images {
        for ci in 0..layer.c_in {
            let i_base = (img * layer.c_in + ci) * plane;
            let gi_plane = &mut grad_in[i_base..i_base + plane];
            for co in 0..layer.c_out {
                let o_base = (img * layer.c_out + co) * plane;
                let go_plane = &grad_out[o_base..o_base + plane];
                for ky in 0..layer.k {
                    let dy = ky as isize - r;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..layer.k {
                        let wv = layer.weight(co, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - r;
                        let (x0, x1) = tap_range(dx, w);
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * w;
                            let go = &go_plane[y * w + x0..y * w + x1];
                            let gi = &mut gi_plane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            for (g, o) in gi.iter_mut().zip(go) {
                                *g += wv * o;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `d<grad_out, conv(input)>/d(kernel, bias)` into `gk` and `gb`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_param_grad(
    layer: &ConvLayer,
    input: &[f64],
    grad_out: &[f64],
    images: usize,
    h: usize,
    w: usize,
    gk: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let plane = h * w;
    let r = (layer.k / 2) as isize;
    for img in 0..images {
        for co in 0..layer.c_out {
            let o_base = (img * layer.c_out + co) * plane;
            let go_plane = &grad_out[o_base..o_base + plane];
            for ci in 0..layer.c_in {
                let i_base = (img * layer.c_in + ci) * plane;
                let i_plane = &input[i_base..i_base + plane];
                for ky in 0..layer.k {
                    let dy = ky as isize - r;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..layer.k {
                        let dx = kx as isize - r;
                        let (x0, x1) = tap_range(dx, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * w;
                            let go = &go_plane[y * w + x0..y * w + x1];
                            let src = &i_plane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            acc += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gk[((co * layer.c_in + ci) * layer.k + ky) * layer.k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for img in 0..images {
            for co in 0..layer.c_out {
                let o_base = (img * layer.c_out + co) * plane;
                gb[co] += grad_out[o_base..o_base + plane].iter().sum::<f64>();
            }
        }
    }
}

/// Norm estimates below this are treated as zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Estimates `||W||_2` for the zero-padded conv operator of `layer` over a
/// single `grid` image by a `steps`-step Lanczos iteration on `W^T W`
/// started at `u` (with full reorthogonalization). The top Ritz vector is
/// written back to `u`, so repeated calls keep refining the estimate.
///
/// The Krylov space contains the power-iteration iterates, so the estimate
/// is never worse than the same number of power steps, and it converges far
/// faster when the top singular values are clustered, as they are for
/// convolutions.
pub fn operator_norm(layer: &ConvLayer, grid: (usize, usize), u: &mut [f64], steps: usize) -> f64 {
    // Restarting from the Ritz vector bounds the basis size on long runs.
    let mut left = steps.max(1);
    let mut sigma = 0.0;
    while left > 0 {
        let chunk = left.min(LANCZOS_MAX_BASIS).min(u.len());
        sigma = lanczos_run(layer, grid, u, chunk);
        left -= left.min(LANCZOS_MAX_BASIS);
    }
    sigma
}

/// Largest Krylov basis built before a restart.
const LANCZOS_MAX_BASIS: usize = 32;

fn lanczos_run(layer: &ConvLayer, grid: (usize, usize), u: &mut [f64], steps: usize) -> f64 {
    let (h, w) = grid;
    let gram = |v: &[f64]| {
        let mut wv = vec![0.0; layer.c_out * h * w];
        forward(layer, v, 1, h, w, false, &mut wv);
        let mut out = vec![0.0; v.len()];
        adjoint(layer, &wv, 1, h, w, &mut out);
        out
    };
    let n0 = l2(u);
    if n0 <= SIGMA_FLOOR {
        return 0.0;
    }
    let mut basis: Vec<Vec<f64>> = vec![u.iter().map(|v| v / n0).collect()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for j in 0..=steps {
        let mut r = gram(&basis[j]);
        alphas.push(dot(&r, &basis[j]));
        // Two passes of Gram-Schmidt keep the basis orthonormal to roundoff.
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&r, q);
                r.iter_mut().zip(q).for_each(|(r, q)| *r -= c * q);
            }
        }
        let beta = l2(&r);
        if j == steps || beta <= SIGMA_FLOOR * alphas[0].abs().max(1.0) {
            break;
        }
        betas.push(beta);
        basis.push(r.into_iter().map(|v| v / beta).collect());
    }
    let m = alphas.len();
    let t = DMatrix::from_fn(m, m, |i, k| {
        if i == k {
            alphas[i]
        } else if i + 1 == k {
            betas[i]
        } else if k + 1 == i {
            betas[k]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let top = eig.eigenvalues.imax();
    let theta = eig.eigenvalues[top].max(0.0);
    let coeffs = eig.eigenvectors.column(top);
    u.iter_mut().for_each(|v| *v = 0.0);
    for (q, c) in basis.iter().zip(coeffs.iter()) {
        u.iter_mut().zip(q).for_each(|(u, q)| *u += c * q);
    }
    let nu = l2(u);
    if nu > 0.0 {
        u.iter_mut().for_each(|v| *v /= nu);
    }
    theta.sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
