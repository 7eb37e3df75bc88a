//! PSNR and single-scale SSIM, computed per frame then averaged.

use ndarray::{Array2, ArrayView2};

use crate::cube::VideoCube;
use crate::error::{Error, Result};

/// Reported for exact reconstructions and used as an upper clamp.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

impl FrameScores {
    fn new(per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        Self { per_frame, mean }
    }
}

/// `10 log10(peak^2 / MSE)` per frame, capped at [`PSNR_CAP`].
pub fn psnr(x: &VideoCube, reference: &VideoCube, peak: f64) -> Result<FrameScores> {
    x.ensure_same_shape(reference)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("psnr peak must be > 0, got {peak}")));
    }
    let per_frame = (0..x.frames())
        .map(|b| {
            let mse = x
                .frame(b)
                .iter()
                .zip(reference.frame(b).iter())
                .map(|(a, r)| (a - r) * (a - r))
                .sum::<f64>()
                / (x.height() * x.width()) as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect();
    Ok(FrameScores::new(per_frame))
}

/// Mean PSNR with peak 1.
pub fn mean_psnr(x: &VideoCube, reference: &VideoCube) -> Result<f64> {
    Ok(psnr(x, reference, 1.0)?.mean)
}

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let dy = i as f64 - r;
        let dx = j as f64 - r;
        (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = w.sum();
    w /= total;
    w
}

fn ssim_frame(x: ArrayView2<f64>, y: ArrayView2<f64>, window: &Array2<f64>) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (h, w) = x.dim();
    let k = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wt = window[[a, b]];
                    let xv = x[[i + a, j + b]];
                    let yv = y[[i + a, j + b]];
                    mx += wt * xv;
                    my += wt * yv;
                    sxx += wt * xv * xv;
                    syy += wt * yv * yv;
                    sxy += wt * xv * yv;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1, averaged over valid window positions and
/// then over frames.
pub fn ssim(x: &VideoCube, reference: &VideoCube) -> Result<FrameScores> {
    x.ensure_same_shape(reference)?;
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    let window = gaussian_window();
    let per_frame = (0..x.frames())
        .map(|b| ssim_frame(x.frame(b), reference.frame(b), &window))
        .collect();
    Ok(FrameScores::new(per_frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_analytic_value() {
        let a = VideoCube::from_elem(2, 4, 4, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap().mean, PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        let p = psnr(&b, &a, 1.0).unwrap();
        for v in p.per_frame {
            assert!((v - 20.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn psnr_rejects_bad_peak_and_shapes() {
        let a = VideoCube::zeros(1, 2, 2);
        assert!(psnr(&a, &a, 0.0).is_err());
        assert!(psnr(&a, &VideoCube::zeros(1, 2, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = VideoCube::from_vec(1, 12, 12, (0..144).map(|i| (i % 7) as f64 / 7.0).collect())
            .unwrap();
        assert_eq!(ssim(&a, &a).unwrap().mean, 1.0);
        let c = VideoCube::from_elem(2, 11, 11, 0.3);
        assert_eq!(ssim(&c, &c).unwrap().mean, 1.0);
        assert!(ssim(&VideoCube::zeros(1, 10, 12), &VideoCube::zeros(1, 10, 12)).is_err());
    }

    #[test]
    fn window_sums_to_one() {
        assert!((gaussian_window().sum() - 1.0).abs() < 1e-14);
    }
}
