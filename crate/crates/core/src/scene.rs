//! Deterministic synthetic videos with values in `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cube::VideoCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// A bright square over a smooth periodic texture; the whole frame rolls
    /// horizontally by `amplitude` pixels per frame.
    MovingSquare,
    /// A smooth periodic intensity pattern drifting horizontally.
    ShiftingGradient,
    /// Gaussian dots moving at seeded velocities and reflecting off the borders.
    BouncingDots,
}

impl SceneKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "moving_square" => Some(SceneKind::MovingSquare),
            "shifting_gradient" => Some(SceneKind::ShiftingGradient),
            "bouncing_dots" => Some(SceneKind::BouncingDots),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::MovingSquare => "moving_square",
            SceneKind::ShiftingGradient => "shifting_gradient",
            SceneKind::BouncingDots => "bouncing_dots",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Pixels per frame.
    pub amplitude: usize,
}

impl SyntheticScene {
    pub fn label(&self) -> String {
        format!("{}_{}", self.kind, self.seed)
    }
}

pub fn synth_video(scene: &SyntheticScene) -> Result<VideoCube> {
    let SyntheticScene { height: h, width: w, frames: b, .. } = *scene;
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::invalid(format!("scene dimensions must be positive, got {b}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut cube = VideoCube::zeros(b, h, w);
    match scene.kind {
        SceneKind::MovingSquare => {
            let base = moving_square_frame(&mut rng, h, w);
            for f in 0..b {
                let shift = (f * scene.amplitude) % w;
                let mut frame = cube.frame_mut(f);
                for i in 0..h {
                    for j in 0..w {
                        frame[[i, (j + shift) % w]] = base[i * w + j];
                    }
                }
            }
        }
        SceneKind::ShiftingGradient => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let tilt = rng.random_range(0.2..0.8);
            for f in 0..b {
                let offset = (f * scene.amplitude) as f64;
                let mut frame = cube.frame_mut(f);
                for i in 0..h {
                    for j in 0..w {
                        let u = 2.0 * PI * (j as f64 - offset) / w as f64 + phase;
                        let v = i as f64 / h as f64;
                        frame[[i, j]] = (0.5 + 0.35 * u.sin() * (1.0 - tilt * v) + 0.1 * (v - 0.5)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        SceneKind::BouncingDots => {
            let n = rng.random_range(3..=6);
            let radius = (h.min(w) as f64 / 10.0).max(1.0);
            let dots: Vec<[f64; 5]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            let amp = scene.amplitude as f64;
            for f in 0..b {
                let mut frame = cube.frame_mut(f);
                for &[y0, x0, vy, vx, level] in &dots {
                    let cy = reflect(y0 + vy * amp * f as f64, h as f64);
                    let cx = reflect(x0 + vx * amp * f as f64, w as f64);
                    for i in 0..h {
                        for j in 0..w {
                            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                            frame[[i, j]] += level * (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
                frame.mapv_inplace(|v| v.min(1.0));
            }
        }
    }
    Ok(cube)
}

fn moving_square_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1..=3) as f64,
                rng.random_range(0..=2) as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    let side = (h.min(w) / 4).max(1);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..w);
    let level = rng.random_range(0.85..1.0);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut v = 0.35;
            for &(fx, fy, phase, a) in &waves {
                v += a * (2.0 * PI * (fx * j as f64 / w as f64 + fy * i as f64 / h as f64) + phase).sin();
            }
            let in_rows = i >= top && i < top + side;
            let in_cols = (j + w - left) % w < side;
            out[i * w + j] = if in_rows && in_cols { level } else { v.clamp(0.0, 1.0) };
        }
    }
    out
}

/// Folds a coordinate into `[0, n - 1]` by mirror reflection.
fn reflect(p: f64, n: f64) -> f64 {
    let span = (n - 1.0).max(0.0);
    if span == 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let r = p.rem_euclid(period);
    if r > span {
        period - r
    } else {
        r
    }
}
