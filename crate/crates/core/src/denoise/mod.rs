//! Denoising operators `D_theta` with value, input-VJP and parameter-VJP.

pub mod conv;
pub mod residual;
pub mod tv;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use residual::{Activation, ConvArch, ConvDenoiserParams, ConvTape};
pub use tv::{total_variation, tv_denoise, tv_energy};

use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor_io::{self, Dtype};

/// Power iterations used when a layer-norm bound is requested.
pub const VALIDATION_SN_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    Identity,
    /// `D(x) = a x + b`.
    ScaleShift { a: f64, b: f64 },
    /// Anisotropic TV proximal step (not differentiable here).
    Tv { lambda: f64, iters: usize },
    ConvResidual(ConvDenoiserParams),
}

/// A denoiser evaluated at a fixed input, keeping what its VJPs need.
pub struct DenoiserLinearization<'a> {
    denoiser: &'a Denoiser,
    input: Option<VideoCube>,
    tape: Option<ConvTape>,
}

impl Denoiser {
    pub fn validate(&self) -> Result<()> {
        match self {
            Denoiser::Identity => Ok(()),
            Denoiser::ScaleShift { a, b } => {
                if a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("scale_shift parameters must be finite"))
                }
            }
            Denoiser::Tv { lambda, iters } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    Err(Error::invalid(format!("tv lambda must be >= 0, got {lambda}")))
                } else if *iters == 0 {
                    Err(Error::invalid("tv iteration count must be >= 1"))
                } else {
                    Ok(())
                }
            }
            Denoiser::ConvResidual(p) => p.arch().validate(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Denoiser::Identity => "identity",
            Denoiser::ScaleShift { .. } => "scale_shift",
            Denoiser::Tv { .. } => "tv",
            Denoiser::ConvResidual(_) => "conv_residual",
        }
    }

    pub fn denoise(&self, x: &VideoCube) -> Result<VideoCube> {
        x.check_finite("denoiser input")?;
        Ok(match self {
            Denoiser::Identity => x.clone(),
            Denoiser::ScaleShift { a, b } => x.map(|v| a * v + b),
            Denoiser::Tv { lambda, iters } => tv_denoise(x, *lambda, *iters)?,
            Denoiser::ConvResidual(p) => p.apply(x),
        })
    }

    /// Evaluates `D(x)` and keeps the state needed for VJPs at `x`.
    pub fn linearize(&self, x: &VideoCube) -> Result<(VideoCube, DenoiserLinearization<'_>)> {
        x.check_finite("denoiser input")?;
        match self {
            Denoiser::ConvResidual(p) => {
                let (out, tape) = p.forward_with_tape(x);
                Ok((
                    out,
                    DenoiserLinearization {
                        denoiser: self,
                        input: None,
                        tape: Some(tape),
                    },
                ))
            }
            Denoiser::ScaleShift { .. } => Ok((
                self.denoise(x)?,
                DenoiserLinearization {
                    denoiser: self,
                    input: Some(x.clone()),
                    tape: None,
                },
            )),
            _ => Ok((
                self.denoise(x)?,
                DenoiserLinearization {
                    denoiser: self,
                    input: None,
                    tape: None,
                },
            )),
        }
    }

    /// `(dD/dx)^T v` at `x`.
    pub fn vjp_input(&self, x: &VideoCube, v: &VideoCube) -> Result<VideoCube> {
        x.ensure_same_shape(v)?;
        self.linearize(x)?.1.vjp_input(v)
    }

    /// `(dD/dtheta)^T v` at `x`, flattened like [`Denoiser::params`].
    pub fn grad_params(&self, x: &VideoCube, v: &VideoCube) -> Result<Vec<f64>> {
        x.ensure_same_shape(v)?;
        if !self.is_trainable() {
            return Err(Error::Unsupported(format!(
                "{} denoiser has no trainable parameters",
                self.kind_name()
            )));
        }
        self.linearize(x)?.1.grad_params(v)
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Denoiser::ScaleShift { .. } | Denoiser::ConvResidual(_))
    }

    pub fn num_params(&self) -> usize {
        match self {
            Denoiser::ScaleShift { .. } => 2,
            Denoiser::ConvResidual(p) => p.num_params(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Denoiser::ScaleShift { a, b } => vec![*a, *b],
            Denoiser::ConvResidual(p) => p.flatten(),
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_params()],
                found: vec![theta.len()],
            });
        }
        match self {
            Denoiser::ScaleShift { a, b } => {
                *a = theta[0];
                *b = theta[1];
                Ok(())
            }
            Denoiser::ConvResidual(p) => p.unflatten(theta),
            _ => Ok(()),
        }
    }

    /// Spectrally normalizes conv layers; a no-op for other kinds.
    pub fn spectral_normalize(&mut self, n_iters: usize) {
        if let Denoiser::ConvResidual(p) = self {
            p.spectral_normalize(n_iters);
        }
    }

    /// Analytic upper bound on the Lipschitz constant of `D - I`, when one
    /// is available.
    pub fn residual_lipschitz_bound(&self) -> Option<f64> {
        match self {
            Denoiser::Identity => Some(0.0),
            Denoiser::ScaleShift { a, .. } => Some((a - 1.0).abs()),
            Denoiser::Tv { .. } => None,
            Denoiser::ConvResidual(p) => Some(p.residual_lipschitz_bound(VALIDATION_SN_ITERS)),
        }
    }
}

impl DenoiserLinearization<'_> {
    pub fn vjp_input(&self, v: &VideoCube) -> Result<VideoCube> {
        match self.denoiser {
            Denoiser::Identity => Ok(v.clone()),
            Denoiser::ScaleShift { a, .. } => Ok(v.map(|g| a * g)),
            Denoiser::Tv { .. } => Err(Error::Unsupported(
                "tv denoiser has no vector-Jacobian product".into(),
            )),
            Denoiser::ConvResidual(p) => {
                let tape = self.tape.as_ref().expect("conv linearization keeps a tape");
                Ok(p.vjp(tape, v, false).0)
            }
        }
    }

    pub fn grad_params(&self, v: &VideoCube) -> Result<Vec<f64>> {
        match self.denoiser {
            Denoiser::ScaleShift { .. } => {
                let x = self.input.as_ref().expect("scale_shift linearization keeps its input");
                Ok(vec![x.dot(v), v.as_slice().iter().sum()])
            }
            Denoiser::ConvResidual(p) => {
                let tape = self.tape.as_ref().expect("conv linearization keeps a tape");
                Ok(p.vjp(tape, v, true).1.expect("params requested"))
            }
            other => Err(Error::Unsupported(format!(
                "{} denoiser has no trainable parameters",
                other.kind_name()
            ))),
        }
    }

    /// Input-VJP and parameter-VJP in one pass.
    pub fn vjp_both(&self, v: &VideoCube) -> Result<(VideoCube, Vec<f64>)> {
        match self.denoiser {
            Denoiser::ConvResidual(p) => {
                let tape = self.tape.as_ref().expect("conv linearization keeps a tape");
                let (gx, gp) = p.vjp(tape, v, true);
                Ok((gx, gp.expect("params requested")))
            }
            _ => Ok((self.vjp_input(v)?, self.grad_params(v)?)),
        }
    }
}

pub fn denoise(d: &Denoiser, x: &VideoCube) -> Result<VideoCube> {
    d.denoise(x)
}

pub fn vjp_input(d: &Denoiser, x: &VideoCube, v: &VideoCube) -> Result<VideoCube> {
    d.vjp_input(x, v)
}

pub fn grad_params(d: &Denoiser, x: &VideoCube, v: &VideoCube) -> Result<Vec<f64>> {
    d.grad_params(x, v)
}

/// Returns a copy with every layer spectrally normalized.
pub fn spectral_normalize(p: &ConvDenoiserParams, n_iters: usize) -> ConvDenoiserParams {
    let mut out = p.clone();
    out.spectral_normalize(n_iters);
    out
}

/// Sampled lower bound on the Lipschitz constant of `D - I`: the largest
/// ratio `||(D-I)x - (D-I)x'|| / ||x - x'||` over `n_pairs` random pairs.
/// Even pairs are independent uniform cubes; odd pairs are local
/// perturbations of a uniform cube.
pub fn estimate_residual_lipschitz(
    d: &Denoiser,
    seed: u64,
    n_pairs: usize,
    shape: [usize; 3],
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    let [b, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng| {
        VideoCube::from_vec(b, h, w, (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
    };
    let mut best: f64 = 0.0;
    for pair in 0..n_pairs {
        let x = uniform(&mut rng)?;
        let x2 = if pair % 2 == 0 {
            uniform(&mut rng)?
        } else {
            let mut p = x.clone();
            for v in p.as_slice_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += 1e-2 * z;
            }
            p
        };
        let dist = x.distance(&x2);
        if dist == 0.0 {
            continue;
        }
        let r1 = d.denoise(&x)?.sub(&x);
        let r2 = d.denoise(&x2)?.sub(&x2);
        best = best.max(r1.distance(&r2) / dist);
    }
    Ok(best)
}

/// Sidecar path for a parameter checkpoint: `<path>.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the flat parameter vector as a float64 tensor file and the
/// architecture descriptor as a `key = value` sidecar.
pub fn write_checkpoint(path: impl AsRef<Path>, d: &Denoiser) -> Result<()> {
    let path = path.as_ref();
    let mut meta = KvFile::new();
    meta.set("kind", d.kind_name());
    match d {
        Denoiser::ConvResidual(p) => {
            meta.set("channels", p.arch().channels_string());
            meta.set("kernel", p.arch().kernel);
            meta.set("tied", p.arch().tied);
            meta.set("activation", p.arch().activation.name());
            meta.set("gamma", p.gamma);
            meta.set("sn_height", p.sn_grid().0);
            meta.set("sn_width", p.sn_grid().1);
        }
        Denoiser::Tv { lambda, iters } => {
            meta.set("lambda", lambda);
            meta.set("iters", iters);
        }
        _ => {}
    }
    meta.set("num_params", d.num_params());
    let theta = ndarray::Array1::from(d.params()).into_dyn();
    tensor_io::write_tensor(path, &theta, Dtype::F64)?;
    meta.write(sidecar_path(path))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Denoiser> {
    let path = path.as_ref();
    let meta = KvFile::read(sidecar_path(path))?;
    let theta = tensor_io::read_tensor_as(path, Dtype::F64)?;
    let theta: Vec<f64> = theta.iter().copied().collect();
    let mut d = match meta.require("kind")? {
        "identity" => Denoiser::Identity,
        "scale_shift" => Denoiser::ScaleShift { a: 1.0, b: 0.0 },
        "tv" => Denoiser::Tv {
            lambda: meta.parsed("lambda")?,
            iters: meta.parsed("iters")?,
        },
        "conv_residual" => {
            let channels = parse_channels(&meta, "channels")?;
            let activation = meta.require("activation")?;
            let arch = ConvArch {
                channels,
                kernel: meta.parsed("kernel")?,
                tied: meta.parsed("tied")?,
                activation: Activation::parse(activation).ok_or_else(|| Error::Parse {
                    path: meta.path().to_path_buf(),
                    line: 0,
                    message: format!("unknown activation {activation:?}"),
                })?,
            };
            let grid = (meta.parsed("sn_height")?, meta.parsed("sn_width")?);
            Denoiser::ConvResidual(ConvDenoiserParams::zeros(arch, meta.parsed("gamma")?, grid)?)
        }
        other => {
            return Err(Error::Parse {
                path: meta.path().to_path_buf(),
                line: 0,
                message: format!("unknown denoiser kind {other:?}"),
            })
        }
    };
    d.set_params(&theta)?;
    Ok(d)
}

pub(crate) fn parse_channels(meta: &KvFile, key: &str) -> Result<Vec<usize>> {
    meta.require(key)?
        .split(',')
        .map(|c| {
            c.trim().parse::<usize>().map_err(|e| Error::Parse {
                path: meta.path().to_path_buf(),
                line: 0,
                message: format!("bad channel list for {key}: {e}"),
            })
        })
        .collect()
}
