//! Recurrent refinement map `f(x) = x + gamma * cell(x, Phi^T y, Phi^T (y - Phi x))`.
//!
//! The cell looks at each frame through three channels: the current
//! estimate, the back-projected measurement, and the back-projected
//! measurement residual.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_shape, IterationMap, MapLinearization};
use crate::cube::VideoCube;
use crate::denoise::conv::{self, ConvLayer, SIGMA_FLOOR};
use crate::denoise::sidecar_path;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::sensing::{self, Measurement, SensingMask};
use crate::tensor_io::{self, Dtype};

const CELL_INPUTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum CellKind {
    /// `sigmoid(W_g u + b_g) * tanh(W_h u + b_h)` with `3 -> 1` convolutions.
    Gated {
        gate: ConvLayer,
        cand: ConvLayer,
        sn_grid: (usize, usize),
        sn_state: Vec<Vec<f64>>,
    },
    /// `w[0] x + w[1] Phi^T y + w[2] Phi^T (y - Phi x) + w[3]`.
    Affine { w: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCellParams {
    pub gamma: f64,
    pub kind: CellKind,
}

impl RecurrentCellParams {
    pub fn gated_zeros(kernel: usize, gamma: f64, sn_grid: (usize, usize)) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        if sn_grid.0 == 0 || sn_grid.1 == 0 {
            return Err(Error::invalid("spectral-norm grid must be non-empty"));
        }
        let mut p = Self {
            gamma,
            kind: CellKind::Gated {
                gate: ConvLayer::zeros(CELL_INPUTS, 1, kernel),
                cand: ConvLayer::zeros(CELL_INPUTS, 1, kernel),
                sn_grid,
                sn_state: Vec::new(),
            },
        };
        p.reset_sn_state(0x5eed);
        p.validate()?;
        Ok(p)
    }

    pub fn gated_random(
        kernel: usize,
        gamma: f64,
        seed: u64,
        init_scale: f64,
        sn_grid: (usize, usize),
    ) -> Result<Self> {
        let mut p = Self::gated_zeros(kernel, gamma, sn_grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let CellKind::Gated { gate, cand, .. } = &mut p.kind {
            *gate = ConvLayer::random(CELL_INPUTS, 1, kernel, init_scale, &mut rng);
            *cand = ConvLayer::random(CELL_INPUTS, 1, kernel, init_scale, &mut rng);
        }
        p.reset_sn_state(seed.wrapping_add(0x5eed));
        Ok(p)
    }

    pub fn affine(w: [f64; 4], gamma: f64) -> Result<Self> {
        let p = Self {
            gamma,
            kind: CellKind::Affine { w },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("recurrent cell parameters".into()));
        }
        Ok(())
    }

    pub fn reset_sn_state(&mut self, seed: u64) {
        if let CellKind::Gated { gate, sn_grid, sn_state, .. } = &mut self.kind {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = gate.c_in * sn_grid.0 * sn_grid.1;
            *sn_state = (0..2)
                .map(|_| {
                    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    u.iter_mut().for_each(|v| *v /= norm);
                    u
                })
                .collect();
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.kind {
            CellKind::Gated { gate, cand, .. } => gate.num_params() + cand.num_params(),
            CellKind::Affine { .. } => 4,
        }
    }

    /// Gate kernel, gate bias, candidate kernel, candidate bias.
    pub fn params(&self) -> Vec<f64> {
        match &self.kind {
            CellKind::Gated { gate, cand, .. } => gate
                .kernel
                .iter()
                .chain(&gate.bias)
                .chain(&cand.kernel)
                .chain(&cand.bias)
                .copied()
                .collect(),
            CellKind::Affine { w } => w.to_vec(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_params()],
                found: vec![theta.len()],
            });
        }
        match &mut self.kind {
            CellKind::Gated { gate, cand, .. } => {
                let mut rest = theta;
                for layer in [gate, cand] {
                    let (k, r) = rest.split_at(layer.kernel.len());
                    let (b, r) = r.split_at(layer.bias.len());
                    layer.kernel.copy_from_slice(k);
                    layer.bias.copy_from_slice(b);
                    rest = r;
                }
            }
            CellKind::Affine { w } => w.copy_from_slice(theta),
        }
        Ok(())
    }

    /// Power-iteration norms of the gate and candidate convolutions.
    pub fn layer_norms(&self, n_iters: usize) -> Vec<f64> {
        match &self.kind {
            CellKind::Gated { gate, cand, sn_grid, sn_state } => [gate, cand]
                .into_iter()
                .zip(sn_state)
                .map(|(layer, u)| {
                    let mut u = u.clone();
                    conv::operator_norm(layer, *sn_grid, &mut u, n_iters)
                })
                .collect(),
            CellKind::Affine { .. } => Vec::new(),
        }
    }

    /// Rescales each convolution to operator norm at most one.
    pub fn spectral_normalize(&mut self, n_iters: usize) -> Vec<f64> {
        match &mut self.kind {
            CellKind::Gated { gate, cand, sn_grid, sn_state } => [gate, cand]
                .into_iter()
                .zip(sn_state.iter_mut())
                .map(|(layer, u)| {
                    let sigma = conv::operator_norm(layer, *sn_grid, u, n_iters).max(SIGMA_FLOOR);
                    if sigma > 1.0 {
                        layer.kernel.iter_mut().for_each(|k| *k /= sigma);
                    }
                    sigma
                })
                .collect(),
            CellKind::Affine { .. } => Vec::new(),
        }
    }

    /// Upper bound on the Lipschitz constant of `cell` as a function of `x`.
    ///
    /// The stacked input `(x, Phi^T y, Phi^T y - Phi^T Phi x)` is
    /// `sqrt(1 + q_max^2)`-Lipschitz in `x`; the gated product adds
    /// `|sigmoid'| <= 1/4` on the gate and `|tanh'| <= 1` on the candidate.
    pub fn cell_lipschitz_bound(&self, mask: &SensingMask, n_iters: usize) -> f64 {
        let q_max = mask.q_diag().iter().fold(0.0f64, |m, &q| m.max(q));
        match &self.kind {
            CellKind::Gated { .. } => {
                let norms = self.layer_norms(n_iters);
                (0.25 * norms[0] + norms[1]) * (1.0 + q_max * q_max).sqrt()
            }
            CellKind::Affine { w } => w[0].abs() + w[2].abs() * q_max,
        }
    }
}

/// `f(x) = x + gamma * cell(x, Phi^T y, Phi^T (y - Phi x))`.
#[derive(Debug, Clone)]
pub struct DeRnnMap<'a> {
    pub cell: &'a RecurrentCellParams,
    pub mask: &'a SensingMask,
    pub y: &'a Measurement,
    aty: VideoCube,
}

impl<'a> DeRnnMap<'a> {
    pub fn new(cell: &'a RecurrentCellParams, mask: &'a SensingMask, y: &'a Measurement) -> Result<Self> {
        cell.validate()?;
        let aty = sensing::adjoint(mask, y)?;
        Ok(Self { cell, mask, y, aty })
    }

    fn residual_backprojection(&self, x: &VideoCube) -> Result<VideoCube> {
        let mut r = sensing::gram(self.mask, x)?;
        r.scale(-1.0);
        r.axpy(1.0, &self.aty);
        Ok(r)
    }

    /// Interleaves the three cell inputs as `[frame][channel][row][col]`.
    fn stack(&self, x: &VideoCube, r: &VideoCube) -> Vec<f64> {
        let plane = x.height() * x.width();
        let mut u = Vec::with_capacity(CELL_INPUTS * x.len());
        for b in 0..x.frames() {
            let range = b * plane..(b + 1) * plane;
            u.extend_from_slice(&x.as_slice()[range.clone()]);
            u.extend_from_slice(&self.aty.as_slice()[range.clone()]);
            u.extend_from_slice(&r.as_slice()[range]);
        }
        u
    }

    fn evaluate(&self, x: &VideoCube) -> Result<(VideoCube, CellTape)> {
        check_shape(self.shape(), x)?;
        x.check_finite("recurrent map input")?;
        let r = self.residual_backprojection(x)?;
        let gamma = self.cell.gamma;
        let mut out = x.clone();
        let tape = match &self.cell.kind {
            CellKind::Gated { gate, cand, .. } => {
                let [b, h, w] = x.shape();
                let u = self.stack(x, &r);
                let mut a = vec![0.0; b * h * w];
                let mut c = vec![0.0; b * h * w];
                conv::forward(gate, &u, b, h, w, true, &mut a);
                conv::forward(cand, &u, b, h, w, true, &mut c);
                for ((o, ai), ci) in out.as_slice_mut().iter_mut().zip(&a).zip(&c) {
                    *o += gamma * sigmoid(*ai) * ci.tanh();
                }
                CellTape::Gated { u, a, c }
            }
            CellKind::Affine { w } => {
                let out_s = out.as_slice_mut();
                for (((o, xv), av), rv) in out_s
                    .iter_mut()
                    .zip(x.as_slice())
                    .zip(self.aty.as_slice())
                    .zip(r.as_slice())
                {
                    *o += gamma * (w[0] * xv + w[1] * av + w[2] * rv + w[3]);
                }
                CellTape::Affine { x: x.clone(), r }
            }
        };
        Ok((out, tape))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

enum CellTape {
    Gated { u: Vec<f64>, a: Vec<f64>, c: Vec<f64> },
    Affine { x: VideoCube, r: VideoCube },
}

struct DeRnnLinearization<'m, 'a> {
    map: &'m DeRnnMap<'a>,
    out: VideoCube,
    tape: CellTape,
}

impl IterationMap for DeRnnMap<'_> {
    fn shape(&self) -> [usize; 3] {
        [self.mask.num_frames(), self.mask.height(), self.mask.width()]
    }

    fn apply(&self, x: &VideoCube) -> Result<VideoCube> {
        Ok(self.evaluate(x)?.0)
    }

    fn linearize(&self, x: &VideoCube) -> Result<Box<dyn MapLinearization + '_>> {
        let (out, tape) = self.evaluate(x)?;
        Ok(Box::new(DeRnnLinearization { map: self, out, tape }))
    }
}

pub fn de_rnn_apply(m: &DeRnnMap<'_>, x: &VideoCube) -> Result<VideoCube> {
    m.apply(x)
}

impl DeRnnLinearization<'_, '_> {
    /// Gradients of `<v, gamma * cell>` with respect to the stacked gated
    /// input and to the gate and candidate pre-activations.
    fn gated_grads(&self, v: &VideoCube) -> (Vec<f64>, Vec<f64>) {
        let CellTape::Gated { a, c, .. } = &self.tape else {
            unreachable!("gated tape")
        };
        let gamma = self.map.cell.gamma;
        let mut ga = vec![0.0; a.len()];
        let mut gc = vec![0.0; c.len()];
        for i in 0..a.len() {
            let s = sigmoid(a[i]);
            let t = c[i].tanh();
            let g = gamma * v.as_slice()[i];
            ga[i] = g * t * s * (1.0 - s);
            gc[i] = g * s * (1.0 - t * t);
        }
        (ga, gc)
    }
}

impl MapLinearization for DeRnnLinearization<'_, '_> {
    fn output(&self) -> &VideoCube {
        &self.out
    }

    fn vjp_input(&self, v: &VideoCube) -> Result<VideoCube> {
        check_shape(self.map.shape(), v)?;
        let gamma = self.map.cell.gamma;
        match (&self.map.cell.kind, &self.tape) {
            (CellKind::Gated { gate, cand, .. }, CellTape::Gated { .. }) => {
                let [b, h, w] = v.shape();
                let plane = h * w;
                let (ga, gc) = self.gated_grads(v);
                let mut gu = vec![0.0; CELL_INPUTS * b * plane];
                let mut tmp = vec![0.0; CELL_INPUTS * b * plane];
                conv::adjoint(gate, &ga, b, h, w, &mut gu);
                conv::adjoint(cand, &gc, b, h, w, &mut tmp);
                gu.iter_mut().zip(&tmp).for_each(|(g, t)| *g += t);
                let mut gx = VideoCube::zeros(b, h, w);
                let mut gr = VideoCube::zeros(b, h, w);
                for f in 0..b {
                    let base = f * CELL_INPUTS * plane;
                    gx.as_slice_mut()[f * plane..(f + 1) * plane]
                        .copy_from_slice(&gu[base..base + plane]);
                    gr.as_slice_mut()[f * plane..(f + 1) * plane]
                        .copy_from_slice(&gu[base + 2 * plane..base + 3 * plane]);
                }
                // r = Phi^T y - Phi^T Phi x, and Phi^T Phi is symmetric.
                gx.axpy(-1.0, &sensing::gram(self.map.mask, &gr)?);
                gx.axpy(1.0, v);
                Ok(gx)
            }
            (CellKind::Affine { w }, _) => {
                let mut out = v.map(|g| g * (1.0 + gamma * w[0]));
                out.axpy(-gamma * w[2], &sensing::gram(self.map.mask, v)?);
                Ok(out)
            }
            _ => unreachable!("tape matches cell kind"),
        }
    }

    fn vjp_params(&self, v: &VideoCube) -> Result<Vec<f64>> {
        check_shape(self.map.shape(), v)?;
        let gamma = self.map.cell.gamma;
        match (&self.map.cell.kind, &self.tape) {
            (CellKind::Gated { gate, cand, .. }, CellTape::Gated { u, .. }) => {
                let [b, h, w] = v.shape();
                let (ga, gc) = self.gated_grads(v);
                let mut out = Vec::with_capacity(self.map.cell.num_params());
                for (layer, g) in [(gate, &ga), (cand, &gc)] {
                    let mut gk = vec![0.0; layer.kernel.len()];
                    let mut gb = vec![0.0; layer.bias.len()];
                    conv::accumulate_param_grad(layer, u, g, b, h, w, &mut gk, Some(&mut gb));
                    out.extend(gk);
                    out.extend(gb);
                }
                Ok(out)
            }
            (CellKind::Affine { .. }, CellTape::Affine { x, r }) => Ok(vec![
                gamma * x.dot(v),
                gamma * self.map.aty.dot(v),
                gamma * r.dot(v),
                gamma * v.as_slice().iter().sum::<f64>(),
            ]),
            _ => unreachable!("tape matches cell kind"),
        }
    }
}

/// Writes cell parameters as a float64 tensor plus a `key = value` sidecar.
pub fn write_cell_checkpoint(path: impl AsRef<Path>, cell: &RecurrentCellParams) -> Result<()> {
    let path = path.as_ref();
    let mut meta = KvFile::new();
    meta.set("kind", "recurrent_cell");
    meta.set("gamma", cell.gamma);
    match &cell.kind {
        CellKind::Gated { gate, sn_grid, .. } => {
            meta.set("cell", "gated");
            meta.set("kernel", gate.k);
            meta.set("sn_height", sn_grid.0);
            meta.set("sn_width", sn_grid.1);
        }
        CellKind::Affine { .. } => meta.set("cell", "affine"),
    }
    meta.set("num_params", cell.num_params());
    let theta = ndarray::Array1::from(cell.params()).into_dyn();
    tensor_io::write_tensor(path, &theta, Dtype::F64)?;
    meta.write(sidecar_path(path))
}

pub fn read_cell_checkpoint(path: impl AsRef<Path>) -> Result<RecurrentCellParams> {
    let path = path.as_ref();
    let meta = KvFile::read(sidecar_path(path))?;
    let bad = |message: String| Error::Parse {
        path: meta.path().to_path_buf(),
        line: 0,
        message,
    };
    if meta.require("kind")? != "recurrent_cell" {
        return Err(bad(format!("not a recurrent cell checkpoint: kind = {}", meta.require("kind")?)));
    }
    let gamma = meta.parsed("gamma")?;
    let mut cell = match meta.require("cell")? {
        "gated" => RecurrentCellParams::gated_zeros(
            meta.parsed("kernel")?,
            gamma,
            (meta.parsed("sn_height")?, meta.parsed("sn_width")?),
        )?,
        "affine" => RecurrentCellParams::affine([0.0; 4], gamma)?,
        other => return Err(bad(format!("unknown cell type {other:?}"))),
    };
    let theta: Vec<f64> = tensor_io::read_tensor_as(path, Dtype::F64)?.iter().copied().collect();
    cell.set_params(&theta)?;
    cell.validate()?;
    Ok(cell)
}
