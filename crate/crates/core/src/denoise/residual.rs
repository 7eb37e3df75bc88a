//! Residual convolutional denoiser `D(x) = x + gamma * r(x)`.
//!
//! Every frame of the cube is treated as an independent single-channel image
//! and shares the same weights. Two residual shapes are supported:
//!
//! * free: `r = W_L o phi o ... o phi o W_1`, one conv layer per entry of
//!   `channels` after the first;
//! * tied: `r(x) = -W^T phi(W x + b)`, the negative gradient of the convex
//!   potential `sum Phi(W x + b)`, so `dr/dx = -W^T diag(phi') W` is symmetric
//!   negative semidefinite.
//!
//! With every layer spectrally normalized and `phi` 1-Lipschitz, the residual
//! is 1-Lipschitz and `D - I` is `gamma`-Lipschitz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvLayer, SIGMA_FLOOR};
use crate::cube::VideoCube;
use crate::error::{Error, Result};

pub const MAX_LAYERS: usize = 3;
pub const MAX_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softplus" => Some(Activation::Softplus),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvArch {
    /// Channel counts along the network, starting with the single input
    /// channel. Free networks end with 1; tied networks list only the
    /// encoder, `[1, hidden]`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub tied: bool,
    pub activation: Activation,
}

impl ConvArch {
    pub fn free(channels: Vec<usize>) -> Self {
        Self {
            channels,
            kernel: 3,
            tied: false,
            activation: Activation::Softplus,
        }
    }

    pub fn tied(hidden: usize) -> Self {
        Self {
            channels: vec![1, hidden],
            kernel: 3,
            tied: true,
            activation: Activation::Softplus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.channels;
        let bad = |msg: &str| Err(Error::invalid(format!("conv architecture {c:?}: {msg}")));
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return bad("kernel size must be odd");
        }
        if c.len() < 2 || c[0] != 1 {
            return bad("needs at least one layer and a single input channel");
        }
        if c.iter().any(|&n| n == 0 || n > MAX_CHANNELS) {
            return bad("channel counts must lie in 1..=8");
        }
        if self.tied {
            if c.len() != 2 {
                return bad("tied networks have exactly one encoder layer");
            }
        } else {
            if c.len() - 1 > MAX_LAYERS {
                return bad("at most 3 layers");
            }
            if *c.last().unwrap() != 1 {
                return bad("free networks must end with one channel");
            }
        }
        Ok(())
    }

    /// `1,8,1` style descriptor used in checkpoint sidecars.
    pub fn channels_string(&self) -> String {
        self.channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiserParams {
    arch: ConvArch,
    layers: Vec<ConvLayer>,
    pub gamma: f64,
    sn_grid: (usize, usize),
    sn_state: Vec<Vec<f64>>,
}

/// Activations recorded by a forward pass, reused for any number of
/// vector-Jacobian products at the same input.
#[derive(Debug, Clone)]
pub struct ConvTape {
    frames: usize,
    h: usize,
    w: usize,
    /// Input to each stored layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer followed by `phi`.
    pre: Vec<Vec<f64>>,
    /// Tied networks only: `phi(W x + b)`.
    hidden: Vec<f64>,
}

impl ConvDenoiserParams {
    /// Random initialization: Gaussian kernels scaled by `init_scale`, zero
    /// biases, random unit power-iteration vectors on an `sn_grid` image.
    pub fn new(
        arch: ConvArch,
        gamma: f64,
        seed: u64,
        init_scale: f64,
        sn_grid: (usize, usize),
    ) -> Result<Self> {
        let mut p = Self::zeros(arch, gamma, sn_grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = p.arch.kernel;
        for layer in &mut p.layers {
            *layer = ConvLayer::random(layer.c_in, layer.c_out, k, init_scale, &mut rng);
        }
        p.reset_sn_state(seed.wrapping_add(0x5eed));
        Ok(p)
    }

    pub fn zeros(arch: ConvArch, gamma: f64, sn_grid: (usize, usize)) -> Result<Self> {
        arch.validate()?;
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if sn_grid.0 == 0 || sn_grid.1 == 0 {
            return Err(Error::invalid("spectral-norm grid must be non-empty"));
        }
        let layers = arch
            .channels
            .windows(2)
            .map(|c| ConvLayer::zeros(c[0], c[1], arch.kernel))
            .collect();
        let mut p = Self {
            arch,
            layers,
            gamma,
            sn_grid,
            sn_state: Vec::new(),
        };
        p.reset_sn_state(0x5eed);
        Ok(p)
    }

    /// Re-draws the persistent power-iteration vectors.
    pub fn reset_sn_state(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = self.sn_grid;
        self.sn_state = self
            .layers
            .iter()
            .map(|l| {
                let mut u: Vec<f64> = (0..l.c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalize(&mut u);
                u
            })
            .collect();
    }

    pub fn arch(&self) -> &ConvArch {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn sn_grid(&self) -> (usize, usize) {
        self.sn_grid
    }

    pub fn sn_state(&self) -> &[Vec<f64>] {
        &self.sn_state
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::num_params).sum()
    }

    /// Flat parameter vector: per layer, the kernel followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.kernel);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_params()],
                found: vec![theta.len()],
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nk = l.kernel.len();
            l.kernel.copy_from_slice(&theta[off..off + nk]);
            off += nk;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&theta[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn apply(&self, x: &VideoCube) -> VideoCube {
        self.forward(x, false).0
    }

    /// Forward pass that also records the activations needed by
    /// [`ConvDenoiserParams::vjp`].
    pub fn forward_with_tape(&self, x: &VideoCube) -> (VideoCube, ConvTape) {
        let (out, tape) = self.forward(x, true);
        (out, tape.expect("tape requested"))
    }

    fn forward(&self, x: &VideoCube, record: bool) -> (VideoCube, Option<ConvTape>) {
        let [frames, h, w] = x.shape();
        let plane = h * w;
        let act = self.arch.activation;
        let mut tape = ConvTape {
            frames,
            h,
            w,
            inputs: Vec::new(),
            pre: Vec::new(),
            hidden: Vec::new(),
        };
        let residual: Vec<f64> = if self.arch.tied {
            let layer = &self.layers[0];
            let mut z = vec![0.0; frames * layer.c_out * plane];
            conv::forward(layer, x.as_slice(), frames, h, w, true, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| act.value(v)).collect();
            let mut r = vec![0.0; frames * plane];
            conv::adjoint(layer, &a, frames, h, w, &mut r);
            r.iter_mut().for_each(|v| *v = -*v);
            if record {
                tape.inputs.push(x.as_slice().to_vec());
                tape.pre.push(z);
                tape.hidden = a;
            }
            r
        } else {
            let mut current = x.as_slice().to_vec();
            let last = self.layers.len() - 1;
            for (i, layer) in self.layers.iter().enumerate() {
                let mut z = vec![0.0; frames * layer.c_out * plane];
                conv::forward(layer, &current, frames, h, w, true, &mut z);
                if i == last {
                    if record {
                        tape.inputs.push(current);
                    }
                    current = z;
                } else {
                    let a: Vec<f64> = z.iter().map(|&v| act.value(v)).collect();
                    if record {
                        tape.inputs.push(std::mem::replace(&mut current, a));
                        tape.pre.push(z);
                    } else {
                        current = a;
                    }
                }
            }
            current
        };
        let mut out = x.clone();
        for (o, r) in out.as_slice_mut().iter_mut().zip(&residual) {
            *o += self.gamma * r;
        }
        (out, record.then_some(tape))
    }

    /// Returns `(dD/dx)^T v` and, when `want_params`, `(dD/dtheta)^T v`.
    pub fn vjp(
        &self,
        tape: &ConvTape,
        v: &VideoCube,
        want_params: bool,
    ) -> (VideoCube, Option<Vec<f64>>) {
        let (frames, h, w) = (tape.frames, tape.h, tape.w);
        let plane = h * w;
        let act = self.arch.activation;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.kernel.len()], vec![0.0; l.bias.len()]))
            .collect();
        let u: Vec<f64> = v.as_slice().iter().map(|g| self.gamma * g).collect();
        let grad_in = if self.arch.tied {
            let layer = &self.layers[0];
            let mut t = vec![0.0; frames * layer.c_out * plane];
            conv::forward(layer, &u, frames, h, w, false, &mut t);
            let gz: Vec<f64> = t
                .iter()
                .zip(&tape.pre[0])
                .map(|(t, &z)| -t * act.derivative(z))
                .collect();
            let mut gi = vec![0.0; frames * plane];
            conv::adjoint(layer, &gz, frames, h, w, &mut gi);
            if want_params {
                let (gk, gb) = &mut grads[0];
                conv::accumulate_param_grad(layer, &tape.inputs[0], &gz, frames, h, w, gk, Some(gb));
                let mut neg = vec![0.0; gk.len()];
                conv::accumulate_param_grad(layer, &u, &tape.hidden, frames, h, w, &mut neg, None);
                gk.iter_mut().zip(&neg).for_each(|(g, n)| *g -= n);
            }
            gi
        } else {
            let mut g = u;
            for (i, layer) in self.layers.iter().enumerate().rev() {
                if want_params {
                    let (gk, gb) = &mut grads[i];
                    conv::accumulate_param_grad(layer, &tape.inputs[i], &g, frames, h, w, gk, Some(gb));
                }
                let mut prev = vec![0.0; frames * layer.c_in * plane];
                conv::adjoint(layer, &g, frames, h, w, &mut prev);
                if i > 0 {
                    prev.iter_mut()
                        .zip(&tape.pre[i - 1])
                        .for_each(|(p, &z)| *p *= act.derivative(z));
                }
                g = prev;
            }
            g
        };
        let mut out = v.clone();
        out.as_slice_mut()
            .iter_mut()
            .zip(&grad_in)
            .for_each(|(o, g)| *o += g);
        let params = want_params.then(|| {
            grads
                .into_iter()
                .flat_map(|(k, b)| k.into_iter().chain(b))
                .collect()
        });
        (out, params)
    }

    /// Runs an `n_iters`-step Lanczos norm estimate per layer on the zero-padded conv
    /// operator over the `sn_grid` image, updating the stored vectors, then
    /// rescales each kernel by `min(1, 1/sigma)`. Returns the estimated
    /// operator norm of every layer before rescaling.
    pub fn spectral_normalize(&mut self, n_iters: usize) -> Vec<f64> {
        let n_iters = n_iters.max(1);
        let grid = self.sn_grid;
        let mut sigmas = Vec::with_capacity(self.layers.len());
        for (layer, u) in self.layers.iter_mut().zip(&mut self.sn_state) {
            let sigma = conv::operator_norm(layer, grid, u, n_iters).max(SIGMA_FLOOR);
            let scale = (1.0 / sigma).min(1.0);
            if scale < 1.0 {
                layer.kernel.iter_mut().for_each(|k| *k *= scale);
            }
            sigmas.push(sigma);
        }
        sigmas
    }

    /// Estimates of each layer's operator norm, leaving the
    /// stored vectors untouched.
    pub fn layer_norms(&self, n_iters: usize) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&self.sn_state)
            .map(|(layer, u)| {
                let mut u = u.clone();
                conv::operator_norm(layer, self.sn_grid, &mut u, n_iters)
            })
            .collect()
    }

    /// Upper bound on the Lipschitz constant of `D - I` from the product of
    /// layer norms (the tied decoder reuses the encoder norm).
    pub fn residual_lipschitz_bound(&self, n_iters: usize) -> f64 {
        let norms = self.layer_norms(n_iters);
        let prod: f64 = norms.iter().product();
        if self.arch.tied {
            self.gamma * prod * prod
        } else {
            self.gamma * prod
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cube(seed: u64, b: usize, h: usize, w: usize) -> VideoCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoCube::from_vec(b, h, w, (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn architecture_validation() {
        assert!(ConvArch::free(vec![1, 4, 1]).validate().is_ok());
        assert!(ConvArch::free(vec![1, 4, 4, 1]).validate().is_ok());
        assert!(ConvArch::free(vec![1, 4, 4, 4, 1]).validate().is_err());
        assert!(ConvArch::free(vec![1, 4]).validate().is_err());
        assert!(ConvArch::free(vec![2, 1]).validate().is_err());
        assert!(ConvArch::free(vec![1, 9, 1]).validate().is_err());
        assert!(ConvArch::tied(8).validate().is_ok());
        let mut bad = ConvArch::tied(4);
        bad.channels.push(1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flatten_unflatten_round_trips() {
        let mut p = ConvDenoiserParams::new(ConvArch::free(vec![1, 3, 2, 1]), 0.1, 4, 1.0, (4, 4)).unwrap();
        let theta = p.flatten();
        assert_eq!(theta.len(), p.num_params());
        assert_eq!(p.num_params(), (27 + 3) + (54 + 2) + (18 + 1));
        let before = p.clone();
        p.unflatten(&theta).unwrap();
        assert_eq!(p, before);
        assert!(p.unflatten(&theta[1..]).is_err());
    }

    #[test]
    fn zero_parameters_give_identity() {
        for arch in [ConvArch::free(vec![1, 4, 1]), ConvArch::tied(4)] {
            let p = ConvDenoiserParams::zeros(arch, 0.3, (4, 4)).unwrap();
            let x = random_cube(1, 2, 5, 6);
            assert_eq!(p.apply(&x), x);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = ConvDenoiserParams::new(ConvArch::free(vec![1, 4, 3, 1]), 0.2, 8, 1.0, (4, 4)).unwrap();
        let x = random_cube(2, 3, 5, 4);
        assert_eq!(p.apply(&x), p.forward_with_tape(&x).0);
    }

    #[test]
    fn zero_kernel_survives_normalization() {
        let mut p = ConvDenoiserParams::zeros(ConvArch::free(vec![1, 2, 1]), 0.1, (5, 5)).unwrap();
        let sig = p.spectral_normalize(5);
        assert!(sig.iter().all(|s| *s == SIGMA_FLOOR));
        assert!(p.flatten().iter().all(|v| *v == 0.0));
        assert!(p.sn_state.iter().all(|u| u.iter().all(|v| v.is_finite())));
    }
}
