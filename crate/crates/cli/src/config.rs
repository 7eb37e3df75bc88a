//! Run configuration: a fixed set of dotted keys with defaults, overridden
//! by an optional `key = value` file and then by `--set key=value` flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sci_deq::kv::KvFile;

use crate::CliError;

/// Every accepted key, its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("scene.kind", "moving_square", "moving_square | shifting_gradient | bouncing_dots"),
    ("scene.seed", "0", "scene seed (first seed for training and bench sets)"),
    ("scene.height", "32", "frame height in pixels"),
    ("scene.width", "32", "frame width in pixels"),
    ("scene.frames", "8", "frames per snapshot (B)"),
    ("scene.amplitude", "1", "motion in pixels per frame"),
    ("mask.seed", "7", "mask seed"),
    ("mask.kind", "bernoulli", "bernoulli | all_ones"),
    ("mask.density", "0.5", "probability of an open mask entry"),
    ("mask.dead_pixels", "floor", "floor | reject"),
    ("mask.floor", "1e-6", "divisor floor for pixels no frame sees"),
    ("noise.sigma", "0", "measurement noise standard deviation"),
    ("noise.seed", "0", "noise seed"),
    ("solver.kind", "anderson", "picard | anderson"),
    ("solver.tol", "1e-6", "relative residual tolerance"),
    ("solver.max_iter", "150", "iteration budget"),
    ("solver.anderson_memory", "3", "Anderson history length"),
    ("solver.anderson_damping", "1", "Anderson damping in (0, 1]"),
    ("solver.anderson_reg", "1e-8", "Tikhonov weight on the mixing system"),
    ("method.name", "de-gap", "de-gap | de-rnn | pnp-gap | pnp-admm"),
    ("method.denoiser", "identity", "identity | tv | checkpoint"),
    ("method.checkpoint", "", "denoiser or cell checkpoint path"),
    ("method.tv_lambda", "0.05", "TV weight for the tv denoiser"),
    ("method.tv_iters", "20", "TV inner iterations"),
    ("method.pnp_schedule", "0.2,0.1,0.05", "PnP-GAP TV weights, cycled"),
    ("method.rho", "0.1", "ADMM penalty"),
    ("model.kind", "de_gap", "de_gap | de_rnn"),
    ("model.hidden", "8", "hidden channels of the tied denoiser"),
    ("model.kernel", "3", "convolution kernel size"),
    ("model.activation", "tanh", "tanh | softplus"),
    ("model.gamma", "1", "residual factor"),
    ("model.init_scale", "0.5", "weight initialization scale"),
    ("model.seed", "3", "initialization seed"),
    ("model.init_sn_iters", "30", "spectral-norm iterations at initialization"),
    ("train.samples", "64", "training scenes (seeds scene.seed ..)"),
    ("train.val_samples", "8", "validation scenes"),
    ("train.val_seed", "1000", "first validation seed"),
    ("train.epochs", "3", "epochs"),
    ("train.batch_size", "1", "mini-batch size"),
    ("train.lr", "1e-5", "learning rate"),
    ("train.lr_decay", "0.9", "learning-rate multiplier"),
    ("train.lr_decay_every", "10", "epochs between decays"),
    ("train.momentum", "0.9", "heavy-ball momentum"),
    ("train.sn_iters", "1", "spectral-norm iterations after each step"),
    ("train.seed", "0", "shuffle seed"),
    ("train.backward_mode", "fixed_point", "fixed_point | neumann(P)"),
    ("train.backward_tol", "1e-6", "backward solve tolerance"),
    ("train.backward_max_iter", "100", "backward solve budget"),
    ("gradcheck.h", "1e-5", "central-difference step"),
    ("gradcheck.n_probe", "0", "coordinates to probe (0 = all)"),
    ("gradcheck.threshold", "1e-3", "largest accepted relative error"),
    ("gradcheck.seed", "0", "coordinate sampling seed"),
    ("spectrum.n_iters", "50", "power iterations on the map Jacobian"),
    ("spectrum.n_pairs", "20", "sample pairs for the residual estimate"),
    ("spectrum.seed", "0", "probe seed"),
    ("bench.scenes", "2", "scenes (seeds scene.seed ..)"),
    ("bench.methods", "pnp-gap,de-gap-identity", "comma list of pnp-gap, pnp-admm, de-gap-identity, de-gap, de-rnn"),
    ("bench.iterations", "200", "iterations K per method"),
    ("output.timing", "true", "record wall-clock times"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, v, _)| *v)
}

/// Text appended to `--help`.
pub fn help_table() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (set with --config FILE or --set key=value):\n");
    for (k, v, h) in KEYS {
        out.push_str(&format!("  {k:<width$}  default {v:?}: {h}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => {
                entry.1 = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), CliError> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {arg:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let kv = KvFile::read(path)?;
        for (k, v) in kv.iter() {
            self.set(k, v)
                .map_err(|_| CliError::Config(format!("{}: unknown config key {k:?}", path.display())))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        assert!(default_of(key).is_some(), "config key {key} is not registered");
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .expect("registered keys are always present")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("bad value {raw:?} for {key}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("bad list entry {s:?} for {key}: {e}")))
            })
            .collect()
    }

    /// Parses `key` with a name-to-value function.
    pub fn choice<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let raw = self.raw(key);
        parse(raw).ok_or_else(|| CliError::Config(format!("unknown value {raw:?} for {key}")))
    }

    /// Checks every key parses, so errors surface before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        for key in [
            "scene.seed",
            "scene.height",
            "scene.width",
            "scene.frames",
            "scene.amplitude",
            "mask.seed",
            "noise.seed",
            "solver.max_iter",
            "solver.anderson_memory",
            "method.tv_iters",
            "model.hidden",
            "model.kernel",
            "model.seed",
            "model.init_sn_iters",
            "train.samples",
            "train.val_samples",
            "train.val_seed",
            "train.epochs",
            "train.batch_size",
            "train.lr_decay_every",
            "train.sn_iters",
            "train.seed",
            "train.backward_max_iter",
            "gradcheck.n_probe",
            "gradcheck.seed",
            "spectrum.n_iters",
            "spectrum.n_pairs",
            "spectrum.seed",
            "bench.scenes",
            "bench.iterations",
        ] {
            self.get::<u64>(key)?;
        }
        for key in [
            "mask.density",
            "mask.floor",
            "noise.sigma",
            "solver.tol",
            "solver.anderson_damping",
            "solver.anderson_reg",
            "method.tv_lambda",
            "method.rho",
            "model.gamma",
            "model.init_scale",
            "train.lr",
            "train.lr_decay",
            "train.momentum",
            "train.backward_tol",
            "gradcheck.h",
            "gradcheck.threshold",
        ] {
            self.get::<f64>(key)?;
        }
        self.list::<f64>("method.pnp_schedule")?;
        self.get::<bool>("output.timing")?;
        Ok(())
    }

    /// Every key in registry order, one `key = value` line each.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_then_load_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "3.25e-4").unwrap();
        cfg.set("method.pnp_schedule", "0.3, 0.2").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, cfg.dump()).unwrap();
        let mut back = RunConfig::default();
        back.merge_file(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), cfg.dump());
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_override("solver.tolerance=1").unwrap_err();
        assert!(err.to_string().contains("solver.tolerance"));
        assert!(cfg.apply_override("solver.tol").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.set("solver.max_iter", "many").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("solver.max_iter"));
    }

    #[test]
    fn help_lists_every_key() {
        let help = help_table();
        for (k, v, _) in KEYS {
            assert!(help.contains(k) && help.contains(&format!("{v:?}")), "{k}");
        }
    }
}
