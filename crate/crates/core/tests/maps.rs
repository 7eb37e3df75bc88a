mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

use sci_deq::analysis::estimate_map_lipschitz;
use sci_deq::denoise::{estimate_residual_lipschitz, ConvArch, ConvDenoiserParams};
use sci_deq::fixed_point::{self, FixedPointConfig, SolverKind};
use sci_deq::maps::{
    pnp_admm_solve, pnp_admm_step, pnp_gap_solve, AdmmState, DeGapMap, DeRnnMap, IterationMap, PnpGapConfig,
    RecurrentCellParams,
};
use sci_deq::{metrics, sensing, Denoiser, VideoCube};

fn quiet(tol: f64, max_iter: usize) -> FixedPointConfig {
    FixedPointConfig {
        tol,
        max_iter,
        record_timing: false,
        ..Default::default()
    }
}

#[test]
fn identity_de_gap_is_measurement_consistent_in_one_step() {
    let mask = binary_mask(1, 3, 6, 5);
    let y = measurement(2, 6, 5);
    let d = Denoiser::Identity;
    let map = DeGapMap::new(&d, &mask, &y).unwrap();
    let out = map.apply(&normal_cube(3, 3, 6, 5)).unwrap();
    let fy = sensing::forward(&mask, &out).unwrap();
    for ((i, j), q) in mask.q_diag().indexed_iter() {
        if *q > 0.0 {
            assert!((fy.data[[i, j]] - y.data[[i, j]]).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_denoiser_gives_constant_zero_map() {
    let mask = real_mask(4, 2, 4, 4);
    let y = measurement(5, 4, 4);
    let d = Denoiser::ScaleShift { a: 0.0, b: 0.0 };
    let map = DeGapMap::new(&d, &mask, &y).unwrap();
    assert!(map.apply(&normal_cube(6, 2, 4, 4)).unwrap().as_slice().iter().all(|v| *v == 0.0));
    let res = fixed_point::picard_solve(|x| map.apply(x), uniform_cube(7, 2, 4, 4), &quiet(1e-9, 10)).unwrap();
    assert!(res.converged);
    assert_eq!(res.x_hat.norm(), 0.0);
}

#[test]
fn scale_shift_de_gap_matches_dense_linear_system() {
    let mask = real_mask(8, 2, 3, 3);
    let y = measurement(9, 3, 3);
    let phi = dense_phi(&mask);
    let q_inv = (&phi * phi.transpose()).try_inverse().unwrap();
    let n = phi.ncols();
    // x = 0.5 (x + Phi^T Q^{-1} (y - Phi x))
    let null = DMatrix::identity(n, n) - phi.transpose() * &q_inv * &phi;
    let lhs = DMatrix::identity(n, n) - &null * 0.5;
    let rhs = phi.transpose() * &q_inv * vec_of_y(&y) * 0.5;
    let want = lhs.lu().solve(&rhs).unwrap();

    let d = Denoiser::ScaleShift { a: 0.5, b: 0.0 };
    let map = DeGapMap::new(&d, &mask, &y).unwrap();
    let x0 = sensing::init_estimate(&mask, &y).unwrap();
    let res = fixed_point::picard_solve(|x| map.apply(x), x0, &quiet(1e-12, 500)).unwrap();
    assert!(res.converged);
    assert!(max_abs(&vec_of(&res.x_hat), &want) <= 1e-8);
}

#[test]
fn consistent_denoiser_fixed_points_are_map_fixed_points() {
    // TV leaves frames that are constant unchanged, so a per-frame constant
    // cube that explains y is fixed by both the denoiser and the projection.
    let mask = binary_mask(10, 4, 6, 6);
    let mut x = VideoCube::zeros(4, 6, 6);
    for b in 0..4 {
        x.frame_mut(b).fill(0.2 * b as f64 + 0.1);
    }
    let y = sensing::forward(&mask, &x).unwrap();
    for d in [Denoiser::Identity, Denoiser::Tv { lambda: 0.2, iters: 40 }, Denoiser::ScaleShift { a: 1.0, b: 0.0 }] {
        let map = DeGapMap::new(&d, &mask, &y).unwrap();
        assert!(map.apply(&x).unwrap().max_abs_diff(&x) <= 1e-10, "{}", d.kind_name());
    }
}

#[test]
fn de_gap_local_lipschitz_within_residual_bound() {
    let mask = binary_mask(11, 2, 8, 8);
    let y = measurement(12, 8, 8);
    for (seed, gamma) in [(1u64, 0.1), (2, 0.5), (3, 0.9)] {
        let mut p = ConvDenoiserParams::new(ConvArch::tied(4), gamma, seed, 1.0, (8, 8)).unwrap();
        p.spectral_normalize(20);
        let d = Denoiser::ConvResidual(p);
        let map = DeGapMap::new(&d, &mask, &y).unwrap();
        let x = uniform_cube(seed + 20, 2, 8, 8);
        let sigma = estimate_map_lipschitz(&map, &x, 60, seed).unwrap();
        let eps = estimate_residual_lipschitz(&d, seed, 60, [2, 8, 8]).unwrap();
        assert!(sigma <= 1.0 + eps + 0.02, "gamma {gamma}: sigma {sigma} eps {eps}");
    }
}

#[test]
fn de_gap_vjp_matches_finite_differences() {
    let mask = real_mask(13, 2, 5, 4);
    let y = measurement(14, 5, 4);
    let p = ConvDenoiserParams::new(ConvArch::tied(3), 0.6, 15, 1.0, (5, 4)).unwrap();
    let d = Denoiser::ConvResidual(p);
    let map = DeGapMap::new(&d, &mask, &y).unwrap();
    check_map_vjps(&map, &d.params(), |theta, x| {
        let mut d2 = d.clone();
        d2.set_params(theta).unwrap();
        DeGapMap::new(&d2, &mask, &y).unwrap().apply(x).unwrap()
    });
}

/// Checks `vjp_input` and `vjp_params` of `map` at a random point against
/// central differences of `<v, f(x)>`.
fn check_map_vjps<F>(map: &dyn IterationMap, theta: &[f64], with_params: F)
where
    F: Fn(&[f64], &VideoCube) -> VideoCube,
{
    let h = 1e-5;
    let [b, hh, w] = map.shape();
    let x = uniform_cube(100, b, hh, w);
    let v = normal_cube(101, b, hh, w);
    let lin = map.linearize(&x).unwrap();
    assert_eq!(lin.output(), &map.apply(&x).unwrap());
    let gx = lin.vjp_input(&v).unwrap();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut()[i] += h;
        let mut xm = x.clone();
        xm.as_slice_mut()[i] -= h;
        let fd = (v.dot(&map.apply(&xp).unwrap()) - v.dot(&map.apply(&xm).unwrap())) / (2.0 * h);
        assert!((fd - gx.as_slice()[i]).abs() <= 1e-6 * fd.abs().max(1.0), "input {i}: {fd} vs {}", gx.as_slice()[i]);
    }
    let gp = lin.vjp_params(&v).unwrap();
    assert_eq!(gp.len(), theta.len());
    for i in 0..theta.len() {
        let mut t = theta.to_vec();
        t[i] += h;
        let plus = v.dot(&with_params(&t, &x));
        t[i] -= 2.0 * h;
        let minus = v.dot(&with_params(&t, &x));
        let fd = (plus - minus) / (2.0 * h);
        assert!((fd - gp[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", gp[i]);
    }
}

#[test]
fn de_rnn_vjps_match_finite_differences() {
    let mask = real_mask(16, 2, 5, 4);
    let y = measurement(17, 5, 4);
    for cell in [
        RecurrentCellParams::gated_random(3, 0.7, 18, 1.0, (5, 4)).unwrap(),
        RecurrentCellParams::affine([-0.3, 0.2, 0.4, 0.05], 0.8).unwrap(),
    ] {
        let map = DeRnnMap::new(&cell, &mask, &y).unwrap();
        check_map_vjps(&map, &cell.params(), |theta, x| {
            let mut c2 = cell.clone();
            c2.set_params(theta).unwrap();
            DeRnnMap::new(&c2, &mask, &y).unwrap().apply(x).unwrap()
        });
    }
}

#[test]
fn de_rnn_degenerate_cells_are_identity() {
    let mask = binary_mask(19, 3, 5, 5);
    let y = measurement(20, 5, 5);
    let zero = RecurrentCellParams::gated_zeros(3, 0.5, (5, 5)).unwrap();
    let mut no_gamma = RecurrentCellParams::gated_random(3, 0.5, 21, 1.0, (5, 5)).unwrap();
    no_gamma.gamma = 0.0;
    for cell in [zero, no_gamma] {
        let map = DeRnnMap::new(&cell, &mask, &y).unwrap();
        let x = normal_cube(22, 3, 5, 5);
        assert_eq!(map.apply(&x).unwrap(), x);
        for kind in [SolverKind::Picard, SolverKind::Anderson] {
            let res = fixed_point::solve(kind, |x| map.apply(x), x.clone(), &quiet(1e-9, 20), None).unwrap();
            assert!(res.converged && res.iterations == 1);
        }
    }
}

#[test]
fn pnp_gap_without_tv_is_pure_projection() {
    let mask = binary_mask(23, 4, 8, 8);
    let truth = uniform_cube(24, 4, 8, 8);
    let y = sensing::forward(&mask, &truth).unwrap();
    let cfg = quiet(1e-9, 10);
    let probe = |x: &VideoCube| metrics::mean_psnr(&x.clamped_unit(), &truth).unwrap();
    let gap = PnpGapConfig { schedule: vec![0.0], tv_iters: 5, iterations: 12 };
    let res = pnp_gap_solve(&mask, &y, &gap, &cfg, Some(&probe)).unwrap();
    let psnrs: Vec<f64> = res.trace.records.iter().map(|r| r.psnr.unwrap()).collect();
    assert!(psnrs.iter().all(|p| *p == psnrs[0]));

    let one = PnpGapConfig { iterations: 1, ..gap };
    let res = pnp_gap_solve(&mask, &y, &one, &cfg, None).unwrap();
    let want = sensing::gap_project(&mask, &y, &sensing::init_estimate(&mask, &y).unwrap()).unwrap();
    assert_eq!(res.x_hat, want);
}

#[test]
fn admm_and_gap_reach_consistent_points() {
    let mask = binary_mask(25, 3, 6, 6);
    let truth = uniform_cube(26, 3, 6, 6);
    let y = sensing::forward(&mask, &truth).unwrap();
    let cfg = quiet(1e-12, 10);
    let gap = PnpGapConfig { schedule: vec![0.0], tv_iters: 5, iterations: 5 };
    let xg = pnp_gap_solve(&mask, &y, &gap, &cfg, None).unwrap().x_hat;
    let xa = pnp_admm_solve(&mask, &y, &Denoiser::Identity, 0.05, 400, &cfg, None).unwrap().x_hat;
    for x in [xg, xa] {
        let r = sensing::forward(&mask, &x).unwrap();
        let err = (&r.data - &y.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6, "consistency {err}");
    }
}

#[test]
fn admm_identity_step_keeps_u_zero() {
    let mask = real_mask(27, 2, 4, 4);
    let y = measurement(28, 4, 4);
    let state = AdmmState::new(uniform_cube(29, 2, 4, 4), 0.7).unwrap();
    let next = pnp_admm_step(&state, &mask, &y, &Denoiser::Identity).unwrap();
    assert_eq!(next.v, next.x);
    assert!(next.u.as_slice().iter().all(|u| *u == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scale_shift_de_gap_fixed_point_is_stable(seed in any::<u64>(), a in 0.1f64..0.9, b in -0.2f64..0.2) {
        let mask = binary_mask(seed, 3, 4, 5);
        let y = measurement(seed ^ 7, 4, 5);
        let d = Denoiser::ScaleShift { a, b };
        let map = DeGapMap::new(&d, &mask, &y).unwrap();
        let res = fixed_point::anderson_solve(|x| map.apply(x), sensing::init_estimate(&mask, &y).unwrap(), &quiet(1e-12, 500)).unwrap();
        prop_assert!(res.converged);
        let fx = map.apply(&res.x_hat).unwrap();
        prop_assert!(fx.distance(&res.x_hat) <= 1e-10 * (1.0 + res.x_hat.norm()));
    }
}
