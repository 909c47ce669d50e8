use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use slowfast::mc::{estimate_event, Event, Method};
use slowfast::model::check_dissipativity;
use slowfast::modulus::{
    bihari_bound, concavity_defect, log_grid, monotonicity_defect, Comparison, ModulusSpec, StepFunction,
};
use slowfast::ratefn::{minimize_rate, Constraint, RateProblem};
use slowfast::sde::{simulate_controlled_stream, simulate_frozen_stream};
use slowfast::skeleton::SkeletonSystem;
use slowfast::stats::{log_log_slope, Estimate};
use slowfast::{AveragedDrift, BuiltinModel, Control, ModelSpec, SimConfig};

fn lin1d(a1: f64, b1: f64, s1: f64, s2: f64) -> ModelSpec {
    ModelSpec::from_builtin(BuiltinModel::Lin1d { a1, b1, s1, s2 }).unwrap()
}

fn skeleton_of(model: &ModelSpec) -> SkeletonSystem {
    SkeletonSystem::from_model(model, AveragedDrift::from_model(model).unwrap()).unwrap()
}

fn lq_problem(c: f64, s1: f64, z: f64, intervals: usize) -> RateProblem {
    RateProblem::new(
        skeleton_of(&lin1d(c, 0.0, s1, 1.0)),
        vec![0.0],
        1.0,
        Constraint::TerminalPoint { z: vec![z], tol: 1e-4 },
        intervals,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lin1d_is_dissipative_on_every_box(
        a1 in -2.0..2.0f64, b1 in -2.0..2.0f64, s1 in 0.0..2.0f64, s2 in 0.0..2.0f64, radius in 0.1..100.0f64,
    ) {
        let report = check_dissipativity(&lin1d(a1, b1, s1, s2), 200, radius, 3).unwrap();
        prop_assert!(report.passed, "{report:?}");
    }

    #[test]
    fn coefficient_maps_are_pure(x in -10.0..10.0f64, y in -10.0..10.0f64) {
        for m in [
            lin1d(0.3, -0.7, 1.0, 0.5),
            ModelSpec::from_builtin(BuiltinModel::NonLip1d { s1: 1.0, s2: 1.0, cap10: 10.0 }).unwrap(),
        ] {
            let (mut a, mut b) = ([0.0], [0.0]);
            m.f1(&[x], &[y], &mut a);
            m.f1(&[x], &[y], &mut b);
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn moduli_are_concave_and_non_decreasing(
        eta in 0.01..0.36f64, lo_exp in -6.0..-2.0f64, hi_exp in 0.0..2.0f64, n in 10usize..2000,
    ) {
        let grid = log_grid(10f64.powf(lo_exp), 10f64.powf(hi_exp), n);
        for spec in [ModulusSpec::rho_eta(eta).unwrap(), ModulusSpec::rho_0_eta(eta).unwrap()] {
            prop_assert!(concavity_defect(&spec, &grid).unwrap() <= 1e-10);
            prop_assert!(monotonicity_defect(&spec, &grid).unwrap() <= 1e-12);
            prop_assert_eq!(spec.eval(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn linear_comparison_is_gronwall(f0 in 1e-3..10.0f64, q in 0.0..3.0f64, t_end in 0.1..3.0f64) {
        let b = bihari_bound(f0, &StepFunction::constant(t_end, q, 4), Comparison::Linear, t_end).unwrap();
        let exact = f0 * (q * t_end).exp();
        prop_assert!((b.bound.last().unwrap() - exact).abs() <= 1e-8 * exact);
    }

    #[test]
    fn skeleton_is_causal(values in proptest::collection::vec(-2.0..2.0f64, 8), cut in 1usize..8) {
        let sys = skeleton_of(&lin1d(0.5, -0.25, 1.0, 1.0));
        let h = Control::new(1.0, 1, 1, values, vec![0.0; 8]).unwrap();
        let t = cut as f64 / 8.0;
        let full = sys.path(&h, &[0.3], 256).unwrap();
        let cut_path = sys.path(&h.truncate_after(t), &[0.3], 256).unwrap();
        let k = (t * 256.0) as usize;
        prop_assert_eq!(&full[..=k], &cut_path[..=k]);
    }

    #[test]
    fn skeleton_ignores_control_grid_refinement(values in proptest::collection::vec(-2.0..2.0f64, 4), k in 2usize..5) {
        let sys = skeleton_of(&lin1d(0.5, -0.25, 1.0, 1.0));
        let h = Control::new(1.0, 1, 1, values, vec![0.0; 4]).unwrap();
        let a = sys.path(&h, &[0.3], 240).unwrap();
        let b = sys.path(&h.refine(k).unwrap(), &[0.3], 240).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10);
        }
    }
}

#[test]
fn frozen_common_noise_contracts_within_envelope() {
    let m = lin1d(0.5, -0.5, 1.0, 1.0);
    let (n, t_end) = (400, 2.0);
    for stream in 0..20 {
        let a = simulate_frozen_stream(&m, &[0.5], &[1.0], t_end, n, 9, stream).unwrap();
        let b = simulate_frozen_stream(&m, &[0.5], &[-1.0], t_end, n, 9, stream).unwrap();
        for k in (0..=n).step_by(40) {
            let t = a.times[k];
            let d2 = (a.fast_at(k)[0] - b.fast_at(k)[0]).powi(2);
            // Euler contracts by (1 - h) per step, just below e^{-t}
            assert!(d2 <= 4.0 * (-2.0 * t).exp() * (1.0 + 1e-12));
            assert!(d2 <= 4.0 * (-t).exp());
        }
    }
}

#[test]
fn frozen_process_is_lipschitz_in_x() {
    let m = lin1d(0.5, -0.5, 1.0, 1.0);
    for stream in 0..20 {
        let a = simulate_frozen_stream(&m, &[0.0], &[0.2], 3.0, 300, 4, stream).unwrap();
        let b = simulate_frozen_stream(&m, &[0.7], &[0.2], 3.0, 300, 4, stream).unwrap();
        for k in 0..=300 {
            let d = (a.fast_at(k)[0] - b.fast_at(k)[0]).abs();
            let t = a.times[k];
            assert!(d <= 0.7 * (1.0 + 1e-12));
            assert!((d - 0.7 * (1.0 - (-t).exp())).abs() <= 0.7 * 0.01);
        }
    }
}

#[test]
fn averaging_bias_decays_like_the_oracle() {
    // E f1(x, Y_t) - fbar(x) = b1 (y - x) e^{-t} for LIN1D
    let (a1, b1, x, y) = (0.5, -0.5, 0.5, 2.0);
    let m = lin1d(a1, b1, 1.0, 1.0);
    let n = 4000;
    let paths: Vec<_> = (0..n)
        .map(|s| simulate_frozen_stream(&m, &[x], &[y], 2.0, 400, 17, s).unwrap())
        .collect();
    let mut last = f64::INFINITY;
    for t in [0.5f64, 1.0, 2.0] {
        let k = (t * 200.0) as usize;
        let bias: Vec<f64> = paths
            .iter()
            .map(|p| a1 * x + b1 * p.fast_at(k)[0] - (a1 + b1) * x)
            .collect();
        let e = Estimate::from_samples(&bias);
        let oracle = b1 * (y - x) * (-t).exp();
        assert!(e.covers(oracle, 3.0), "t={t}: {e:?} vs {oracle}");
        assert!(e.mean.abs() < last);
        last = e.mean.abs();
    }
}

#[test]
fn controlled_sup_moment_does_not_grow_as_epsilon_shrinks() {
    let m = lin1d(0.5, -0.5, 1.0, 1.0);
    let h = Control::constant_slow(1.0, 4, &[1.0], 1).unwrap();
    let mut moments = Vec::new();
    for eps in [0.2, 0.1, 0.05] {
        let cfg = SimConfig::with_default_delta(eps, 1.0, 100, 21);
        let sup: Vec<f64> = (0..300)
            .map(|s| {
                let p = simulate_controlled_stream(&m, &cfg, &[0.5], &[0.5], &h, s).unwrap();
                p.slow.iter().map(|v| v * v).fold(0.0, f64::max)
            })
            .collect();
        moments.push(Estimate::from_samples(&sup));
    }
    for w in moments.windows(2) {
        assert!(
            w[1].mean <= w[0].mean + 3.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt(),
            "{moments:?}"
        );
    }
}

#[test]
fn slow_increments_scale_linearly_in_the_lag() {
    let m = lin1d(0.5, -0.5, 1.0, 1.0);
    let cfg = SimConfig::with_default_delta(0.1, 1.0, 1024, 8);
    let h = Control::constant_slow(1.0, 1, &[0.5], 1).unwrap();
    let paths: Vec<_> = (0..200)
        .map(|s| simulate_controlled_stream(&m, &cfg, &[0.0], &[0.0], &h, s).unwrap())
        .collect();
    let lags: Vec<usize> = vec![1, 2, 4, 8, 16];
    let msd: Vec<f64> = lags
        .iter()
        .map(|&l| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for p in &paths {
                for k in (0..=1024 - l).step_by(16) {
                    sum += (p.slow[k + l] - p.slow[k]).powi(2);
                    count += 1.0;
                }
            }
            sum / count
        })
        .collect();
    let lag_t: Vec<f64> = lags.iter().map(|&l| l as f64 / 1024.0).collect();
    let slope = log_log_slope(&lag_t, &msd).unwrap();
    assert!((slope - 1.0).abs() <= 0.15, "slope {slope}");
}

#[test]
fn doubling_sigma_quarters_the_rate() {
    let base = minimize_rate(&lq_problem(1.0, 1.0, 1.0, 20), 4, 1).unwrap();
    let doubled = minimize_rate(&lq_problem(1.0, 2.0, 1.0, 20), 4, 1).unwrap();
    assert!((doubled.value - base.value / 4.0).abs() <= 0.01 * base.value / 4.0);
}

#[test]
fn minimiser_norm_matches_reported_value() {
    for c in [0.0, 1.0, -1.0] {
        let r = minimize_rate(&lq_problem(c, 1.0, 1.0, 20), 4, 2).unwrap();
        assert!((r.minimizer.norm_sq() - 2.0 * r.value).abs() <= 1e-10);
    }
}

#[test]
fn rate_is_continuous_in_the_target() {
    let limit = minimize_rate(&lq_problem(0.0, 1.0, 1.0, 20), 4, 3).unwrap().value;
    let gaps: Vec<f64> = [2, 4, 6, 8]
        .iter()
        .map(|&k| {
            let z = 1.0 + 0.5f64.powi(k);
            let v = minimize_rate(&lq_problem(0.0, 1.0, z, 20), 4, 3).unwrap().value;
            assert!((v - z * z / 2.0).abs() <= 1e-3);
            (v - limit).abs()
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(*gaps.last().unwrap() <= 1e-2, "{gaps:?}");
}

#[test]
fn tilted_and_naive_agree_with_the_gaussian_tail() {
    // decoupled slow part: X_1 = sqrt(eps) W_1
    let m = lin1d(0.0, 0.0, 1.0, 1.0);
    let eps = 0.5;
    let cfg = SimConfig::with_default_delta(eps, 1.0, 50, 33);
    let event = Event::at_least(0.5);
    let tilt = Control::constant_slow(1.0, 1, &[0.5], 1).unwrap();
    let naive = estimate_event(&m, &cfg, &[0.0], &[0.0], &event, 4000, Method::Naive, None).unwrap();
    let tilted = estimate_event(&m, &cfg, &[0.0], &[0.0], &event, 4000, Method::Tilted, Some(&tilt)).unwrap();
    let exact = 1.0 - Normal::new(0.0, eps.sqrt()).unwrap().cdf(0.5);
    assert!(exact > 0.01);
    let band = 3.0 * (naive.se.powi(2) + tilted.se.powi(2)).sqrt();
    assert!((naive.p_hat - tilted.p_hat).abs() <= band);
    assert!((naive.p_hat - exact).abs() <= 3.0 * naive.se);
    assert!((tilted.p_hat - exact).abs() <= 3.0 * tilted.se);
}

#[test]
fn likelihood_ratio_has_unit_mean() {
    let m = lin1d(0.5, -0.5, 1.0, 1.0);
    let cfg = SimConfig::with_default_delta(0.2, 1.0, 100, 5);
    let h = Control::new(1.0, 1, 1, vec![0.8, -0.3, 1.2, 0.0], vec![0.0; 4]).unwrap();
    let e = estimate_event(
        &m,
        &cfg,
        &[0.0],
        &[0.0],
        &Event::Everything,
        4000,
        Method::Tilted,
        Some(&h),
    )
    .unwrap();
    assert!((e.p_hat - 1.0).abs() <= 3.0 * e.se, "{e:?}");
}
