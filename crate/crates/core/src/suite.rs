//! The property suite behind `slowfast check`: eleven experiments on the
//! built-in models, each returning its raw measurements and a verdict.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::averaging::{
    estimate_fbar_points, fit_contraction, invariant_moments, AveragedDrift, ErgodicBudget, FbarEstimate,
};
use crate::control::Control;
use crate::error::Result;
use crate::mc::{ldp_sweep, DeltaRule, Event, LdpSweep, Method, SweepSpec};
use crate::model::{BuiltinModel, ModelSpec};
use crate::modulus::{
    bihari_bound, check_rho_properties, concavity_defect, continuity_gap, log_grid, monotonicity_defect, Comparison,
    ModulusSpec, StepFunction,
};
use crate::ratefn::{
    lq_terminal_rate, minimize_rate, variational_check, Constraint, RateProblem, VariationalReport, DEFAULT_STARTS,
};
use crate::sde::{
    simulate_auxiliary_with_noise, simulate_controlled_with_noise, simulate_flow, simulate_frozen_stream, NoisePath,
    SimConfig,
};
use crate::skeleton::{check_skeleton_continuity, mollified_sequence, solve_skeleton, SkeletonSystem};
use crate::stats::{log_log_slope, Estimate};
use crate::stream::derive_seed;

use rayon::prelude::*;

/// Scales every Monte Carlo budget; `1.0` is the full suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget(pub f64);

impl Budget {
    pub const FULL: Budget = Budget(1.0);

    fn paths(&self, n: usize, min: usize) -> usize {
        ((n as f64 * self.0).round() as usize).max(min)
    }
}

fn lin1d(a1: f64, b1: f64, s1: f64, s2: f64) -> ModelSpec {
    ModelSpec::from_builtin(BuiltinModel::Lin1d { a1, b1, s1, s2 }).expect("valid built-in")
}

fn nonlip1d() -> ModelSpec {
    ModelSpec::from_builtin(BuiltinModel::NonLip1d {
        s1: 1.0,
        s2: 1.0,
        cap10: 10.0,
    })
    .expect("valid built-in")
}

// ---------------------------------------------------------------- 1 modulus

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulusMeasurements {
    pub grid_points: usize,
    pub continuity_gap: f64,
    pub concavity_defect: f64,
    pub monotonicity_defect: f64,
    pub monotone_in_eta_violation: f64,
    pub power_violation: f64,
    pub power_worst_x: f64,
    pub gronwall_bound: f64,
    pub exponent_times: Vec<f64>,
    pub exponent_bound: Vec<f64>,
}

pub fn modulus_experiment() -> Result<ModulusMeasurements> {
    let grid = log_grid(1e-4, 10.0, 10_000);
    let specs = [
        ModulusSpec::rho_eta(0.3)?,
        ModulusSpec::rho_eta(0.1)?,
        ModulusSpec::rho_0_eta(0.3)?,
        ModulusSpec::rho_0_eta(0.1)?,
    ];
    let mut concave = f64::NEG_INFINITY;
    let mut mono = f64::NEG_INFINITY;
    for s in &specs {
        concave = concave.max(concavity_defect(s, &grid)?);
        mono = mono.max(monotonicity_defect(s, &grid)?);
    }
    let props = check_rho_properties(0.3, 0.1, 2.0, &grid)?;
    let q = StepFunction::constant(1.0, 1.0, 8);
    let gronwall = bihari_bound(1.0, &q, Comparison::Linear, 1.0)?;
    let expo = bihari_bound(0.01, &q, Comparison::Modulus(specs[0]), 1.0)?;
    Ok(ModulusMeasurements {
        grid_points: grid.len(),
        continuity_gap: continuity_gap(0.3).max(continuity_gap(0.1)),
        concavity_defect: concave,
        monotonicity_defect: mono,
        monotone_in_eta_violation: props.monotone_violation,
        power_violation: props.power_violation,
        power_worst_x: props.power_worst_x,
        gronwall_bound: *gronwall.bound.last().expect("non-empty"),
        exponent_times: expo.times,
        exponent_bound: expo.bound,
    })
}

// ------------------------------------------------------ 2 frozen contraction

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentPoint {
    pub t: f64,
    pub estimate: Estimate,
    /// `e^{-beta2 t} |y|^2 + (gamma / beta2)(1 + |x|^2)`.
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionMeasurements {
    pub rate: f64,
    pub beta1: f64,
    pub moments: Vec<MomentPoint>,
}

pub fn contraction_experiment(seed: u64, budget: Budget) -> Result<ContractionMeasurements> {
    let model = lin1d(0.5, -0.5, 1.0, 1.0);
    let report = fit_contraction(
        &model,
        &[0.5],
        &[1.0],
        &[-1.0],
        2.0,
        budget.paths(64, 4),
        derive_seed(seed, 1),
    )?;
    let a = *model.assumptions();
    let (x, y, t_end, n) = (1.0, 2.0, 2.0, 200);
    let n_paths = budget.paths(10_000, 100);
    let s = derive_seed(seed, 2);
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| simulate_frozen_stream(&model, &[x], &[y], t_end, n, s, k))
        .collect::<Result<Vec<_>>>()?;
    let moments = [0.5, 1.0, 2.0]
        .iter()
        .map(|&t| {
            let k = (t / t_end * n as f64).round() as usize;
            let sq: Vec<f64> = paths.iter().map(|p| p.fast_at(k)[0].powi(2)).collect();
            MomentPoint {
                t,
                estimate: Estimate::from_samples(&sq),
                bound: (-a.beta2 * t).exp() * y * y + a.gamma / a.beta2 * (1.0 + x * x),
            }
        })
        .collect();
    Ok(ContractionMeasurements {
        rate: report.rate,
        beta1: report.beta1,
        moments,
    })
}

// -------------------------------------------------------- 3 invariant measure

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantMeasurements {
    pub points: Vec<(f64, Estimate)>,
}

pub fn invariant_experiment(seed: u64, budget: Budget) -> Result<InvariantMeasurements> {
    let model = lin1d(0.5, -0.5, 1.0, 1.0);
    let b = ErgodicBudget {
        t_burn: 10.0,
        t_avg: 50.0,
        n_reps: budget.paths(200, 8),
        step: 0.005,
    };
    let points = [0.0, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &x)| Ok((x, invariant_moments(&model, &[x], 2, &b, derive_seed(seed, i as u64))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(InvariantMeasurements { points })
}

// ---------------------------------------------------------- 4 averaged drift

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetLevel {
    pub n_reps: usize,
    pub t_avg: f64,
    pub points: Vec<FbarEstimate>,
    pub mean_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AveragingMeasurements {
    pub levels: Vec<BudgetLevel>,
    /// Slope of `log mean_se` against `log(n_reps * t_avg)`.
    pub se_slope: f64,
}

pub const AVERAGING_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

pub fn averaging_experiment(seed: u64, budget: Budget) -> Result<AveragingMeasurements> {
    let model = lin1d(0.5, 0.5, 1.0, 1.0);
    let mut levels = Vec::new();
    for (j, (reps, t_avg)) in [(16, 10.0), (32, 20.0), (64, 40.0), (128, 80.0)]
        .into_iter()
        .enumerate()
    {
        let b = ErgodicBudget {
            t_burn: 10.0,
            t_avg,
            n_reps: budget.paths(reps, 4),
            step: 0.005,
        };
        let points = estimate_fbar_points(&model, &AVERAGING_GRID, &b, derive_seed(seed, j as u64))?;
        let mean_se = points.iter().map(|p| p.estimate.se).sum::<f64>() / points.len() as f64;
        levels.push(BudgetLevel {
            n_reps: b.n_reps,
            t_avg,
            points,
            mean_se,
        });
    }
    let x: Vec<f64> = levels.iter().map(|l| l.n_reps as f64 * l.t_avg).collect();
    let y: Vec<f64> = levels.iter().map(|l| l.mean_se).collect();
    Ok(AveragingMeasurements {
        se_slope: log_log_slope(&x, &y).unwrap_or(f64::NAN),
        levels,
    })
}

// ------------------------------------------------------ 5 Khasminskii error

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KhasminskiiCell {
    pub block: f64,
    pub delta_over_eps: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KhasminskiiMeasurements {
    pub epsilon: f64,
    pub cells: Vec<KhasminskiiCell>,
    /// Slope of `log E int |Yhat - Ytilde|^2` against `log(block + delta/eps)`.
    pub slope: f64,
}

/// Balanced design: the block error `~ eps s1^2 Delta / 2` and the fast
/// control error `~ hdot2^2 delta / eps` have equal weight when
/// `hdot2^2 = eps / 2`.
pub fn khasminskii_experiment(seed: u64, budget: Budget) -> Result<KhasminskiiMeasurements> {
    let model = lin1d(0.5, -0.5, 1.0, 1.0);
    let eps = 0.125;
    let hdot2 = (eps / 2.0f64).sqrt();
    let control = Control::new(1.0, 1, 1, vec![0.0], vec![hdot2])?;
    let n_paths = budget.paths(200, 16);
    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for ratio in [1.0 / 256.0, 1.0 / 64.0] {
        for block in [1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0] {
            let cfg = SimConfig {
                epsilon: eps,
                delta: ratio * eps,
                t_end: 1.0,
                n_steps: 4096,
                khasminskii_delta: block,
                seed: derive_seed(seed, cell_index),
            };
            cell_index += 1;
            let h = cfg.step();
            let samples = (0..n_paths as u64)
                .into_par_iter()
                .map(|s| {
                    let noise = NoisePath::generate(&cfg, 1, 1, s);
                    let hat = simulate_controlled_with_noise(&model, &cfg, &[0.0], &[0.0], &control, &noise)?;
                    let tilde = simulate_auxiliary_with_noise(&model, &cfg, &[0.0], &[0.0], &control, &hat, &noise)?;
                    Ok((0..cfg.n_steps)
                        .map(|k| (hat.fast_at(k)[0] - tilde.fast_at(k)[0]).powi(2) * h)
                        .sum::<f64>())
                })
                .collect::<Result<Vec<f64>>>()?;
            cells.push(KhasminskiiCell {
                block,
                delta_over_eps: ratio,
                estimate: Estimate::from_samples(&samples),
            });
        }
    }
    let x: Vec<f64> = cells.iter().map(|c| c.block + c.delta_over_eps).collect();
    let y: Vec<f64> = cells.iter().map(|c| c.estimate.mean).collect();
    Ok(KhasminskiiMeasurements {
        epsilon: eps,
        slope: log_log_slope(&x, &y).unwrap_or(f64::NAN),
        cells,
    })
}

// ---------------------------------------------------------------- 6 skeleton

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonMeasurements {
    /// Ratios for a constant control, every level.
    pub dyadic_ratios: Vec<f64>,
    /// Ratios for a piecewise-constant control, from the first level whose
    /// grid contains all of its breakpoints.
    pub resolved_ratios: Vec<f64>,
    pub exp_terminal: f64,
    pub exp_level: u32,
    pub time_modulus_slope: f64,
    pub continuity_gaps: Vec<f64>,
}

pub fn skeleton_experiment() -> Result<SkeletonMeasurements> {
    let model = lin1d(0.5, -0.25, 1.0, 1.0);
    let sys = SkeletonSystem::from_model(&model, AveragedDrift::from_model(&model)?)?;
    let wiggle = Control::new(
        1.0,
        1,
        1,
        (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect(),
        vec![0.0; 8],
    )?;
    let constant = solve_skeleton(&sys, &Control::constant_slow(1.0, 1, &[1.0], 1)?, &[0.5], 14)?;
    let dyadic = solve_skeleton(&sys, &wiggle, &[0.5], 14)?;
    // ratio j compares level pairs (j+1, j+2) and (j+2, j+3)
    let resolved_ratios = dyadic
        .error_ratios()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| (1usize << (j + 1)) >= wiggle.intervals())
        .map(|(_, r)| r)
        .collect();

    let growth = lin1d(1.0, 0.0, 1.0, 1.0);
    let gsys = SkeletonSystem::from_model(&growth, AveragedDrift::from_model(&growth)?)?;
    let exp = solve_skeleton(&gsys, &Control::zero(1.0, 1, 1, 1)?, &[1.0], 22)?;

    let seq = mollified_sequence(&wiggle, 6)?;
    let cont = check_skeleton_continuity(&sys, &wiggle, &seq, &[0.5], 12)?;
    Ok(SkeletonMeasurements {
        dyadic_ratios: constant.error_ratios(),
        resolved_ratios,
        exp_terminal: exp.terminal()[0],
        exp_level: exp.level,
        time_modulus_slope: cont.time_modulus_slope,
        continuity_gaps: cont.gaps,
    })
}

// ----------------------------------------------------------- 7 rate function

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateCase {
    pub c: f64,
    pub intervals: usize,
    pub value: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateMeasurements {
    pub cases: Vec<RateCase>,
}

/// Terminal-point problem `X_0 = 0 -> X_1 = 1` for `dX = c X dt + hdot dt`.
pub fn lq_problem(c: f64, intervals: usize) -> Result<RateProblem> {
    let model = lin1d(c, 0.0, 1.0, 1.0);
    let sys = SkeletonSystem::from_model(&model, AveragedDrift::from_model(&model)?)?;
    Ok(RateProblem::new(
        sys,
        vec![0.0],
        1.0,
        Constraint::TerminalPoint {
            z: vec![1.0],
            tol: 1e-4,
        },
        intervals,
    ))
}

pub fn rate_experiment(seed: u64) -> Result<RateMeasurements> {
    let mut cases = Vec::new();
    for (i, (c, m)) in [(0.0, 20), (1.0, 20), (-1.0, 20), (1.0, 40)].into_iter().enumerate() {
        let r = minimize_rate(&lq_problem(c, m)?, DEFAULT_STARTS, derive_seed(seed, i as u64))?;
        cases.push(RateCase {
            c,
            intervals: m,
            value: r.value,
            residual: r.residual,
        });
    }
    Ok(RateMeasurements { cases })
}

// ------------------------------------------------------------ 8 variational

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalMeasurements {
    pub zero: VariationalReport,
    pub constant: VariationalReport,
    pub constant_value: f64,
    pub nontrivial: Vec<VariationalReport>,
}

/// `F(X) = min(1, max(0, 1 - X_T))`.
pub fn ramp_functional(p: &crate::sde::PathSample) -> f64 {
    (1.0 - p.terminal_slow()[0]).clamp(0.0, 1.0)
}

pub fn variational_experiment(seed: u64, budget: Budget) -> Result<VariationalMeasurements> {
    let model = lin1d(0.0, 0.0, 1.0, 1.0);
    let n_paths = budget.paths(4000, 100);
    let zero = Control::zero(1.0, 1, 1, 1)?;
    let base = SimConfig::with_default_delta(0.5, 1.0, 50, 0);
    let zero_f = |_: &crate::sde::PathSample| 0.0;
    let c = 0.37;
    let const_f = move |_: &crate::sde::PathSample| c;
    let z = variational_check(
        &model,
        &base,
        &[0.0],
        &[0.0],
        &zero_f,
        std::slice::from_ref(&zero),
        n_paths,
        derive_seed(seed, 0),
    )?;
    let k = variational_check(
        &model,
        &base,
        &[0.0],
        &[0.0],
        &const_f,
        std::slice::from_ref(&zero),
        n_paths,
        derive_seed(seed, 1),
    )?;
    let controls = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&v| Control::constant_slow(1.0, 1, &[v], 1))
        .collect::<Result<Vec<_>>>()?;
    let nontrivial = [0.5, 0.2]
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let cfg = SimConfig::with_default_delta(eps, 1.0, 50, 0);
            variational_check(
                &model,
                &cfg,
                &[0.0],
                &[0.0],
                &ramp_functional,
                &controls,
                n_paths,
                derive_seed(seed, 2 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalMeasurements {
        zero: z,
        constant: k,
        constant_value: c,
        nontrivial,
    })
}

// ------------------------------------------------------------------ 9 sweep

pub const SWEEP_LADDER: [f64; 4] = [0.5, 0.2, 0.1, 0.05];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMeasurements {
    pub tilt_rate: f64,
    pub sweep: LdpSweep,
}

pub fn sweep_experiment(seed: u64, budget: Budget) -> Result<SweepMeasurements> {
    let model = lin1d(0.0, 0.0, 1.0, 1.0);
    let sys = SkeletonSystem::from_model(&model, AveragedDrift::from_model(&model)?)?;
    let problem = RateProblem::new(
        sys,
        vec![0.0],
        1.0,
        Constraint::TerminalHalfspace {
            normal: vec![1.0],
            offset: 1.0,
            tol: 1e-4,
        },
        10,
    );
    let rate = minimize_rate(&problem, DEFAULT_STARTS, derive_seed(seed, 0))?;
    let spec = SweepSpec {
        base: SimConfig::with_default_delta(0.5, 1.0, 100, derive_seed(seed, 1)),
        x0: vec![0.0],
        y0: vec![0.0],
        event: Event::at_least(1.0),
        epsilons: SWEEP_LADDER.to_vec(),
        delta_rule: DeltaRule::default(),
        n_paths: budget.paths(10_000, 100),
        i_ref: rate.value,
        method: Method::Tilted,
        tilt: Some(&rate.minimizer),
    };
    Ok(SweepMeasurements {
        tilt_rate: rate.value,
        sweep: ldp_sweep(&model, &spec)?,
    })
}

// ------------------------------------------------------------------- 10 flow

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowMeasurements {
    pub p: f64,
    pub separations: Vec<f64>,
    pub moments: Vec<Estimate>,
    pub slope: f64,
}

pub fn flow_experiment(seed: u64, budget: Budget) -> Result<FlowMeasurements> {
    let model = nonlip1d();
    let cfg = SimConfig {
        epsilon: 0.1,
        delta: 0.01,
        t_end: 1.0,
        n_steps: 200,
        khasminskii_delta: 0.005,
        seed,
    };
    let x0 = 0.5;
    let separations = vec![1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
    let mut grid = vec![vec![x0]];
    grid.extend(separations.iter().map(|d| vec![x0 + d]));
    let flow = simulate_flow(&model, &cfg, &grid, &[x0], budget.paths(400, 20))?;
    let p = 4.0;
    let moments = (1..grid.len())
        .map(|j| flow.pair_moment(0, j, p))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = moments.iter().map(|m| m.mean).collect();
    Ok(FlowMeasurements {
        p,
        slope: log_log_slope(&separations, &y).unwrap_or(f64::NAN),
        separations,
        moments,
    })
}

// ------------------------------------------------------------ 11 determinism

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeterminismMeasurements {
    pub thread_counts: Vec<usize>,
    pub identical: bool,
}

/// Re-runs two small experiments in pools of different sizes and compares
/// the serialised results byte for byte.
pub fn determinism_experiment(seed: u64) -> Result<DeterminismMeasurements> {
    let small = Budget(0.02);
    let threads = vec![1, 2, 3];
    let mut outputs = Vec::new();
    for &n in &threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::config(e.to_string()))?;
        let out = pool.install(|| -> Result<String> {
            let a = serde_json::to_string(&flow_experiment(seed, small)?)?;
            let b = serde_json::to_string(&contraction_experiment(seed, small)?)?;
            Ok(a + &b)
        })?;
        outputs.push(out);
    }
    Ok(DeterminismMeasurements {
        identical: outputs.windows(2).all(|w| w[0] == w[1]),
        thread_counts: threads,
    })
}

// ---------------------------------------------------------------- verdicts

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn criterion(id: u8, name: &str, start: Instant, result: Result<(bool, String)>) -> Criterion {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    Criterion {
        id,
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn judge_modulus(m: &ModulusMeasurements) -> (bool, String) {
    let gronwall = (m.gronwall_bound - 1f64.exp()).abs() / 1f64.exp();
    let expo = m
        .exponent_times
        .iter()
        .zip(&m.exponent_bound)
        .map(|(t, b)| (b - 0.01f64.powf((-t).exp())).abs())
        .fold(0.0, f64::max);
    let ok = m.continuity_gap <= 1e-10
        && m.concavity_defect <= 1e-10
        && m.monotonicity_defect <= 1e-12
        && m.monotone_in_eta_violation <= 1e-12
        && m.power_violation <= 1e-12
        && gronwall <= 1e-8
        && expo <= 1e-6;
    (
        ok,
        format!(
            "continuity {:.1e}, concavity {:.1e}, monotone {:.1e}, eta-order {:.1e}, power {:.3e} at x={:.3}, gronwall {:.1e}, exponent {:.1e}",
            m.continuity_gap,
            m.concavity_defect,
            m.monotonicity_defect,
            m.monotone_in_eta_violation,
            m.power_violation,
            m.power_worst_x,
            gronwall,
            expo
        ),
    )
}

fn judge_contraction(m: &ContractionMeasurements) -> (bool, String) {
    let rate_ok = (m.rate - 2.0).abs() <= 0.1 && m.rate >= m.beta1;
    let moments_ok = m
        .moments
        .iter()
        .all(|p| p.estimate.mean <= p.bound + 3.0 * p.estimate.se);
    (
        rate_ok && moments_ok,
        format!(
            "rate {:.4} (beta1 {}), moments {}",
            m.rate,
            m.beta1,
            m.moments
                .iter()
                .map(|p| format!("t={} {:.4}<={:.4}", p.t, p.estimate.mean, p.bound))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn judge_invariant(m: &InvariantMeasurements) -> (bool, String) {
    // E|Y|^2 = x^2 + s2^2 / 2 for the stationary Ornstein-Uhlenbeck law
    let ok = m.points.iter().all(|(x, e)| e.covers(x * x + 0.5, 3.0));
    let d = m
        .points
        .iter()
        .map(|(x, e)| format!("x={x}: {:.4} +- {:.4}", e.mean, e.se))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, d)
}

fn judge_averaging(m: &AveragingMeasurements) -> (bool, String) {
    let top = m.levels.last().expect("levels");
    let covered = top.points.iter().all(|p| p.estimate.covers(p.x, 3.0));
    let ok = covered && (m.se_slope + 0.5).abs() <= 0.15;
    (
        ok,
        format!("fbar covered at 5 points: {covered}; SE slope {:.3}", m.se_slope),
    )
}

fn judge_khasminskii(m: &KhasminskiiMeasurements) -> (bool, String) {
    (
        (m.slope - 1.0).abs() <= 0.25,
        format!("slope {:.3} over {} cells", m.slope, m.cells.len()),
    )
}

fn judge_skeleton(m: &SkeletonMeasurements) -> (bool, String) {
    let worst = m
        .dyadic_ratios
        .iter()
        .chain(&m.resolved_ratios)
        .copied()
        .fold(0.0, f64::max);
    let exp_err = (m.exp_terminal - 1f64.exp()).abs();
    let ok = worst <= 0.75 && exp_err <= 1e-6 && m.time_modulus_slope >= 0.4;
    (
        ok,
        format!(
            "max ratio {worst:.3}, |X_1 - e| {exp_err:.2e} (level {}), time-modulus slope {:.3}",
            m.exp_level, m.time_modulus_slope
        ),
    )
}

fn judge_rate(m: &RateMeasurements) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in m.cases.iter().filter(|c| c.intervals == 20) {
        let exact = lq_terminal_rate(c.c, 1.0, 0.0, 1.0, 1.0);
        let good = if c.c == 0.0 {
            (c.value - 0.5).abs() <= 1e-3
        } else {
            (c.value - exact).abs() <= 0.01 * exact
        };
        ok &= good;
        parts.push(format!("c={}: {:.5} (exact {:.5})", c.c, c.value, exact));
    }
    let coarse = m.cases.iter().find(|c| c.c == 1.0 && c.intervals == 20).expect("case");
    let fine = m.cases.iter().find(|c| c.c == 1.0 && c.intervals == 40).expect("case");
    let refine = coarse.value >= fine.value - 1e-3;
    parts.push(format!(
        "I(M=20)={:.5} >= I(M=40)={:.5} - 1e-3: {refine}",
        coarse.value, fine.value
    ));
    (ok && refine, parts.join(", "))
}

fn judge_variational(m: &VariationalMeasurements) -> (bool, String) {
    let zero_ok = m.zero.lhs == 0.0 && m.zero.candidates[0].estimate.mean.abs() <= 1e-12;
    let const_ok = (m.constant.lhs - m.constant_value).abs() <= 1e-12
        && (m.constant.candidates[0].estimate.mean - m.constant_value).abs() <= 1e-12;
    let nontrivial_ok = m.nontrivial.iter().all(|r| r.holds);
    (
        zero_ok && const_ok && nontrivial_ok,
        format!(
            "F=0 {zero_ok}, F=c {const_ok}, ramp: {}",
            m.nontrivial
                .iter()
                .map(|r| format!(
                    "eps={} lhs {:.4} <= {:.4}",
                    r.epsilon, r.lhs, r.candidates[r.best].estimate.mean
                ))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn judge_sweep(m: &SweepMeasurements, i_ref: f64) -> (bool, String) {
    let entries = &m.sweep.entries;
    let gaps: Vec<Option<(f64, f64)>> = entries
        .iter()
        .map(|e| Some(((e.eps_log_p? + i_ref).abs(), e.eps_log_p_se?)))
        .collect();
    if gaps.iter().any(Option::is_none) {
        return (false, "unestimable entries in the ladder".into());
    }
    let gaps: Vec<(f64, f64)> = gaps.into_iter().flatten().collect();
    let monotone = gaps.windows(2).all(|w| w[1].0 <= w[0].0 + w[1].1);
    let last = gaps.last().expect("ladder").0;
    (
        monotone && last <= 0.15,
        format!(
            "gaps {}",
            gaps.iter()
                .map(|g| format!("{:.3}", g.0))
                .collect::<Vec<_>>()
                .join(" -> ")
        ),
    )
}

fn judge_flow(m: &FlowMeasurements) -> (bool, String) {
    (m.slope >= 2.0, format!("moment slope {:.3} (p = {})", m.slope, m.p))
}

/// Runs all eleven criteria.
pub fn run_suite(seed: u64, budget: Budget) -> Vec<Criterion> {
    let s = |k: u64| derive_seed(seed, 100 + k);
    let mut out = Vec::new();
    let t = Instant::now();
    out.push(criterion(
        1,
        "modulus",
        t,
        modulus_experiment().map(|m| judge_modulus(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        2,
        "frozen contraction",
        t,
        contraction_experiment(s(2), budget).map(|m| judge_contraction(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        3,
        "invariant measure",
        t,
        invariant_experiment(s(3), budget).map(|m| judge_invariant(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        4,
        "averaged drift",
        t,
        averaging_experiment(s(4), budget).map(|m| judge_averaging(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        5,
        "khasminskii error",
        t,
        khasminskii_experiment(s(5), budget).map(|m| judge_khasminskii(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        6,
        "skeleton solver",
        t,
        skeleton_experiment().map(|m| judge_skeleton(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        7,
        "rate function",
        t,
        rate_experiment(s(7)).map(|m| judge_rate(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        8,
        "variational formula",
        t,
        variational_experiment(s(8), budget).map(|m| judge_variational(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        9,
        "ldp sweep",
        t,
        sweep_experiment(s(9), budget).map(|m| judge_sweep(&m, 0.5)),
    ));
    let t = Instant::now();
    out.push(criterion(
        10,
        "flow continuity",
        t,
        flow_experiment(s(10), budget).map(|m| judge_flow(&m)),
    ));
    let t = Instant::now();
    out.push(criterion(
        11,
        "determinism",
        t,
        determinism_experiment(s(11)).map(|m| {
            (
                m.identical,
                format!("threads {:?} identical: {}", m.thread_counts, m.identical),
            )
        }),
    ));
    out
}
