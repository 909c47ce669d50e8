//! Rate function `I = 1/2 inf |h|^2` over piecewise-constant controls whose
//! skeleton meets a constraint, by quadratic penalty and quasi-Newton descent.

mod bfgs;
mod variational;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonSystem;
use crate::stream::path_rng;

pub use variational::{variational_check, Candidate, PathFunctional, VariationalReport};

/// Penalty weights tried in order until the residual meets the tolerance.
pub const PENALTY_SCHEDULE: [f64; 6] = [1e1, 1e2, 1e3, 1e4, 1e5, 1e6];
pub const DEFAULT_STARTS: usize = 8;
/// Step of the internal central-difference gradient.
pub const INTERNAL_FD_STEP: f64 = 1e-6;
/// Minimum skeleton Euler steps used inside the objective.
const MIN_SKELETON_STEPS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// `|X_T - z| <= tol`.
    TerminalPoint { z: Vec<f64>, tol: f64 },
    /// `normal · X_T >= offset` up to `tol`.
    TerminalHalfspace { normal: Vec<f64>, offset: f64, tol: f64 },
    /// `sup_j |X(t_j) - f_j| <= sup_tol`; `values` is `times.len() × dim`.
    PathTarget {
        times: Vec<f64>,
        values: Vec<f64>,
        sup_tol: f64,
    },
}

impl Constraint {
    pub fn tolerance(&self) -> f64 {
        match self {
            Constraint::TerminalPoint { tol, .. } | Constraint::TerminalHalfspace { tol, .. } => *tol,
            Constraint::PathTarget { sup_tol, .. } => *sup_tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateProblem {
    pub system: SkeletonSystem,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub constraint: Constraint,
    /// Number of control intervals `M`.
    pub intervals: usize,
    /// Starts are drawn from the ball of radius `norm_cap / 2`.
    pub norm_cap: f64,
    pub dim_fast: usize,
}

impl RateProblem {
    pub fn new(
        system: SkeletonSystem,
        x0: Vec<f64>,
        t_end: f64,
        constraint: Constraint,
        intervals: usize,
    ) -> RateProblem {
        let d = system.dim();
        RateProblem {
            system,
            x0,
            t_end,
            constraint,
            intervals,
            norm_cap: 4.0,
            dim_fast: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.system.dim();
        if self.intervals == 0 {
            return Err(Error::config("need at least one control interval"));
        }
        if !(self.t_end > 0.0) || !(self.norm_cap > 0.0) {
            return Err(Error::config("horizon and norm cap must be positive"));
        }
        if self.x0.len() != d {
            return Err(Error::config("initial state has wrong dimension"));
        }
        if !(self.constraint.tolerance() > 0.0) {
            return Err(Error::config("constraint tolerance must be positive"));
        }
        match &self.constraint {
            Constraint::TerminalPoint { z, .. } if z.len() != d => {
                Err(Error::config("target point has wrong dimension"))
            }
            Constraint::TerminalHalfspace { normal, .. } if normal.len() != d => {
                Err(Error::config("halfspace normal has wrong dimension"))
            }
            Constraint::PathTarget { times, values, .. }
                if times.is_empty()
                    || values.len() != times.len() * d
                    || times.iter().any(|t| *t < 0.0 || *t > self.t_end) =>
            {
                Err(Error::config("path target must sample [0, T] with one state per time"))
            }
            _ => Ok(()),
        }
    }

    fn steps(&self) -> usize {
        self.intervals * MIN_SKELETON_STEPS.div_ceil(self.intervals)
    }

    fn step_len(&self) -> f64 {
        self.t_end / self.intervals as f64
    }

    /// Slow-channel control from a parameter vector; fast channel zero.
    pub fn control_from(&self, theta: &[f64]) -> Result<Control> {
        Control::new(
            self.t_end,
            self.system.dim(),
            self.dim_fast,
            theta.to_vec(),
            vec![0.0; self.intervals * self.dim_fast],
        )
    }

    /// `(smooth penalty, reported residual)` of a control.
    pub fn penalty_and_residual(&self, theta: &[f64]) -> Result<(f64, f64)> {
        let control = self.control_from(theta)?;
        let d = self.system.dim();
        match &self.constraint {
            Constraint::TerminalPoint { z, .. } => {
                let xt = self.system.terminal(&control, &self.x0, self.steps())?;
                let sq: f64 = xt.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
                Ok((sq, sq.sqrt()))
            }
            Constraint::TerminalHalfspace { normal, offset, .. } => {
                let xt = self.system.terminal(&control, &self.x0, self.steps())?;
                let r = (offset - normal.iter().zip(&xt).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
                Ok((r * r, r))
            }
            Constraint::PathTarget { times, values, .. } => {
                let n = self.steps();
                let path = self.system.path(&control, &self.x0, n)?;
                let mut sum_sq = 0.0;
                let mut sup: f64 = 0.0;
                for (j, &t) in times.iter().enumerate() {
                    let pos = (t / self.t_end * n as f64).clamp(0.0, n as f64);
                    let k = (pos.floor() as usize).min(n - 1);
                    let w = pos - k as f64;
                    let mut sq = 0.0;
                    for c in 0..d {
                        let x = path[k * d + c] + w * (path[(k + 1) * d + c] - path[k * d + c]);
                        sq += (x - values[j * d + c]).powi(2);
                    }
                    sum_sq += sq;
                    sup = sup.max(sq.sqrt());
                }
                Ok((sum_sq / times.len() as f64, sup))
            }
        }
    }

    /// `1/2 |h|^2 + mu * penalty`.
    pub fn objective(&self, theta: &[f64], mu: f64) -> Result<f64> {
        let quad = 0.5 * theta.iter().map(|v| v * v).sum::<f64>() * self.step_len();
        if mu == 0.0 {
            return Ok(quad);
        }
        Ok(quad + mu * self.penalty_and_residual(theta)?.0)
    }

    /// Analytic gradient of the quadratic part plus central differences of
    /// the penalty.
    pub fn gradient(&self, theta: &[f64], mu: f64) -> Result<Vec<f64>> {
        let dt = self.step_len();
        let mut g: Vec<f64> = theta.iter().map(|v| v * dt).collect();
        if mu != 0.0 {
            let fd = (0..theta.len())
                .into_par_iter()
                .map(|i| {
                    let h = INTERNAL_FD_STEP * theta[i].abs().max(1.0);
                    let mut tp = theta.to_vec();
                    tp[i] += h;
                    let up = self.penalty_and_residual(&tp)?.0;
                    tp[i] -= 2.0 * h;
                    let down = self.penalty_and_residual(&tp)?.0;
                    Ok(mu * (up - down) / (2.0 * h))
                })
                .collect::<Result<Vec<f64>>>()?;
            for (gi, fi) in g.iter_mut().zip(fd) {
                *gi += fi;
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                message: "non-finite gradient".into(),
                history: theta.to_vec(),
            });
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    /// `1/2 |h*|^2`, or `+inf` if no start met the constraint.
    pub value: f64,
    pub minimizer: Control,
    pub residual: f64,
    pub iterations: usize,
    /// Winning start; `None` when the zero control is already feasible.
    pub winner: Option<usize>,
    pub penalty: f64,
    pub feasible: bool,
    pub diagnostic: Option<String>,
}

impl RateResult {
    /// JSON summary; the minimizer itself is referenced by CSV path.
    pub fn to_json(&self, control_csv: Option<&str>) -> serde_json::Value {
        serde_json::json!({
            "value": if self.value.is_finite() { serde_json::json!(self.value) } else { serde_json::json!("inf") },
            "residual": self.residual,
            "iterations": self.iterations,
            "winner": self.winner,
            "penalty": self.penalty,
            "feasible": self.feasible,
            "norm_sq": self.minimizer.norm_sq(),
            "diagnostic": self.diagnostic,
            "control_csv": control_csv,
        })
    }
}

struct StartOutcome {
    theta: Vec<f64>,
    value: f64,
    residual: f64,
    iterations: usize,
    penalty: f64,
    feasible: bool,
}

fn run_start(problem: &RateProblem, theta0: Vec<f64>) -> Result<StartOutcome> {
    let tol = problem.constraint.tolerance();
    let dt = problem.step_len();
    let mut theta = theta0;
    let mut iterations = 0;
    let mut last = (f64::INFINITY, f64::INFINITY, PENALTY_SCHEDULE[0]);
    for &mu in &PENALTY_SCHEDULE {
        let out = bfgs::minimize(
            |x| problem.objective(x, mu),
            |x| Ok((problem.objective(x, mu)?, problem.gradient(x, mu)?)),
            theta,
            bfgs::BfgsOptions {
                max_iter: 400,
                grad_tol: 1e-9,
                h0: 1.0 / (dt * (1.0 + mu)),
            },
        )?;
        iterations += out.iterations;
        theta = out.x;
        let residual = problem.penalty_and_residual(&theta)?.1;
        let value = 0.5 * theta.iter().map(|v| v * v).sum::<f64>() * dt;
        last = (value, residual, mu);
        if residual <= tol {
            return Ok(StartOutcome {
                theta,
                value,
                residual,
                iterations,
                penalty: mu,
                feasible: true,
            });
        }
    }
    Ok(StartOutcome {
        theta,
        value: last.0,
        residual: last.1,
        iterations,
        penalty: last.2,
        feasible: false,
    })
}

/// Multistart penalty minimisation; start `i` draws its initial control from
/// stream `i` of `seed`, uniformly in the ball of radius `norm_cap / 2`.
pub fn minimize_rate(problem: &RateProblem, starts: usize, seed: u64) -> Result<RateResult> {
    problem.validate()?;
    if starts == 0 {
        return Err(Error::config("need at least one start"));
    }
    let n_par = problem.intervals * problem.system.dim();
    let zero = vec![0.0; n_par];
    let (_, r0) = problem.penalty_and_residual(&zero)?;
    if r0 <= problem.constraint.tolerance() {
        return Ok(RateResult {
            value: 0.0,
            minimizer: problem.control_from(&zero)?,
            residual: r0,
            iterations: 0,
            winner: None,
            penalty: 0.0,
            feasible: true,
            diagnostic: None,
        });
    }
    let outcomes = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let c = Control::random_in_ball(
                &mut rng,
                problem.t_end,
                problem.intervals,
                problem.system.dim(),
                problem.dim_fast,
                problem.norm_cap / 2.0,
                true,
            )?;
            run_start(problem, c.hdot1().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;

    let best_feasible = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.feasible)
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value));
    let (idx, o, value, diagnostic) = match best_feasible {
        Some((i, o)) => (i, o, o.value, None),
        None => {
            let (i, o) = outcomes
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.residual.total_cmp(&b.1.residual))
                .expect("at least one start");
            let msg = format!(
                "no start met tolerance {} after penalty {:e}; smallest residual {:.3e} (start {i})",
                problem.constraint.tolerance(),
                PENALTY_SCHEDULE[PENALTY_SCHEDULE.len() - 1],
                o.residual
            );
            (i, o, f64::INFINITY, Some(msg))
        }
    };
    Ok(RateResult {
        value,
        minimizer: problem.control_from(&o.theta)?,
        residual: o.residual,
        iterations: o.iterations,
        winner: Some(idx),
        penalty: o.penalty,
        feasible: o.feasible,
        diagnostic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub step: f64,
    pub penalty: f64,
    /// `max_i |g_fd - g_int| / max(max_i |g_int|, 1e-12)`.
    pub max_rel_deviation: f64,
    pub internal: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

/// Compares the optimizer's gradient with a central difference of the full
/// objective at `step`.
pub fn rate_gradient_check(
    problem: &RateProblem,
    control: &Control,
    step: f64,
    penalty: f64,
) -> Result<GradientCheckReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::config(format!(
            "gradient-check step {step} outside [1e-7, 1e-3]"
        )));
    }
    problem.validate()?;
    if control.intervals() != problem.intervals || control.dim_slow() != problem.system.dim() {
        return Err(Error::config("control does not match the problem grid"));
    }
    let theta = control.hdot1();
    let internal = problem.gradient(theta, penalty)?;
    let finite_difference = (0..theta.len())
        .map(|i| {
            let mut tp = theta.to_vec();
            tp[i] += step;
            let up = problem.objective(&tp, penalty)?;
            tp[i] -= 2.0 * step;
            let down = problem.objective(&tp, penalty)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    let scale = internal.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let max_rel_deviation = internal
        .iter()
        .zip(&finite_difference)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);
    Ok(GradientCheckReport {
        step,
        penalty,
        max_rel_deviation,
        internal,
        finite_difference,
    })
}

/// Closed-form rate of `dX = c X dt + s1 hdot dt`, `X_0 = x0`, `X_T = z`.
pub fn lq_terminal_rate(c: f64, s1: f64, x0: f64, z: f64, t_end: f64) -> f64 {
    let gain = if c == 0.0 {
        t_end
    } else {
        (2.0 * c * t_end).exp_m1() / (2.0 * c)
    };
    (z - x0 * (c * t_end).exp()).powi(2) / (2.0 * s1 * s1 * gain)
}
