//! The skeleton equation `dX = fbar(X) dt + sigma1(X) hdot1 dt` solved by
//! dyadic Euler refinement, the map `S(h)`, and continuity diagnostics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::AveragedDrift;
use crate::control::Control;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::stats::log_log_slope;

/// Refinement stops once consecutive levels agree to this sup-distance.
pub const LEVEL_TOL: f64 = 1e-8;
/// Largest acceptable ratio of consecutive level differences.
pub const GEOMETRIC_RATIO: f64 = 0.75;

type Sigma1Fn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Averaged drift plus slow diffusion matrix: everything the skeleton needs.
#[derive(Clone)]
pub struct SkeletonSystem {
    drift: AveragedDrift,
    sigma1: Sigma1Fn,
    dim: usize,
}

impl fmt::Debug for SkeletonSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SkeletonSystem")
            .field("drift", &self.drift)
            .field("dim", &self.dim)
            .finish()
    }
}

impl SkeletonSystem {
    /// `sigma1` writes a row-major `dim × dim` matrix.
    pub fn new<S>(drift: AveragedDrift, sigma1: S) -> SkeletonSystem
    where
        S: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let dim = drift.dim();
        SkeletonSystem {
            drift,
            sigma1: Arc::new(sigma1),
            dim,
        }
    }

    /// Uses the model's `sigma1` with the given drift.
    pub fn from_model(model: &ModelSpec, drift: AveragedDrift) -> Result<SkeletonSystem> {
        if drift.dim() != model.dim_slow() {
            return Err(Error::config("drift dimension does not match the model"));
        }
        let m = model.clone();
        Ok(SkeletonSystem::new(drift, move |x, out| m.sigma1(x, out)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &AveragedDrift {
        &self.drift
    }

    fn check(&self, control: &Control, x0: &[f64]) -> Result<()> {
        if control.dim_slow() != self.dim || x0.len() != self.dim {
            return Err(Error::config("control or initial state has wrong dimension"));
        }
        if let Some(v) = x0.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("initial state has non-finite component {v}")));
        }
        Ok(())
    }

    /// Euler path on `2^level` uniform steps over `[0, T]`, flattened
    /// `(2^level + 1) × dim`. The control enters through its exact integral
    /// over each step, so any control grid is admissible.
    pub fn euler_path(&self, control: &Control, x0: &[f64], level: u32) -> Result<Vec<f64>> {
        self.check(control, x0)?;
        let n = 1usize << level;
        let mut path = Vec::with_capacity((n + 1) * self.dim);
        path.extend_from_slice(x0);
        self.walk(control, x0, n, |x| path.extend_from_slice(x))?;
        Ok(path)
    }

    /// Terminal value of [`euler_path`](Self::euler_path) on `n_steps` steps
    /// without storing the path.
    pub fn terminal(&self, control: &Control, x0: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        self.check(control, x0)?;
        let mut last = x0.to_vec();
        self.walk(control, x0, n_steps, |x| last.copy_from_slice(x))?;
        Ok(last)
    }

    /// Euler path on `n_steps` uniform steps, flattened.
    pub fn path(&self, control: &Control, x0: &[f64], n_steps: usize) -> Result<Vec<f64>> {
        self.check(control, x0)?;
        let mut path = Vec::with_capacity((n_steps + 1) * self.dim);
        path.extend_from_slice(x0);
        self.walk(control, x0, n_steps, |x| path.extend_from_slice(x))?;
        Ok(path)
    }

    fn walk(&self, control: &Control, x0: &[f64], n: usize, mut visit: impl FnMut(&[f64])) -> Result<()> {
        let d = self.dim;
        let t_end = control.t_end();
        let h = t_end / n as f64;
        let prefix = ControlPrefix::new(control);
        let mut x = x0.to_vec();
        let mut f = vec![0.0; d];
        let mut s = vec![0.0; d * d];
        let mut h_prev = vec![0.0; d];
        let mut h_next = vec![0.0; d];
        for k in 0..n {
            let t1 = if k + 1 == n { t_end } else { (k + 1) as f64 * h };
            prefix.at(t1, &mut h_next);
            self.drift.eval(&x, &mut f);
            (self.sigma1)(&x, &mut s);
            let mut xn = x.clone();
            for i in 0..d {
                let row = &s[i * d..(i + 1) * d];
                let dh: f64 = row
                    .iter()
                    .zip(h_next.iter().zip(&h_prev))
                    .map(|(a, (p, q))| a * (p - q))
                    .sum();
                xn[i] += f[i] * h + dh;
            }
            if xn
                .iter()
                .any(|v| !v.is_finite() || v.abs() > crate::sde::BLOW_UP_THRESHOLD)
            {
                return Err(Error::BlowUp {
                    kind: "skeleton",
                    last_finite_index: k,
                    threshold: crate::sde::BLOW_UP_THRESHOLD,
                });
            }
            x = xn;
            std::mem::swap(&mut h_prev, &mut h_next);
            visit(&x);
        }
        Ok(())
    }
}

/// `h1(t)` in O(1) from cumulative sums at the control breakpoints.
struct ControlPrefix<'a> {
    control: &'a Control,
    cum: Vec<f64>,
}

impl<'a> ControlPrefix<'a> {
    fn new(control: &'a Control) -> ControlPrefix<'a> {
        let d = control.dim_slow();
        let dt = control.step();
        let mut cum = vec![0.0; (control.intervals() + 1) * d];
        for i in 0..control.intervals() {
            for c in 0..d {
                cum[(i + 1) * d + c] = cum[i * d + c] + control.hdot1_on(i)[c] * dt;
            }
        }
        ControlPrefix { control, cum }
    }

    fn at(&self, t: f64, out: &mut [f64]) {
        let d = out.len();
        let i = self.control.interval_of(t);
        let t0 = i as f64 * self.control.step();
        let rate = self.control.hdot1_on(i);
        for c in 0..d {
            out[c] = self.cum[i * d + c] + rate[c] * (t - t0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSolution {
    pub times: Vec<f64>,
    /// `(times.len()) × dim`, row-major.
    pub path: Vec<f64>,
    pub dim: usize,
    pub level: u32,
    /// `sup |X^n - X^{n-1}|` over the coarser grid.
    pub estimated_error: f64,
    /// `sup` differences between levels `2 vs 1, 3 vs 2, ...` up to `level`.
    pub history: Vec<f64>,
}

impl SkeletonSolution {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.path[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.times.len() - 1)
    }

    /// Linear interpolation in time.
    pub fn value_at(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len() - 1;
        let t_end = self.times[n];
        let pos = (t / t_end * n as f64).clamp(0.0, n as f64);
        let k = (pos.floor() as usize).min(n.saturating_sub(1));
        let w = pos - k as f64;
        let (a, b) = (self.at(k), self.at((k + 1).min(n)));
        for c in 0..self.dim {
            out[c] = a[c] + w * (b[c] - a[c]);
        }
    }

    /// Ratios of consecutive level differences.
    pub fn error_ratios(&self) -> Vec<f64> {
        self.history.windows(2).map(|w| w[1] / w[0]).collect()
    }

    /// Columns `t, x_0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|i| format!("x_{i}")));
        out.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.at(k).iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn dyadic_times(t_end: f64, level: u32) -> Vec<f64> {
    let n = 1usize << level;
    (0..=n)
        .map(|k| if k == n { t_end } else { t_end * k as f64 / n as f64 })
        .collect()
}

/// Dyadic Euler refinement from level 1 (two steps) up to `n_levels`,
/// stopping early once consecutive levels agree within [`LEVEL_TOL`].
pub fn solve_skeleton(
    system: &SkeletonSystem,
    control: &Control,
    x0: &[f64],
    n_levels: u32,
) -> Result<SkeletonSolution> {
    if n_levels < 2 {
        return Err(Error::config("need at least two refinement levels"));
    }
    if n_levels > 26 {
        return Err(Error::config("refinement beyond 2^26 steps is not supported"));
    }
    let d = system.dim();
    let mut prev = system.euler_path(control, x0, 1)?;
    let mut history = Vec::new();
    let mut level = 1;
    while level < n_levels {
        level += 1;
        let cur = system.euler_path(control, x0, level)?;
        let n_prev = prev.len() / d;
        let diff = (0..n_prev)
            .flat_map(|k| (0..d).map(move |c| (k, c)))
            .map(|(k, c)| (cur[2 * k * d + c] - prev[k * d + c]).abs())
            .fold(0.0, f64::max);
        history.push(diff);
        prev = cur;
        if diff < LEVEL_TOL {
            break;
        }
    }
    let err = *history.last().expect("at least one comparison");
    if err >= LEVEL_TOL && history.len() >= 2 {
        let ratio = err / history[history.len() - 2];
        if !(ratio <= GEOMETRIC_RATIO) {
            return Err(Error::Numeric {
                message: format!("dyadic refinement not converging geometrically (last ratio {ratio:.3})"),
                history,
            });
        }
    }
    Ok(SkeletonSolution {
        times: dyadic_times(control.t_end(), level),
        path: prev,
        dim: d,
        level,
        estimated_error: err,
        history,
    })
}

/// `S(h)` on a grid of initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonField {
    pub x0_grid: Vec<Vec<f64>>,
    pub solutions: Vec<SkeletonSolution>,
}

pub fn skeleton_map_s(
    system: &SkeletonSystem,
    control: &Control,
    x0_grid: &[Vec<f64>],
    n_levels: u32,
) -> Result<SkeletonField> {
    let solutions = x0_grid
        .par_iter()
        .map(|x0| solve_skeleton(system, control, x0, n_levels))
        .collect::<Result<Vec<_>>>()?;
    Ok(SkeletonField {
        x0_grid: x0_grid.to_vec(),
        solutions,
    })
}

/// Continuity of `h -> S(h)` along a sequence and the time modulus of `S(h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    /// `sup_t |S(h_n)(t) - S(h)(t)|` along the sequence.
    pub gaps: Vec<f64>,
    pub gaps_non_increasing: bool,
    /// Largest norm among `h` and the sequence.
    pub norm_bound: f64,
    pub lags: Vec<f64>,
    /// `sup_t |X_{t+lag} - X_t|` per lag.
    pub lag_sups: Vec<f64>,
    pub time_modulus_slope: f64,
    pub time_modulus_ok: bool,
}

/// Minimum log-log slope of the time modulus (`1/2` less a margin).
pub const TIME_MODULUS_SLOPE: f64 = 0.4;

pub fn check_skeleton_continuity(
    system: &SkeletonSystem,
    base: &Control,
    sequence: &[Control],
    x0: &[f64],
    level: u32,
) -> Result<ContinuityReport> {
    let reference = system.euler_path(base, x0, level)?;
    let gaps = sequence
        .iter()
        .map(|h| {
            let p = system.euler_path(h, x0, level)?;
            Ok(p.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let gaps_non_increasing = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let norm_bound = sequence.iter().map(Control::norm).fold(base.norm(), f64::max);

    let d = system.dim();
    let n = 1usize << level;
    let t_end = base.t_end();
    let mut lags = Vec::new();
    let mut lag_sups = Vec::new();
    for j in 1..=level.min(10) {
        let lag_steps = n >> j;
        if lag_steps == 0 {
            break;
        }
        let sup = (0..=n - lag_steps)
            .map(|k| {
                (0..d)
                    .map(|c| (reference[(k + lag_steps) * d + c] - reference[k * d + c]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if sup > 0.0 {
            lags.push(lag_steps as f64 * t_end / n as f64);
            lag_sups.push(sup);
        }
    }
    // a constant path is trivially equicontinuous
    let time_modulus_slope = log_log_slope(&lags, &lag_sups).unwrap_or(f64::INFINITY);
    Ok(ContinuityReport {
        gaps,
        gaps_non_increasing,
        norm_bound,
        lags,
        lag_sups,
        time_modulus_slope,
        time_modulus_ok: time_modulus_slope >= TIME_MODULUS_SLOPE,
    })
}

/// Box-filtered versions of `h` with half-widths `count, count-1, ..., 1`
/// control intervals; converges to `h` as the window shrinks.
pub fn mollified_sequence(h: &Control, count: usize) -> Result<Vec<Control>> {
    let m = h.intervals();
    let smooth = |v: &[f64], dim: usize, w: usize| -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for i in 0..m {
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(m - 1);
            for c in 0..dim {
                let s: f64 = (lo..=hi).map(|j| v[j * dim + c]).sum();
                out[i * dim + c] = s / (hi - lo + 1) as f64;
            }
        }
        out
    };
    (1..=count)
        .rev()
        .map(|w| {
            Control::new(
                h.t_end(),
                h.dim_slow(),
                h.dim_fast(),
                smooth(h.hdot1(), h.dim_slow(), w),
                smooth(h.hdot2(), h.dim_fast(), w),
            )
        })
        .collect()
}

/// `h + direction / n` for `n = 1..=count`.
pub fn perturbation_sequence(h: &Control, direction: &Control, count: usize) -> Result<Vec<Control>> {
    (1..=count).map(|n| h.axpy(1.0 / n as f64, direction)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    fn unit_sigma() -> impl Fn(&[f64], &mut [f64]) + Send + Sync {
        |_, out: &mut [f64]| out[0] = 1.0
    }

    #[test]
    fn no_dynamics_stays_put() {
        let sys = SkeletonSystem::new(AveragedDrift::analytic(1, |_, o| o[0] = 0.0), unit_sigma());
        let h = Control::zero(1.0, 4, 1, 1).unwrap();
        let s = solve_skeleton(&sys, &h, &[0.7], 8).unwrap();
        assert!(s.path.iter().all(|v| *v == 0.7));
        assert_eq!(s.level, 2);
    }

    #[test]
    fn pure_control_integral() {
        let sys = SkeletonSystem::new(AveragedDrift::analytic(1, |_, o| o[0] = 0.0), unit_sigma());
        let h = Control::constant_slow(1.0, 3, &[1.0], 1).unwrap();
        let s = solve_skeleton(&sys, &h, &[0.0], 8).unwrap();
        assert!((s.terminal()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exponential_growth_reaches_e() {
        let sys = SkeletonSystem::new(AveragedDrift::analytic(1, |x, o| o[0] = x[0]), unit_sigma());
        let h = Control::zero(1.0, 1, 1, 1).unwrap();
        let s = solve_skeleton(&sys, &h, &[1.0], 22).unwrap();
        assert!((s.terminal()[0] - std::f64::consts::E).abs() < 1e-6);
        assert!(s.error_ratios().iter().all(|r| *r <= GEOMETRIC_RATIO));
    }

    #[test]
    fn too_few_levels_rejected() {
        let sys = SkeletonSystem::new(AveragedDrift::analytic(1, |x, o| o[0] = x[0]), unit_sigma());
        let h = Control::zero(1.0, 1, 1, 1).unwrap();
        assert!(matches!(solve_skeleton(&sys, &h, &[1.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn refined_and_truncated_controls() {
        let model = ModelSpec::from_builtin(BuiltinModel::Lin1d {
            a1: 0.3,
            b1: -0.8,
            s1: 1.5,
            s2: 1.0,
        })
        .unwrap();
        let sys = SkeletonSystem::from_model(&model, AveragedDrift::from_model(&model).unwrap()).unwrap();
        let h = Control::new(1.0, 1, 1, vec![0.5, -1.0, 2.0, 0.25], vec![0.0; 4]).unwrap();
        let a = sys.euler_path(&h, &[0.2], 10).unwrap();
        let b = sys.euler_path(&h.refine(3).unwrap(), &[0.2], 10).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
        let cut = sys.euler_path(&h.truncate_after(0.5), &[0.2], 10).unwrap();
        assert!(a[..=512].iter().zip(&cut[..=512]).all(|(p, q)| p == q));
    }

    #[test]
    fn mollified_sequence_closes_in() {
        let model = ModelSpec::from_builtin(BuiltinModel::Lin1d {
            a1: 0.5,
            b1: -0.5,
            s1: 1.0,
            s2: 1.0,
        })
        .unwrap();
        let sys = SkeletonSystem::from_model(&model, AveragedDrift::from_model(&model).unwrap()).unwrap();
        let hd: Vec<f64> = (0..32).map(|i| if i < 16 { 1.0 } else { -1.0 }).collect();
        let h = Control::new(1.0, 1, 1, hd, vec![0.0; 32]).unwrap();
        let seq = mollified_sequence(&h, 6).unwrap();
        let r = check_skeleton_continuity(&sys, &h, &seq, &[0.0], 10).unwrap();
        assert!(r.gaps_non_increasing, "{:?}", r.gaps);
        assert!(r.time_modulus_ok);
    }
}
