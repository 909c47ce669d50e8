//! Averaged slow drift and statistics of the frozen fast process.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sde::simulate_frozen_stream;
use crate::stats::{linear_fit, Estimate};
use crate::stream::derive_seed;

type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Where a drift table came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DriftProvenance {
    Analytic,
    ErgodicAverage {
        t_burn: f64,
        t_avg: f64,
        n_reps: usize,
        step: f64,
        seed: u64,
    },
    Imported,
}

#[derive(Clone)]
enum Evaluation {
    Analytic {
        dim: usize,
        f: DriftFn,
    },
    /// One-dimensional table; piecewise linear inside, linear extrapolation
    /// from the end segments outside.
    Table {
        grid: Vec<f64>,
        values: Vec<f64>,
        se: Vec<f64>,
    },
}

/// The averaged drift `fbar(a) = int f1(a, y) mu_a(dy)`.
#[derive(Clone)]
pub struct AveragedDrift {
    eval: Evaluation,
    provenance: DriftProvenance,
}

impl fmt::Debug for AveragedDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("AveragedDrift");
        match &self.eval {
            Evaluation::Analytic { dim, .. } => d.field("analytic_dim", dim),
            Evaluation::Table { grid, .. } => d.field("grid_points", &grid.len()),
        };
        d.field("provenance", &self.provenance).finish()
    }
}

impl AveragedDrift {
    pub fn analytic<F>(dim: usize, f: F) -> AveragedDrift
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        AveragedDrift {
            eval: Evaluation::Analytic { dim, f: Arc::new(f) },
            provenance: DriftProvenance::Analytic,
        }
    }

    /// Closed-form drift of a built-in model.
    pub fn from_model(model: &ModelSpec) -> Result<AveragedDrift> {
        let b = model
            .builtin()
            .ok_or_else(|| Error::config(format!("no closed-form averaged drift for model {}", model.name())))?;
        Ok(AveragedDrift::analytic(1, move |x, out| out[0] = b.fbar(x[0])))
    }

    pub fn tabulated(
        grid: Vec<f64>,
        values: Vec<f64>,
        se: Vec<f64>,
        provenance: DriftProvenance,
    ) -> Result<AveragedDrift> {
        if grid.is_empty() || grid.len() != values.len() || grid.len() != se.len() {
            return Err(Error::config(
                "drift table columns must be non-empty and of equal length",
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("drift table grid must be strictly increasing"));
        }
        if grid.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::domain("drift table contains non-finite entries"));
        }
        Ok(AveragedDrift {
            eval: Evaluation::Table { grid, values, se },
            provenance,
        })
    }

    /// Samples this drift on `grid` (1-D), recording zero standard errors.
    pub fn tabulate(&self, grid: &[f64]) -> Result<AveragedDrift> {
        if self.dim() != 1 {
            return Err(Error::config("only one-dimensional drifts can be tabulated"));
        }
        let values = grid.iter().map(|&x| self.eval1(x)).collect();
        AveragedDrift::tabulated(grid.to_vec(), values, vec![0.0; grid.len()], self.provenance.clone())
    }

    pub fn dim(&self) -> usize {
        match &self.eval {
            Evaluation::Analytic { dim, .. } => *dim,
            Evaluation::Table { .. } => 1,
        }
    }

    pub fn provenance(&self) -> &DriftProvenance {
        &self.provenance
    }

    /// `(grid, values, standard errors)` for tabulated drifts.
    pub fn table(&self) -> Option<(&[f64], &[f64], &[f64])> {
        match &self.eval {
            Evaluation::Table { grid, values, se } => Some((grid, values, se)),
            Evaluation::Analytic { .. } => None,
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match &self.eval {
            Evaluation::Analytic { f, .. } => f(x, out),
            Evaluation::Table { grid, values, .. } => out[0] = interpolate(grid, values, x[0]),
        }
    }

    pub fn eval1(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.eval(&[x], &mut out);
        out[0]
    }

    /// CSV with columns `x, fbar, se`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let (grid, values, se) = self
            .table()
            .ok_or_else(|| Error::config("only tabulated drifts can be exported"))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "fbar", "se"])?;
        for i in 0..grid.len() {
            out.write_record([grid[i].to_string(), values[i].to_string(), se[i].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<AveragedDrift> {
        #[derive(Deserialize)]
        struct Row {
            x: f64,
            fbar: f64,
            se: f64,
        }
        let mut rdr = csv::Reader::from_reader(r);
        let (mut g, mut v, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for row in rdr.deserialize() {
            let row: Row = row?;
            g.push(row.x);
            v.push(row.fbar);
            s.push(row.se);
        }
        AveragedDrift::tabulated(g, v, s, DriftProvenance::Imported)
    }
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 1 {
        return values[0];
    }
    // index of the segment [grid[i], grid[i+1]] used for x
    let i = match grid.partition_point(|g| *g <= x) {
        0 => 0,
        k if k >= n => n - 2,
        k => k - 1,
    };
    let w = (x - grid[i]) / (grid[i + 1] - grid[i]);
    values[i] + w * (values[i + 1] - values[i])
}

/// Simulation budget for ergodic averages of the frozen process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgodicBudget {
    pub t_burn: f64,
    pub t_avg: f64,
    pub n_reps: usize,
    /// Euler step of the frozen process.
    pub step: f64,
}

impl ErgodicBudget {
    /// Burn-in `10 / beta1` for the given model.
    pub fn for_model(model: &ModelSpec, t_avg: f64, n_reps: usize) -> ErgodicBudget {
        ErgodicBudget {
            t_burn: 10.0 / model.assumptions().beta1,
            t_avg,
            n_reps,
            step: 0.005,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::config("n_reps must be at least 1"));
        }
        if !(self.t_avg > 0.0 && self.t_burn >= 0.0 && self.step > 0.0) {
            return Err(Error::config("need t_avg > 0, t_burn >= 0 and a positive step"));
        }
        if self.step > self.t_avg {
            return Err(Error::config("step exceeds the averaging window"));
        }
        Ok(())
    }

    fn steps(&self) -> (usize, usize) {
        let burn = (self.t_burn / self.step).round() as usize;
        let avg = ((self.t_avg / self.step).round() as usize).max(1);
        (burn, avg)
    }
}

/// Replicated time averages of `g(Y_t)` over the averaging window; one sample
/// per replicate (stream = replicate index).
fn replicate_averages<G>(model: &ModelSpec, x: &[f64], budget: &ErgodicBudget, seed: u64, g: G) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    budget.validate()?;
    let (burn, avg) = budget.steps();
    let t_end = (burn + avg) as f64 * budget.step;
    // start the fast process at the slow state (the fixed point of the drift
    // for the built-ins); the burn-in removes the dependence anyway.
    let y0: Vec<f64> = (0..model.dim_fast())
        .map(|i| x.get(i).copied().unwrap_or(0.0))
        .collect();
    (0..budget.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = simulate_frozen_stream(model, x, &y0, t_end, burn + avg, seed, rep)?;
            let sum: f64 = (burn..burn + avg).map(|k| g(path.fast_at(k))).sum();
            Ok(sum / avg as f64)
        })
        .collect()
}

/// Per-point estimate of the averaged drift on a 1-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbarEstimate {
    pub x: f64,
    pub estimate: Estimate,
}

/// Estimates `fbar` on `x_grid` (sorted, 1-D slow state) from time averages
/// of `f1(x, Y_t^x)`; grid point `i` uses seed `derive_seed(seed, i)`.
pub fn estimate_fbar(model: &ModelSpec, x_grid: &[f64], budget: &ErgodicBudget, seed: u64) -> Result<AveragedDrift> {
    let points = estimate_fbar_points(model, x_grid, budget, seed)?;
    AveragedDrift::tabulated(
        x_grid.to_vec(),
        points.iter().map(|p| p.estimate.mean).collect(),
        points.iter().map(|p| p.estimate.se).collect(),
        DriftProvenance::ErgodicAverage {
            t_burn: budget.t_burn,
            t_avg: budget.t_avg,
            n_reps: budget.n_reps,
            step: budget.step,
            seed,
        },
    )
}

pub fn estimate_fbar_points(
    model: &ModelSpec,
    x_grid: &[f64],
    budget: &ErgodicBudget,
    seed: u64,
) -> Result<Vec<FbarEstimate>> {
    if x_grid.is_empty() {
        return Err(Error::config("averaging grid is empty"));
    }
    if model.dim_slow() != 1 {
        return Err(Error::config("tabulated averaging supports one slow dimension"));
    }
    budget.validate()?;
    x_grid
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let samples = replicate_averages(model, &[x], budget, derive_seed(seed, i as u64), |y| {
                let mut out = [0.0];
                model.f1(&[x], y, &mut out);
                out[0]
            })?;
            Ok(FbarEstimate {
                x,
                estimate: Estimate::from_samples(&samples),
            })
        })
        .collect()
}

/// Estimate of `int |y|^p mu_x(dy)` for `p` in {2, 4}.
pub fn invariant_moments(model: &ModelSpec, x: &[f64], p: u32, budget: &ErgodicBudget, seed: u64) -> Result<Estimate> {
    if p != 2 && p != 4 {
        return Err(Error::config(format!("moment order {p} unsupported (use 2 or 4)")));
    }
    if x.len() != model.dim_slow() {
        return Err(Error::config("slow state has wrong dimension"));
    }
    let samples = replicate_averages(model, x, budget, seed, |y| {
        let sq: f64 = y.iter().map(|v| v * v).sum();
        if p == 2 {
            sq
        } else {
            sq * sq
        }
    })?;
    Ok(Estimate::from_samples(&samples))
}

/// Contraction of the frozen process under synchronous coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityReport {
    /// Fitted `r` in `E|Y_t(y1) - Y_t(y2)|^2 ~ e^{-r t}`.
    pub rate: f64,
    pub beta1: f64,
    pub exceeds_beta1: bool,
    pub times: Vec<f64>,
    pub log_mean_sq_distance: Vec<f64>,
    /// `E|Y_T(y1)|^2` over the coupled paths, with the horizon as burn-in.
    pub terminal_second_moment: Estimate,
    pub burn_in: f64,
    pub warning: Option<String>,
}

const CONTRACTION_STEP: f64 = 1e-3;
const CONTRACTION_SAMPLES: usize = 20;

pub fn fit_contraction(
    model: &ModelSpec,
    x: &[f64],
    y1: &[f64],
    y2: &[f64],
    t_end: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ErgodicityReport> {
    if !(t_end > 0.0) {
        return Err(Error::config("horizon must be positive"));
    }
    if n_paths == 0 {
        return Err(Error::config("n_paths must be at least 1"));
    }
    if y1 == y2 {
        return Err(Error::config("contraction fit needs distinct starting points"));
    }
    let n = ((t_end / CONTRACTION_STEP).round() as usize).max(CONTRACTION_SAMPLES);
    let stride = n / CONTRACTION_SAMPLES;
    let idx: Vec<usize> = (0..=CONTRACTION_SAMPLES).map(|j| j * stride).collect();

    let per_path = (0..n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let a = simulate_frozen_stream(model, x, y1, t_end, n, seed, stream)?;
            let b = simulate_frozen_stream(model, x, y2, t_end, n, seed, stream)?;
            let d: Vec<f64> = idx
                .iter()
                .map(|&k| {
                    a.fast_at(k)
                        .iter()
                        .zip(b.fast_at(k))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum()
                })
                .collect();
            let m: f64 = a.fast_at(n).iter().map(|v| v * v).sum();
            Ok((d, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let h = t_end / n as f64;
    let mut times = Vec::new();
    let mut logs = Vec::new();
    for (j, &k) in idx.iter().enumerate() {
        let mean = per_path.iter().map(|(d, _)| d[j]).sum::<f64>() / n_paths as f64;
        if mean > f64::MIN_POSITIVE && mean.is_finite() {
            times.push(k as f64 * h);
            logs.push(mean.ln());
        }
    }
    let warning = (times.len() < idx.len()).then(|| {
        format!(
            "distance underflowed; fitted on {} of {} points",
            times.len(),
            idx.len()
        )
    });
    if times.len() < 2 {
        return Err(Error::Numeric {
            message: "contraction fit has fewer than two usable points".into(),
            history: logs,
        });
    }
    let fit = linear_fit(&times, &logs).expect("two or more points");
    let rate = -fit.slope;
    let beta1 = model.assumptions().beta1;
    let moments: Vec<f64> = per_path.iter().map(|(_, m)| *m).collect();
    Ok(ErgodicityReport {
        rate,
        beta1,
        exceeds_beta1: rate >= beta1,
        times,
        log_mean_sq_distance: logs,
        terminal_second_moment: Estimate::from_samples(&moments),
        burn_in: t_end,
        warning,
    })
}

/// Empirical modulus `gamma(a) = sup_{0 < |x1 - x2| <= a} |fbar(x1) - fbar(x2)| / |x1 - x2|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusEntry {
    pub separation: f64,
    /// `None` when no grid pair is that close.
    pub gamma: Option<f64>,
}

pub fn fbar_modulus(drift: &AveragedDrift, separations: &[f64]) -> Result<Vec<ModulusEntry>> {
    let (grid, values, _) = drift
        .table()
        .ok_or_else(|| Error::config("modulus scan needs a tabulated drift (see AveragedDrift::tabulate)"))?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let d = grid[j] - grid[i];
            pairs.push((d, (values[j] - values[i]).abs() / d));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(separations
        .iter()
        .map(|&a| {
            let gamma = pairs
                .iter()
                .take_while(|(d, _)| *d <= a * (1.0 + 1e-12))
                .map(|(_, r)| *r)
                .reduce(f64::max);
            ModulusEntry { separation: a, gamma }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    fn lin(a1: f64, b1: f64, s2: f64) -> ModelSpec {
        ModelSpec::from_builtin(BuiltinModel::Lin1d { a1, b1, s1: 1.0, s2 }).unwrap()
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let d = AveragedDrift::tabulated(
            vec![0.0, 1.0, 3.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0; 3],
            DriftProvenance::Imported,
        )
        .unwrap();
        assert_eq!(d.eval1(0.5), 1.0);
        assert_eq!(d.eval1(2.0), 1.0);
        assert_eq!(d.eval1(-1.0), -2.0);
        assert_eq!(d.eval1(4.0), -1.0);
        assert_eq!(d.eval1(1.0), 2.0);
    }

    #[test]
    fn table_validation() {
        let bad = AveragedDrift::tabulated(vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0; 2], DriftProvenance::Imported);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = AveragedDrift::tabulated(
            vec![-1.0, 0.5],
            vec![0.25, -3.0],
            vec![0.1, 0.2],
            DriftProvenance::Imported,
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = AveragedDrift::read_csv(&buf[..]).unwrap();
        assert_eq!(back.table(), d.table());
    }

    #[test]
    fn fast_independent_drift_is_exact() {
        let m = lin(0.7, 0.0, 1.0);
        let budget = ErgodicBudget {
            t_burn: 1.0,
            t_avg: 1.0,
            n_reps: 4,
            step: 0.01,
        };
        let d = estimate_fbar(&m, &[-1.0, 2.0], &budget, 3).unwrap();
        let (_, v, se) = d.table().unwrap();
        assert!((v[0] + 0.7).abs() < 1e-12 && (v[1] - 1.4).abs() < 1e-12);
        assert!(se.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn zero_replicates_rejected() {
        let m = lin(0.5, 0.5, 1.0);
        let budget = ErgodicBudget {
            t_burn: 1.0,
            t_avg: 1.0,
            n_reps: 0,
            step: 0.01,
        };
        assert!(matches!(estimate_fbar(&m, &[0.0], &budget, 1), Err(Error::Config(_))));
    }

    #[test]
    fn odd_moment_rejected() {
        let m = lin(0.5, 0.5, 1.0);
        let budget = ErgodicBudget::for_model(&m, 1.0, 2);
        assert!(matches!(
            invariant_moments(&m, &[0.0], 3, &budget, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contraction_input_checks() {
        let m = lin(0.5, 0.5, 1.0);
        assert!(fit_contraction(&m, &[0.0], &[1.0], &[1.0], 1.0, 4, 0).is_err());
        assert!(matches!(
            fit_contraction(&m, &[0.0], &[1.0], &[0.0], 0.0, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_and_constant_moduli() {
        let grid: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let lin = AveragedDrift::from_model(&lin(0.5, 0.25, 1.0))
            .unwrap()
            .tabulate(&grid)
            .unwrap();
        for e in fbar_modulus(&lin, &[0.1, 0.5, 2.0]).unwrap() {
            assert!((e.gamma.unwrap() - 0.75).abs() < 1e-12);
        }
        let flat = AveragedDrift::analytic(1, |_, o| o[0] = 3.0).tabulate(&grid).unwrap();
        assert!(fbar_modulus(&flat, &[0.3]).unwrap()[0].gamma == Some(0.0));
        assert!(fbar_modulus(&flat, &[0.01]).unwrap()[0].gamma.is_none());
    }
}
