//! Monte Carlo check of `-eps log E exp(-F/eps) <= 1/2 |h|^2 + E F(X^h)` for
//! deterministic controls `h`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sde::{simulate_controlled_stream, simulate_coupled_stream, PathSample, SimConfig};
use crate::stats::Estimate;
use crate::stream::derive_seed;

/// A bounded functional of a slow path.
pub type PathFunctional = dyn Fn(&PathSample) -> f64 + Sync;

/// Effective sample size below which the left-hand side is flagged.
const MIN_ESS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub half_norm_sq: f64,
    /// `1/2 |h|^2 + E F(X^h)`.
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    pub epsilon: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub lhs_reliable: bool,
    pub effective_sample_size: f64,
    pub candidates: Vec<Candidate>,
    pub best: usize,
    /// `lhs - best - 3 * combined SE`; non-positive when the inequality holds.
    pub slack: f64,
    pub holds: bool,
}

fn evaluate(f: &PathFunctional, p: &PathSample) -> Result<f64> {
    let v = f(p);
    if !v.is_finite() {
        return Err(Error::domain(format!("functional returned {v}")));
    }
    Ok(v)
}

/// Left side from coupled paths (seed `derive_seed(seed, 0)`), candidate `i`
/// from controlled paths (seed `derive_seed(seed, i + 1)`).
pub fn variational_check(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    functional: &PathFunctional,
    controls: &[Control],
    n_paths: usize,
    seed: u64,
) -> Result<VariationalReport> {
    config.validate()?;
    if controls.is_empty() || n_paths < 2 {
        return Err(Error::config("need at least one control and two paths"));
    }
    let eps = config.epsilon;
    let lhs_cfg = SimConfig {
        seed: derive_seed(seed, 0),
        ..*config
    };
    let values = (0..n_paths as u64)
        .into_par_iter()
        .map(|s| evaluate(functional, &simulate_coupled_stream(model, &lhs_cfg, x0, y0, s)?))
        .collect::<Result<Vec<f64>>>()?;

    // shift by the minimum so the largest weight is exactly 1
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = values.iter().map(|v| (-(v - m) / eps).exp()).collect();
    let w = Estimate::from_samples(&weights);
    let lhs = m - eps * w.mean.ln();
    let lhs_se = eps * w.se / w.mean;
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|v| v * v).sum();
    let ess = sum * sum / sum_sq;

    let candidates = controls
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let cfg = SimConfig {
                seed: derive_seed(seed, i as u64 + 1),
                ..*config
            };
            let half = 0.5 * h.norm_sq();
            let samples = (0..n_paths as u64)
                .into_par_iter()
                .map(|s| Ok(half + evaluate(functional, &simulate_controlled_stream(model, &cfg, x0, y0, h, s)?)?))
                .collect::<Result<Vec<f64>>>()?;
            Ok(Candidate {
                index: i,
                half_norm_sq: half,
                estimate: Estimate::from_samples(&samples),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = candidates
        .iter()
        .min_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
        .expect("non-empty")
        .index;
    let b = &candidates[best].estimate;
    let slack = lhs - b.mean - 3.0 * (lhs_se * lhs_se + b.se * b.se).sqrt();
    Ok(VariationalReport {
        epsilon: eps,
        lhs,
        lhs_se,
        lhs_reliable: ess >= MIN_ESS.min(n_paths as f64),
        effective_sample_size: ess,
        candidates,
        best,
        slack,
        holds: slack <= 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    #[test]
    fn constant_functionals_are_exact() {
        let m = ModelSpec::from_builtin(BuiltinModel::Lin1d {
            a1: 0.0,
            b1: 0.0,
            s1: 1.0,
            s2: 1.0,
        })
        .unwrap();
        let cfg = SimConfig::with_default_delta(0.5, 1.0, 20, 1);
        let zero = Control::zero(1.0, 4, 1, 1).unwrap();
        for c in [0.0, 0.37] {
            let f = move |_: &PathSample| c;
            let r = variational_check(&m, &cfg, &[0.0], &[0.0], &f, std::slice::from_ref(&zero), 50, 2).unwrap();
            assert_eq!(r.lhs, c);
            assert_eq!(r.lhs_se, 0.0);
            assert!((r.candidates[0].estimate.mean - c).abs() < 1e-15);
            assert!(r.holds);
        }
    }
}
