//! Rare-event probabilities of the slow variable, naive or with an
//! exponential tilt along a control, and sweeps over a ladder of `epsilon`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sde::{simulate_controlled_with_noise, NoisePath, SimConfig};
use crate::stats::Estimate;
use crate::stream::derive_seed;

pub const MIN_PATHS: usize = 100;
/// Probabilities below this are reported as unestimable.
pub const UNESTIMABLE_BELOW: f64 = 1e-9;

/// A predicate on the terminal slow state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Everything,
    /// `normal · X_T >= offset`.
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    /// `lo <= X_T[component] <= hi`.
    Interval {
        component: usize,
        lo: f64,
        hi: f64,
    },
}

impl Event {
    /// `{X_T >= b}` in one dimension.
    pub fn at_least(b: f64) -> Event {
        Event::Halfspace {
            normal: vec![1.0],
            offset: b,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Event::Everything => true,
            Event::Halfspace { normal, offset } => normal.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() >= *offset,
            Event::Interval { component, lo, hi } => x.get(*component).is_some_and(|v| *lo <= *v && *v <= *hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Tilted,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Tilted => "tilted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub p_hat: f64,
    pub se: f64,
    pub n_paths: usize,
    pub method: Method,
    pub hits: usize,
    /// `(sum w)^2 / sum w^2` over hitting paths; `n_paths`-scale for naive.
    pub effective_sample_size: f64,
    /// Mean likelihood ratio over all paths (1 in expectation).
    pub mean_weight: f64,
    pub warning: Option<String>,
}

/// Log of `dP/dQ` for the tilted chain driven by `noise`: the slow (and fast)
/// increments are Brownian under `Q`, and the control shifts them by
/// `hdot / sqrt(eps)` per unit time.
fn log_likelihood_ratio(control: &Control, config: &SimConfig, noise: &NoisePath) -> f64 {
    let eps = config.epsilon;
    let n = config.n_steps;
    let per = n / control.intervals();
    let mut fast = vec![0.0; noise.dim_fast];
    let mut lin = 0.0;
    for k in 0..n {
        let i = k / per;
        lin += control
            .hdot1_on(i)
            .iter()
            .zip(noise.slow_increment(k))
            .map(|(u, w)| u * w)
            .sum::<f64>();
        let u2 = control.hdot2_on(i);
        if u2.iter().any(|v| *v != 0.0) {
            noise.fast_step_sum(k, &mut fast);
            lin += u2.iter().zip(&fast).map(|(u, w)| u * w).sum::<f64>();
        }
    }
    -lin / eps.sqrt() - control.norm_sq() / (2.0 * eps)
}

/// `P(X_T in event)`; path `i` uses stream `i` of `config.seed`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_event(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    event: &Event,
    n_paths: usize,
    method: Method,
    tilt: Option<&Control>,
) -> Result<EventEstimate> {
    config.validate()?;
    if n_paths < MIN_PATHS {
        return Err(Error::config(format!("need at least {MIN_PATHS} paths, got {n_paths}")));
    }
    let zero;
    let control = match (method, tilt) {
        (Method::Tilted, Some(c)) => c,
        (Method::Tilted, None) => return Err(Error::config("tilted sampling needs a tilt control")),
        (Method::Naive, _) => {
            zero = Control::zero(config.t_end, 1, model.dim_slow(), model.dim_fast())?;
            &zero
        }
    };
    let (ds, df) = (model.dim_slow(), model.dim_fast());
    let samples = (0..n_paths as u64)
        .into_par_iter()
        .map(|s| {
            let noise = NoisePath::generate(config, ds, df, s);
            let path = simulate_controlled_with_noise(model, config, x0, y0, control, &noise)?;
            let w = match method {
                Method::Naive => 1.0,
                Method::Tilted => log_likelihood_ratio(control, config, &noise).exp(),
            };
            Ok((event.contains(path.terminal_slow()), w))
        })
        .collect::<Result<Vec<(bool, f64)>>>()?;

    let values: Vec<f64> = samples.iter().map(|(hit, w)| if *hit { *w } else { 0.0 }).collect();
    let est = Estimate::from_samples(&values);
    let hits = samples.iter().filter(|(h, _)| *h).count();
    let sum: f64 = values.iter().sum();
    let sum_sq: f64 = values.iter().map(|v| v * v).sum();
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    let mean_weight = samples.iter().map(|(_, w)| *w).sum::<f64>() / n_paths as f64;
    let warning = (method == Method::Tilted && ess < 1.0)
        .then(|| format!("tilted sampling has effective sample size {ess:.3} ({hits} hits)"));
    Ok(EventEstimate {
        p_hat: est.mean,
        se: est.se,
        n_paths,
        method,
        hits,
        effective_sample_size: ess,
        mean_weight,
        warning,
    })
}

/// Fast-scale rule `epsilon -> delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DeltaRule {
    /// `delta = factor * eps^power` (default `eps^2`).
    Power { factor: f64, power: f64 },
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule::Power {
            factor: 1.0,
            power: 2.0,
        }
    }
}

impl DeltaRule {
    pub fn delta(&self, eps: f64) -> f64 {
        match *self {
            DeltaRule::Power { factor, power } => factor * eps.powf(power),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub epsilon: f64,
    pub delta: f64,
    pub estimate: EventEstimate,
    /// `eps log p_hat`; `None` when unestimable.
    pub eps_log_p: Option<f64>,
    /// `eps * se / p_hat`, the delta-method band of `eps log p_hat`.
    pub eps_log_p_se: Option<f64>,
    /// `eps log p_hat + I_ref`.
    pub gap: Option<f64>,
    pub unestimable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// Steps where `|gap|` grew by more than one band.
    pub violations: usize,
    pub non_increasing: bool,
    pub final_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdpSweep {
    pub event: Event,
    pub i_ref: f64,
    pub entries: Vec<SweepEntry>,
    /// Absent for ladders shorter than two or with unestimable entries.
    pub trend: Option<Trend>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub base: SimConfig,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub event: Event,
    pub epsilons: Vec<f64>,
    pub delta_rule: DeltaRule,
    pub n_paths: usize,
    pub i_ref: f64,
    pub method: Method,
    pub tilt: Option<&'a Control>,
}

/// Entry `k` uses seed `derive_seed(base.seed, k)`. A method with zero hits
/// falls back to the other one when possible before declaring the entry
/// unestimable.
pub fn ldp_sweep(model: &ModelSpec, spec: &SweepSpec<'_>) -> Result<LdpSweep> {
    let eps = &spec.epsilons;
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) || eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::config("epsilon ladder must be positive and strictly decreasing"));
    }
    let mut entries = Vec::with_capacity(eps.len());
    for (k, &e) in eps.iter().enumerate() {
        let delta = spec.delta_rule.delta(e);
        let config = SimConfig {
            epsilon: e,
            delta,
            seed: derive_seed(spec.base.seed, k as u64),
            ..spec.base
        };
        let run = |m: Method| {
            estimate_event(
                model,
                &config,
                &spec.x0,
                &spec.y0,
                &spec.event,
                spec.n_paths,
                m,
                spec.tilt,
            )
        };
        let mut estimate = run(spec.method)?;
        if estimate.hits == 0 {
            let other = match spec.method {
                Method::Naive if spec.tilt.is_some() => Some(Method::Tilted),
                Method::Tilted => Some(Method::Naive),
                Method::Naive => None,
            };
            if let Some(m) = other {
                let alt = run(m)?;
                if alt.hits > 0 {
                    estimate = alt;
                }
            }
        }
        let unestimable = estimate.hits == 0 || estimate.p_hat < UNESTIMABLE_BELOW;
        let (eps_log_p, eps_log_p_se, gap) = if unestimable {
            (None, None, None)
        } else {
            let l = e * estimate.p_hat.ln();
            (Some(l), Some(e * estimate.se / estimate.p_hat), Some(l + spec.i_ref))
        };
        entries.push(SweepEntry {
            epsilon: e,
            delta,
            estimate,
            eps_log_p,
            eps_log_p_se,
            gap,
            unestimable,
        });
    }
    let trend = trend(&entries);
    Ok(LdpSweep {
        event: spec.event.clone(),
        i_ref: spec.i_ref,
        entries,
        trend,
    })
}

fn trend(entries: &[SweepEntry]) -> Option<Trend> {
    if entries.len() < 2 || entries.iter().any(|e| e.unestimable) {
        return None;
    }
    let gaps: Vec<(f64, f64)> = entries
        .iter()
        .map(|e| (e.gap.expect("estimable").abs(), e.eps_log_p_se.expect("estimable")))
        .collect();
    let violations = gaps.windows(2).filter(|w| w[1].0 > w[0].0 + w[1].1).count();
    Some(Trend {
        violations,
        non_increasing: violations == 0,
        final_gap: gaps.last().expect("non-empty").0,
    })
}

impl LdpSweep {
    /// Columns `epsilon, p_hat, se, eps_log_p, gap, method, n_paths`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epsilon", "p_hat", "se", "eps_log_p", "gap", "method", "n_paths"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for e in &self.entries {
            out.write_record([
                e.epsilon.to_string(),
                e.estimate.p_hat.to_string(),
                e.estimate.se.to_string(),
                opt(e.eps_log_p),
                opt(e.gap),
                e.estimate.method.as_str().to_string(),
                e.estimate.n_paths.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "i_ref": self.i_ref,
            "event": self.event,
            "epsilons": self.entries.iter().map(|e| e.epsilon).collect::<Vec<_>>(),
            "gaps": self.entries.iter().map(|e| e.gap).collect::<Vec<_>>(),
            "unestimable": self.entries.iter().filter(|e| e.unestimable).map(|e| e.epsilon).collect::<Vec<_>>(),
            "trend": self.trend,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    fn decoupled() -> ModelSpec {
        ModelSpec::from_builtin(BuiltinModel::Lin1d {
            a1: 0.0,
            b1: 0.0,
            s1: 1.0,
            s2: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn certain_event() {
        let c = SimConfig::with_default_delta(0.5, 1.0, 10, 1);
        let e = estimate_event(
            &decoupled(),
            &c,
            &[0.0],
            &[0.0],
            &Event::Everything,
            100,
            Method::Naive,
            None,
        )
        .unwrap();
        assert_eq!(e.p_hat, 1.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn input_validation() {
        let c = SimConfig::with_default_delta(0.5, 1.0, 10, 1);
        let m = decoupled();
        assert!(matches!(
            estimate_event(&m, &c, &[0.0], &[0.0], &Event::Everything, 99, Method::Naive, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            estimate_event(&m, &c, &[0.0], &[0.0], &Event::Everything, 100, Method::Tilted, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_is_exact_girsanov_density() {
        // decoupled linear model: X_T = u T + sqrt(eps) W_T; the weight must
        // equal phi(X_T / sqrt(eps)) / phi((X_T - u) / sqrt(eps)) ratio form.
        let c = SimConfig::with_default_delta(0.3, 1.0, 16, 4);
        let u = Control::constant_slow(1.0, 4, &[0.8], 1).unwrap();
        let m = decoupled();
        for s in 0..5 {
            let noise = NoisePath::generate(&c, 1, 1, s);
            let p = simulate_controlled_with_noise(&m, &c, &[0.0], &[0.0], &u, &noise).unwrap();
            let x = p.terminal_slow()[0];
            let expect = (-(x * x) / (2.0 * 0.3) + ((x - 0.8) * (x - 0.8)) / (2.0 * 0.3)).exp();
            let got = log_likelihood_ratio(&u, &c, &noise).exp();
            assert!((got - expect).abs() < 1e-12 * expect.max(1.0), "{got} vs {expect}");
        }
    }

    #[test]
    fn short_ladder_has_no_trend() {
        let spec = SweepSpec {
            base: SimConfig::with_default_delta(0.5, 1.0, 10, 3),
            x0: vec![0.0],
            y0: vec![0.0],
            event: Event::at_least(-10.0),
            epsilons: vec![0.5],
            delta_rule: DeltaRule::default(),
            n_paths: 100,
            i_ref: 0.0,
            method: Method::Naive,
            tilt: None,
        };
        let s = ldp_sweep(&decoupled(), &spec).unwrap();
        assert!(s.trend.is_none());
        assert_eq!(s.entries[0].eps_log_p, Some(0.0));
        let bad = SweepSpec {
            epsilons: vec![0.1, 0.2],
            ..spec
        };
        assert!(matches!(ldp_sweep(&decoupled(), &bad), Err(Error::Config(_))));
    }
}
