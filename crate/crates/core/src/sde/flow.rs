use rayon::prelude::*;

use super::{check_control, check_state, integrate, Mode, NoisePath, PathKind, SimConfig};
use crate::control::Control;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::stats::Estimate;

const BLEND_LO: f64 = 0.25;
const BLEND_HI: f64 = 2.0;

/// Smooth non-decreasing truncation: `x` below 1/4, `1` from 2 on, and a
/// quintic Hermite blend in between matching value, slope and curvature at
/// both ends. On the blend `f'(s) = (1-s)^2 (1.75 + 3.5 s - 3.75 s^2) / 1.75`
/// with `s` the rescaled position, so `0 <= f' <= 1`.
pub fn truncation_map(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!("truncation map needs x >= 0, got {x}")));
    }
    Ok(if x < BLEND_LO {
        x
    } else if x >= BLEND_HI {
        1.0
    } else {
        let len = BLEND_HI - BLEND_LO;
        let s = (x - BLEND_LO) / len;
        let (s2, s3) = (s * s, s * s * s);
        let h_end = s3 * (10.0 - 15.0 * s + 6.0 * s2);
        let h_slope = s - 6.0 * s3 + 8.0 * s2 * s2 - 3.0 * s2 * s3;
        BLEND_LO + (1.0 - BLEND_LO) * h_end + len * h_slope
    })
}

/// Closed-form derivative of [`truncation_map`].
pub fn truncation_map_derivative(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!("truncation map needs x >= 0, got {x}")));
    }
    Ok(if x < BLEND_LO {
        1.0
    } else if x >= BLEND_HI {
        0.0
    } else {
        let s = (x - BLEND_LO) / (BLEND_HI - BLEND_LO);
        (1.0 - s).powi(2) * (1.75 + 3.5 * s - 3.75 * s * s) / 1.75
    })
}

/// Terminal slow states of a family of initial conditions driven by shared
/// noise; `terminal[(path * n_x0 + i) * dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub x0_grid: Vec<Vec<f64>>,
    pub n_paths: usize,
    pub dim_slow: usize,
    pub t_end: f64,
    terminal: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMoment {
    pub i: usize,
    pub j: usize,
    pub separation: f64,
    pub estimate: Estimate,
}

impl FlowField {
    pub fn terminal(&self, path: usize, i: usize) -> &[f64] {
        let base = (path * self.x0_grid.len() + i) * self.dim_slow;
        &self.terminal[base..base + self.dim_slow]
    }

    /// Monte Carlo estimate of `E f(|X_T(x_i) - X_T(x_j)|)^p`.
    pub fn pair_moment(&self, i: usize, j: usize, p: f64) -> Result<Estimate> {
        let n = self.x0_grid.len();
        if i >= n || j >= n {
            return Err(Error::config(format!("pair ({i}, {j}) outside a grid of {n} points")));
        }
        let samples = (0..self.n_paths)
            .map(|k| {
                let d = dist(self.terminal(k, i), self.terminal(k, j));
                truncation_map(d).map(|f| f.powf(p))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Estimate::from_samples(&samples))
    }

    /// All pairs `i < j`.
    pub fn moments(&self, p: f64) -> Result<Vec<PairMoment>> {
        let n = self.x0_grid.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                out.push(PairMoment {
                    i,
                    j,
                    separation: dist(&self.x0_grid[i], &self.x0_grid[j]),
                    estimate: self.pair_moment(i, j, p)?,
                });
            }
        }
        Ok(out)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Uncontrolled flow; see [`simulate_flow_controlled`].
pub fn simulate_flow(
    model: &ModelSpec,
    config: &SimConfig,
    x0_grid: &[Vec<f64>],
    y0: &[f64],
    n_paths: usize,
) -> Result<FlowField> {
    let zero = Control::zero(config.t_end, 1, model.dim_slow(), model.dim_fast())?;
    simulate_flow_controlled(model, config, x0_grid, y0, n_paths, &zero)
}

/// For each path (stream = path index) every initial condition is driven by
/// the same noise realisation.
pub fn simulate_flow_controlled(
    model: &ModelSpec,
    config: &SimConfig,
    x0_grid: &[Vec<f64>],
    y0: &[f64],
    n_paths: usize,
    control: &Control,
) -> Result<FlowField> {
    config.validate()?;
    if x0_grid.is_empty() || n_paths == 0 {
        return Err(Error::config("flow needs a non-empty grid and at least one path"));
    }
    let (ds, df) = (model.dim_slow(), model.dim_fast());
    for x in x0_grid {
        if x.len() != ds {
            return Err(Error::config("initial condition has wrong dimension"));
        }
        check_state(x, "initial condition")?;
    }
    if y0.len() != df {
        return Err(Error::config("fast initial state has wrong dimension"));
    }
    check_state(y0, "fast initial state")?;
    check_control(config, model, control)?;

    let per_path = (0..n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let noise = NoisePath::generate(config, ds, df, stream);
            let mut out = Vec::with_capacity(x0_grid.len() * ds);
            for x0 in x0_grid {
                let p = integrate(
                    model,
                    config,
                    x0,
                    y0,
                    Some(control),
                    &noise,
                    Mode::Full,
                    PathKind::Controlled,
                )?;
                out.extend_from_slice(p.terminal_slow());
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    Ok(FlowField {
        x0_grid: x0_grid.to_vec(),
        n_paths,
        dim_slow: ds,
        t_end: config.t_end,
        terminal: per_path.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    #[test]
    fn truncation_examples() {
        assert_eq!(truncation_map(0.1).unwrap(), 0.1);
        assert_eq!(truncation_map(3.0).unwrap(), 1.0);
        assert!(matches!(truncation_map(-1.0), Err(Error::Domain(_))));
        assert!((truncation_map(BLEND_LO).unwrap() - BLEND_LO).abs() < 1e-15);
        assert!((truncation_map(BLEND_HI - 1e-12).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn truncation_slope_at_most_one() {
        let n = 10_000;
        let h = 3.0 / n as f64;
        let mut prev = truncation_map(0.0).unwrap();
        let mut max_fd: f64 = 0.0;
        for k in 1..=n {
            let x = k as f64 * h;
            let v = truncation_map(x).unwrap();
            max_fd = max_fd.max((v - prev) / h);
            assert!(v >= prev);
            prev = v;
            let d = truncation_map_derivative(x).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&d));
        }
        assert!(max_fd <= 1.0 + 1e-9, "{max_fd}");
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for x in [0.3, 0.7, 1.1, 1.6, 1.95] {
            let h = 1e-6;
            let fd = (truncation_map(x + h).unwrap() - truncation_map(x - h).unwrap()) / (2.0 * h);
            assert!((fd - truncation_map_derivative(x).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_initial_data_give_zero_moments() {
        let m = ModelSpec::from_builtin(BuiltinModel::NonLip1d {
            s1: 1.0,
            s2: 1.0,
            cap10: 10.0,
        })
        .unwrap();
        let c = SimConfig::with_default_delta(0.3, 0.5, 50, 4);
        let f = simulate_flow(&m, &c, &[vec![0.2], vec![0.2]], &[0.0], 8).unwrap();
        let e = f.pair_moment(0, 1, 4.0).unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn linear_noise_off_flow_is_exponential() {
        // y starts on neither x; a1 + b1 = c. Differences obey the linear
        // Euler recursion, checked against e^{cT} to O(h).
        let m = ModelSpec::from_builtin(BuiltinModel::Lin1d {
            a1: 0.5,
            b1: 0.0,
            s1: 0.0,
            s2: 0.0,
        })
        .unwrap();
        let c = SimConfig::with_default_delta(0.1, 1.0, 2000, 1);
        let f = simulate_flow(&m, &c, &[vec![0.0], vec![0.1]], &[0.0], 2).unwrap();
        let d = f.terminal(0, 1)[0] - f.terminal(0, 0)[0];
        assert!((d - 0.1 * 0.5f64.exp()).abs() < 1e-4);
    }
}
