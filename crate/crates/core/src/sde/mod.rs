//! Euler–Maruyama engines for the coupled, frozen, controlled and auxiliary
//! systems, plus a common-noise flow harness.
//!
//! The slow variable advances with step `h = T / n_steps`. Within each slow
//! step the fast variable is sub-stepped `ceil(10 h / delta)` times with the
//! slow state held at its value at the start of the step.

mod flow;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::stream::{fill_normal, path_rng};

pub use flow::{
    simulate_flow, simulate_flow_controlled, truncation_map, truncation_map_derivative, FlowField, PairMoment,
};

/// States with any component above this magnitude count as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub t_end: f64,
    pub n_steps: usize,
    /// Block length used by the auxiliary process.
    pub khasminskii_delta: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Default scale profile `delta = epsilon^2`, with the block length set
    /// to one slow step.
    pub fn with_default_delta(epsilon: f64, t_end: f64, n_steps: usize, seed: u64) -> SimConfig {
        SimConfig {
            epsilon,
            delta: epsilon * epsilon,
            t_end,
            n_steps,
            khasminskii_delta: t_end / n_steps.max(1) as f64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.epsilon) || !pos(self.delta) {
            return Err(Error::config(format!(
                "scales must be positive (epsilon = {}, delta = {})",
                self.epsilon, self.delta
            )));
        }
        if self.delta >= self.epsilon {
            return Err(Error::config(format!(
                "delta = {} must be smaller than epsilon = {}",
                self.delta, self.epsilon
            )));
        }
        if !pos(self.t_end) {
            return Err(Error::config("horizon must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if !pos(self.khasminskii_delta) {
            return Err(Error::config("block length must be positive"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Fast sub-steps per slow step.
    pub fn fast_substeps(&self) -> usize {
        ((10.0 * self.step() / self.delta).ceil() as usize).max(1)
    }

    /// Stored time grid; the last node is exactly `T`.
    pub fn times(&self) -> Vec<f64> {
        grid(self.t_end, self.n_steps)
    }
}

fn grid(t_end: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| if k == n { t_end } else { t_end * k as f64 / n as f64 })
        .collect()
}

/// Brownian increments for one path. Slow increments have variance `h`,
/// fast increments variance `h / m` with `m` fast sub-steps per slow step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub seed: u64,
    pub stream: u64,
    pub n_steps: usize,
    pub substeps: usize,
    pub dim_slow: usize,
    pub dim_fast: usize,
    slow: Vec<f64>,
    fast: Vec<f64>,
}

impl NoisePath {
    /// Draws per slow step: `dim_slow` slow normals, then `substeps × dim_fast`
    /// fast normals.
    pub fn generate(config: &SimConfig, dim_slow: usize, dim_fast: usize, stream: u64) -> NoisePath {
        let m = config.fast_substeps();
        let h = config.step();
        let n = config.n_steps;
        let mut rng = path_rng(config.seed, stream);
        let mut slow = vec![0.0; n * dim_slow];
        let mut fast = vec![0.0; n * m * dim_fast];
        let (sh, sf) = (h.sqrt(), (h / m as f64).sqrt());
        for k in 0..n {
            fill_normal(&mut rng, &mut slow[k * dim_slow..(k + 1) * dim_slow], sh);
            fill_normal(&mut rng, &mut fast[k * m * dim_fast..(k + 1) * m * dim_fast], sf);
        }
        NoisePath {
            seed: config.seed,
            stream,
            n_steps: n,
            substeps: m,
            dim_slow,
            dim_fast,
            slow,
            fast,
        }
    }

    pub fn slow_increment(&self, k: usize) -> &[f64] {
        &self.slow[k * self.dim_slow..(k + 1) * self.dim_slow]
    }

    /// Fast increments of sub-step `j` inside slow step `k`.
    pub fn fast_increment(&self, k: usize, j: usize) -> &[f64] {
        let i = k * self.substeps + j;
        &self.fast[i * self.dim_fast..(i + 1) * self.dim_fast]
    }

    pub fn slow_increments(&self) -> &[f64] {
        &self.slow
    }

    pub fn fast_increments(&self) -> &[f64] {
        &self.fast
    }

    /// Sum of fast increments over slow step `k` (the `h`-increment of `W^2`).
    pub fn fast_step_sum(&self, k: usize, out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.substeps {
            for (o, v) in out.iter_mut().zip(self.fast_increment(k, j)) {
                *o += v;
            }
        }
    }

    fn check(&self, config: &SimConfig, ds: usize, df: usize) -> Result<()> {
        if self.n_steps != config.n_steps
            || self.substeps != config.fast_substeps()
            || self.dim_slow != ds
            || self.dim_fast != df
        {
            return Err(Error::config("noise path does not match the simulation grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Coupled,
    Frozen,
    Controlled,
    Auxiliary,
}

impl PathKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PathKind::Coupled => "coupled",
            PathKind::Frozen => "frozen",
            PathKind::Controlled => "controlled",
            PathKind::Auxiliary => "auxiliary",
        }
    }
}

/// What produced a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Sim {
        config: SimConfig,
        stream: u64,
    },
    Frozen {
        x: Vec<f64>,
        t_end: f64,
        n_steps: usize,
        seed: u64,
        stream: u64,
    },
}

/// A simulated trajectory; `slow` and `fast` are row-major `(n+1) × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
    pub dim_slow: usize,
    pub dim_fast: usize,
    pub kind: PathKind,
    pub provenance: Provenance,
}

impl PathSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn slow_at(&self, k: usize) -> &[f64] {
        &self.slow[k * self.dim_slow..(k + 1) * self.dim_slow]
    }

    pub fn fast_at(&self, k: usize) -> &[f64] {
        &self.fast[k * self.dim_fast..(k + 1) * self.dim_fast]
    }

    pub fn terminal_slow(&self) -> &[f64] {
        self.slow_at(self.len() - 1)
    }

    pub fn config(&self) -> Option<&SimConfig> {
        match &self.provenance {
            Provenance::Sim { config, .. } => Some(config),
            Provenance::Frozen { .. } => None,
        }
    }

    /// Columns `t, x_0.., y_0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim_slow).map(|i| format!("x_{i}")));
        header.extend((0..self.dim_fast).map(|i| format!("y_{i}")));
        out.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.slow_at(k).iter().map(|v| v.to_string()));
            row.extend(self.fast_at(k).iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_state(v: &[f64], what: &str) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::domain(format!("{what} has non-finite component {bad}")));
    }
    Ok(())
}

fn check_dims(model: &ModelSpec, x0: &[f64], y0: &[f64]) -> Result<()> {
    if x0.len() != model.dim_slow() || y0.len() != model.dim_fast() {
        return Err(Error::config(format!(
            "initial state dimensions ({}, {}) do not match model ({}, {})",
            x0.len(),
            y0.len(),
            model.dim_slow(),
            model.dim_fast()
        )));
    }
    check_state(x0, "slow initial state")?;
    check_state(y0, "fast initial state")
}

fn check_control(config: &SimConfig, model: &ModelSpec, control: &Control) -> Result<usize> {
    if control.dim_slow() != model.dim_slow() || control.dim_fast() != model.dim_fast() {
        return Err(Error::config("control dimensions do not match model"));
    }
    if (control.t_end() - config.t_end).abs() > 1e-12 * config.t_end {
        return Err(Error::config(format!(
            "control horizon {} differs from simulation horizon {}",
            control.t_end(),
            config.t_end
        )));
    }
    if !config.n_steps.is_multiple_of(control.intervals()) {
        return Err(Error::config(format!(
            "control grid ({} intervals) is not a coarsening of the slow grid ({} steps)",
            control.intervals(),
            config.n_steps
        )));
    }
    Ok(config.n_steps / control.intervals())
}

fn blown_up(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite() || x.abs() > BLOW_UP_THRESHOLD)
}

/// `out += a * m v` for a row-major square matrix `m`.
fn mat_vec_add(m: &[f64], v: &[f64], a: f64, out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * d..(i + 1) * d];
        *o += a * row.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    }
}

/// Which of the slow-fast systems the engine integrates.
enum Mode<'a> {
    /// Coupled or controlled: full noise, optional control.
    Full,
    /// Auxiliary: fast coefficients and slow drift see the block-frozen
    /// controlled slow state; no slow noise and no fast control.
    Auxiliary { reference: &'a PathSample, block: usize },
}

struct Workspace {
    f: Vec<f64>,
    s1: Vec<f64>,
    g: Vec<f64>,
    s2: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn integrate(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: Option<&Control>,
    noise: &NoisePath,
    mode: Mode<'_>,
    kind: PathKind,
) -> Result<PathSample> {
    let (ds, df) = (model.dim_slow(), model.dim_fast());
    let n = config.n_steps;
    let m = noise.substeps;
    let h = config.step();
    let hf = h / m as f64;
    let (eps, delta) = (config.epsilon, config.delta);
    let per_interval = match control {
        Some(c) => check_control(config, model, c)?,
        None => n,
    };

    let mut slow = Vec::with_capacity((n + 1) * ds);
    let mut fast = Vec::with_capacity((n + 1) * df);
    slow.extend_from_slice(x0);
    fast.extend_from_slice(y0);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut x_next = vec![0.0; ds];
    let mut y_next = vec![0.0; df];
    let mut ws = Workspace {
        f: vec![0.0; ds],
        s1: vec![0.0; ds * ds],
        g: vec![0.0; df],
        s2: vec![0.0; df * df],
    };
    let zero_slow = vec![0.0; ds];
    let zero_fast = vec![0.0; df];

    for k in 0..n {
        let (u1, u2) = match control {
            Some(c) => (c.hdot1_on(k / per_interval), c.hdot2_on(k / per_interval)),
            None => (&zero_slow[..], &zero_fast[..]),
        };
        // Slow state seen by the fast coefficients (and the slow drift for
        // the auxiliary system).
        let anchor: &[f64] = match &mode {
            Mode::Full => &x,
            Mode::Auxiliary { reference, block } => reference.slow_at((k / block) * block),
        };

        model.f1(anchor, &y, &mut ws.f);
        model.sigma1(&x, &mut ws.s1);
        x_next.copy_from_slice(&x);
        for (xn, f) in x_next.iter_mut().zip(&ws.f) {
            *xn += f * h;
        }
        mat_vec_add(&ws.s1, u1, h, &mut x_next);
        if let Mode::Full = mode {
            mat_vec_add(&ws.s1, noise.slow_increment(k), eps.sqrt(), &mut x_next);
        }

        let fast_control = matches!(mode, Mode::Full) && u2.iter().any(|v| *v != 0.0);
        for j in 0..m {
            model.f2(anchor, &y, &mut ws.g);
            model.sigma2(anchor, &y, &mut ws.s2);
            y_next.copy_from_slice(&y);
            for (yn, g) in y_next.iter_mut().zip(&ws.g) {
                *yn += g * hf / delta;
            }
            if fast_control {
                mat_vec_add(&ws.s2, u2, hf / (delta * eps).sqrt(), &mut y_next);
            }
            mat_vec_add(&ws.s2, noise.fast_increment(k, j), 1.0 / delta.sqrt(), &mut y_next);
            std::mem::swap(&mut y, &mut y_next);
            if blown_up(&y) {
                return Err(Error::BlowUp {
                    kind: kind.as_str(),
                    last_finite_index: k,
                    threshold: BLOW_UP_THRESHOLD,
                });
            }
        }
        std::mem::swap(&mut x, &mut x_next);
        if blown_up(&x) {
            return Err(Error::BlowUp {
                kind: kind.as_str(),
                last_finite_index: k,
                threshold: BLOW_UP_THRESHOLD,
            });
        }
        slow.extend_from_slice(&x);
        fast.extend_from_slice(&y);
    }

    Ok(PathSample {
        times: config.times(),
        slow,
        fast,
        dim_slow: ds,
        dim_fast: df,
        kind,
        provenance: Provenance::Sim {
            config: *config,
            stream: noise.stream,
        },
    })
}

/// Coupled slow-fast system on stream 0.
pub fn simulate_coupled(model: &ModelSpec, config: &SimConfig, x0: &[f64], y0: &[f64]) -> Result<PathSample> {
    simulate_coupled_stream(model, config, x0, y0, 0)
}

pub fn simulate_coupled_stream(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    stream: u64,
) -> Result<PathSample> {
    config.validate()?;
    check_dims(model, x0, y0)?;
    let noise = NoisePath::generate(config, model.dim_slow(), model.dim_fast(), stream);
    integrate(model, config, x0, y0, None, &noise, Mode::Full, PathKind::Coupled)
}

pub fn simulate_coupled_with_noise(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    noise: &NoisePath,
) -> Result<PathSample> {
    config.validate()?;
    check_dims(model, x0, y0)?;
    noise.check(config, model.dim_slow(), model.dim_fast())?;
    integrate(model, config, x0, y0, None, noise, Mode::Full, PathKind::Coupled)
}

/// Controlled system: slow drift gains `sigma1 hdot1`, fast drift gains
/// `sigma2 hdot2 / sqrt(delta epsilon)`.
pub fn simulate_controlled(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: &Control,
) -> Result<PathSample> {
    simulate_controlled_stream(model, config, x0, y0, control, 0)
}

pub fn simulate_controlled_stream(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: &Control,
    stream: u64,
) -> Result<PathSample> {
    config.validate()?;
    check_dims(model, x0, y0)?;
    check_control(config, model, control)?;
    let noise = NoisePath::generate(config, model.dim_slow(), model.dim_fast(), stream);
    integrate(
        model,
        config,
        x0,
        y0,
        Some(control),
        &noise,
        Mode::Full,
        PathKind::Controlled,
    )
}

pub fn simulate_controlled_with_noise(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: &Control,
    noise: &NoisePath,
) -> Result<PathSample> {
    config.validate()?;
    check_dims(model, x0, y0)?;
    noise.check(config, model.dim_slow(), model.dim_fast())?;
    integrate(
        model,
        config,
        x0,
        y0,
        Some(control),
        noise,
        Mode::Full,
        PathKind::Controlled,
    )
}

/// Auxiliary process driven by the same fast noise as `reference`, a
/// controlled path on the same grid. Fast coefficients and the slow drift are
/// evaluated at the reference slow state at the start of each block of
/// length `config.khasminskii_delta`.
pub fn simulate_auxiliary_with_noise(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: &Control,
    reference: &PathSample,
    noise: &NoisePath,
) -> Result<PathSample> {
    config.validate()?;
    check_dims(model, x0, y0)?;
    noise.check(config, model.dim_slow(), model.dim_fast())?;
    let block = block_steps(config)?;
    if reference.len() != config.n_steps + 1 || reference.dim_slow != model.dim_slow() {
        return Err(Error::config("reference slow path is not on the simulation grid"));
    }
    integrate(
        model,
        config,
        x0,
        y0,
        Some(control),
        noise,
        Mode::Auxiliary { reference, block },
        PathKind::Auxiliary,
    )
}

/// Convenience wrapper regenerating the stream-0 noise used by `reference`.
pub fn simulate_auxiliary(
    model: &ModelSpec,
    config: &SimConfig,
    x0: &[f64],
    y0: &[f64],
    control: &Control,
    reference: &PathSample,
) -> Result<PathSample> {
    let stream = match &reference.provenance {
        Provenance::Sim { stream, .. } => *stream,
        Provenance::Frozen { .. } => 0,
    };
    let noise = NoisePath::generate(config, model.dim_slow(), model.dim_fast(), stream);
    simulate_auxiliary_with_noise(model, config, x0, y0, control, reference, &noise)
}

/// Number of slow steps per block; the block length must be a multiple of
/// the slow step and no longer than the horizon.
pub fn block_steps(config: &SimConfig) -> Result<usize> {
    let d = config.khasminskii_delta;
    if d > config.t_end * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "block length {d} exceeds the horizon {}",
            config.t_end
        )));
    }
    let ratio = d / config.step();
    let q = ratio.round();
    if q < 1.0 || (ratio - q).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::config(format!(
            "block length {d} is not a multiple of the slow step {}",
            config.step()
        )));
    }
    Ok(q as usize)
}

/// Frozen fast process at unit time scale, stream 0.
pub fn simulate_frozen(
    model: &ModelSpec,
    x: &[f64],
    y0: &[f64],
    t_end: f64,
    n_steps: usize,
    seed: u64,
) -> Result<PathSample> {
    simulate_frozen_stream(model, x, y0, t_end, n_steps, seed, 0)
}

pub fn simulate_frozen_stream(
    model: &ModelSpec,
    x: &[f64],
    y0: &[f64],
    t_end: f64,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<PathSample> {
    if !(t_end > 0.0 && t_end.is_finite()) || n_steps == 0 {
        return Err(Error::config(
            "frozen run needs a positive horizon and at least one step",
        ));
    }
    check_dims(model, x, y0)?;
    let df = model.dim_fast();
    let h = t_end / n_steps as f64;
    let mut rng = path_rng(seed, stream);
    let mut y = y0.to_vec();
    let mut g = vec![0.0; df];
    let mut s2 = vec![0.0; df * df];
    let mut dw = vec![0.0; df];
    let mut fast = Vec::with_capacity((n_steps + 1) * df);
    fast.extend_from_slice(y0);
    for k in 0..n_steps {
        fill_normal(&mut rng, &mut dw, h.sqrt());
        model.f2(x, &y, &mut g);
        model.sigma2(x, &y, &mut s2);
        let mut yn = y.clone();
        for (v, gi) in yn.iter_mut().zip(&g) {
            *v += gi * h;
        }
        mat_vec_add(&s2, &dw, 1.0, &mut yn);
        if blown_up(&yn) {
            return Err(Error::BlowUp {
                kind: PathKind::Frozen.as_str(),
                last_finite_index: k,
                threshold: BLOW_UP_THRESHOLD,
            });
        }
        y = yn;
        fast.extend_from_slice(&y);
    }
    Ok(PathSample {
        times: grid(t_end, n_steps),
        slow: x.iter().copied().cycle().take((n_steps + 1) * x.len()).collect(),
        fast,
        dim_slow: x.len(),
        dim_fast: df,
        kind: PathKind::Frozen,
        provenance: Provenance::Frozen {
            x: x.to_vec(),
            t_end,
            n_steps,
            seed,
            stream,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuiltinModel, ModelSpec};

    fn lin(a1: f64, b1: f64, s1: f64, s2: f64) -> ModelSpec {
        ModelSpec::from_builtin(BuiltinModel::Lin1d { a1, b1, s1, s2 }).unwrap()
    }

    fn cfg(eps: f64, delta: f64, n: usize) -> SimConfig {
        SimConfig {
            epsilon: eps,
            delta,
            t_end: 1.0,
            n_steps: n,
            khasminskii_delta: 1.0 / n as f64,
            seed: 11,
        }
    }

    #[test]
    fn zero_scales_rejected() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let c = cfg(0.0, 0.0, 10);
        assert!(matches!(
            simulate_coupled(&m, &c, &[0.0], &[0.0]),
            Err(Error::Config(_))
        ));
        let c = cfg(0.1, 0.2, 10);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grid_ends_exactly_at_horizon() {
        let c = SimConfig {
            t_end: 0.3,
            ..cfg(0.1, 0.01, 7)
        };
        let t = c.times();
        assert_eq!(t.len(), 8);
        assert_eq!(*t.last().unwrap(), 0.3);
        assert_eq!(t[0], 0.0);
    }

    #[test]
    fn substep_count() {
        assert_eq!(cfg(0.1, 0.01, 100).fast_substeps(), 10);
        assert_eq!(cfg(0.5, 0.25, 100).fast_substeps(), 1);
    }

    #[test]
    fn coupled_is_deterministic_and_starts_at_initial_data() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let c = cfg(0.1, 0.01, 50);
        let a = simulate_coupled(&m, &c, &[0.3], &[-0.2]).unwrap();
        let b = simulate_coupled(&m, &c, &[0.3], &[-0.2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.slow_at(0), &[0.3]);
        assert_eq!(a.fast_at(0), &[-0.2]);
        let other = simulate_coupled_stream(&m, &c, &[0.3], &[-0.2], 1).unwrap();
        assert_ne!(a.slow, other.slow);
    }

    #[test]
    fn noise_off_fast_relaxes_and_slow_stays_put() {
        // f1 = x - y with the fast variable relaxing onto x: X stays at 1.
        let m = lin(1.0, -1.0, 0.0, 0.0);
        let c = cfg(0.1, 1e-3, 200);
        let p = simulate_coupled(&m, &c, &[1.0], &[1.0]).unwrap();
        for k in 0..p.len() {
            assert!((p.slow_at(k)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_control_matches_coupled() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let c = cfg(0.1, 0.01, 40);
        let zero = Control::zero(1.0, 8, 1, 1).unwrap();
        let a = simulate_coupled(&m, &c, &[0.1], &[0.0]).unwrap();
        let b = simulate_controlled(&m, &c, &[0.1], &[0.0], &zero).unwrap();
        assert_eq!(a.slow, b.slow);
        assert_eq!(a.fast, b.fast);
    }

    #[test]
    fn control_drives_slow_linearly() {
        // f1 = 0: X_t = s1 t + sqrt(eps) s1 W_t exactly on the grid.
        let m = lin(0.0, 0.0, 2.0, 1.0);
        let c = cfg(0.01, 1e-3, 100);
        let ctl = Control::constant_slow(1.0, 10, &[1.0], 1).unwrap();
        let noise = NoisePath::generate(&c, 1, 1, 0);
        let p = simulate_controlled_with_noise(&m, &c, &[0.0], &[0.0], &ctl, &noise).unwrap();
        let mut w = 0.0;
        for k in 0..p.len() {
            let expect = 2.0 * p.times[k] + 0.1 * 2.0 * w;
            assert!((p.slow_at(k)[0] - expect).abs() < 1e-12, "k={k}");
            if k < c.n_steps {
                w += noise.slow_increment(k)[0];
            }
        }
    }

    #[test]
    fn incompatible_control_grid_rejected() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let c = cfg(0.1, 0.01, 10);
        let ctl = Control::zero(1.0, 3, 1, 1).unwrap();
        let r = simulate_controlled(&m, &c, &[0.0], &[0.0], &ctl);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn frozen_examples() {
        let m = lin(0.5, -0.5, 1.0, 0.0);
        let eq = simulate_frozen(&m, &[1.0], &[1.0], 1.0, 1000, 3).unwrap();
        assert!(eq.fast.iter().all(|v| *v == 1.0));
        let decay = simulate_frozen(&m, &[0.0], &[1.0], 1.0, 1000, 3).unwrap();
        let y1 = decay.fast_at(1000)[0];
        assert!((y1 - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn frozen_common_noise_contraction_is_exact() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let n = 1000;
        let a = simulate_frozen(&m, &[0.4], &[1.0], 2.0, n, 9).unwrap();
        let b = simulate_frozen(&m, &[0.4], &[-1.0], 2.0, n, 9).unwrap();
        let h: f64 = 2.0 / n as f64;
        for k in [0, 250, 500, 1000] {
            let d = a.fast_at(k)[0] - b.fast_at(k)[0];
            // Euler factor (1-h)^k for the contraction e^{-t}.
            assert!((d - 2.0 * (1.0 - h).powi(k as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn block_length_validation() {
        let mut c = cfg(0.1, 0.01, 100);
        c.khasminskii_delta = 0.05;
        assert_eq!(block_steps(&c).unwrap(), 5);
        c.khasminskii_delta = 0.013;
        assert!(matches!(block_steps(&c), Err(Error::Config(_))));
        c.khasminskii_delta = 2.0;
        assert!(matches!(block_steps(&c), Err(Error::Config(_))));
    }

    #[test]
    fn auxiliary_with_x_free_fast_dynamics_matches_controlled() {
        // f2 = -y, sigma2 = 1 (x-independent); single-step blocks.
        #[derive(Debug)]
        struct Ou;
        impl crate::model::Coefficients for Ou {
            fn dim_slow(&self) -> usize {
                1
            }
            fn dim_fast(&self) -> usize {
                1
            }
            fn f1(&self, _x: &[f64], y: &[f64], out: &mut [f64]) {
                out[0] = y[0];
            }
            fn sigma1(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
            fn f2(&self, _x: &[f64], y: &[f64], out: &mut [f64]) {
                out[0] = -y[0];
            }
            fn sigma2(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let m = ModelSpec::new("ou", std::sync::Arc::new(Ou), *lin(0.0, 0.0, 1.0, 1.0).assumptions()).unwrap();
        let c = cfg(0.1, 0.01, 64);
        let ctl = Control::zero(1.0, 4, 1, 1).unwrap();
        let noise = NoisePath::generate(&c, 1, 1, 0);
        let hat = simulate_controlled_with_noise(&m, &c, &[0.0], &[0.5], &ctl, &noise).unwrap();
        let tilde = simulate_auxiliary_with_noise(&m, &c, &[0.0], &[0.5], &ctl, &hat, &noise).unwrap();
        assert_eq!(hat.fast, tilde.fast);
    }

    #[test]
    fn csv_has_expected_columns() {
        let m = lin(0.5, -0.5, 1.0, 1.0);
        let p = simulate_coupled(&m, &cfg(0.1, 0.01, 4), &[0.0], &[0.0]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_0,y_0\n0,0,0\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
