//! The concave modulus family `rho_eta`, its square-root transform
//! `rho_0_eta(x) = rho_eta(sqrt x)^2`, and a numeric Bihari comparison bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModulusKind {
    RhoEta,
    Rho0Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusSpec {
    eta: f64,
    kind: ModulusKind,
}

impl ModulusSpec {
    pub fn new(eta: f64, kind: ModulusKind) -> Result<ModulusSpec> {
        if !(eta > 0.0 && eta < (-1.0f64).exp()) {
            return Err(Error::config(format!("eta = {eta} not in (0, 1/e)")));
        }
        Ok(ModulusSpec { eta, kind })
    }

    pub fn rho_eta(eta: f64) -> Result<ModulusSpec> {
        ModulusSpec::new(eta, ModulusKind::RhoEta)
    }

    pub fn rho_0_eta(eta: f64) -> Result<ModulusSpec> {
        ModulusSpec::new(eta, ModulusKind::Rho0Eta)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn kind(&self) -> ModulusKind {
        self.kind
    }

    /// Evaluates the modulus; `x` must be a nonnegative number.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::domain(format!("modulus argument {x} must be >= 0")));
        }
        Ok(match self.kind {
            ModulusKind::RhoEta => rho_eta_unchecked(self.eta, x),
            ModulusKind::Rho0Eta => rho_eta_unchecked(self.eta, x.sqrt()).powi(2),
        })
    }
}

/// Piecewise `x log(1/x)` for `x <= eta`, tangent line beyond.
fn rho_eta_unchecked(eta: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x <= eta {
        -x * x.ln()
    } else {
        let l = -eta.ln();
        eta * l + (l - 1.0) * (x - eta)
    }
}

pub fn rho(spec: &ModulusSpec, x: f64) -> Result<f64> {
    spec.eval(x)
}

/// The right-hand side `rho` of a Bihari comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Comparison {
    /// `rho(y) = y`, the Gronwall case.
    Linear,
    Modulus(ModulusSpec),
}

impl Comparison {
    fn eval(&self, y: f64) -> f64 {
        match self {
            Comparison::Linear => y,
            Comparison::Modulus(m) => m.eval(y).unwrap_or(f64::NAN),
        }
    }

    fn anchor(&self) -> f64 {
        match self {
            Comparison::Linear => 1.0,
            Comparison::Modulus(m) => m.eta() / 2.0,
        }
    }
}

/// Piecewise-constant function on `M` uniform intervals of `[0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub t_end: f64,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn constant(t_end: f64, value: f64, intervals: usize) -> StepFunction {
        StepFunction {
            t_end,
            values: vec![value; intervals],
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let m = self.values.len();
        (0..=m).map(|i| self.t_end * i as f64 / m as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub times: Vec<f64>,
    pub bound: Vec<f64>,
}

const SIMPSON_TOL: f64 = 1e-10;
const BISECTION_TOL: f64 = 1e-12;
const MAX_DEPTH: u32 = 60;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(Error::numeric(format!(
            "quadrature hit a non-finite value on [{a}, {b}]"
        )));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numeric {
            message: format!("adaptive Simpson did not converge on [{a}, {b}]"),
            history: vec![a, b, delta],
        });
    }
    Ok(adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Adaptive composite Simpson quadrature to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return integrate(f, b, a, tol).map(|v| -v);
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

/// Evaluates `f(t) <= g^-1(g(f(0)) + int_0^t q)` at the breakpoints of `q`,
/// with `g(x) = int_{x0}^x dy / rho(y)` by quadrature and `g^-1` by bisection.
pub fn bihari_bound(f0: f64, q: &StepFunction, rho: Comparison, t_end: f64) -> Result<BoundCurve> {
    if !(f0 > 0.0 && f0.is_finite()) {
        return Err(Error::domain(format!("bihari_bound needs f0 > 0, got {f0}")));
    }
    if q.values.is_empty() || q.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain("forcing q must be a nonempty nonnegative step function"));
    }
    if (q.t_end - t_end).abs() > 1e-12 * t_end.max(1.0) || !(t_end > 0.0) {
        return Err(Error::config("forcing horizon must equal T > 0"));
    }
    let x0 = rho.anchor();
    let inv = |y: f64| 1.0 / rho.eval(y);
    let g = |x: f64| integrate(&inv, x0, x, SIMPSON_TOL);
    let g0 = g(f0)?;

    let dt = t_end / q.values.len() as f64;
    let mut times = vec![0.0];
    let mut bound = vec![f0];
    let mut forcing = 0.0;
    let mut prev = f0;
    for (i, qi) in q.values.iter().enumerate() {
        forcing += qi * dt;
        times.push(dt * (i + 1) as f64);
        if forcing == 0.0 {
            bound.push(f0);
            continue;
        }
        let target = g0 + forcing;
        // bound is non-decreasing in t, so the previous value brackets from below
        let lo = prev;
        let mut hi = prev.max(f64::MIN_POSITIVE) * 2.0;
        while g(hi)? < target {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::numeric("Bihari bound diverges (g^-1 target not reached)"));
            }
        }
        let mut lo = lo;
        while hi - lo > BISECTION_TOL * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if g(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        prev = 0.5 * (lo + hi);
        bound.push(prev);
    }
    Ok(BoundCurve { times, bound })
}

/// Maximal violations of the two algebraic properties of `rho_eta` over a grid:
/// monotonicity in `eta` and the power inequality
/// `x^p rho(x) <= rho(x^(1+p)) / (1+p)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoPropertiesReport {
    pub eta1: f64,
    pub eta2: f64,
    pub p: f64,
    pub grid_points: usize,
    pub monotone_violation: f64,
    pub power_violation: f64,
    /// Grid point at which the power inequality is worst.
    pub power_worst_x: f64,
    pub passed: bool,
}

const PROPERTY_TOL: f64 = 1e-12;

pub fn check_rho_properties(eta1: f64, eta2: f64, p: f64, grid: &[f64]) -> Result<RhoPropertiesReport> {
    if !(eta1 > eta2 && eta2 > 0.0) {
        return Err(Error::config(format!("need eta1 > eta2 > 0, got {eta1}, {eta2}")));
    }
    let r1 = ModulusSpec::rho_eta(eta1)?;
    let r2 = ModulusSpec::rho_eta(eta2)?;
    if !(p > 1.0) {
        return Err(Error::config("power p must exceed 1"));
    }
    if grid.is_empty() || grid.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::config("grid must contain positive finite points"));
    }
    let mut monotone_violation = f64::NEG_INFINITY;
    let mut power_violation = f64::NEG_INFINITY;
    let mut power_worst_x = grid[0];
    for &x in grid {
        monotone_violation = monotone_violation.max(r1.eval(x)? - r2.eval(x)?);
        for r in [&r1, &r2] {
            let v = x.powf(p) * r.eval(x)? - r.eval(x.powf(1.0 + p))? / (1.0 + p);
            if v > power_violation {
                power_violation = v;
                power_worst_x = x;
            }
        }
    }
    Ok(RhoPropertiesReport {
        eta1,
        eta2,
        p,
        grid_points: grid.len(),
        monotone_violation,
        power_violation,
        power_worst_x,
        passed: monotone_violation <= PROPERTY_TOL && power_violation <= PROPERTY_TOL,
    })
}

/// Largest increase of the secant slope along a sorted grid; `<= 0` for a
/// concave function.
pub fn concavity_defect(spec: &ModulusSpec, grid: &[f64]) -> Result<f64> {
    let vals = grid.iter().map(|&x| spec.eval(x)).collect::<Result<Vec<_>>>()?;
    let slopes: Vec<f64> = grid
        .windows(2)
        .zip(vals.windows(2))
        .map(|(x, v)| (v[1] - v[0]) / (x[1] - x[0]))
        .collect();
    Ok(slopes.windows(2).map(|s| s[1] - s[0]).fold(f64::NEG_INFINITY, f64::max))
}

/// Largest decrease between consecutive grid values; `<= 0` when non-decreasing.
pub fn monotonicity_defect(spec: &ModulusSpec, grid: &[f64]) -> Result<f64> {
    let vals = grid.iter().map(|&x| spec.eval(x)).collect::<Result<Vec<_>>>()?;
    Ok(vals.windows(2).map(|v| v[0] - v[1]).fold(f64::NEG_INFINITY, f64::max))
}

/// Jump of `rho_eta` across `eta`: distance between the value at `eta` (log
/// branch) and at the next representable point above it (tangent branch).
pub fn continuity_gap(eta: f64) -> f64 {
    let left = rho_eta_unchecked(eta, eta);
    let right = rho_eta_unchecked(eta, eta.next_up());
    (right - left).abs()
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_closed_form_values() {
        let r = ModulusSpec::rho_eta(0.3).unwrap();
        assert_eq!(r.eval(0.0).unwrap(), 0.0);
        assert!((r.eval(0.1).unwrap() - 0.1 * 10f64.ln()).abs() < 1e-15);
        let l = (1.0f64 / 0.3).ln();
        let expect = 0.3 * l + (l - 1.0) * 0.2;
        assert!((r.eval(0.5).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.401986).abs() < 1e-6);
    }

    #[test]
    fn rho_rejects_negative_and_nan() {
        let r = ModulusSpec::rho_eta(0.3).unwrap();
        assert!(matches!(r.eval(-1.0), Err(Error::Domain(_))));
        assert!(matches!(r.eval(f64::NAN), Err(Error::Domain(_))));
        assert!(ModulusSpec::rho_eta(0.5).is_err());
        assert!(ModulusSpec::rho_eta(0.0).is_err());
    }

    #[test]
    fn rho0_is_square_of_sqrt() {
        let r = ModulusSpec::rho_eta(0.2).unwrap();
        let r0 = ModulusSpec::rho_0_eta(0.2).unwrap();
        for x in [0.0, 1e-6, 0.01, 0.04, 0.3, 2.0] {
            assert!((r0.eval(x).unwrap() - r.eval(x.sqrt()).unwrap().powi(2)).abs() < 1e-15);
        }
    }

    #[test]
    fn gronwall_special_case() {
        let q = StepFunction::constant(1.0, 1.0, 10);
        let b = bihari_bound(1.0, &q, Comparison::Linear, 1.0).unwrap();
        let last = *b.bound.last().unwrap();
        assert!((last - std::f64::consts::E).abs() / std::f64::consts::E < 1e-8);
    }

    #[test]
    fn zero_forcing_is_flat() {
        let q = StepFunction::constant(2.0, 0.0, 4);
        let m = Comparison::Modulus(ModulusSpec::rho_eta(0.3).unwrap());
        let b = bihari_bound(1.0, &q, m, 2.0).unwrap();
        assert!(b.bound.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn exponent_form_on_log_branch() {
        let q = StepFunction::constant(1.0, 1.0, 4);
        let m = Comparison::Modulus(ModulusSpec::rho_eta(0.3).unwrap());
        let b = bihari_bound(0.01, &q, m, 1.0).unwrap();
        for (t, v) in b.times.iter().zip(&b.bound) {
            let closed = 0.01f64.powf((-t).exp());
            assert!((v - closed).abs() < 1e-6, "t={t}: {v} vs {closed}");
        }
        // 0.01^(1/e), computed independently.
        assert!((b.bound[4] - 0.183_755_826_137_575).abs() < 1e-6);
    }

    #[test]
    fn bihari_rejects_bad_inputs() {
        let q = StepFunction::constant(1.0, 1.0, 2);
        assert!(bihari_bound(0.0, &q, Comparison::Linear, 1.0).is_err());
        let neg = StepFunction {
            t_end: 1.0,
            values: vec![1.0, -1.0],
        };
        assert!(bihari_bound(1.0, &neg, Comparison::Linear, 1.0).is_err());
    }

    #[test]
    fn property_check_ordering_and_boundary() {
        assert!(matches!(
            check_rho_properties(0.1, 0.3, 2.0, &[0.1]),
            Err(Error::Config(_))
        ));
        // power inequality is an equality on the logarithmic branch
        let r = check_rho_properties(0.3, 0.1, 2.0, &[0.1]).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn monotone_in_eta_holds_on_wide_grid() {
        let grid = log_grid(1e-4, 10.0, 2000);
        let r = check_rho_properties(0.3, 0.1, 2.0, &grid).unwrap();
        assert!(r.monotone_violation <= 1e-12);
    }

    #[test]
    fn power_inequality_holds_below_eta_and_fails_above() {
        let below = log_grid(1e-4, 0.1, 2000);
        let r = check_rho_properties(0.3, 0.1, 2.0, &below).unwrap();
        assert!(r.passed, "{r:?}");
        // Above eta the tangent branch lies above x log(1/x):
        // 0.5^2 rho_0.3(0.5) - rho_0.3(0.125)/3 = 0.013853,
        // 0.5^2 rho_0.1(0.5) - rho_0.1(0.125)/3 = 0.100215 (worst).
        let r = check_rho_properties(0.3, 0.1, 2.0, &[0.5]).unwrap();
        assert!((r.power_violation - 0.100_215_424_416_170_5).abs() < 1e-12);
        assert!(!r.passed);
    }

    #[test]
    fn continuity_at_eta() {
        for eta in [0.01, 0.1, 0.3, 0.36] {
            assert!(continuity_gap(eta) < 1e-15);
            let r = ModulusSpec::rho_eta(eta).unwrap();
            let left = r.eval(eta * (1.0 - 1e-12)).unwrap();
            let right = r.eval(eta * (1.0 + 1e-12)).unwrap();
            assert!((left - right).abs() < 1e-11);
        }
    }
}
