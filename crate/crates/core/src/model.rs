//! Slow-fast systems and the analytically solvable built-in models.
//!
//! A system is
//!
//! ```text
//! dX = f1(X, Y) dt + sqrt(eps) sigma1(X) dW1
//! delta dY = f2(X, Y) dt + sqrt(delta) sigma2(X, Y) dW2
//! ```
//!
//! Matrices are stored row-major in flat slices.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::path_rng;

/// Coefficient maps of a slow-fast system. Implementations must be pure.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim_slow(&self) -> usize;
    fn dim_fast(&self) -> usize;
    fn f1(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `dim_slow × dim_slow`
    fn sigma1(&self, x: &[f64], out: &mut [f64]);
    fn f2(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `dim_fast × dim_fast`
    fn sigma2(&self, x: &[f64], y: &[f64], out: &mut [f64]);
}

/// Structural constants of the dissipativity and growth assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProfile {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub lip_const_c: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl AssumptionProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::config("beta1 and beta2 must be positive"));
        }
        if !(self.gamma >= 0.0 && self.lip_const_c >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::config("gamma, C and lambda must be nonnegative"));
        }
        if !(self.eta > 0.0 && self.eta < (-1.0f64).exp()) {
            return Err(Error::config(format!("eta = {} not in (0, 1/e)", self.eta)));
        }
        Ok(())
    }
}

/// Built-in one-dimensional models with closed-form averaged dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BuiltinModel {
    /// `f1 = a1 x + b1 y`, `sigma1 = s1`, `f2 = -(y - x)`, `sigma2 = s2`.
    Lin1d { a1: f64, b1: f64, s1: f64, s2: f64 },
    /// `f1 = psi(x) + y` with `psi(x) = x log(1 / max(|x|, e^-cap10))`,
    /// fast dynamics as in `Lin1d`.
    NonLip1d { s1: f64, s2: f64, cap10: f64 },
}

impl BuiltinModel {
    pub fn name(&self) -> &'static str {
        match self {
            BuiltinModel::Lin1d { .. } => "LIN1D",
            BuiltinModel::NonLip1d { .. } => "NONLIP1D",
        }
    }

    /// Closed-form averaged drift. The frozen fast process is OU with mean
    /// `x`, so only the `y`-linear part of `f1` needs averaging.
    pub fn fbar(&self, x: f64) -> f64 {
        match *self {
            BuiltinModel::Lin1d { a1, b1, .. } => (a1 + b1) * x,
            BuiltinModel::NonLip1d { cap10, .. } => psi(x, cap10) + x,
        }
    }

    fn assumptions(&self) -> AssumptionProfile {
        let s2 = match *self {
            BuiltinModel::Lin1d { s2, .. } | BuiltinModel::NonLip1d { s2, .. } => s2,
        };
        // 2<y, x - y> + s2^2 <= -y^2 + x^2 + s2^2
        AssumptionProfile {
            beta1: 1.0,
            beta2: 1.0,
            gamma: s2.powi(2).max(1.0),
            lip_const_c: 1.0,
            lambda: 0.0,
            eta: 0.1,
        }
    }
}

/// `x log(1 / max(|x|, e^-cap))`
pub fn psi(x: f64, cap: f64) -> f64 {
    let floor = (-cap).exp();
    -x * x.abs().max(floor).ln()
}

impl Coefficients for BuiltinModel {
    fn dim_slow(&self) -> usize {
        1
    }
    fn dim_fast(&self) -> usize {
        1
    }
    fn f1(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = match *self {
            BuiltinModel::Lin1d { a1, b1, .. } => a1 * x[0] + b1 * y[0],
            BuiltinModel::NonLip1d { cap10, .. } => psi(x[0], cap10) + y[0],
        };
    }
    fn sigma1(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = match *self {
            BuiltinModel::Lin1d { s1, .. } | BuiltinModel::NonLip1d { s1, .. } => s1,
        };
    }
    fn f2(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = -(y[0] - x[0]);
    }
    fn sigma2(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = match *self {
            BuiltinModel::Lin1d { s2, .. } | BuiltinModel::NonLip1d { s2, .. } => s2,
        };
    }
}

/// One slow-fast system: coefficient maps plus assumption constants.
/// Immutable and cheap to clone; share freely across threads.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    coeffs: Arc<dyn Coefficients>,
    assumptions: AssumptionProfile,
    builtin: Option<BuiltinModel>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("coeffs", &self.coeffs)
            .field("assumptions", &self.assumptions)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        coeffs: Arc<dyn Coefficients>,
        assumptions: AssumptionProfile,
    ) -> Result<ModelSpec> {
        assumptions.validate()?;
        if coeffs.dim_slow() == 0 || coeffs.dim_fast() == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        Ok(ModelSpec {
            name: name.into(),
            coeffs,
            assumptions,
            builtin: None,
        })
    }

    pub fn from_builtin(model: BuiltinModel) -> Result<ModelSpec> {
        let params: Vec<f64> = match model {
            BuiltinModel::Lin1d { a1, b1, s1, s2 } => vec![a1, b1, s1, s2],
            BuiltinModel::NonLip1d { s1, s2, cap10 } => {
                if !(cap10 > 1.0) {
                    return Err(Error::config("cap10 must exceed 1"));
                }
                vec![s1, s2, cap10]
            }
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::config(format!("{}: parameters must be finite", model.name())));
        }
        let (s1, s2) = match model {
            BuiltinModel::Lin1d { s1, s2, .. } | BuiltinModel::NonLip1d { s1, s2, .. } => (s1, s2),
        };
        if s1 < 0.0 || s2 < 0.0 {
            return Err(Error::config("noise scales s1, s2 must be nonnegative"));
        }
        let mut spec = ModelSpec::new(model.name(), Arc::new(model), model.assumptions())?;
        spec.builtin = Some(model);
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim_slow(&self) -> usize {
        self.coeffs.dim_slow()
    }
    pub fn dim_fast(&self) -> usize {
        self.coeffs.dim_fast()
    }
    pub fn assumptions(&self) -> &AssumptionProfile {
        &self.assumptions
    }
    pub fn builtin(&self) -> Option<BuiltinModel> {
        self.builtin
    }
    pub fn f1(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.coeffs.f1(x, y, out)
    }
    pub fn sigma1(&self, x: &[f64], out: &mut [f64]) {
        self.coeffs.sigma1(x, out)
    }
    pub fn f2(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.coeffs.f2(x, y, out)
    }
    pub fn sigma2(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.coeffs.sigma2(x, y, out)
    }
}

/// Builds a built-in model by name. Missing parameters take defaults
/// (`a1 = 0.5, b1 = -0.5, s1 = s2 = 1, cap10 = 10`); unknown ones are rejected.
pub fn make_builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let allowed: &[&str] = match name.to_ascii_uppercase().as_str() {
        "LIN1D" => &["a1", "b1", "s1", "s2"],
        "NONLIP1D" => &["s1", "s2", "cap10"],
        _ => return Err(Error::config(format!("unknown model name {name:?}"))),
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::config(format!("model {name}: unknown parameter {k:?}")));
    }
    let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
    let model = if allowed.len() == 4 {
        BuiltinModel::Lin1d {
            a1: get("a1", 0.5),
            b1: get("b1", -0.5),
            s1: get("s1", 1.0),
            s2: get("s2", 1.0),
        }
    } else {
        BuiltinModel::NonLip1d {
            s1: get("s1", 1.0),
            s2: get("s2", 1.0),
            cap10: get("cap10", 10.0),
        }
    };
    ModelSpec::from_builtin(model)
}

/// Outcome of an empirical dissipativity scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipativityReport {
    pub samples: usize,
    pub box_radius: f64,
    pub max_violation: f64,
    /// `(x1, x2, y1, y2)` at the largest violation.
    pub worst: Option<[Vec<f64>; 4]>,
    pub passed: bool,
}

const DISSIPATIVITY_TOL: f64 = 1e-12;

/// Samples `(x1, x2, y1, y2)` uniformly in `[-r, r]` and evaluates
///
/// ```text
/// 2<y1-y2, f2(x1,y1)-f2(x2,y2)> + |sigma2(x1,y1)-sigma2(x1,y2)|^2 + beta1 |y1-y2|^2 - C |x1-x2|^2
/// ```
///
/// which must be `<= 0` everywhere.
pub fn check_dissipativity(
    model: &ModelSpec,
    sample_count: usize,
    box_radius: f64,
    seed: u64,
) -> Result<DissipativityReport> {
    if sample_count == 0 {
        return Err(Error::config("check_dissipativity needs at least one sample"));
    }
    if !(box_radius > 0.0 && box_radius.is_finite()) {
        return Err(Error::config("box_radius must be positive and finite"));
    }
    let (ds, df) = (model.dim_slow(), model.dim_fast());
    let beta1 = model.assumptions().beta1;
    let c = model.assumptions().lip_const_c;
    let mut rng = path_rng(seed, 0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-box_radius..=box_radius)).collect() };

    let (mut fa, mut fb) = (vec![0.0; df], vec![0.0; df]);
    let (mut sa, mut sb) = (vec![0.0; df * df], vec![0.0; df * df]);
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst = None;
    for _ in 0..sample_count {
        let (x1, x2, y1, y2) = (draw(ds), draw(ds), draw(df), draw(df));
        model.f2(&x1, &y1, &mut fa);
        model.f2(&x2, &y2, &mut fb);
        model.sigma2(&x1, &y1, &mut sa);
        model.sigma2(&x1, &y2, &mut sb);
        let input = || format!("x1={x1:?} x2={x2:?} y1={y1:?} y2={y2:?}");
        if fa.iter().chain(&fb).any(|v| !v.is_finite()) {
            return Err(Error::Model {
                map: "f2",
                input: input(),
            });
        }
        if sa.iter().chain(&sb).any(|v| !v.is_finite()) {
            return Err(Error::Model {
                map: "sigma2",
                input: input(),
            });
        }
        let mut inner = 0.0;
        let mut dy2 = 0.0;
        for i in 0..df {
            let dy = y1[i] - y2[i];
            inner += dy * (fa[i] - fb[i]);
            dy2 += dy * dy;
        }
        let hs: f64 = sa.iter().zip(&sb).map(|(a, b)| (a - b).powi(2)).sum();
        let dx2: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum();
        let violation = 2.0 * inner + hs + beta1 * dy2 - c * dx2;
        if violation > max_violation {
            max_violation = violation;
            worst = Some([x1, x2, y1, y2]);
        }
    }
    Ok(DissipativityReport {
        samples: sample_count,
        box_radius,
        max_violation,
        worst,
        passed: max_violation <= DISSIPATIVITY_TOL,
    })
}

/// Largest ratio `|sigma2(x,y)|^2 / (1 + |x|^2)` over a sampled box; a
/// finite value bounds the linear-growth constant of the fast diffusion.
pub fn sigma2_growth_ratio(model: &ModelSpec, sample_count: usize, box_radius: f64, seed: u64) -> f64 {
    let (ds, df) = (model.dim_slow(), model.dim_fast());
    let mut rng = path_rng(seed, 1);
    let mut s = vec![0.0; df * df];
    let mut worst = 0.0f64;
    for _ in 0..sample_count {
        let x: Vec<f64> = (0..ds).map(|_| rng.random_range(-box_radius..=box_radius)).collect();
        let y: Vec<f64> = (0..df).map(|_| rng.random_range(-box_radius..=box_radius)).collect();
        model.sigma2(&x, &y, &mut s);
        let hs: f64 = s.iter().map(|v| v * v).sum();
        let x2: f64 = x.iter().map(|v| v * v).sum();
        worst = worst.max(hs / (1.0 + x2));
    }
    worst
}
