//! Dense BFGS with Armijo backtracking; enough for a few dozen parameters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Initial inverse-Hessian scale.
    pub h0: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Minimises `f` given `fg`, which returns value and gradient.
pub(crate) fn minimize<F, G>(f: F, fg: G, x0: Vec<f64>, opts: BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = fg(&x)?;
    let mut hinv = vec![0.0; n * n];
    for i in 0..n {
        hinv[i * n + i] = opts.h0;
    }
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&p, &g);
        if slope >= 0.0 {
            // lost descent: restart from steepest descent
            hinv.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                hinv[i * n + i] = opts.h0;
            }
            p = g.iter().map(|v| -opts.h0 * v).collect();
            slope = dot(&p, &g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let ft = f(&trial)?;
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, _)) = accepted else {
            break;
        };
        let (fnew, gn) = fg(&xn)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    hinv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if improvement.abs() <= 1e-15 * fx.abs().max(1e-300) {
            break;
        }
    }
    if !fx.is_finite() {
        return Err(Error::Numeric {
            message: "optimizer reached a non-finite objective".into(),
            history: x,
        });
    }
    Ok(BfgsOutcome { x, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let fg = |x: &[f64]| {
            let v = f(x)?;
            let g = vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ];
            Ok((v, g))
        };
        let out = minimize(
            f,
            fg,
            vec![-1.2, 1.0],
            BfgsOptions {
                max_iter: 500,
                grad_tol: 1e-10,
                h0: 1e-3,
            },
        )
        .unwrap();
        assert!(
            (out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6,
            "{out:?}"
        );
    }
}
