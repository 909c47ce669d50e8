//! Piecewise-constant Cameron–Martin controls `h = (h1, h2)`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A control with derivative `hdot` constant on each of `M` uniform intervals
/// of `[0, T]`. `h` itself is piecewise linear and `norm_sq = int |hdot|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    t_end: f64,
    intervals: usize,
    dim_slow: usize,
    dim_fast: usize,
    hdot1: Vec<f64>,
    hdot2: Vec<f64>,
    norm_sq: f64,
}

impl Control {
    /// `hdot1` is `intervals × dim_slow` and `hdot2` is `intervals × dim_fast`,
    /// both row-major.
    pub fn new(t_end: f64, dim_slow: usize, dim_fast: usize, hdot1: Vec<f64>, hdot2: Vec<f64>) -> Result<Control> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::config("control horizon must be positive"));
        }
        if dim_slow == 0 || dim_fast == 0 || hdot1.is_empty() || !hdot1.len().is_multiple_of(dim_slow) {
            return Err(Error::config("control slow channel has inconsistent shape"));
        }
        let intervals = hdot1.len() / dim_slow;
        if hdot2.len() != intervals * dim_fast {
            return Err(Error::config("control fast channel has inconsistent shape"));
        }
        if let Some(v) = hdot1.iter().chain(&hdot2).find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("control contains non-finite value {v}")));
        }
        let dt = t_end / intervals as f64;
        let norm_sq = hdot1.iter().chain(&hdot2).map(|v| v * v).sum::<f64>() * dt;
        Ok(Control {
            t_end,
            intervals,
            dim_slow,
            dim_fast,
            hdot1,
            hdot2,
            norm_sq,
        })
    }

    pub fn zero(t_end: f64, intervals: usize, dim_slow: usize, dim_fast: usize) -> Result<Control> {
        Control::new(
            t_end,
            dim_slow,
            dim_fast,
            vec![0.0; intervals * dim_slow],
            vec![0.0; intervals * dim_fast],
        )
    }

    /// Constant slow-channel derivative, zero fast channel.
    pub fn constant_slow(t_end: f64, intervals: usize, value: &[f64], dim_fast: usize) -> Result<Control> {
        let hdot1 = (0..intervals).flat_map(|_| value.iter().copied()).collect();
        Control::new(t_end, value.len(), dim_fast, hdot1, vec![0.0; intervals * dim_fast])
    }

    /// Random control drawn uniformly from the ball of radius `radius`.
    pub fn random_in_ball<R: Rng + ?Sized>(
        rng: &mut R,
        t_end: f64,
        intervals: usize,
        dim_slow: usize,
        dim_fast: usize,
        radius: f64,
        slow_only: bool,
    ) -> Result<Control> {
        let n1 = intervals * dim_slow;
        let n2 = if slow_only { 0 } else { intervals * dim_fast };
        let mut v: Vec<f64> = (0..n1 + n2).map(|_| StandardNormal.sample(rng)).collect();
        let dt = t_end / intervals as f64;
        let norm = (v.iter().map(|x| x * x).sum::<f64>() * dt).sqrt();
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / (n1 + n2) as f64);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x *= r / norm);
        }
        let hdot2 = if slow_only {
            vec![0.0; intervals * dim_fast]
        } else {
            v.split_off(n1)
        };
        Control::new(t_end, dim_slow, dim_fast, v, hdot2)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn intervals(&self) -> usize {
        self.intervals
    }
    pub fn dim_slow(&self) -> usize {
        self.dim_slow
    }
    pub fn dim_fast(&self) -> usize {
        self.dim_fast
    }
    pub fn step(&self) -> f64 {
        self.t_end / self.intervals as f64
    }
    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }
    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }
    /// Membership in the ball `B_N`.
    pub fn in_ball(&self, n: f64) -> bool {
        self.norm_sq <= n * n
    }
    pub fn hdot1(&self) -> &[f64] {
        &self.hdot1
    }
    pub fn hdot2(&self) -> &[f64] {
        &self.hdot2
    }
    pub fn hdot1_on(&self, interval: usize) -> &[f64] {
        &self.hdot1[interval * self.dim_slow..(interval + 1) * self.dim_slow]
    }
    pub fn hdot2_on(&self, interval: usize) -> &[f64] {
        &self.hdot2[interval * self.dim_fast..(interval + 1) * self.dim_fast]
    }

    /// Interval containing `t`; `t = T` belongs to the last interval.
    pub fn interval_of(&self, t: f64) -> usize {
        let i = (t / self.t_end * self.intervals as f64).floor();
        (i.max(0.0) as usize).min(self.intervals - 1)
    }

    /// `h1(t) = int_0^t hdot1`, exact for the piecewise-constant derivative.
    pub fn h1_at(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(0.0, self.t_end);
        let dt = self.step();
        out.iter_mut().for_each(|v| *v = 0.0);
        let full = ((t / dt).floor() as usize).min(self.intervals);
        for i in 0..full {
            for (o, v) in out.iter_mut().zip(self.hdot1_on(i)) {
                *o += v * dt;
            }
        }
        if full < self.intervals {
            let rest = t - full as f64 * dt;
            for (o, v) in out.iter_mut().zip(self.hdot1_on(full)) {
                *o += v * rest;
            }
        }
    }

    /// Same control on a grid with each interval split into `k` pieces.
    pub fn refine(&self, k: usize) -> Result<Control> {
        if k == 0 {
            return Err(Error::config("refinement factor must be positive"));
        }
        let split = |v: &[f64], d: usize| -> Vec<f64> {
            v.chunks(d)
                .flat_map(|c| std::iter::repeat_n(c, k).flatten().copied())
                .collect()
        };
        Control::new(
            self.t_end,
            self.dim_slow,
            self.dim_fast,
            split(&self.hdot1, self.dim_slow),
            split(&self.hdot2, self.dim_fast),
        )
    }

    /// Zeroes the derivative on every interval that starts at or after `t`.
    pub fn truncate_after(&self, t: f64) -> Control {
        let dt = self.step();
        let mut c = self.clone();
        for i in 0..self.intervals {
            if i as f64 * dt >= t - 1e-12 * self.t_end {
                c.hdot1[i * self.dim_slow..(i + 1) * self.dim_slow].fill(0.0);
                c.hdot2[i * self.dim_fast..(i + 1) * self.dim_fast].fill(0.0);
            }
        }
        c.norm_sq = c.hdot1.iter().chain(&c.hdot2).map(|v| v * v).sum::<f64>() * dt;
        c
    }

    /// `self + scale * other` on a common grid.
    pub fn axpy(&self, scale: f64, other: &Control) -> Result<Control> {
        if self.intervals != other.intervals
            || self.dim_slow != other.dim_slow
            || self.dim_fast != other.dim_fast
            || (self.t_end - other.t_end).abs() > 1e-12 * self.t_end
        {
            return Err(Error::config("controls live on different grids"));
        }
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + scale * y).collect();
        Control::new(
            self.t_end,
            self.dim_slow,
            self.dim_fast,
            add(&self.hdot1, &other.hdot1),
            add(&self.hdot2, &other.hdot2),
        )
    }

    /// CSV with columns `interval, hdot1_0.., hdot2_0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["interval".to_string()];
        header.extend((0..self.dim_slow).map(|i| format!("hdot1_{i}")));
        header.extend((0..self.dim_fast).map(|i| format!("hdot2_{i}")));
        out.write_record(&header)?;
        for i in 0..self.intervals {
            let mut row = vec![i.to_string()];
            row.extend(self.hdot1_on(i).iter().map(|v| v.to_string()));
            row.extend(self.hdot2_on(i).iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, t_end: f64) -> Result<Control> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let dim_slow = headers.iter().filter(|h| h.starts_with("hdot1_")).count();
        let dim_fast = headers.iter().filter(|h| h.starts_with("hdot2_")).count();
        if headers.len() != 1 + dim_slow + dim_fast {
            return Err(Error::config("unexpected control CSV columns"));
        }
        let (mut h1, mut h2) = (Vec::new(), Vec::new());
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("control CSV row {}: {e}", row_idx + 1)))
            };
            for (j, field) in rec.iter().enumerate().skip(1) {
                if j <= dim_slow {
                    h1.push(parse(field)?);
                } else {
                    h2.push(parse(field)?);
                }
            }
        }
        Control::new(t_end, dim_slow, dim_fast, h1, h2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_is_cached_sum() {
        let c = Control::new(2.0, 1, 1, vec![1.0, -2.0], vec![0.5, 0.0]).unwrap();
        assert_eq!(c.norm_sq(), (1.0 + 4.0 + 0.25) * 1.0);
        assert!(c.in_ball(2.3));
        assert!(!c.in_ball(2.2));
    }

    #[test]
    fn nan_rejected_as_domain_error() {
        let r = Control::new(1.0, 1, 1, vec![f64::NAN], vec![0.0]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn integral_is_exact() {
        let c = Control::new(1.0, 1, 1, vec![1.0, 3.0], vec![0.0, 0.0]).unwrap();
        let mut out = [0.0];
        c.h1_at(0.75, &mut out);
        assert!((out[0] - (0.5 + 0.75)).abs() < 1e-15);
        c.h1_at(1.0, &mut out);
        assert!((out[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn refine_preserves_norm_and_integral() {
        let c = Control::new(1.0, 1, 1, vec![1.0, -0.5, 2.0], vec![0.1, 0.2, 0.3]).unwrap();
        let r = c.refine(4).unwrap();
        assert_eq!(r.intervals(), 12);
        assert!((r.norm_sq() - c.norm_sq()).abs() < 1e-14);
        let (mut a, mut b) = ([0.0], [0.0]);
        c.h1_at(0.6, &mut a);
        r.h1_at(0.6, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-14);
    }

    #[test]
    fn csv_round_trip() {
        let c = Control::new(1.0, 1, 1, vec![1.0, -0.25], vec![0.0, 3.5]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = Control::read_csv(&buf[..], 1.0).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn random_controls_respect_radius() {
        let mut rng = crate::stream::path_rng(5, 0);
        for _ in 0..50 {
            let c = Control::random_in_ball(&mut rng, 1.0, 8, 1, 1, 0.5, true).unwrap();
            assert!(c.norm() <= 0.5 + 1e-12);
            assert!(c.hdot2().iter().all(|v| *v == 0.0));
        }
    }
}
