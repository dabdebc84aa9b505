//! Fixed-point polynomial approximation of ReLU.
//!
//! Coefficients are integers `a_k` read as `a_k / 2^b`. The fit minimises
//! `||B a - 2^b ReLU(x)||^2` over the quantized grid `x = m 2^-b` in `[-c, c]`,
//! with `a` restricted to the signed `b`-bit box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointPoly {
    pub int_coeffs: Vec<i64>,
    pub frac_bits: u32,
    pub interval_c: f64,
}

impl FixedPointPoly {
    pub fn degree(&self) -> usize {
        self.int_coeffs.len().saturating_sub(1)
    }

    pub fn real_coeffs(&self) -> Vec<f64> {
        let s = 2f64.powi(self.frac_bits as i32);
        self.int_coeffs.iter().map(|&a| a as f64 / s).collect()
    }

    pub fn in_box(&self) -> bool {
        let (lo, hi) = coeff_box(self.frac_bits);
        self.int_coeffs.iter().all(|&a| a >= lo && a <= hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub max_abs_error: f64,
    /// Objective value in scaled units, i.e. `||B a - Y||^2`.
    pub sum_sq_error: f64,
    pub truncated_terms: Vec<usize>,
}

/// `[-2^(b-1), 2^(b-1) - 1]`.
pub fn coeff_box(b: u32) -> (i64, i64) {
    let h = 1i64 << (b - 1);
    (-h, h - 1)
}

/// `sum (a_k / 2^b) z^k` by Horner.
pub fn eval_poly(p: &FixedPointPoly, z: f64) -> f64 {
    p.real_coeffs().iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

fn ceil_log2(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// `ceil(log2 d + 1)`.
pub fn mult_depth(d: usize) -> u32 {
    assert!(d >= 1, "degree must be >= 1");
    ceil_log2(d) + 1
}

/// Depth once the leading coefficient is one: `ceil(log2 d)`.
pub fn mult_depth_monic(d: usize) -> u32 {
    assert!(d >= 1, "degree must be >= 1");
    ceil_log2(d)
}

pub fn poly_depth(d: usize, monic: bool) -> u32 {
    if monic {
        mult_depth_monic(d)
    } else {
        mult_depth(d)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Quantized domain `{m 2^-b} ∩ [-c, c]`.
pub fn quantized_domain(c: f64, b: u32) -> Vec<f64> {
    let s = 2f64.powi(b as i32);
    let m = (c * s).floor() as i64;
    (-m..=m).map(|k| k as f64 / s).collect()
}

pub fn fit_relu_poly(d: usize, c: f64, b: u32) -> Result<(FixedPointPoly, FitReport)> {
    fit_poly_to(d, c, b, relu)
}

/// Bounded integer least squares against an arbitrary target.
pub fn fit_poly_to(d: usize, c: f64, b: u32, target: impl Fn(f64) -> f64) -> Result<(FixedPointPoly, FitReport)> {
    if d < 1 || !(c > 0.0) || b < 1 || b > 30 {
        return Err(Error::Invalid(format!("need d >= 1, c > 0, 1 <= b <= 30 (got d={d}, c={c}, b={b})")));
    }
    let xs = quantized_domain(c, b);
    if xs.len() < d + 1 {
        return Err(Error::Invalid(format!("domain has {} points, need at least {}", xs.len(), d + 1)));
    }
    let scale = 2f64.powi(b as i32);
    let ys: Vec<f64> = xs.iter().map(|&x| scale * target(x)).collect();
    let sys = LsqSystem::new(&xs, &ys, d);
    let real = sys.real_solution(c);
    let (lo, hi) = coeff_box(b);
    let start: Vec<i64> = real.iter().map(|&v| (v.round_ties_even() as i64).clamp(lo, hi)).collect();
    let a = sys.local_search(start, lo, hi);

    let poly = FixedPointPoly { int_coeffs: a, frac_bits: b, interval_c: c };
    let max_abs_error = xs.iter().map(|&x| (eval_poly(&poly, x) - target(x)).abs()).fold(0.0, f64::max);
    let truncated_terms = poly
        .int_coeffs
        .iter()
        .zip(&real)
        .enumerate()
        .filter(|(_, (&a, &r))| a == 0 && r.abs() >= 1e-6)
        .map(|(k, _)| k)
        .collect();
    let report = FitReport { max_abs_error, sum_sq_error: sys.sse(&poly.int_coeffs), truncated_terms };
    Ok((poly, report))
}

/// Normal equations of the Vandermonde problem.
struct LsqSystem<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    d: usize,
    /// `G[j][k] = sum x^(j+k)`.
    gram: Vec<Vec<f64>>,
}

impl<'a> LsqSystem<'a> {
    fn new(xs: &'a [f64], ys: &'a [f64], d: usize) -> Self {
        let mut moments = vec![0.0; 2 * d + 1];
        for &x in xs {
            let mut p = 1.0;
            for m in moments.iter_mut() {
                *m += p;
                p *= x;
            }
        }
        let gram = (0..=d).map(|j| (0..=d).map(|k| moments[j + k]).collect()).collect();
        Self { xs, ys, d, gram }
    }

    /// Unconstrained real solution, solved in the basis `(x/c)^k` for conditioning.
    fn real_solution(&self, c: f64) -> Vec<f64> {
        let n = self.d + 1;
        let mut m = vec![vec![0.0; n + 1]; n];
        for (&x, &y) in self.xs.iter().zip(self.ys) {
            let t = x / c;
            let mut pj = 1.0;
            for row in m.iter_mut() {
                let mut pk = 1.0;
                for v in row.iter_mut().take(n) {
                    *v += pj * pk;
                    pk *= t;
                }
                row[n] += pj * y;
                pj *= t;
            }
        }
        let alpha = solve_dense(m);
        alpha.iter().enumerate().map(|(k, a)| a / c.powi(k as i32)).collect()
    }

    /// Residual `B a - Y`.
    fn residual(&self, a: &[i64]) -> Vec<f64> {
        self.xs
            .iter()
            .zip(self.ys)
            .map(|(&x, &y)| a.iter().rev().fold(0.0, |acc, &ak| acc * x + ak as f64) - y)
            .collect()
    }

    fn sse(&self, a: &[i64]) -> f64 {
        self.residual(a).iter().map(|r| r * r).sum()
    }

    /// Steepest descent over the `{-1, 0, 1}^(d+1)` cube until no move improves.
    fn local_search(&self, mut a: Vec<i64>, lo: i64, hi: i64) -> Vec<i64> {
        let n = self.d + 1;
        let moves: Vec<Vec<i64>> = (1..3usize.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let v = (code % 3) as i64 - 1;
                        code /= 3;
                        v
                    })
                    .collect()
            })
            .collect();
        loop {
            let r = self.residual(&a);
            // Gradient half: B^T r.
            let mut btr = vec![0.0; n];
            for (&x, &ri) in self.xs.iter().zip(&r) {
                let mut p = 1.0;
                for g in btr.iter_mut() {
                    *g += p * ri;
                    p *= x;
                }
            }
            let base: f64 = r.iter().map(|v| v * v).sum();
            let tol = 1e-12 * base.max(1.0);
            let mut best: Option<(f64, &Vec<i64>)> = None;
            for mv in &moves {
                if a.iter().zip(mv).any(|(&ak, &dk)| ak + dk < lo || ak + dk > hi) {
                    continue;
                }
                let mut delta = 0.0;
                for j in 0..n {
                    if mv[j] == 0 {
                        continue;
                    }
                    delta += 2.0 * mv[j] as f64 * btr[j];
                    for k in 0..n {
                        delta += (mv[j] * mv[k]) as f64 * self.gram[j][k];
                    }
                }
                if delta < -tol && best.map_or(true, |(b, _)| delta < b) {
                    best = Some((delta, mv));
                }
            }
            match best {
                Some((_, mv)) => a.iter_mut().zip(mv).for_each(|(ak, dk)| *ak += dk),
                None => return a,
            }
        }
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    x
}
