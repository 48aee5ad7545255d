//! Deliberately naive reference implementations used to certify the tape
//! and the optimized paths.
//!
//! Nothing here touches [`crate::tensor`], [`crate::stats`] or
//! [`crate::objective`]: every routine works on plain nested `Vec`s with
//! explicit loops, so an error in the code under test cannot leak into its
//! own reference.

#![allow(clippy::needless_range_loop)]

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Correlate columns over the rows (the `D×D` matrix).
    Features,
    /// Correlate rows over the columns (the `B×B` matrix).
    Samples,
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub seed: u64,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    /// The pair of values at the worst cell: (implementation, oracle).
    pub worst: (f64, f64),
    pub passed: bool,
}

impl OracleReport {
    pub fn compare(
        case: impl Into<String>,
        seed: u64,
        actual: &[f64],
        expected: &[f64],
        tolerance: f64,
    ) -> Self {
        let mut worst = (f64::NAN, f64::NAN);
        let mut max_abs_diff = if actual.len() == expected.len() {
            0.0
        } else {
            f64::INFINITY
        };
        for (&a, &e) in actual.iter().zip(expected) {
            let d = (a - e).abs();
            if d > max_abs_diff || d.is_nan() {
                max_abs_diff = if d.is_nan() { f64::INFINITY } else { d };
                worst = (a, e);
            }
        }
        if worst.0.is_nan() && !actual.is_empty() && actual.len() == expected.len() {
            worst = (actual[0], expected[0]);
        }
        OracleReport {
            case: case.into(),
            seed,
            max_abs_diff,
            tolerance,
            worst,
            passed: max_abs_diff < tolerance,
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} seed={} max_abs_diff={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.case,
            self.seed,
            self.max_abs_diff,
            self.tolerance
        )?;
        if !self.passed {
            write!(f, " worst: impl={} oracle={}", self.worst.0, self.worst.1)?;
        }
        Ok(())
    }
}

pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let p = a.len();
    let q = b.len();
    let r = if q > 0 { b[0].len() } else { 0 };
    let mut c = vec![vec![0.0; r]; p];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(m: &Matrix) -> Matrix {
    if m.is_empty() {
        return Vec::new();
    }
    (0..m[0].len())
        .map(|j| m.iter().map(|row| row[j]).collect())
        .collect()
}

/// Each column to mean 0 and population std 1, two-pass.
pub fn naive_standardize_columns(m: &Matrix) -> Result<Matrix> {
    let t = naive_standardize_rows(&transpose(m))?;
    Ok(transpose(&t))
}

/// Each row to mean 0 and population std 1, two-pass.
pub fn naive_standardize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Vec::with_capacity(m.len());
    for (i, row) in m.iter().enumerate() {
        let n = row.len() as f64;
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        let std = (var / n).sqrt();
        if std < 1e-12 {
            return Err(Error::Degenerate {
                what: "oracle slice",
                index: i,
            });
        }
        out.push(row.iter().map(|v| (v - mean) / std).collect());
    }
    Ok(out)
}

/// Correlation with explicit per-entry square-root denominators, no centering.
pub fn naive_correlation(z: &Matrix, z2: &Matrix, mode: OracleMode) -> Result<Matrix> {
    let (a, b) = match mode {
        OracleMode::Features => (transpose(z), transpose(z2)),
        OracleMode::Samples => (z.clone(), z2.clone()),
    };
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut num = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..a[i].len() {
                num += a[i][k] * b[j][k];
                na += a[i][k] * a[i][k];
                nb += b[j][k] * b[j][k];
            }
            let den = na.sqrt() * nb.sqrt();
            if den == 0.0 {
                return Err(Error::Degenerate {
                    what: "oracle correlation denominator",
                    index: i,
                });
            }
            out[i][j] = num / den;
        }
    }
    Ok(out)
}

pub fn naive_l_inv(c: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..c.len() {
        s += (1.0 - c[i][i]) * (1.0 - c[i][i]);
    }
    s
}

pub fn naive_l_rr(c: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..c.len() {
        for j in 0..c[i].len() {
            if j != i {
                s += c[i][j] * c[i][j];
            }
        }
    }
    s
}

/// Mean absolute difference over every cell.
pub fn naive_mean_l1(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - b[i][j]).abs();
            n += 1;
        }
    }
    s / n as f64
}

pub fn naive_softmax_rows(m: &Matrix, tau: f64) -> Matrix {
    m.iter()
        .map(|row| {
            let exps: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        })
        .collect()
}

/// `λ·m + (1−λ)·m` with the rows of the second term in reverse order.
pub fn naive_mixup_rows(m: &Matrix, lambda: f64) -> Matrix {
    let n = m.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(m[i].len());
        for j in 0..m[i].len() {
            row.push(lambda * m[i][j] + (1.0 - lambda) * m[n - 1 - i][j]);
        }
        out.push(row);
    }
    out
}

/// Rotate a square matrix 90° counterclockwise.
pub fn rotate_ccw(m: &Matrix) -> Matrix {
    let n = m.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = m[j][n - 1 - i];
        }
    }
    out
}

/// `λI + (1−λ)·rot90(I)` built literally.
pub fn naive_ground_truth(n: usize, lambda: f64) -> Matrix {
    let mut eye = vec![vec![0.0; n]; n];
    for (i, row) in eye.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let rot = rotate_ccw(&eye);
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| lambda * eye[i][j] + (1.0 - lambda) * rot[i][j])
                .collect()
        })
        .collect()
}

/// Textbook Adam with bias correction and coupled L2 decay, one scalar at a time.
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ScalarAdam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        ScalarAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            let g = grad[i] + self.weight_decay * theta[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t));
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// KNN by sorting every training point by cosine similarity.
///
/// Ties in the vote go to the larger summed similarity, then the smaller class.
pub fn naive_knn(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Vec<usize> {
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    test.iter()
        .map(|q| {
            let qn = norm(q);
            let mut sims: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let dot: f64 = q.iter().zip(t).map(|(a, b)| a * b).sum();
                    (dot / (qn * norm(t)), i)
                })
                .collect();
            sims.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            let mut votes = vec![0usize; classes];
            let mut mass = vec![0.0; classes];
            for &(s, i) in sims.iter().take(k) {
                votes[train_labels[i]] += 1;
                mass[train_labels[i]] += s;
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for the listed coordinates.
pub fn finite_diff_at(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(&theta)?;
        theta[i] = orig - h;
        let minus = f(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "finite difference at coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences for coordinate `i` at steps `h, h/10, h/100, …`
/// (at most `refinements` shrinks), stopping at the first step whose estimate
/// agrees with the previous one to `rel` (relative to
/// `max(|estimate|, floor)`). A ReLU or `|·|` switching inside the wider
/// stencil makes consecutive estimates disagree, so this returns the
/// estimate from a stencil that no longer straddles it, with its step.
/// `None` if the estimates never settle.
pub fn converged_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    i: usize,
    h: f64,
    refinements: u32,
    rel: f64,
    floor: f64,
) -> Result<Option<(f64, f64)>> {
    let mut theta = params.to_vec();
    let orig = theta[i];
    let mut central = |theta: &mut Vec<f64>, step: f64| -> Result<f64> {
        theta[i] = orig + step;
        let plus = f(theta)?;
        theta[i] = orig - step;
        let minus = f(theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "finite difference at coordinate {i}"
            )));
        }
        Ok((plus - minus) / (2.0 * step))
    };
    let mut step = h;
    let mut prev = central(&mut theta, step)?;
    for _ in 0..refinements {
        step /= 10.0;
        let next = central(&mut theta, step)?;
        if (next - prev).abs() <= rel * next.abs().max(floor) {
            return Ok(Some((next, step)));
        }
        prev = next;
    }
    Ok(None)
}

/// Central differences for every coordinate.
pub fn finite_diff(
    f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_at(f, params, &coords, h)
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning round-off into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
