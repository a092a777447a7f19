//! Real polynomials stored in ascending powers of `s`.

use nalgebra::DMatrix;
use num_complex::Complex;

use super::eigen;
use crate::error::Result;

pub type C64 = Complex<f64>;

/// Remove high-power zero coefficients. The zero polynomial becomes empty.
pub fn trim(mut p: Vec<f64>) -> Vec<f64> {
    while matches!(p.last(), Some(c) if *c == 0.0) {
        p.pop();
    }
    p
}

/// Degree of a trimmed polynomial; the zero polynomial reports 0.
pub fn degree(p: &[f64]) -> usize {
    p.iter().rposition(|c| *c != 0.0).unwrap_or(0)
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
        .collect()
}

pub fn scale(p: &[f64], k: f64) -> Vec<f64> {
    p.iter().map(|c| c * k).collect()
}

/// Horner evaluation at a complex point.
pub fn eval(p: &[f64], s: C64) -> C64 {
    p.iter().rev().fold(C64::new(0.0, 0.0), |acc, c| acc * s + *c)
}

/// Monic polynomial with the given roots. Complex roots must come in
/// conjugate pairs for the imaginary parts to cancel.
pub fn from_roots(roots: &[C64]) -> Vec<f64> {
    let mut acc = vec![C64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![C64::new(0.0, 0.0); acc.len() + 1];
        for (i, c) in acc.iter().enumerate() {
            next[i + 1] += *c;
            next[i] -= *c * r;
        }
        acc = next;
    }
    acc.into_iter().map(|c| c.re).collect()
}

/// Roots via eigenvalues of the companion matrix.
pub fn roots(p: &[f64]) -> Result<Vec<C64>> {
    let p = trim(p.to_vec());
    let n = degree(&p);
    if p.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let lead = p[n];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 0..n - 1 {
        companion[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        companion[(n - 1, j)] = -p[j] / lead;
    }
    eigen(&companion)
}
