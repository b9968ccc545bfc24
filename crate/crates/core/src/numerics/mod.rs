//! Deterministic numeric kernel: dense matrices, seeded streams, softmax,
//! cosine similarity, random orthonormal frames and Dirichlet draws.

mod matrix;
mod rng;

pub use matrix::{axpy, dot, norm, scale, sub, Matrix};
pub use rng::{RngStream, SeededRng};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Vectors shorter than this are degenerate: no direction, no cosine.
pub const NORM_FLOOR: f64 = 1e-12;

/// Gram–Schmidt pivots below this trigger a redraw of the column.
const PIVOT_FLOOR: f64 = 1e-10;

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// `log softmax(z)`, computed without forming the probabilities.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension("log-softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

/// Checks `‖v‖ ≥ NORM_FLOOR` and returns the norm.
pub fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n < NORM_FLOOR || !n.is_finite() {
        return Err(Error::Degenerate {
            norm: n,
            floor: NORM_FLOOR,
        });
    }
    Ok(n)
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle between two vectors in radians, in `[0, π]`.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b).map(f64::acos)
}

pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = checked_norm(v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A `d × cols` matrix with orthonormal columns.
///
/// Draws a standard-normal matrix and orthonormalizes it with two passes of
/// modified Gram–Schmidt. A column whose pivot falls under `1e-10` is redrawn
/// from the same stream.
pub fn random_orthogonal(d: usize, cols: usize, rng: &SeededRng) -> Result<Matrix> {
    if d < cols {
        return Err(Error::Dimension(format!(
            "cannot fit {cols} orthonormal columns in dimension {d}"
        )));
    }
    let mut stream = rng.stream();
    // Built column-by-column as rows of `basis`, transposed at the end.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..d).map(|_| standard_normal(&mut stream)).collect();
        let scale0 = norm(&v);
        let mut ok = true;
        for _pass in 0..2 {
            for q in &basis {
                let proj = dot(q, &v);
                axpy(-proj, q, &mut v);
            }
            let n = norm(&v);
            if n < PIVOT_FLOOR * scale0.max(1.0) {
                ok = false;
                break;
            }
            for x in &mut v {
                *x /= n;
            }
        }
        if ok {
            basis.push(v);
        }
    }
    Ok(Matrix::from_fn(d, cols, |r, c| basis[c][r]))
}

/// One draw from `Dir(alpha, …, alpha)` over `n` categories, as normalized
/// Gamma(alpha, 1) variates.
pub fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("dirichlet needs at least one category".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny alphas can underflow every variate to zero; draw again.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}
