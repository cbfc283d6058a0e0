//! Jacobi-preconditioned conjugate gradients on matrix-free symmetric operators.
//!
//! All reductions are serial sums in index order, so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    /// Final residual norm relative to `max(|b|, |r0|)`.
    pub residual: f64,
    pub converged: bool,
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn remove_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Solves `A x = b` for symmetric positive (semi-)definite `A`, starting from the
/// contents of `x`. Entries with a zero diagonal are left untouched.
///
/// With `zero_mean`, iterates are kept orthogonal to the constants, which fixes the
/// gauge of a singular Neumann/periodic system.
pub fn pcg<A>(apply: A, diag: &[f64], b: &[f64], x: &mut [f64], tol: f64, max_iter: usize, zero_mean: bool) -> Result<CgOutcome>
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let inv_diag: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    if zero_mean {
        remove_mean(x);
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = if inv_diag[i] > 0.0 { b[i] - r[i] } else { 0.0 };
    }
    if zero_mean {
        remove_mean(&mut r);
    }
    let bnorm = dot(b, b).sqrt();
    let r0norm = dot(&r, &r).sqrt();
    let reference = bnorm.max(r0norm);
    if reference == 0.0 {
        return Ok(CgOutcome { iterations: 0, residual: 0.0, converged: true });
    }

    let precondition = |r: &[f64], z: &mut [f64]| {
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if zero_mean {
            remove_mean(z);
        }
    };

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rnorm = r0norm;

    for it in 0..max_iter {
        if rnorm <= tol * reference {
            return Ok(CgOutcome { iterations: it, residual: rnorm / reference, converged: true });
        }
        apply(&p, &mut ap);
        for i in 0..n {
            if inv_diag[i] == 0.0 {
                ap[i] = 0.0;
            }
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap < 0.0 {
            return Err(Error::SolverBreakdown(format!("non-positive curvature p.Ap = {pap} at iteration {it}")));
        }
        if pap == 0.0 {
            return Ok(CgOutcome { iterations: it, residual: rnorm / reference, converged: rnorm <= tol * reference });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if zero_mean {
            remove_mean(&mut r);
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        rnorm = dot(&r, &r).sqrt();
        if !rnorm.is_finite() {
            return Err(Error::SolverBreakdown(format!("residual became {rnorm} at iteration {it}")));
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if zero_mean {
        remove_mean(x);
    }
    Ok(CgOutcome { iterations: max_iter, residual: rnorm / reference, converged: rnorm <= tol * reference })
}
