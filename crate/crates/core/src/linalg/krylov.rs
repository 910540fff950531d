//! Conjugate gradients for symmetric positive definite systems and BiCGSTAB for the
//! nonsymmetric prediction matrix, both with optional Jacobi preconditioning.

use serde::{Deserialize, Serialize};

use super::sparse::CsrMatrix;
use crate::error::{IsphError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeSettings {
    /// Target `‖b - Ax‖ / ‖b‖`.
    pub rel_tol: f64,
    /// Iteration cap as a multiple of the system size.
    pub max_iter_factor: usize,
    pub jacobi: bool,
}

impl Default for IterativeSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter_factor: 10,
            jacobi: false,
        }
    }
}

impl IterativeSettings {
    fn max_iter(&self, n: usize) -> usize {
        (self.max_iter_factor * n).max(10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual after each iteration, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inverse_diagonal(a: &CsrMatrix, jacobi: bool) -> Result<Option<Vec<f64>>> {
    if !jacobi {
        return Ok(None);
    }
    let d = a.diagonal();
    if let Some(i) = d.iter().position(|v| *v == 0.0 || !v.is_finite()) {
        return Err(IsphError::Singular(format!(
            "zero diagonal entry in row {i}; Jacobi preconditioner undefined"
        )));
    }
    Ok(Some(d.iter().map(|v| 1.0 / v).collect()))
}

fn apply(pre: &Option<Vec<f64>>, r: &[f64], z: &mut [f64]) {
    match pre {
        Some(inv) => z.iter_mut().zip(r).zip(inv).for_each(|((z, r), d)| *z = r * d),
        None => z.copy_from_slice(r),
    }
}

fn check_square(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if a.n_rows() != a.n_cols() || a.n_rows() != b.len() {
        return Err(IsphError::Usage(format!(
            "{}x{} matrix with right-hand side of length {}",
            a.n_rows(),
            a.n_cols(),
            b.len()
        )));
    }
    Ok(())
}

/// Preconditioned conjugate gradients from a zero initial guess.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], settings: &IterativeSettings) -> Result<IterativeOutcome> {
    check_square(a, b)?;
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(IterativeOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let pre = inverse_diagonal(a, settings.jacobi)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    apply(&pre, &r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut history = vec![1.0];
    for it in 1..=settings.max_iter(n) {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(IsphError::Singular(format!(
                "conjugate gradients broke down at iteration {it} (p·Ap = {pap:e}); matrix is not positive definite"
            )));
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= settings.rel_tol {
            return Ok(IterativeOutcome {
                x,
                iterations: it,
                residual_history: history,
            });
        }
        apply(&pre, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(IsphError::SolverDiverged {
        iterations: settings.max_iter(n),
        residual_history: history,
    })
}

/// Right-preconditioned BiCGSTAB from a zero initial guess.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], settings: &IterativeSettings) -> Result<IterativeOutcome> {
    check_square(a, b)?;
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(IterativeOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual_history: vec![0.0],
        });
    }
    let pre = inverse_diagonal(a, settings.jacobi)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = vec![1.0];
    for it in 1..=settings.max_iter(n) {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(IsphError::SolverDiverged {
                iterations: it,
                residual_history: history,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        apply(&pre, &p, &mut p_hat);
        a.matvec_into(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return Err(IsphError::SolverDiverged {
                iterations: it,
                residual_history: history,
            });
        }
        alpha = rho / rv;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        if norm(&s) / bnorm <= settings.rel_tol {
            for k in 0..n {
                x[k] += alpha * p_hat[k];
            }
            history.push(norm(&s) / bnorm);
            return Ok(IterativeOutcome {
                x,
                iterations: it,
                residual_history: history,
            });
        }
        apply(&pre, &s, &mut s_hat);
        a.matvec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * p_hat[k] + omega * s_hat[k];
            r[k] = s[k] - omega * t[k];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= settings.rel_tol {
            return Ok(IterativeOutcome {
                x,
                iterations: it,
                residual_history: history,
            });
        }
    }
    Err(IsphError::SolverDiverged {
        iterations: settings.max_iter(n),
        residual_history: history,
    })
}
