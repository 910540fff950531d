//! Reference weight functions `w`, their radial derivatives, and the scaled kernels
//! `w_h(r) = h^{-d} w(r / h)`.
//!
//! Every kernel here is radial with compact support `[0, r0)`. The two B-splines carry their
//! closed-form normalization constants; tabulated kernels are interpolated by a clamped C²
//! cubic spline and checked against the admissibility conditions when they are loaded.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{IsphError, Result};
use crate::quadrature;
use crate::Vector;

/// Absolute tolerance for the radial quadratures below.
const QUADRATURE_TOL: f64 = 1e-8;

/// Tolerance of the unit-integral check applied to tabulated kernels.
const UNIT_INTEGRAL_TOL: f64 = 1e-6;

/// Tolerance on the curvature mismatch at the support end of a tabulated kernel, relative
/// to the largest knot curvature.
const C2_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    CubicBSpline,
    QuinticBSpline,
    Custom(Arc<TabulatedKernel>),
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::CubicBSpline => f.write_str("cubic"),
            KernelKind::QuinticBSpline => f.write_str("quintic"),
            KernelKind::Custom(_) => f.write_str("custom"),
        }
    }
}

/// A reference weight function together with dimension and smoothing length.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    kind: KernelKind,
    dim: usize,
    h: f64,
    r0: f64,
    norm: f64,
}

fn check_dim_h(dim: usize, h: f64) -> Result<()> {
    if dim != 2 && dim != 3 {
        return Err(IsphError::InvalidKernel(format!(
            "dimension must be 2 or 3, got {dim}"
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(IsphError::InvalidKernel(format!(
            "smoothing length must be positive, got {h}"
        )));
    }
    Ok(())
}

/// Surface measure of the unit sphere in `R^d`.
fn sphere_area(dim: usize) -> f64 {
    match dim {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension validated at construction"),
    }
}

impl KernelSpec {
    pub fn cubic(dim: usize, h: f64) -> Result<Self> {
        check_dim_h(dim, h)?;
        let norm = if dim == 2 { 10.0 / (7.0 * PI) } else { 1.0 / PI };
        Ok(Self {
            kind: KernelKind::CubicBSpline,
            dim,
            h,
            r0: 2.0,
            norm,
        })
    }

    pub fn quintic(dim: usize, h: f64) -> Result<Self> {
        check_dim_h(dim, h)?;
        let norm = if dim == 2 {
            7.0 / (478.0 * PI)
        } else {
            1.0 / (120.0 * PI)
        };
        Ok(Self {
            kind: KernelKind::QuinticBSpline,
            dim,
            h,
            r0: 3.0,
            norm,
        })
    }

    /// Builds a kernel from a validated table. The table values are the reference weight
    /// function itself unless `table.normalize` is set, in which case the normalization
    /// constant is computed by quadrature.
    pub fn custom(table: TabulatedKernel, dim: usize, h: f64) -> Result<Self> {
        check_dim_h(dim, h)?;
        let r0 = table.support_radius();
        let normalize = table.normalize;
        let mut spec = Self {
            kind: KernelKind::Custom(Arc::new(table)),
            dim,
            h,
            r0,
            norm: 1.0,
        };
        let mass = spec.normalization_integral()?;
        if normalize {
            spec.norm = 1.0 / mass;
        } else if (mass - 1.0).abs() > UNIT_INTEGRAL_TOL {
            return Err(IsphError::InvalidKernel(format!(
                "tabulated kernel integrates to {mass} in {dim}D (expected 1 within {UNIT_INTEGRAL_TOL:e})"
            )));
        }
        Ok(spec)
    }

    pub fn from_table_file(path: &Path, dim: usize, h: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: KernelTable = serde_json::from_str(&text)?;
        Self::custom(TabulatedKernel::new(table)?, dim, h)
    }

    /// Same reference function and dimension, new smoothing length.
    pub fn with_smoothing_length(&self, h: f64) -> Result<Self> {
        check_dim_h(self.dim, h)?;
        Ok(Self { h, ..self.clone() })
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn smoothing_length(&self) -> f64 {
        self.h
    }

    /// Dimensionless support radius `r0` of the reference function.
    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn normalization(&self) -> f64 {
        self.norm
    }

    /// Interaction cut-off `r0 * h`.
    pub fn support_radius(&self) -> f64 {
        self.r0 * self.h
    }

    /// Reference function `w(q)`.
    pub fn w(&self, q: f64) -> f64 {
        self.norm * self.shape(q)
    }

    /// Reference derivative `ẇ(q)`.
    pub fn dw(&self, q: f64) -> f64 {
        self.norm * self.shape_derivative(q)
    }

    /// Reference second derivative (right limit at knots).
    pub fn d2w(&self, q: f64) -> f64 {
        self.norm * self.shape_second_derivative(q)
    }

    fn shape(&self, q: f64) -> f64 {
        match &self.kind {
            KernelKind::CubicBSpline => {
                if q < 1.0 {
                    1.0 - 1.5 * q * q + 0.75 * q * q * q
                } else if q < 2.0 {
                    let t = 2.0 - q;
                    0.25 * t * t * t
                } else {
                    0.0
                }
            }
            KernelKind::QuinticBSpline => {
                if q >= 3.0 {
                    return 0.0;
                }
                let mut v = (3.0 - q).powi(5);
                if q < 2.0 {
                    v -= 6.0 * (2.0 - q).powi(5);
                }
                if q < 1.0 {
                    v += 15.0 * (1.0 - q).powi(5);
                }
                v
            }
            KernelKind::Custom(t) => t.value(q),
        }
    }

    fn shape_derivative(&self, q: f64) -> f64 {
        match &self.kind {
            KernelKind::CubicBSpline => {
                if q < 1.0 {
                    -3.0 * q + 2.25 * q * q
                } else if q < 2.0 {
                    let t = 2.0 - q;
                    -0.75 * t * t
                } else {
                    0.0
                }
            }
            KernelKind::QuinticBSpline => {
                if q >= 3.0 {
                    return 0.0;
                }
                let mut v = -5.0 * (3.0 - q).powi(4);
                if q < 2.0 {
                    v += 30.0 * (2.0 - q).powi(4);
                }
                if q < 1.0 {
                    v -= 75.0 * (1.0 - q).powi(4);
                }
                v
            }
            KernelKind::Custom(t) => t.derivative(q),
        }
    }

    fn shape_second_derivative(&self, q: f64) -> f64 {
        match &self.kind {
            KernelKind::CubicBSpline => {
                if q < 1.0 {
                    -3.0 + 4.5 * q
                } else if q < 2.0 {
                    1.5 * (2.0 - q)
                } else {
                    0.0
                }
            }
            KernelKind::QuinticBSpline => {
                if q >= 3.0 {
                    return 0.0;
                }
                let mut v = 20.0 * (3.0 - q).powi(3);
                if q < 2.0 {
                    v -= 120.0 * (2.0 - q).powi(3);
                }
                if q < 1.0 {
                    v += 300.0 * (1.0 - q).powi(3);
                }
                v
            }
            KernelKind::Custom(t) => t.second_derivative(q),
        }
    }

    fn check_radius(r: f64) -> Result<()> {
        if r.is_nan() || r < 0.0 {
            return Err(IsphError::Domain(format!(
                "kernel radius must be non-negative, got {r}"
            )));
        }
        Ok(())
    }

    /// `w_h(r) = h^{-d} w(r / h)`.
    pub fn eval_wh(&self, r: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.wh(r))
    }

    /// `d w_h / dr = h^{-(d+1)} ẇ(r / h)`.
    pub fn eval_wh_derivative(&self, r: f64) -> Result<f64> {
        Self::check_radius(r)?;
        Ok(self.dwh(r))
    }

    /// Unchecked `w_h`, for callers that already hold a valid distance.
    #[inline]
    pub fn wh(&self, r: f64) -> f64 {
        (self.norm * self.shape(r / self.h)) / self.h.powi(self.dim as i32)
    }

    /// Unchecked radial derivative of `w_h`.
    #[inline]
    pub fn dwh(&self, r: f64) -> f64 {
        (self.norm * self.shape_derivative(r / self.h)) / self.h.powi(self.dim as i32 + 1)
    }

    /// `∇w_h(|x|) = (x / |x|) ẇ_h(|x|)`; the zero vector at the origin.
    pub fn eval_grad_wh(&self, x: &Vector) -> Result<Vector> {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(IsphError::Domain(format!(
                "non-finite displacement {:?}",
                x.as_slice()
            )));
        }
        Ok(self.grad_wh(x))
    }

    #[inline]
    pub fn grad_wh(&self, x: &Vector) -> Vector {
        let r = x.norm();
        if r == 0.0 || r >= self.support_radius() {
            return Vector::zeros();
        }
        x * (self.dwh(r) / r)
    }

    /// Knots of the piecewise representation in reference coordinates, `0 ..= r0`.
    fn knots(&self) -> Vec<f64> {
        match &self.kind {
            KernelKind::CubicBSpline => vec![0.0, 1.0, 2.0],
            KernelKind::QuinticBSpline => vec![0.0, 1.0, 2.0, 3.0],
            KernelKind::Custom(t) => t.r.clone(),
        }
    }

    /// `∫_{R^d} w(|x|) dx`, by radial quadrature.
    pub fn normalization_integral(&self) -> Result<f64> {
        let d = self.dim as i32;
        let area = sphere_area(self.dim);
        quadrature::integrate_piecewise(
            |q| area * self.w(q) * q.powi(d - 1),
            &self.knots(),
            QUADRATURE_TOL,
        )
    }

    /// Same integral taken in physical coordinates for this `h`.
    pub fn scaled_normalization_integral(&self) -> Result<f64> {
        let d = self.dim as i32;
        let area = sphere_area(self.dim);
        let breaks: Vec<f64> = self.knots().iter().map(|q| q * self.h).collect();
        let tol = QUADRATURE_TOL * self.h.powi(d).recip().max(1.0);
        quadrature::integrate_piecewise(|r| area * self.wh(r) * r.powi(d - 1), &breaks, tol)
    }

    /// `∫_{R^d} |x| |ẇ_h(|x|)| dx`, which equals `d` for every admissible kernel.
    pub fn moment_integral(&self) -> Result<f64> {
        let d = self.dim as i32;
        let area = sphere_area(self.dim);
        quadrature::integrate_piecewise(
            |q| area * self.dw(q).abs() * q.powi(d),
            &self.knots(),
            QUADRATURE_TOL,
        )
    }

    /// `α̂ = ½ (∫_{R^d} |ẇ(|y|)| / |y| dy)^{-1}`, the kernel's viscous time-step coefficient:
    /// on a dense regular distribution the admissible step is about `δ α̂ h² / ν`.
    pub fn estimate_alpha_hat(&self) -> Result<f64> {
        let d = self.dim as i32;
        let area = sphere_area(self.dim);
        let integral = quadrature::integrate_piecewise(
            |q| area * self.dw(q).abs() * q.powi(d - 2),
            &self.knots(),
            QUADRATURE_TOL,
        )?;
        if !(integral.is_finite() && integral > 0.0) {
            return Err(IsphError::Numeric(format!(
                "alpha-hat integral is {integral}"
            )));
        }
        Ok(0.5 / integral)
    }
}

/// On-disk form of a tabulated reference weight function.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelTable {
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    #[serde(default)]
    pub normalize: bool,
}

/// Clamped cubic spline through `(r_i, w_i)` with `w'(0) = w'(r0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedKernel {
    r: Vec<f64>,
    w: Vec<f64>,
    // Second derivatives at the knots.
    m: Vec<f64>,
    normalize: bool,
}

impl TabulatedKernel {
    pub fn new(table: KernelTable) -> Result<Self> {
        let KernelTable { r, w, normalize } = table;
        let n = r.len();
        if n < 3 || w.len() != n {
            return Err(IsphError::InvalidKernel(format!(
                "table needs at least 3 matching (r, w) pairs, got {} and {}",
                r.len(),
                w.len()
            )));
        }
        if r[0] != 0.0 {
            return Err(IsphError::InvalidKernel("table must start at r = 0".into()));
        }
        if r.windows(2).any(|p| !(p[1] > p[0])) || r.iter().any(|v| !v.is_finite()) {
            return Err(IsphError::InvalidKernel(
                "table radii must be finite and strictly increasing".into(),
            ));
        }
        if w[n - 1] != 0.0 {
            return Err(IsphError::InvalidKernel(
                "last tabulated value must be 0 (it defines the support radius)".into(),
            ));
        }
        if w[..n - 1].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(IsphError::InvalidKernel(
                "tabulated values must be positive inside the support".into(),
            ));
        }
        let m = clamped_second_derivatives(&r, &w);
        let kernel = Self { r, w, m, normalize };
        kernel.validate_shape()?;
        Ok(kernel)
    }

    pub fn support_radius(&self) -> f64 {
        *self.r.last().expect("validated non-empty")
    }

    fn segment(&self, q: f64) -> Option<usize> {
        if q >= self.support_radius() {
            return None;
        }
        let i = self.r.partition_point(|&x| x <= q);
        Some(i.saturating_sub(1).min(self.r.len() - 2))
    }

    fn value(&self, q: f64) -> f64 {
        let Some(i) = self.segment(q) else { return 0.0 };
        let (h, t) = (self.r[i + 1] - self.r[i], q - self.r[i]);
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let slope = (self.w[i + 1] - self.w[i]) / h - h * (2.0 * mi + mj) / 6.0;
        self.w[i] + t * (slope + t * (0.5 * mi + t * (mj - mi) / (6.0 * h)))
    }

    fn derivative(&self, q: f64) -> f64 {
        let Some(i) = self.segment(q) else { return 0.0 };
        let (h, t) = (self.r[i + 1] - self.r[i], q - self.r[i]);
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let slope = (self.w[i + 1] - self.w[i]) / h - h * (2.0 * mi + mj) / 6.0;
        slope + t * (mi + t * (mj - mi) / (2.0 * h))
    }

    fn second_derivative(&self, q: f64) -> f64 {
        let Some(i) = self.segment(q) else { return 0.0 };
        let (h, t) = (self.r[i + 1] - self.r[i], q - self.r[i]);
        self.m[i] + (self.m[i + 1] - self.m[i]) * t / h
    }

    /// Positivity, strict monotone decrease and curvature continuity at the support end,
    /// sampled densely on every spline segment.
    fn validate_shape(&self) -> Result<()> {
        const SAMPLES: usize = 64;
        let r0 = self.support_radius();
        for seg in self.r.windows(2) {
            for s in 1..=SAMPLES {
                let q = seg[0] + (seg[1] - seg[0]) * s as f64 / SAMPLES as f64;
                if q >= r0 {
                    continue;
                }
                if !(self.value(q) > 0.0) {
                    return Err(IsphError::InvalidKernel(format!(
                        "interpolated kernel is not positive at r = {q}"
                    )));
                }
                if !(self.derivative(q) < 0.0) {
                    return Err(IsphError::InvalidKernel(format!(
                        "interpolated kernel is not strictly decreasing at r = {q}"
                    )));
                }
            }
        }
        let scale = self.m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let end = self.m[self.m.len() - 1].abs();
        if end > C2_TOL * scale {
            return Err(IsphError::InvalidKernel(format!(
                "kernel is not C² at the support radius: w''(r0-) = {end:e}"
            )));
        }
        Ok(())
    }
}

/// Knot curvatures of the clamped spline with zero end slopes (Thomas algorithm).
fn clamped_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    diag[0] = 2.0 * h[0];
    sup[0] = h[0];
    rhs[0] = 6.0 * (y[1] - y[0]) / h[0];
    for i in 1..n - 1 {
        sub[i] = h[i - 1];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i];
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    sub[n - 1] = h[n - 2];
    diag[n - 1] = 2.0 * h[n - 2];
    rhs[n - 1] = -6.0 * (y[n - 1] - y[n - 2]) / h[n - 2];

    for i in 1..n {
        let f = sub[i] / diag[i - 1];
        diag[i] -= f * sup[i - 1];
        rhs[i] -= f * rhs[i - 1];
    }
    let mut m = vec![0.0; n];
    m[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
    }
    m
}
