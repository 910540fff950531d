//! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

use crate::error::{IsphError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 48;

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = half * XGK[k];
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Integrates `f` over `[a, b]` to the given absolute tolerance by recursive bisection.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(IsphError::Domain(format!("non-finite interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let mut stack = vec![(a, b, abs_tol, 0u32)];
    let mut total = 0.0;
    while let Some((lo, hi, tol, depth)) = stack.pop() {
        let (value, err) = gk15(&f, lo, hi);
        if !value.is_finite() {
            return Err(IsphError::Numeric(format!(
                "integrand not finite on [{lo}, {hi}]"
            )));
        }
        if err <= tol || err <= 1e-15 * value.abs() {
            total += value;
        } else if depth >= MAX_DEPTH {
            return Err(IsphError::Numeric(format!(
                "quadrature did not converge on [{lo}, {hi}] (error estimate {err:.3e})"
            )));
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * tol, depth + 1));
            stack.push((mid, hi, 0.5 * tol, depth + 1));
        }
    }
    Ok(total)
}

/// Integrates over consecutive breakpoints, splitting the tolerance evenly.
pub fn integrate_piecewise<F: Fn(f64) -> f64>(f: F, breaks: &[f64], abs_tol: f64) -> Result<f64> {
    if breaks.len() < 2 {
        return Ok(0.0);
    }
    let tol = abs_tol / (breaks.len() - 1) as f64;
    breaks
        .windows(2)
        .map(|w| integrate(&f, w[0], w[1], tol))
        .sum()
}
