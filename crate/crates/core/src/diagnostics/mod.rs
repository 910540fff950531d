//! Per-step norm bookkeeping and the stability-bound monitor.

mod lemmas;

pub use lemmas::{random_state, verify_lemmas, LemmaCounts, LemmaFailure, LemmaReport, TrialKind};

use serde::{Deserialize, Serialize};

use crate::conditions::ConditionsReport;
use crate::error::{IsphError, Result};

/// Relative slack of the bound flag: `LHS <= RHS (1 + 1e-9)`.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theorem {
    /// Implicit scheme: `‖u‖² <= c (‖u⁰‖² + Σ Δt |f|₋₁²)`.
    #[serde(rename = "2")]
    Two,
    /// Semi-implicit scheme: adds `Σ Δt² ‖f‖²` inside the bracket.
    #[serde(rename = "3")]
    Three,
}

impl std::str::FromStr for Theorem {
    type Err = IsphError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(Theorem::Two),
            "3" => Ok(Theorem::Three),
            other => Err(IsphError::Usage(format!("theorem must be 2 or 3, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Theorem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Theorem::Two => "2",
            Theorem::Three => "3",
        })
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(IsphError::Usage(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn growth(t_end: f64, c0: f64) -> f64 {
    c0 * (2.0 + c0 * t_end) * t_end
}

/// `exp(c0(2 + c0 T)T) · max{1, (1 + c0(2 + c0 T)T) / (2ν)}`.
pub fn theorem2_constant(t_end: f64, nu: f64, c0: f64) -> Result<f64> {
    check_positive("T", t_end)?;
    check_positive("nu", nu)?;
    if !(c0 >= 0.0 && c0.is_finite()) {
        return Err(IsphError::Usage(format!("c0 must be finite and >= 0, got {c0}")));
    }
    let g = growth(t_end, c0);
    Ok(g.exp() * f64::max(1.0, (1.0 + g) / (2.0 * nu)))
}

/// `exp(c0(2 + c0 T)T) · max{1, (1 + g)(1 + δ)/(1 − δ), (1 + g)/(ν(1 − δ))}`.
pub fn theorem3_constant(t_end: f64, nu: f64, c0: f64, delta: f64) -> Result<f64> {
    check_positive("T", t_end)?;
    check_positive("nu", nu)?;
    if !(c0 >= 0.0 && c0.is_finite()) {
        return Err(IsphError::Usage(format!("c0 must be finite and >= 0, got {c0}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(IsphError::Usage(format!("delta must lie in (0, 1), got {delta}")));
    }
    let g = growth(t_end, c0);
    let a = (1.0 + g) * (1.0 + delta) / (1.0 - delta);
    let b = (1.0 + g) / (nu * (1.0 - delta));
    Ok(g.exp() * 1.0f64.max(a).max(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub theorem: Theorem,
    pub c: f64,
    pub lhs: f64,
    #[serde(with = "crate::floats")]
    pub rhs: f64,
    pub ok: bool,
    /// The right-hand side is infinite, so the flag holds trivially.
    pub vacuous: bool,
    /// The theorem covers this run (two dimensions); otherwise informational.
    pub proven: bool,
}

/// Accumulated right-hand-side ingredients up to a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub u0_sq: f64,
    #[serde(with = "crate::floats")]
    pub sum_dt_f_hm1_sq: f64,
    pub sum_dt2_f_l2_sq: f64,
}

pub fn evaluate_bound(theorem: Theorem, c: f64, lhs: f64, inputs: &BoundInputs, dim: usize) -> BoundCheck {
    let bracket = match theorem {
        Theorem::Two => inputs.u0_sq + inputs.sum_dt_f_hm1_sq,
        Theorem::Three => inputs.u0_sq + inputs.sum_dt2_f_l2_sq + inputs.sum_dt_f_hm1_sq,
    };
    let rhs = c * bracket;
    BoundCheck {
        theorem,
        c,
        lhs,
        rhs,
        ok: lhs <= rhs + BOUND_SLACK * rhs,
        vacuous: rhs.is_infinite(),
        proven: dim == 2,
    }
}

/// Additional per-step inequalities from the proof chains, evaluated with measured constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainChecks {
    pub u_star_l2_sq: f64,
    /// `c̃ = max(0, (S − d)/Δt)` at the step.
    pub c_tilde: f64,
    /// `‖u^{k+1}‖² <= {1 + c̃(2 + c̃Δt)Δt} ‖u*‖²` (slack 1e-10).
    pub correction_growth_ok: bool,
    /// Implicit only: `‖u*‖² <= ‖u^k‖² + Δt/(2ν) |f|₋₁²` (slack 1e-9).
    pub prediction_energy_ok: Option<bool>,
    /// Semi-implicit only: `(Δtν/2δ̃)‖Lu^k‖² − |u^k|₁²` divided by `|u^k|₁²`.
    pub laplacian_margin: Option<f64>,
}

/// One row of `steps.csv`. Row 0 is the initial state; row `k` describes the step
/// from `k − 1` to `k`, with the audit and forcing taken at `x^{k−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub u_l2: f64,
    pub u_h1: f64,
    pub u_l2_sq: f64,
    pub prediction_iters: usize,
    pub poisson_iters: usize,
    pub connectivity_ok: Option<bool>,
    pub semireg_s: Option<f64>,
    #[serde(with = "crate::floats::option")]
    pub dt_limit: Option<f64>,
    #[serde(with = "crate::floats::option")]
    pub dt_admissible: Option<f64>,
    #[serde(with = "crate::floats::option")]
    pub f_hm1_sq: Option<f64>,
    pub f_l2_sq: Option<f64>,
    pub inputs: BoundInputs,
    pub bound: Option<BoundCheck>,
    /// Particles outside the scenario domain box.
    pub out_of_bounds: usize,
    pub volume_solve_ok: Option<bool>,
    pub min_volume: f64,
    pub semireg_residual: Option<f64>,
    pub chain: Option<ChainChecks>,
    pub report: Option<ConditionsReport>,
}

/// What a bound recomputation needs to know about the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scheme: String,
    pub theorem: Theorem,
    pub dim: usize,
    pub nu: f64,
    pub end_time: f64,
    pub c0: Option<f64>,
    pub delta: Option<f64>,
}

/// Minimal per-step record a bound check needs (what `steps.csv` stores).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub k: usize,
    pub dt: f64,
    pub u_l2_sq: f64,
    pub semireg_s: Option<f64>,
    pub dt_limit: Option<f64>,
    pub f_hm1_sq: Option<f64>,
    pub f_l2_sq: Option<f64>,
}

impl From<&StepDiagnostics> for BoundRow {
    fn from(d: &StepDiagnostics) -> Self {
        Self {
            k: d.k,
            dt: d.dt,
            u_l2_sq: d.u_l2_sq,
            semireg_s: d.semireg_s,
            dt_limit: d.dt_limit,
            f_hm1_sq: d.f_hm1_sq,
            f_l2_sq: d.f_l2_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub measured_c0: bool,
    pub c0: f64,
    pub delta: Option<f64>,
    pub end_time: f64,
    pub c: f64,
    pub proven: bool,
    pub all_ok: bool,
    pub vacuous_steps: usize,
    pub violations: Vec<usize>,
    pub flags: Vec<BoundCheck>,
    pub gronwall: GronwallCheck,
}

/// `max_k max(0, (S^k − d)/Δt^k)` over the step rows.
pub fn measured_c0(rows: &[BoundRow], dim: usize) -> f64 {
    rows.iter()
        .filter(|r| r.k > 0)
        .filter_map(|r| r.semireg_s.map(|s| ((s - dim as f64) / r.dt).max(0.0)))
        .fold(0.0, f64::max)
}

/// `max_k Δt^k / dt_limit^k`, the smallest δ for which the time-step condition held.
pub fn measured_delta(rows: &[BoundRow]) -> f64 {
    rows.iter()
        .filter(|r| r.k > 0)
        .filter_map(|r| r.dt_limit.map(|l| if l.is_finite() { r.dt / l } else { 0.0 }))
        .fold(0.0, f64::max)
}

/// Running right-hand-side inputs after each row.
pub fn accumulate(rows: &[BoundRow]) -> Vec<BoundInputs> {
    let u0 = rows.first().map_or(0.0, |r| r.u_l2_sq);
    let mut acc = BoundInputs {
        u0_sq: u0,
        ..Default::default()
    };
    rows.iter()
        .map(|r| {
            if r.k > 0 {
                acc.sum_dt_f_hm1_sq += r.dt * r.f_hm1_sq.unwrap_or(0.0);
                acc.sum_dt2_f_l2_sq += r.dt * r.dt * r.f_l2_sq.unwrap_or(0.0);
            }
            acc
        })
        .collect()
}

/// Theorem constant for the given run metadata; `delta` is needed for Theorem 3.
pub fn theorem_constant(theorem: Theorem, end_time: f64, nu: f64, c0: f64, delta: Option<f64>) -> Result<f64> {
    match theorem {
        Theorem::Two => theorem2_constant(end_time, nu, c0),
        Theorem::Three => {
            let d = delta.ok_or_else(|| IsphError::Usage("Theorem 3 needs delta".into()))?;
            theorem3_constant(end_time, nu, c0, d)
        }
    }
}

/// Recomputes the per-step bound flags of a finished run.
///
/// `c0` is the configured constant unless `use_measured_c0` is set or none was configured,
/// in which case the measured value is used. For Theorem 3 without a configured δ the
/// measured `max Δt/dt_limit` is used and must be below one.
pub fn check_stability_bound(
    rows: &[BoundRow],
    meta: &RunMeta,
    theorem: Theorem,
    use_measured_c0: bool,
) -> Result<BoundReport> {
    if theorem != meta.theorem {
        return Err(IsphError::Usage(format!(
            "Theorem {theorem} does not cover the {} scheme (use Theorem {})",
            meta.scheme, meta.theorem
        )));
    }
    if rows.is_empty() {
        return Err(IsphError::Usage("trajectory has no rows".into()));
    }
    let measured = use_measured_c0 || meta.c0.is_none();
    let c0 = if measured { measured_c0(rows, meta.dim) } else { meta.c0.unwrap_or(0.0) };
    let delta = match theorem {
        Theorem::Two => None,
        Theorem::Three => Some(match meta.delta {
            Some(d) => d,
            None => {
                let d = measured_delta(rows);
                if !(d < 1.0) {
                    return Err(IsphError::Usage(format!(
                        "time-step condition fails (measured delta {d}); Theorem 3 does not apply"
                    )));
                }
                d.max(f64::MIN_POSITIVE)
            }
        }),
    };
    let end_time = meta.end_time;
    let c = theorem_constant(theorem, end_time, meta.nu, c0, delta)?;
    let inputs = accumulate(rows);
    let flags: Vec<BoundCheck> = rows
        .iter()
        .zip(&inputs)
        .skip(1)
        .map(|(r, inp)| evaluate_bound(theorem, c, r.u_l2_sq, inp, meta.dim))
        .collect();
    let violations: Vec<usize> = flags
        .iter()
        .zip(rows.iter().skip(1))
        .filter(|(f, _)| !f.ok)
        .map(|(_, r)| r.k)
        .collect();
    let gronwall = gronwall_from_rows(rows, theorem, meta.nu, c0, delta, end_time);
    Ok(BoundReport {
        theorem,
        measured_c0: measured,
        c0,
        delta,
        end_time,
        c,
        proven: meta.dim == 2,
        all_ok: violations.is_empty(),
        vacuous_steps: flags.iter().filter(|f| f.vacuous).count(),
        violations,
        flags,
        gronwall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallCheck {
    /// Per `k >= 1`: `a_k <= a_0 + c + Σ_{j<k} a_j b_j`.
    pub hypothesis: Vec<bool>,
    /// Per `k >= 1`: `a_k <= (a_0 + c) Π_{j<k} (1 + b_j)`.
    pub conclusion: Vec<bool>,
    /// The conclusion holds at every `k` whose hypotheses hold up to `k`.
    pub consistent: bool,
}

/// Discrete Grönwall inequality evaluated on recorded sequences, with slack `1e-12`
/// relative to the right-hand side.
pub fn gronwall_check(a: &[f64], b: &[f64], c: f64) -> GronwallCheck {
    let tol = 1e-12;
    let mut hypothesis = Vec::new();
    let mut conclusion = Vec::new();
    if a.is_empty() {
        return GronwallCheck {
            hypothesis,
            conclusion,
            consistent: true,
        };
    }
    let base = a[0] + c;
    let mut sum = 0.0;
    let mut prod = 1.0;
    let mut consistent = true;
    let mut prefix_ok = true;
    for k in 1..a.len() {
        sum += a[k - 1] * b[k - 1];
        prod *= 1.0 + b[k - 1];
        let hyp_rhs = base + sum;
        let con_rhs = base * prod;
        let h = a[k] <= hyp_rhs * (1.0 + tol);
        let g = a[k] <= con_rhs * (1.0 + tol);
        prefix_ok &= h;
        if prefix_ok && !g {
            consistent = false;
        }
        hypothesis.push(h);
        conclusion.push(g);
    }
    GronwallCheck {
        hypothesis,
        conclusion,
        consistent,
    }
}

/// Grönwall data of the proof applied to a run: `a_k = ‖u^k‖²`, `b_j = c0(2 + c0 T)Δt_j`,
/// and `c` the accumulated forcing term of the matching theorem.
pub fn gronwall_from_rows(
    rows: &[BoundRow],
    theorem: Theorem,
    nu: f64,
    c0: f64,
    delta: Option<f64>,
    end_time: f64,
) -> GronwallCheck {
    let a: Vec<f64> = rows.iter().map(|r| r.u_l2_sq).collect();
    let b: Vec<f64> = rows.iter().skip(1).map(|r| c0 * (2.0 + c0 * end_time) * r.dt).collect();
    let inputs = accumulate(rows);
    let last = inputs.last().copied().unwrap_or_default();
    let g = 1.0 + growth(end_time, c0);
    let c = match theorem {
        Theorem::Two => g / (2.0 * nu) * last.sum_dt_f_hm1_sq,
        Theorem::Three => {
            let d = delta.unwrap_or(0.0);
            g / (1.0 - d) * ((1.0 + d) * last.sum_dt2_f_l2_sq + last.sum_dt_f_hm1_sq / nu)
        }
    };
    gronwall_check(&a, &b, c)
}
