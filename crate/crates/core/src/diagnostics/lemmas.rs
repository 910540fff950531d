//! Randomized verification of the discrete norm lemmas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{connectivity, measure_semi_regularity};
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::neighbors::Interactions;
use crate::operators::{IndexSet, Operators, ScalarField, TrialSpace, VectorField};
use crate::state::{ParticleState, Role, StateRecord};
use crate::Vector;

/// Relative tolerance of the two summation identities.
const IDENTITY_TOL: f64 = 1e-12;
/// Relative slack of the inequalities with exactly evaluated constants.
const INEQUALITY_TOL: f64 = 1e-12;
/// Relative slack when the H⁻¹ seminorm (a linear solve) is involved.
const DUAL_TOL: f64 = 1e-9;
/// At most this many failures are kept in a report.
const MAX_FAILURES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaCounts {
    pub checked: usize,
    pub violations: usize,
    /// Largest relative error (identities) or ratio LHS/RHS (inequalities) seen.
    pub worst: f64,
}

impl LemmaCounts {
    fn merge(&mut self, other: &LemmaCounts) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.worst = self.worst.max(other.worst);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaFailure {
    pub trial: usize,
    pub seed: u64,
    pub kind: TrialKind,
    pub lemma: u8,
    pub detail: String,
    pub kernel: String,
    pub smoothing_length: f64,
    pub index_set: Vec<usize>,
    pub state: StateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub connected_trials: usize,
    pub disconnected_trials: usize,
    pub lemma1: LemmaCounts,
    pub lemma2: LemmaCounts,
    pub lemma3: LemmaCounts,
    pub lemma4: LemmaCounts,
    pub lemma5: LemmaCounts,
    pub failures: Vec<LemmaFailure>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed derived from the master seed.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix64(master ^ splitmix64(trial as u64))
}

fn jittered_block(
    rng: &mut ChaCha8Rng,
    nx: usize,
    ny: usize,
    origin: Vector,
    s: f64,
    with_wall: bool,
    pos: &mut Vec<Vector>,
    roles: &mut Vec<Role>,
) {
    for j in 0..ny {
        for i in 0..nx {
            let jitter = Vector::new(rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), 0.0) * s;
            pos.push(origin + Vector::new(i as f64 * s, j as f64 * s, 0.0) + jitter);
            roles.push(if with_wall && j == 0 {
                Role::Wall
            } else if j == ny - 1 {
                Role::Surface
            } else {
                Role::Fluid
            });
        }
    }
}

/// A random two-dimensional state with `5 <= N <= 60` and a random kernel. Connected
/// states are h-connected jittered lattices; disconnected ones add a detached cluster
/// without wall particles.
pub fn random_state(rng: &mut ChaCha8Rng, kind: TrialKind) -> (ParticleState, KernelSpec) {
    let s = 1.0;
    loop {
        let mut pos = Vec::new();
        let mut roles = Vec::new();
        let budget = match kind {
            TrialKind::Connected => 60,
            TrialKind::Disconnected => 52,
        };
        let nx = rng.random_range(2..=10usize);
        let ny = rng.random_range(3..=(budget / nx).max(3));
        jittered_block(rng, nx, ny, Vector::zeros(), s, true, &mut pos, &mut roles);
        if kind == TrialKind::Disconnected {
            let mx = rng.random_range(1..=4usize);
            let my = rng.random_range(2..=(8 / mx).max(2));
            let origin = Vector::new(100.0 * s, rng.random_range(0.0..10.0), 0.0);
            jittered_block(rng, mx, my, origin, s, false, &mut pos, &mut roles);
        }
        let n = pos.len();
        if !(5..=60).contains(&n) {
            continue;
        }
        let volumes: Vec<f64> = (0..n).map(|_| s * s * rng.random_range(0.5..1.5)).collect();
        let kernel = if rng.random_bool(0.5) {
            KernelSpec::cubic(2, s * rng.random_range(0.85..1.3))
        } else {
            KernelSpec::quintic(2, s * rng.random_range(0.6..1.0))
        }
        .expect("positive smoothing length");
        let Ok(state) = ParticleState::new(2, pos, vec![Vector::zeros(); n], volumes, roles) else {
            continue;
        };
        let Ok(inter) = state.interactions(&kernel) else { continue };
        let ok = connectivity(&state, &inter).ok;
        if ok == (kind == TrialKind::Connected) {
            return (state, kernel);
        }
    }
}

fn random_vector(rng: &mut ChaCha8Rng, scale: f64) -> Vector {
    Vector::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0) * scale
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize) -> IndexSet {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    if !mask.iter().any(|m| *m) {
        mask[rng.random_range(0..n)] = true;
    }
    IndexSet::from_mask(mask)
}

struct Trial<'a> {
    counts: [LemmaCounts; 5],
    failures: Vec<(u8, String, Vec<usize>)>,
    ops: Operators<'a>,
    inter: &'a Interactions,
}

impl Trial<'_> {
    fn identity(&mut self, lemma: u8, label: &str, a: f64, b: f64, scale: f64, index: &IndexSet) {
        let denom = a.abs().max(b.abs()).max(scale);
        let err = if denom > 0.0 { (a - b).abs() / denom } else { 0.0 };
        self.record(lemma, err <= IDENTITY_TOL, err, || {
            format!("{label}: {a:e} vs {b:e} (relative error {err:e})")
        }, index);
    }

    fn inequality(&mut self, lemma: u8, label: &str, lhs: f64, rhs: f64, tol: f64, index: &IndexSet) {
        let ok = lhs <= rhs + tol * rhs.abs();
        let ratio = if rhs > 0.0 { lhs / rhs } else if lhs <= 0.0 { 0.0 } else { f64::INFINITY };
        self.record(lemma, ok, ratio, || format!("{label}: {lhs:e} > {rhs:e}"), index);
    }

    fn record(&mut self, lemma: u8, ok: bool, worst: f64, detail: impl FnOnce() -> String, index: &IndexSet) {
        let c = &mut self.counts[(lemma - 1) as usize];
        c.checked += 1;
        if worst.is_finite() {
            c.worst = c.worst.max(worst);
        }
        if !ok {
            c.violations += 1;
            self.failures.push((lemma, detail(), index.members().to_vec()));
        }
    }

    /// Sum of the absolute summands of `⟨ψ, D⁺φ⟩` and `⟨G⁻ψ, φ⟩` over `Λ`.
    fn sbp_scale(&self, psi: &ScalarField, phi: &VectorField, index: &IndexSet) -> f64 {
        let v = self.ops.volumes();
        let (p, f) = (psi.global(), phi.global());
        let mut total = 0.0;
        for &i in index.members() {
            for q in self.inter.neighbors(i) {
                if index.contains(q.j) {
                    let g = q.grad.norm();
                    total += v[i] * v[q.j] * g * (p[i].abs() * (f[i].norm() + f[q.j].norm()) + (p[q.j].abs() + p[i].abs()) * f[i].norm());
                }
            }
        }
        total
    }

    /// Sum of the absolute summands of `⟨ψ, Lψ⟩` over `Λ`.
    fn laplacian_scale(&self, psi: &ScalarField, index: &IndexSet) -> f64 {
        let v = self.ops.volumes();
        let p = psi.global();
        let mut total = 0.0;
        for &i in index.members() {
            for q in self.inter.neighbors(i) {
                if index.contains(q.j) {
                    total += v[i] * v[q.j] * q.b * p[i].abs() * (p[i] - p[q.j]).abs();
                }
            }
        }
        total
    }

    /// `max_{i∈Λ} Σ_{j∈Λ∖{i}} V_j |ẇ_h| / r`.
    fn inverse_moment_on(&self, index: &IndexSet) -> f64 {
        let v = self.ops.volumes();
        index
            .members()
            .iter()
            .map(|&i| {
                self.inter
                    .neighbors(i)
                    .iter()
                    .filter(|q| index.contains(q.j))
                    .map(|q| v[q.j] * q.dw.abs() / q.r)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Walks the full interaction graph and returns the components without wall particles.
fn wall_free_components(state: &ParticleState, inter: &Interactions) -> Vec<Vec<usize>> {
    let n = state.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            for q in inter.neighbors(i) {
                if !seen[q.j] {
                    seen[q.j] = true;
                    comp.push(q.j);
                }
            }
        }
        if comp.iter().all(|&i| state.roles()[i] != Role::Wall) {
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

struct TrialOutcome {
    kind: TrialKind,
    counts: [LemmaCounts; 5],
    failures: Vec<LemmaFailure>,
}

fn run_trial(master: u64, trial: usize) -> Result<TrialOutcome> {
    let seed = trial_seed(master, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if trial.is_multiple_of(2) { TrialKind::Connected } else { TrialKind::Disconnected };
    let (state, kernel) = random_state(&mut rng, kind);
    let inter = state.interactions(&kernel)?;
    let ops = Operators::new(&state, &inter)?;
    let n = state.len();
    let mut t = Trial {
        counts: [LemmaCounts::default(); 5],
        failures: Vec::new(),
        ops,
        inter: &inter,
    };
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    let all = IndexSet::all(n);
    let subset = random_subset(&mut rng, n);

    for index in [&all, &subset] {
        let phi: Vec<Vector> = (0..n).map(|_| random_vector(&mut rng, scale)).collect();
        let chi: Vec<Vector> = (0..n).map(|_| random_vector(&mut rng, 1.0)).collect();
        let psi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let phi = VectorField::from_global(index.clone(), &phi)?;
        let chi = VectorField::from_global(index.clone(), &chi)?;
        let psi = ScalarField::from_global(index.clone(), &psi)?;

        // Lemma 1.
        let ip = ops.inner_product(&phi, &chi)?;
        t.inequality(1, "Cauchy-Schwarz", ip, ops.l2_norm(&phi)? * ops.l2_norm(&chi)?, INEQUALITY_TOL, index);

        // Lemma 3.
        let lhs = ops.inner_product(&psi, &ops.divergence_plus(&phi)?)?;
        let rhs = -ops.inner_product(&ops.gradient_minus(&psi)?, &phi)?;
        let sc = t.sbp_scale(&psi, &phi, index);
        t.identity(3, "summation by parts", lhs, rhs, sc, index);
        let a = -ops.inner_product(&psi, &ops.laplacian(&psi)?)?;
        let b = ops.h1_seminorm_squared(&psi)?;
        let sc = t.laplacian_scale(&psi, index);
        t.identity(3, "norm identity (scalar)", a, b, sc, index);
        let a = -ops.inner_product(&phi, &ops.laplacian(&phi)?)?;
        let b = ops.h1_seminorm_squared(&phi)?;
        t.identity(3, "norm identity (vector)", a, b, b, index);

        // Lemma 4 with the measured semi-regularity quantity.
        let s = measure_semi_regularity(state.volumes(), &inter);
        let g = ops.l2_norm(&ops.gradient_minus(&psi)?)?.powi(2);
        t.inequality(4, "gradient bound", g, s * ops.h1_seminorm_squared(&psi)?, INEQUALITY_TOL, index);

        // Lemma 5 with the measured inverse moment on Λ.
        let m = t.inverse_moment_on(index);
        let l = ops.l2_norm(&ops.laplacian(&phi)?)?.powi(2);
        t.inequality(5, "Laplacian bound", l, 4.0 * m * ops.h1_seminorm_squared(&phi)?, INEQUALITY_TOL, index);
    }

    // Lemma 2.
    match kind {
        TrialKind::Connected => {
            let walls: Vec<bool> = state.roles().iter().map(|r| *r == Role::Wall).collect();
            let psi: Vec<Vector> = (0..n)
                .map(|i| if walls[i] { Vector::zeros() } else { random_vector(&mut rng, scale) })
                .collect();
            let phi: Vec<Vector> = (0..n).map(|_| random_vector(&mut rng, 1.0)).collect();
            let psi = VectorField::from_global(all.clone(), &psi)?;
            let phi = VectorField::from_global(all.clone(), &phi)?;
            let h1 = ops.h1_seminorm(&psi)?;
            t.record(2, h1 > 0.0, 0.0, || "nonzero field with zero H1 seminorm on a connected state".into(), &all);
            let zero = VectorField::zeros(all.clone());
            t.record(2, ops.h1_seminorm(&zero)? == 0.0, 0.0, || "zero field with nonzero seminorm".into(), &all);
            let fs = state.fluid_surface_indices();
            let a = ops.inner_product(&phi.restrict(&fs)?, &psi.restrict(&fs)?)?;
            let b = ops.inner_product(&phi, &psi)?;
            t.identity(2, "inner product ignores walls", a, b, 0.0, &all);
            let dual = ops.h_minus1_seminorm(&phi, TrialSpace::WallPinned)?;
            t.inequality(2, "dual pairing", b, dual * h1, DUAL_TOL, &all);
        }
        TrialKind::Disconnected => {
            let comps = wall_free_components(&state, &inter);
            let ok = match comps.first() {
                Some(c) => {
                    let mut v = vec![0.0; n];
                    for &i in c {
                        v[i] = 1.0;
                    }
                    let psi = ScalarField::from_global(all.clone(), &v)?;
                    ops.h1_seminorm(&psi)? == 0.0
                }
                None => false,
            };
            t.record(2, ok, 0.0, || "no nonzero field with zero seminorm on a disconnected state".into(), &all);
        }
    }

    let record = state.to_record();
    let failures = t
        .failures
        .into_iter()
        .map(|(lemma, detail, index_set)| LemmaFailure {
            trial,
            seed,
            kind,
            lemma,
            detail,
            kernel: kernel.kind().to_string(),
            smoothing_length: kernel.smoothing_length(),
            index_set,
            state: record.clone(),
        })
        .collect();
    Ok(TrialOutcome {
        kind,
        counts: t.counts,
        failures,
    })
}

/// Runs `trials` independent randomized trials. The report depends only on `seed` and
/// `trials`; identical inputs give identical serialized reports.
pub fn verify_lemmas(seed: u64, trials: usize) -> Result<LemmaReport> {
    let outcomes: Vec<Result<TrialOutcome>> = (0..trials).into_par_iter().map(|k| run_trial(seed, k)).collect();
    let mut report = LemmaReport {
        seed,
        trials,
        passed: true,
        connected_trials: 0,
        disconnected_trials: 0,
        lemma1: LemmaCounts::default(),
        lemma2: LemmaCounts::default(),
        lemma3: LemmaCounts::default(),
        lemma4: LemmaCounts::default(),
        lemma5: LemmaCounts::default(),
        failures: Vec::new(),
    };
    for o in outcomes {
        let o = o?;
        match o.kind {
            TrialKind::Connected => report.connected_trials += 1,
            TrialKind::Disconnected => report.disconnected_trials += 1,
        }
        for (dst, src) in [
            &mut report.lemma1,
            &mut report.lemma2,
            &mut report.lemma3,
            &mut report.lemma4,
            &mut report.lemma5,
        ]
        .into_iter()
        .zip(&o.counts)
        {
            dst.merge(src);
        }
        for f in o.failures {
            report.passed = false;
            if report.failures.len() < MAX_FAILURES {
                report.failures.push(f);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_pass() {
        let r = verify_lemmas(1, 0).unwrap();
        assert!(r.passed);
        assert_eq!(r.lemma1.checked, 0);
    }

    #[test]
    fn reports_are_reproducible() {
        let a = serde_json::to_vec(&verify_lemmas(99, 40).unwrap()).unwrap();
        let b = serde_json::to_vec(&verify_lemmas(99, 40).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_suite_passes() {
        let r = verify_lemmas(2024, 200).unwrap();
        assert!(r.passed, "{:#?}", r.failures.first());
        assert_eq!(r.connected_trials, 100);
        assert!(r.lemma4.worst <= 1.0 && r.lemma5.worst <= 1.0);
    }

    #[test]
    fn generated_states_have_the_requested_connectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [TrialKind::Connected, TrialKind::Disconnected] {
            for _ in 0..30 {
                let (st, k) = random_state(&mut rng, kind);
                assert!((5..=60).contains(&st.len()));
                let inter = st.interactions(&k).unwrap();
                assert_eq!(connectivity(&st, &inter).ok, kind == TrialKind::Connected);
            }
        }
    }
}
