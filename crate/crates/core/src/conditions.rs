//! Auditors for h-connectivity, semi-regularity and the time-step condition.
//!
//! All functions measure; verdicts are only issued for constants present in
//! [`ConditionsConfig`].

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IsphError, Result};
use crate::kernels::KernelSpec;
use crate::neighbors::Interactions;
use crate::state::{ParticleState, Role};

const PARALLEL_MIN: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionsConfig {
    /// Semi-regularity constant, `c0 >= 0`.
    #[serde(default)]
    pub c0: Option<f64>,
    /// Time-step safety factor in `(0, 1)`.
    #[serde(default)]
    pub delta: Option<f64>,
}

impl ConditionsConfig {
    pub fn new(c0: Option<f64>, delta: Option<f64>) -> Result<Self> {
        let c = Self { c0, delta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c0) = self.c0 {
            if !(c0 >= 0.0 && c0.is_finite()) {
                return Err(IsphError::Usage(format!("c0 must be finite and >= 0, got {c0}")));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(IsphError::Usage(format!("delta must lie in (0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

/// Outcome of the connectivity search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connectivity {
    pub ok: bool,
    /// Fluid particles failing either requirement, ascending.
    pub disconnected: Vec<usize>,
    pub no_surface_path: Vec<usize>,
    pub no_wall_path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionsReport {
    pub dim: usize,
    pub dt: f64,
    pub nu: f64,
    pub c0: Option<f64>,
    pub delta: Option<f64>,
    pub connectivity_ok: bool,
    pub disconnected_fluid_indices: Vec<usize>,
    pub no_surface_path: Vec<usize>,
    pub no_wall_path: Vec<usize>,
    #[serde(rename = "semireg_S")]
    pub semireg_s: f64,
    /// `d + c0 Δt` when `c0` is configured.
    #[serde(with = "crate::floats::option")]
    pub semireg_bound: Option<f64>,
    pub semireg_ok: Option<bool>,
    /// `max_i Σ_{j≠i} V_j |ẇ_h| / r`.
    pub inverse_moment: f64,
    /// `1 / (2ν · inverse_moment)`, the step limit with `δ = 1`.
    #[serde(with = "crate::floats")]
    pub dt_limit: f64,
    #[serde(with = "crate::floats::option")]
    pub dt_admissible: Option<f64>,
    pub timestep_ok: Option<bool>,
    /// `1 / (2 h² inverse_moment)`, so that `dt_limit = α̂ h² / ν`.
    #[serde(with = "crate::floats")]
    pub alpha_hat_empirical: f64,
    pub alpha_hat_kernel: f64,
}

impl ConditionsReport {
    /// True when the stored verdicts agree with the stored quantities.
    pub fn is_consistent(&self) -> bool {
        let conn = self.connectivity_ok == self.disconnected_fluid_indices.is_empty();
        let semi = match (self.semireg_bound, self.semireg_ok) {
            (Some(b), Some(ok)) => ok == (self.semireg_s <= b),
            (None, None) => true,
            _ => false,
        };
        let step = match (self.dt_admissible, self.timestep_ok) {
            (Some(a), Some(ok)) => ok == (self.dt <= a),
            (None, None) => true,
            _ => false,
        };
        conn && semi && step
    }

    /// Names of the configured conditions that fail.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.connectivity_ok {
            v.push(format!(
                "h-connectivity fails for {} fluid particle(s)",
                self.disconnected_fluid_indices.len()
            ));
        }
        if self.semireg_ok == Some(false) {
            v.push(format!(
                "semi-regularity S = {:.6} exceeds {:.6}",
                self.semireg_s,
                self.semireg_bound.unwrap_or(f64::NAN)
            ));
        }
        if self.timestep_ok == Some(false) {
            v.push(format!(
                "dt = {:e} exceeds admissible {:e}",
                self.dt,
                self.dt_admissible.unwrap_or(f64::NAN)
            ));
        }
        v
    }

    /// Two-column text table for terminals.
    pub fn table(&self) -> String {
        fn opt_bool(b: Option<bool>) -> String {
            b.map_or("n/a".into(), |x| if x { "yes".into() } else { "no".into() })
        }
        fn opt_f(v: Option<f64>) -> String {
            v.map_or("n/a".into(), |x| format!("{x:.6e}"))
        }
        let rows: Vec<(&str, String)> = vec![
            ("dimension", self.dim.to_string()),
            ("dt", format!("{:.6e}", self.dt)),
            ("viscosity", format!("{:.6e}", self.nu)),
            ("h-connected", opt_bool(Some(self.connectivity_ok))),
            ("disconnected fluid", self.disconnected_fluid_indices.len().to_string()),
            ("  without surface path", self.no_surface_path.len().to_string()),
            ("  without wall path", self.no_wall_path.len().to_string()),
            ("semi-regularity S", format!("{:.9}", self.semireg_s)),
            ("S bound d + c0 dt", opt_f(self.semireg_bound)),
            ("semi-regular", opt_bool(self.semireg_ok)),
            ("dt limit (delta = 1)", format!("{:.6e}", self.dt_limit)),
            ("admissible dt", opt_f(self.dt_admissible)),
            ("time step ok", opt_bool(self.timestep_ok)),
            ("alpha-hat empirical", format!("{:.6}", self.alpha_hat_empirical)),
            ("alpha-hat kernel", format!("{:.6}", self.alpha_hat_kernel)),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

fn reach_from(sources: Vec<usize>, state: &ParticleState, inter: &Interactions) -> Vec<bool> {
    let roles = state.roles();
    let mut seen = vec![false; state.len()];
    let mut queue = VecDeque::new();
    for s in sources {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        for p in inter.neighbors(i) {
            if roles[p.j] == Role::Fluid && !seen[p.j] {
                seen[p.j] = true;
                queue.push_back(p.j);
            }
        }
    }
    seen
}

/// h-connectivity on prebuilt interactions. Every fluid particle needs a path through
/// fluid particles ending at a surface particle, and another ending at a wall particle.
pub fn connectivity(state: &ParticleState, inter: &Interactions) -> Connectivity {
    let roles = state.roles();
    let fluid = state.fluid_indices();
    let adjacent_to = |role: Role| -> Vec<usize> {
        fluid
            .members()
            .iter()
            .copied()
            .filter(|&i| inter.neighbors(i).iter().any(|p| roles[p.j] == role))
            .collect()
    };
    let to_surface = reach_from(adjacent_to(Role::Surface), state, inter);
    let to_wall = reach_from(adjacent_to(Role::Wall), state, inter);
    let no_surface_path: Vec<usize> = fluid.members().iter().copied().filter(|&i| !to_surface[i]).collect();
    let no_wall_path: Vec<usize> = fluid.members().iter().copied().filter(|&i| !to_wall[i]).collect();
    let disconnected: Vec<usize> = fluid
        .members()
        .iter()
        .copied()
        .filter(|&i| !to_surface[i] || !to_wall[i])
        .collect();
    Connectivity {
        ok: disconnected.is_empty(),
        disconnected,
        no_surface_path,
        no_wall_path,
    }
}

/// Verdict and offending fluid indices.
pub fn check_h_connectivity(state: &ParticleState, kernel: &KernelSpec) -> Result<(bool, Vec<usize>)> {
    let inter = state.interactions(kernel)?;
    let c = connectivity(state, &inter);
    Ok((c.ok, c.disconnected))
}

fn max_row<F: Fn(usize) -> f64 + Sync + Send>(n: usize, row: F) -> f64 {
    if n >= PARALLEL_MIN {
        (0..n).into_par_iter().map(row).reduce(|| 0.0, f64::max)
    } else {
        (0..n).map(row).fold(0.0, f64::max)
    }
}

/// Semi-regularity quantity `S = max_i Σ_j V_j r_ij |ẇ_h(r_ij)|`.
pub fn measure_semi_regularity(volumes: &[f64], inter: &Interactions) -> f64 {
    max_row(inter.len(), |i| {
        inter.neighbors(i).iter().map(|p| volumes[p.j] * p.r * p.dw.abs()).sum()
    })
}

/// `max_i Σ_{j≠i} V_j |ẇ_h(r_ij)| / r_ij`.
pub fn max_inverse_moment(volumes: &[f64], inter: &Interactions) -> f64 {
    max_row(inter.len(), |i| {
        inter.neighbors(i).iter().map(|p| volumes[p.j] * p.dw.abs() / p.r).sum()
    })
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(IsphError::Usage(format!("viscosity must be positive, got {nu}")));
    }
    Ok(())
}

fn limit_from_moment(m: f64, nu: f64) -> f64 {
    if m > 0.0 {
        1.0 / (2.0 * nu * m)
    } else {
        f64::INFINITY
    }
}

/// Step limit with `δ = 1`: `1 / (2ν max_i Σ_{j≠i} V_j |ẇ_h| / r)`.
pub fn step_limit(volumes: &[f64], inter: &Interactions, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    Ok(limit_from_moment(max_inverse_moment(volumes, inter), nu))
}

/// Largest step satisfying the time-step condition with safety factor `delta`;
/// `+∞` when every particle is isolated.
pub fn admissible_dt(volumes: &[f64], inter: &Interactions, delta: f64, nu: f64) -> Result<f64> {
    ConditionsConfig::new(None, Some(delta))?;
    Ok(delta * step_limit(volumes, inter, nu)?)
}

/// Full audit of `state` for a prospective step of size `dt`.
pub fn audit(
    state: &ParticleState,
    kernel: &KernelSpec,
    inter: &Interactions,
    dt: f64,
    nu: f64,
    config: &ConditionsConfig,
) -> Result<ConditionsReport> {
    config.validate()?;
    check_nu(nu)?;
    if !(dt > 0.0) {
        return Err(IsphError::Usage(format!("dt must be positive, got {dt}")));
    }
    let vol = state.volumes();
    let conn = connectivity(state, inter);
    let s = measure_semi_regularity(vol, inter);
    let m = max_inverse_moment(vol, inter);
    let d = state.dim() as f64;
    let h = kernel.smoothing_length();
    let semireg_bound = config.c0.map(|c0| d + c0 * dt);
    let dt_limit = limit_from_moment(m, nu);
    let dt_admissible = config.delta.map(|delta| delta * dt_limit);
    Ok(ConditionsReport {
        dim: state.dim(),
        dt,
        nu,
        c0: config.c0,
        delta: config.delta,
        connectivity_ok: conn.ok,
        disconnected_fluid_indices: conn.disconnected,
        no_surface_path: conn.no_surface_path,
        no_wall_path: conn.no_wall_path,
        semireg_s: s,
        semireg_bound,
        semireg_ok: semireg_bound.map(|b| s <= b),
        inverse_moment: m,
        dt_limit,
        dt_admissible,
        timestep_ok: dt_admissible.map(|a| dt <= a),
        alpha_hat_empirical: if m > 0.0 { 1.0 / (2.0 * h * h * m) } else { f64::INFINITY },
        alpha_hat_kernel: kernel.estimate_alpha_hat()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(pos: Vec<Vector>, roles: Vec<Role>, vol: f64) -> ParticleState {
        let n = pos.len();
        ParticleState::new(2, pos, vec![Vector::zeros(); n], vec![vol; n], roles).unwrap()
    }

    fn lattice(n: usize, s: f64) -> ParticleState {
        let mut pos = Vec::new();
        for j in 0..n {
            for i in 0..n {
                pos.push(Vector::new(i as f64 * s, j as f64 * s, 0.0));
            }
        }
        let m = pos.len();
        state(pos, vec![Role::Fluid; m], s * s)
    }

    /// Exhaustive simple-path search: does `start` reach a `target` particle through
    /// fluid intermediates?
    fn has_path(st: &ParticleState, inter: &Interactions, start: usize, target: Role) -> bool {
        fn dfs(st: &ParticleState, inter: &Interactions, path: &mut Vec<usize>, target: Role) -> bool {
            let last = *path.last().unwrap();
            for p in inter.neighbors(last) {
                if path.contains(&p.j) {
                    continue;
                }
                let role = st.roles()[p.j];
                if role == target {
                    return true;
                }
                if role == Role::Fluid {
                    path.push(p.j);
                    if dfs(st, inter, path, target) {
                        return true;
                    }
                    path.pop();
                }
            }
            false
        }
        dfs(st, inter, &mut vec![start], target)
    }

    #[test]
    fn single_fluid_between_surface_and_wall() {
        let st = state(
            vec![Vector::new(0.0, 0.0, 0.0), Vector::new(0.0, 1.0, 0.0), Vector::new(0.0, -1.0, 0.0)],
            vec![Role::Fluid, Role::Surface, Role::Wall],
            1.0,
        );
        let k = KernelSpec::cubic(2, 1.0).unwrap();
        assert_eq!(check_h_connectivity(&st, &k).unwrap(), (true, vec![]));
    }

    #[test]
    fn isolated_fluid_is_reported() {
        let st = state(
            vec![Vector::new(0.0, 0.0, 0.0), Vector::new(0.0, 1.0, 0.0), Vector::new(10.0, 0.0, 0.0)],
            vec![Role::Surface, Role::Wall, Role::Fluid],
            1.0,
        );
        let k = KernelSpec::cubic(2, 1.0).unwrap();
        assert_eq!(check_h_connectivity(&st, &k).unwrap(), (false, vec![2]));
    }

    #[test]
    fn split_cluster_without_wall_access() {
        // Left blob touches a wall and the surface; right blob touches only the surface.
        let mut pos = Vec::new();
        let mut roles = Vec::new();
        for (x0, with_wall) in [(0.0, true), (20.0, false)] {
            for i in 0..3 {
                pos.push(Vector::new(x0 + i as f64, 0.0, 0.0));
                roles.push(Role::Fluid);
            }
            pos.push(Vector::new(x0 + 1.0, 1.0, 0.0));
            roles.push(Role::Surface);
            if with_wall {
                pos.push(Vector::new(x0 + 1.0, -1.0, 0.0));
                roles.push(Role::Wall);
            }
        }
        let st = state(pos, roles, 1.0);
        let k = KernelSpec::cubic(2, 0.6).unwrap();
        let inter = st.interactions(&k).unwrap();
        let c = connectivity(&st, &inter);
        assert!(!c.ok);
        assert_eq!(c.disconnected, vec![5, 6, 7]);
        assert_eq!(c.no_wall_path, vec![5, 6, 7]);
        assert!(c.no_surface_path.is_empty());
    }

    #[test]
    fn surface_does_not_relay_a_wall_path() {
        // fluid - surface - wall: the surface particle may not be an intermediate vertex.
        let st = state(
            vec![Vector::new(0.0, 0.0, 0.0), Vector::new(1.0, 0.0, 0.0), Vector::new(2.0, 0.0, 0.0)],
            vec![Role::Fluid, Role::Surface, Role::Wall],
            1.0,
        );
        let k = KernelSpec::cubic(2, 0.6).unwrap();
        let inter = st.interactions(&k).unwrap();
        let c = connectivity(&st, &inter);
        assert_eq!(c.no_wall_path, vec![0]);
    }

    #[test]
    fn bfs_matches_exhaustive_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let k = KernelSpec::cubic(2, 0.5).unwrap();
        for _ in 0..400 {
            let n = rng.random_range(2..=12);
            let pos: Vec<Vector> = (0..n)
                .map(|_| Vector::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), 0.0))
                .collect();
            let roles: Vec<Role> = (0..n)
                .map(|_| match rng.random_range(0..5) {
                    0 => Role::Surface,
                    1 => Role::Wall,
                    _ => Role::Fluid,
                })
                .collect();
            let st = state(pos, roles, 0.1);
            let inter = st.interactions(&k).unwrap();
            let c = connectivity(&st, &inter);
            for &i in st.fluid_indices().members() {
                assert_eq!(c.no_surface_path.contains(&i), !has_path(&st, &inter, i, Role::Surface));
                assert_eq!(c.no_wall_path.contains(&i), !has_path(&st, &inter, i, Role::Wall));
            }
        }
    }

    #[test]
    fn single_particle_has_zero_moment_and_unbounded_step() {
        let st = state(vec![Vector::zeros()], vec![Role::Fluid], 1.0);
        let k = KernelSpec::cubic(2, 1.0).unwrap();
        let inter = st.interactions(&k).unwrap();
        assert_eq!(measure_semi_regularity(st.volumes(), &inter), 0.0);
        assert_eq!(admissible_dt(st.volumes(), &inter, 0.5, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn two_particle_step_by_hand() {
        let (s, v, delta, nu) = (0.7, 0.3, 0.4, 0.02);
        let st = state(vec![Vector::zeros(), Vector::new(s, 0.0, 0.0)], vec![Role::Fluid; 2], v);
        let k = KernelSpec::quintic(2, 0.5).unwrap();
        let inter = st.interactions(&k).unwrap();
        let expected = delta / (2.0 * nu) * s / (v * k.dwh(s).abs());
        let got = admissible_dt(st.volumes(), &inter, delta, nu).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn step_scales_with_delta_and_viscosity() {
        let st = lattice(8, 0.1);
        let k = KernelSpec::cubic(2, 0.15).unwrap();
        let inter = st.interactions(&k).unwrap();
        let a = admissible_dt(st.volumes(), &inter, 0.2, 0.01).unwrap();
        let b = admissible_dt(st.volumes(), &inter, 0.6, 0.01).unwrap();
        let c = admissible_dt(st.volumes(), &inter, 0.2, 0.04).unwrap();
        assert!((b / a - 3.0).abs() < 1e-14);
        assert!((a / c - 4.0).abs() < 1e-14);
    }

    #[test]
    fn fine_lattice_limits() {
        let s = 0.01;
        let st = lattice(41, s);
        for (k, h) in [
            (KernelSpec::cubic(2, 5.0 * s).unwrap(), 5.0 * s),
            (KernelSpec::quintic(2, 4.0 * s).unwrap(), 4.0 * s),
        ] {
            let inter = st.interactions(&k).unwrap();
            let sv = measure_semi_regularity(st.volumes(), &inter);
            assert!((sv - 2.0).abs() < 0.02 * 2.0, "S = {sv}");
            let nu = 0.01;
            let limit = admissible_dt(st.volumes(), &inter, 0.5, nu).unwrap() / 0.5;
            let alpha = k.estimate_alpha_hat().unwrap();
            let predicted = alpha * h * h / nu;
            assert!((limit / predicted - 1.0).abs() < 0.05, "{limit} vs {predicted}");
        }
    }

    #[test]
    fn report_verdicts_follow_config() {
        let st = lattice(6, 0.1);
        let k = KernelSpec::cubic(2, 0.15).unwrap();
        let inter = st.interactions(&k).unwrap();
        let none = audit(&st, &k, &inter, 1e-3, 0.01, &ConditionsConfig::default()).unwrap();
        assert_eq!((none.semireg_ok, none.timestep_ok), (None, None));
        assert!(none.is_consistent());
        assert!(!none.connectivity_ok);
        let cfg = ConditionsConfig::new(Some(0.0), Some(0.5)).unwrap();
        let r = audit(&st, &k, &inter, 1e-3, 0.01, &cfg).unwrap();
        assert!(r.is_consistent());
        assert_eq!(r.timestep_ok, Some(1e-3 <= r.dt_admissible.unwrap()));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"semireg_S\""));
        let back: ConditionsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(ConditionsConfig::new(None, Some(1.0)).is_err());
        assert!(ConditionsConfig::new(Some(-1.0), None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn semi_regularity_is_rigid_invariant(
            seed in any::<u64>(),
            angle in 0.0f64..std::f64::consts::TAU,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..40);
            let pos: Vec<Vector> = (0..n)
                .map(|_| Vector::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), 0.0))
                .collect();
            let vol: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.2)).collect();
            let (c, s) = (angle.cos(), angle.sin());
            let moved: Vec<Vector> = pos
                .iter()
                .map(|p| Vector::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, 0.0))
                .collect();
            let k = KernelSpec::cubic(2, 0.4).unwrap();
            let a = Interactions::build(&pos, &k).unwrap();
            let b = Interactions::build(&moved, &k).unwrap();
            let (sa, sb) = (measure_semi_regularity(&vol, &a), measure_semi_regularity(&vol, &b));
            prop_assert!((sa - sb).abs() <= 1e-12 * sa.max(1.0));
        }
    }
}
