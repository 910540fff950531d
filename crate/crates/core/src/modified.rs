//! Per-step particle volumes and the variable time step of the modified schemes.
//!
//! The volumes solve `A ω = d·1` with `A_ij = r_ij |ẇ_h(r_ij)|`, which forces the
//! semi-regularity quantity to equal `d` exactly. The step then saturates the
//! time-step condition for those volumes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conditions::{measure_semi_regularity, step_limit};
use crate::error::{IsphError, Result};
use crate::neighbors::Interactions;
use crate::state::ParticleState;

/// Pivot magnitude ratio below which the volume matrix counts as singular.
const PIVOT_RATIO_TOL: f64 = 1e-14;
/// Residual tolerance of an accepted volume solve, relative to `d`.
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Infeasibility {
    TooFewParticles { n: usize },
    Singular { pivot_ratio: f64, residual: f64 },
    Nonpositive { indices: Vec<usize>, min_volume: f64 },
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Infeasibility::TooFewParticles { n } => write!(f, "volume system needs at least 2 particles, got {n}"),
            Infeasibility::Singular { pivot_ratio, residual } => write!(
                f,
                "volume matrix is singular (pivot ratio {pivot_ratio:e}, residual {residual:e})"
            ),
            Infeasibility::Nonpositive { indices, min_volume } => write!(
                f,
                "{} nonpositive volume(s), smallest {min_volume:e} (first offending index {})",
                indices.len(),
                indices.first().copied().unwrap_or(0)
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSolve {
    /// The raw solution; empty when the matrix was singular.
    pub volumes: Vec<f64>,
    /// `max_i |(A ω)_i - d|`.
    pub residual: f64,
    pub infeasibility: Option<Infeasibility>,
}

impl VolumeSolve {
    pub fn is_feasible(&self) -> bool {
        self.infeasibility.is_none()
    }

    /// The volumes, or an error describing why none exist.
    pub fn into_volumes(self) -> Result<Vec<f64>> {
        match self.infeasibility {
            None => Ok(self.volumes),
            Some(reason) => Err(IsphError::InfeasibleVolumes(reason.to_string())),
        }
    }
}

/// Volumes, step and feasibility of one modified step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedStepParams {
    pub volumes: Vec<f64>,
    #[serde(with = "crate::floats")]
    pub dt: f64,
    pub volume_solve_ok: bool,
    pub all_positive: bool,
    pub residual: f64,
}

/// Dense `A_ij = r_ij |ẇ_h(r_ij)|`, zero diagonal.
pub fn volume_matrix(inter: &Interactions) -> DMatrix<f64> {
    let n = inter.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for p in inter.neighbors(i) {
            a[(i, p.j)] = p.r * p.dw.abs();
        }
    }
    a
}

/// Solves for the volumes at the current positions. Infeasibility is reported in the
/// result, not as an error.
pub fn solve_particle_volumes(state: &ParticleState, inter: &Interactions) -> Result<VolumeSolve> {
    let n = state.len();
    if inter.len() != n {
        return Err(IsphError::Usage("interactions do not match the state".into()));
    }
    if n < 2 {
        return Ok(VolumeSolve {
            volumes: Vec::new(),
            residual: f64::INFINITY,
            infeasibility: Some(Infeasibility::TooFewParticles { n }),
        });
    }
    let d = state.dim() as f64;
    let a = volume_matrix(inter);
    let b = DVector::from_element(n, d);
    let lu = a.clone().lu();
    let diag = lu.u().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    let pivot_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    let solution = if pivot_ratio >= PIVOT_RATIO_TOL { lu.solve(&b) } else { None };
    let Some(x) = solution else {
        return Ok(VolumeSolve {
            volumes: Vec::new(),
            residual: f64::INFINITY,
            infeasibility: Some(Infeasibility::Singular {
                pivot_ratio,
                residual: f64::INFINITY,
            }),
        });
    };
    let residual = (&a * &x - &b).amax();
    let volumes: Vec<f64> = x.iter().copied().collect();
    if !(residual <= RESIDUAL_TOL * d) {
        return Ok(VolumeSolve {
            volumes,
            residual,
            infeasibility: Some(Infeasibility::Singular { pivot_ratio, residual }),
        });
    }
    let bad: Vec<usize> = (0..n).filter(|&i| !(volumes[i] > 0.0)).collect();
    let infeasibility = (!bad.is_empty()).then(|| Infeasibility::Nonpositive {
        min_volume: volumes.iter().copied().fold(f64::INFINITY, f64::min),
        indices: bad,
    });
    Ok(VolumeSolve {
        volumes,
        residual,
        infeasibility,
    })
}

/// `Δt = δ/(2ν) [max_i Σ_{j≠i} ω_j |ẇ_h| / r]^{-1}`; `+∞` when every particle is isolated.
pub fn variable_dt(volumes: &[f64], inter: &Interactions, delta: f64, nu: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(IsphError::Usage(format!("delta must lie in (0, 1), got {delta}")));
    }
    if let Some(i) = volumes.iter().position(|v| !(*v > 0.0)) {
        return Err(IsphError::Usage(format!("volume {i} is not positive")));
    }
    Ok(delta * step_limit(volumes, inter, nu)?)
}

/// Volumes and step for one modified step; errors when no positive volumes exist or the
/// step is unbounded. `dt` is `None` for modified implicit runs at a fixed step.
pub fn modified_step(
    state: &ParticleState,
    inter: &Interactions,
    delta_nu: Option<(f64, f64)>,
) -> Result<ModifiedStepParams> {
    let solve = solve_particle_volumes(state, inter)?;
    let residual = solve.residual;
    let volumes = solve.into_volumes()?;
    let dt = match delta_nu {
        Some((delta, nu)) => {
            let dt = variable_dt(&volumes, inter, delta, nu)?;
            if !dt.is_finite() {
                return Err(IsphError::InfeasibleVolumes(
                    "every particle is isolated; the variable time step is unbounded".into(),
                ));
            }
            dt
        }
        None => f64::NAN,
    };
    Ok(ModifiedStepParams {
        volumes,
        dt,
        volume_solve_ok: true,
        all_positive: true,
        residual,
    })
}

/// `|S - d|` for the given volumes.
pub fn semireg_residual(volumes: &[f64], inter: &Interactions, dim: usize) -> f64 {
    (measure_semi_regularity(volumes, inter) - dim as f64).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{admissible_dt, audit, ConditionsConfig};
    use crate::kernels::KernelSpec;
    use crate::state::Role;
    use crate::Vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make(pos: Vec<Vector>) -> ParticleState {
        let n = pos.len();
        ParticleState::new(2, pos, vec![Vector::zeros(); n], vec![1.0; n], vec![Role::Fluid; n]).unwrap()
    }

    #[test]
    fn two_particles_by_symmetry() {
        let s = 0.8;
        let st = make(vec![Vector::zeros(), Vector::new(s, 0.0, 0.0)]);
        let k = KernelSpec::cubic(2, 0.5).unwrap();
        let inter = st.interactions(&k).unwrap();
        let v = solve_particle_volumes(&st, &inter).unwrap();
        assert!(v.is_feasible());
        let expected = 2.0 / (s * k.dwh(s).abs());
        for w in &v.volumes {
            assert!((w - expected).abs() <= 1e-13 * expected);
        }
    }

    #[test]
    fn isolated_particle_is_singular() {
        let st = make(vec![Vector::zeros(), Vector::new(0.5, 0.0, 0.0), Vector::new(9.0, 0.0, 0.0)]);
        let k = KernelSpec::cubic(2, 0.5).unwrap();
        let inter = st.interactions(&k).unwrap();
        let v = solve_particle_volumes(&st, &inter).unwrap();
        assert!(matches!(v.infeasibility, Some(Infeasibility::Singular { .. })));
        assert!(matches!(v.into_volumes(), Err(IsphError::InfeasibleVolumes(_))));
        let single = make(vec![Vector::zeros()]);
        let inter = single.interactions(&k).unwrap();
        assert!(matches!(
            solve_particle_volumes(&single, &inter).unwrap().infeasibility,
            Some(Infeasibility::TooFewParticles { n: 1 })
        ));
    }

    #[test]
    fn feasible_volumes_make_the_moment_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = KernelSpec::quintic(2, 0.5).unwrap();
        let mut found = 0;
        while found < 20 {
            let n = rng.random_range(2..=6);
            let pos = (0..n)
                .map(|_| Vector::new(rng.random_range(0.0..1.2), rng.random_range(0.0..1.2), 0.0))
                .collect();
            let st = make(pos);
            let inter = st.interactions(&k).unwrap();
            let v = solve_particle_volumes(&st, &inter).unwrap();
            if !v.is_feasible() {
                continue;
            }
            found += 1;
            assert!(semireg_residual(&v.volumes, &inter, 2) <= 1e-9);
            let nu = 0.03;
            let dt = variable_dt(&v.volumes, &inter, 0.5, nu).unwrap();
            assert_eq!(dt, admissible_dt(&v.volumes, &inter, 0.5, nu).unwrap());
            assert_eq!(variable_dt(&v.volumes, &inter, 0.25, nu).unwrap(), dt / 2.0);
            let mut st = st;
            st.set_volumes(v.volumes.clone()).unwrap();
            let r = audit(&st, &k, &inter, dt, nu, &ConditionsConfig::new(Some(0.0), Some(0.5)).unwrap()).unwrap();
            assert_eq!(r.timestep_ok, Some(true));
            assert!((r.dt_admissible.unwrap() - dt).abs() <= 1e-12 * dt);
        }
    }

    #[test]
    fn lattice_step_tracks_kernel_constant() {
        let s = 0.01;
        let h = 5.0 * s;
        let mut pos = Vec::new();
        for j in 0..41 {
            for i in 0..41 {
                pos.push(Vector::new(i as f64 * s, j as f64 * s, 0.0));
            }
        }
        let st = make(pos);
        let k = KernelSpec::cubic(2, h).unwrap();
        let inter = st.interactions(&k).unwrap();
        let vol = vec![s * s; st.len()];
        let (delta, nu) = (0.5, 0.01);
        let dt = variable_dt(&vol, &inter, delta, nu).unwrap();
        let ratio = dt / (h * h / nu);
        assert!((ratio / (delta * 0.175) - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let st = make(vec![Vector::zeros(), Vector::new(0.5, 0.0, 0.0)]);
        let k = KernelSpec::cubic(2, 0.5).unwrap();
        let inter = st.interactions(&k).unwrap();
        assert!(variable_dt(&[1.0, 1.0], &inter, 1.0, 0.1).is_err());
        assert!(variable_dt(&[1.0, -1.0], &inter, 0.5, 0.1).is_err());
        assert!(variable_dt(&[1.0, 1.0], &inter, 0.5, 0.0).is_err());
    }
}
