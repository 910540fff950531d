//! Assembly of the prediction and the reduced pressure systems, their structural
//! certificates, and the solve entry point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::krylov::{bicgstab, conjugate_gradient, IterativeSettings};
use super::sparse::CsrMatrix;
use crate::error::{IsphError, Result};
use crate::neighbors::Interactions;
use crate::operators::{IndexSet, Operators, VectorField};
use crate::state::{ParticleState, Role};
use crate::Vector;

/// Systems smaller than this are certified by dense factorization and fall back to a
/// dense direct solve when the iteration fails.
pub const DENSE_LIMIT: usize = 500;

/// Relative eigenvalue cut used for numerical rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpdEvidence {
    /// A dense Cholesky factorization succeeded.
    Cholesky,
    /// Every fluid component reaches a surface particle, which forces definiteness.
    Connectivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certificate {
    StrictlyDiagonallyDominant {
        min_gap: f64,
    },
    SymmetricPositiveDefinite {
        evidence: SpdEvidence,
    },
    Singular {
        reason: String,
        rank_deficiency: usize,
        /// Fluid components (particle indices) with no surface neighbour.
        sealed_components: Vec<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Prediction,
    Poisson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProblem {
    pub kind: ProblemKind,
    pub matrix: CsrMatrix,
    /// One right-hand side per component (d for the prediction, one for the pressure).
    pub rhs: Vec<Vec<f64>>,
    /// Particle index of every unknown, in row order.
    pub unknowns: Vec<usize>,
    pub certificate: Certificate,
    /// Prediction only: `|A_ii| - Σ_{j≠i} |A_ij|` per row.
    pub row_gaps: Vec<f64>,
    /// Pressure only: the unknowns are `V_i p_i`; this holds `V_i` to undo the scaling.
    pub scaling: Vec<f64>,
    n_particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub iterative: IterativeSettings,
    /// Dense direct fallback applies below this many unknowns.
    pub dense_fallback_below: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            iterative: IterativeSettings::default(),
            dense_fallback_below: DENSE_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Iterative,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Per component, indexed by particle; zero at indices that are not unknowns.
    pub values: Vec<Vec<f64>>,
    /// Largest iteration count over the components (zero for dense solves).
    pub iterations: usize,
    pub method: SolveMethod,
}

fn local_map(n: usize, members: &[usize]) -> Vec<usize> {
    let mut map = vec![usize::MAX; n];
    for (k, &i) in members.iter().enumerate() {
        map[i] = k;
    }
    map
}

/// Prediction matrix of the implicit viscous step on `Λ_fl ∪ Λ_sf`:
/// `A_ii = 1 + Δtν Σ_l V_l B_il`, `A_ij = -Δtν V_j B_ij`, `b_i = u_i + Δt f_i`.
pub fn assemble_prediction(
    state: &ParticleState,
    inter: &Interactions,
    dt: f64,
    nu: f64,
    velocities: &[Vector],
    force: &[Vector],
) -> Result<LinearProblem> {
    let n = state.len();
    if inter.len() != n || velocities.len() != n || force.len() != n {
        return Err(IsphError::Usage("prediction inputs disagree in size".into()));
    }
    if !(dt > 0.0 && nu >= 0.0) {
        return Err(IsphError::Usage(format!("need dt > 0 and nu >= 0, got {dt}, {nu}")));
    }
    let rows_idx = state.fluid_surface_indices();
    let map = local_map(n, rows_idx.members());
    let vol = state.volumes();
    let mut rows = Vec::with_capacity(rows_idx.len());
    let mut gaps = Vec::with_capacity(rows_idx.len());
    for &i in rows_idx.members() {
        let mut diag = 1.0;
        let mut off = 0.0;
        let mut row = Vec::new();
        for p in inter.neighbors(i) {
            let w = dt * nu * vol[p.j] * p.b;
            diag += w;
            if map[p.j] != usize::MAX {
                row.push((map[p.j], -w));
                off += w;
            }
        }
        row.push((map[i], diag));
        gaps.push(diag.abs() - off);
        rows.push(row);
    }
    let matrix = CsrMatrix::from_rows(rows_idx.len(), rows)?;
    let dim = state.dim();
    let rhs = (0..dim)
        .map(|c| {
            rows_idx
                .members()
                .iter()
                .map(|&i| velocities[i][c] + dt * force[i][c])
                .collect()
        })
        .collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let certificate = if gaps.iter().all(|g| *g > 0.0) {
        Certificate::StrictlyDiagonallyDominant { min_gap }
    } else {
        Certificate::Singular {
            reason: format!("row dominance gap {min_gap:e} is not positive"),
            rank_deficiency: 0,
            sealed_components: Vec::new(),
        }
    };
    Ok(LinearProblem {
        kind: ProblemKind::Prediction,
        matrix,
        rhs,
        unknowns: rows_idx.members().to_vec(),
        certificate,
        row_gaps: gaps,
        scaling: Vec::new(),
        n_particles: n,
    })
}

/// Fluid components (edges `B_ij > 0` between fluid particles) with no surface neighbour.
pub fn sealed_fluid_components(state: &ParticleState, inter: &Interactions) -> Vec<Vec<usize>> {
    let roles = state.roles();
    let mut seen = vec![false; state.len()];
    let mut sealed = Vec::new();
    for start in 0..state.len() {
        if roles[start] != Role::Fluid || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut open = false;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            for p in inter.neighbors(i) {
                if p.b <= 0.0 {
                    continue;
                }
                match roles[p.j] {
                    Role::Surface => open = true,
                    Role::Fluid if !seen[p.j] => {
                        seen[p.j] = true;
                        comp.push(p.j);
                    }
                    _ => {}
                }
            }
        }
        if !open {
            comp.sort_unstable();
            sealed.push(comp);
        }
    }
    sealed
}

/// Numerical rank deficiency of a symmetric matrix by eigenvalue cut.
pub fn symmetric_rank_deficiency(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let eig = m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    eig.eigenvalues
        .iter()
        .filter(|l| lmax == 0.0 || l.abs() <= RANK_TOL * lmax)
        .count()
}

/// Reduced pressure system on the fluid indices. With `y_i = V_i p_i` it reads
/// `Â y = -b̂`, `Â_ii = Σ_{l∈Λ_fl∪Λ_sf} (V_l / V_i) B_il`, `Â_ij = -B_ij`,
/// `b̂ = (ρ/Δt) D⁺u*` where `D⁺` sums over `divergence_domain`.
pub fn assemble_poisson(
    state: &ParticleState,
    inter: &Interactions,
    dt: f64,
    rho: f64,
    predicted: &[Vector],
    divergence_domain: &IndexSet,
) -> Result<LinearProblem> {
    let n = state.len();
    if inter.len() != n || predicted.len() != n || divergence_domain.universe() != n {
        return Err(IsphError::Usage("pressure inputs disagree in size".into()));
    }
    if !(dt > 0.0 && rho > 0.0) {
        return Err(IsphError::Usage(format!("need dt > 0 and rho > 0, got {dt}, {rho}")));
    }
    let fluid = state.fluid_indices();
    if let Some(&i) = fluid.members().iter().find(|&&i| !divergence_domain.contains(i)) {
        return Err(IsphError::Usage(format!(
            "divergence domain must contain every fluid index (missing {i})"
        )));
    }
    let roles = state.roles();
    let vol = state.volumes();
    let map = local_map(n, fluid.members());
    let mut rows = Vec::with_capacity(fluid.len());
    for &i in fluid.members() {
        let mut diag = 0.0;
        let mut row = Vec::new();
        for p in inter.neighbors(i) {
            if roles[p.j] == Role::Wall {
                continue;
            }
            diag += vol[p.j] / vol[i] * p.b;
            if map[p.j] != usize::MAX {
                row.push((map[p.j], -p.b));
            }
        }
        row.push((map[i], diag));
        rows.push(row);
    }
    let matrix = CsrMatrix::from_rows(fluid.len(), rows)?;

    let ops = Operators::new(state, inter)?;
    let u = VectorField::from_global(divergence_domain.clone(), predicted)?;
    let div = ops.divergence_plus(&u)?;
    let rhs: Vec<f64> = fluid
        .members()
        .iter()
        .map(|&i| -(rho / dt) * div.global()[i])
        .collect();

    let sealed = sealed_fluid_components(state, inter);
    let certificate = if fluid.is_empty() {
        Certificate::SymmetricPositiveDefinite {
            evidence: SpdEvidence::Cholesky,
        }
    } else if fluid.len() <= DENSE_LIMIT {
        let dense = matrix.to_dense();
        if sealed.is_empty() {
            if dense.cholesky().is_none() {
                return Err(IsphError::Inconsistent(
                    "pressure matrix is not positive definite although every fluid component reaches the surface"
                        .into(),
                ));
            }
            Certificate::SymmetricPositiveDefinite {
                evidence: SpdEvidence::Cholesky,
            }
        } else {
            // Rounding can let a factorization of the singular matrix succeed, so the
            // null space is counted from the spectrum instead.
            let rank_deficiency = symmetric_rank_deficiency(&dense);
            if rank_deficiency == 0 {
                return Err(IsphError::Inconsistent(format!(
                    "pressure matrix has full rank although {} fluid component(s) have no surface neighbour",
                    sealed.len()
                )));
            }
            Certificate::Singular {
                reason: format!(
                    "{} fluid component(s) have no path to a surface particle",
                    sealed.len()
                ),
                rank_deficiency,
                sealed_components: sealed,
            }
        }
    } else if sealed.is_empty() {
        Certificate::SymmetricPositiveDefinite {
            evidence: SpdEvidence::Connectivity,
        }
    } else {
        Certificate::Singular {
            reason: format!(
                "{} fluid component(s) have no path to a surface particle",
                sealed.len()
            ),
            rank_deficiency: sealed.len(),
            sealed_components: sealed,
        }
    };
    Ok(LinearProblem {
        kind: ProblemKind::Poisson,
        matrix,
        rhs: vec![rhs],
        unknowns: fluid.members().to_vec(),
        certificate,
        row_gaps: Vec::new(),
        scaling: fluid.members().iter().map(|&i| vol[i]).collect(),
        n_particles: n,
    })
}

impl LinearProblem {
    pub fn size(&self) -> usize {
        self.unknowns.len()
    }

    pub fn min_row_gap(&self) -> Option<f64> {
        (!self.row_gaps.is_empty()).then(|| self.row_gaps.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn write_coordinate<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.matrix.write_coordinate(out)
    }

    fn scatter(&self, local: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        local
            .into_iter()
            .map(|x| {
                let mut g = vec![0.0; self.n_particles];
                for (k, &i) in self.unknowns.iter().enumerate() {
                    g[i] = if self.scaling.is_empty() {
                        x[k]
                    } else {
                        x[k] / self.scaling[k]
                    };
                }
                g
            })
            .collect()
    }

    /// Direct solve with dense LU (prediction) or Cholesky (pressure).
    pub fn solve_dense(&self) -> Result<Solution> {
        if let Certificate::Singular { reason, .. } = &self.certificate {
            return Err(IsphError::Singular(reason.clone()));
        }
        let dense = self.matrix.to_dense();
        let local = match self.kind {
            ProblemKind::Prediction => {
                let lu = dense.lu();
                self.rhs
                    .iter()
                    .map(|b| {
                        lu.solve(&DVector::from_column_slice(b))
                            .map(|x| x.iter().copied().collect())
                            .ok_or_else(|| IsphError::Singular("prediction matrix LU failed".into()))
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()?
            }
            ProblemKind::Poisson => {
                let ch = dense
                    .cholesky()
                    .ok_or_else(|| IsphError::Singular("pressure matrix Cholesky failed".into()))?;
                self.rhs
                    .iter()
                    .map(|b| ch.solve(&DVector::from_column_slice(b)).iter().copied().collect())
                    .collect()
            }
        };
        Ok(Solution {
            values: self.scatter(local),
            iterations: 0,
            method: SolveMethod::Dense,
        })
    }

    /// Krylov solve (CG for the pressure, BiCGSTAB for the prediction); below the dense
    /// limit a failed iteration falls back to the direct solve.
    pub fn solve(&self, settings: &SolverSettings) -> Result<Solution> {
        if let Certificate::Singular { reason, .. } = &self.certificate {
            return Err(IsphError::Singular(reason.clone()));
        }
        let mut local = Vec::with_capacity(self.rhs.len());
        let mut iterations = 0;
        for b in &self.rhs {
            let outcome = match self.kind {
                ProblemKind::Prediction => bicgstab(&self.matrix, b, &settings.iterative),
                ProblemKind::Poisson => conjugate_gradient(&self.matrix, b, &settings.iterative),
            };
            match outcome {
                Ok(o) => {
                    iterations = iterations.max(o.iterations);
                    local.push(o.x);
                }
                Err(e @ (IsphError::SolverDiverged { .. } | IsphError::Singular(_))) => {
                    if self.size() < settings.dense_fallback_below {
                        return self.solve_dense();
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Solution {
            values: self.scatter(local),
            iterations,
            method: SolveMethod::Iterative,
        })
    }
}

/// Solves one problem with the given settings; see [`LinearProblem::solve`].
pub fn solve(problem: &LinearProblem, settings: &SolverSettings) -> Result<Solution> {
    problem.solve(settings)
}
