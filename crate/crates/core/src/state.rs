//! Particle distribution at one time level: positions, velocities, pressures, volumes and
//! the fluid / surface / wall partition.

use serde::{Deserialize, Serialize};

use crate::error::{IsphError, Result};
use crate::kernels::KernelSpec;
use crate::neighbors::Interactions;
use crate::operators::IndexSet;
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Fluid,
    Surface,
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub step: usize,
    pub time: f64,
    dim: usize,
    positions: Vec<Vector>,
    velocities: Vec<Vector>,
    /// One entry per particle; wall entries are unused and kept at zero.
    pressures: Vec<f64>,
    volumes: Vec<f64>,
    roles: Vec<Role>,
}

fn check_vectors(name: &str, dim: usize, v: &[Vector]) -> Result<()> {
    for (i, x) in v.iter().enumerate() {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(IsphError::DegenerateState(format!("{name} {i} is not finite")));
        }
        if dim == 2 && x[2] != 0.0 {
            return Err(IsphError::Usage(format!(
                "{name} {i} has a nonzero z component in a 2D state"
            )));
        }
    }
    Ok(())
}

/// Exact duplicates share all coordinates, so a lexicographic sort puts them side by side.
fn find_coincident(positions: &[Vector]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        let (pa, pb) = (&positions[a], &positions[b]);
        pa[0]
            .total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
    });
    order.windows(2).find_map(|w| {
        let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
        (positions[a] == positions[b]).then_some((a, b))
    })
}

/// Serializable form of a [`ParticleState`]; vectors carry `dim` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub step: usize,
    pub time: f64,
    pub dim: usize,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub pressures: Vec<f64>,
    pub volumes: Vec<f64>,
    pub roles: Vec<Role>,
}

fn to_rows(v: &[Vector], dim: usize) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().take(dim).copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>], dim: usize) -> Result<Vec<Vector>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != dim {
                return Err(IsphError::Usage(format!(
                    "{name} {i} has {} components, expected {dim}",
                    r.len()
                )));
            }
            Ok(Vector::new(r[0], r[1], if dim == 3 { r[2] } else { 0.0 }))
        })
        .collect()
}

impl ParticleState {
    /// Validates and assembles a state at step 0, time 0. Wall velocities must be zero.
    pub fn new(
        dim: usize,
        positions: Vec<Vector>,
        velocities: Vec<Vector>,
        volumes: Vec<f64>,
        roles: Vec<Role>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(IsphError::Usage(format!("dimension must be 2 or 3, got {dim}")));
        }
        let n = positions.len();
        if velocities.len() != n || volumes.len() != n || roles.len() != n {
            return Err(IsphError::Usage(format!(
                "inconsistent lengths: {n} positions, {} velocities, {} volumes, {} roles",
                velocities.len(),
                volumes.len(),
                roles.len()
            )));
        }
        check_vectors("position", dim, &positions)?;
        check_vectors("velocity", dim, &velocities)?;
        if let Some(i) = volumes.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(IsphError::Usage(format!(
                "volume {i} must be positive, got {}",
                volumes[i]
            )));
        }
        for i in 0..n {
            if roles[i] == Role::Wall && velocities[i] != Vector::zeros() {
                return Err(IsphError::Usage(format!("wall particle {i} has a nonzero velocity")));
            }
        }
        if let Some((a, b)) = find_coincident(&positions) {
            return Err(IsphError::DegenerateState(format!(
                "particles {a} and {b} coincide"
            )));
        }
        Ok(Self {
            step: 0,
            time: 0.0,
            dim,
            positions,
            velocities,
            pressures: vec![0.0; n],
            volumes,
            roles,
        })
    }

    pub fn to_record(&self) -> StateRecord {
        StateRecord {
            step: self.step,
            time: self.time,
            dim: self.dim,
            positions: to_rows(&self.positions, self.dim),
            velocities: to_rows(&self.velocities, self.dim),
            pressures: self.pressures.clone(),
            volumes: self.volumes.clone(),
            roles: self.roles.clone(),
        }
    }

    /// Rebuilds and revalidates a state from its record.
    pub fn from_record(r: &StateRecord) -> Result<Self> {
        if r.dim != 2 && r.dim != 3 {
            return Err(IsphError::Usage(format!("dimension must be 2 or 3, got {}", r.dim)));
        }
        let positions = from_rows("position", &r.positions, r.dim)?;
        let velocities = from_rows("velocity", &r.velocities, r.dim)?;
        let mut st = Self::new(r.dim, positions, velocities, r.volumes.clone(), r.roles.clone())?;
        if r.pressures.len() != st.len() {
            return Err(IsphError::Usage("pressure vector has the wrong length".into()));
        }
        st.pressures = r.pressures.clone();
        st.step = r.step;
        st.time = r.time;
        Ok(st)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[Vector] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vector] {
        &self.velocities
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressures
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    pub fn min_volume(&self) -> f64 {
        self.volumes.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn indices_where(&self, pred: impl Fn(Role) -> bool) -> IndexSet {
        let members = (0..self.len()).filter(|&i| pred(self.roles[i])).collect();
        IndexSet::new(self.len(), members).expect("indices are in range and sorted")
    }

    pub fn all_indices(&self) -> IndexSet {
        IndexSet::all(self.len())
    }

    pub fn fluid_indices(&self) -> IndexSet {
        self.indices_where(|r| r == Role::Fluid)
    }

    /// The pressure index set `Λ_fl ∪ Λ_sf`.
    pub fn fluid_surface_indices(&self) -> IndexSet {
        self.indices_where(|r| r != Role::Wall)
    }

    pub fn wall_indices(&self) -> IndexSet {
        self.indices_where(|r| r == Role::Wall)
    }

    pub fn interactions(&self, kernel: &KernelSpec) -> Result<Interactions> {
        if kernel.dim() != self.dim {
            return Err(IsphError::Usage(format!(
                "{}D kernel used with a {}D state",
                kernel.dim(),
                self.dim
            )));
        }
        Interactions::build(&self.positions, kernel)
    }

    /// Replaces the volumes (used by the modified schemes).
    pub fn set_volumes(&mut self, volumes: Vec<f64>) -> Result<()> {
        if volumes.len() != self.len() {
            return Err(IsphError::Usage("volume vector has the wrong length".into()));
        }
        if let Some(i) = volumes.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(IsphError::Usage(format!(
                "volume {i} must be positive, got {}",
                volumes[i]
            )));
        }
        self.volumes = volumes;
        Ok(())
    }

    pub fn set_roles(&mut self, roles: Vec<Role>) -> Result<()> {
        if roles.len() != self.len() {
            return Err(IsphError::Usage("role vector has the wrong length".into()));
        }
        if roles
            .iter()
            .zip(&self.roles)
            .any(|(a, b)| (*a == Role::Wall) != (*b == Role::Wall))
        {
            return Err(IsphError::Usage("wall membership cannot change".into()));
        }
        self.roles = roles;
        Ok(())
    }

    pub(crate) fn set_pressures(&mut self, pressures: Vec<f64>) {
        debug_assert_eq!(pressures.len(), self.len());
        self.pressures = pressures;
    }

    /// `x^{k+1} = x^k + Δt u^{k+1}` with `u^{k+1}` stored as the new velocity field.
    pub fn advect(&self, new_velocities: &[Vector], dt: f64) -> Result<ParticleState> {
        if new_velocities.len() != self.len() {
            return Err(IsphError::Usage("velocity vector has the wrong length".into()));
        }
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(IsphError::Usage(format!("time step must be non-negative, got {dt}")));
        }
        check_vectors("velocity", self.dim, new_velocities)?;
        for (i, u) in new_velocities.iter().enumerate() {
            if self.roles[i] == Role::Wall && *u != Vector::zeros() {
                return Err(IsphError::Usage(format!("wall particle {i} has a nonzero velocity")));
            }
        }
        let positions: Vec<Vector> = self
            .positions
            .iter()
            .zip(new_velocities)
            .map(|(x, u)| x + u * dt)
            .collect();
        if let Some((a, b)) = find_coincident(&positions) {
            return Err(IsphError::DegenerateState(format!(
                "particles {a} and {b} coincide after advection"
            )));
        }
        Ok(ParticleState {
            step: self.step + 1,
            time: self.time + dt,
            positions,
            velocities: new_velocities.to_vec(),
            ..self.clone()
        })
    }

    /// `Σ_{j≠i} V_j w_h(|x_i - x_j|)` for every particle.
    pub fn kernel_sums(&self, inter: &Interactions, kernel: &KernelSpec) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                inter
                    .neighbors(i)
                    .iter()
                    .map(|p| self.volumes[p.j] * kernel.wh(p.r))
                    .sum()
            })
            .collect()
    }

    /// The largest kernel sum over fluid particles, the density reference for surface
    /// detection. Zero when there are no fluid particles.
    pub fn reference_density(&self, kernel: &KernelSpec) -> Result<f64> {
        let inter = self.interactions(kernel)?;
        let sums = self.kernel_sums(&inter, kernel);
        Ok((0..self.len())
            .filter(|&i| self.roles[i] == Role::Fluid)
            .map(|i| sums[i])
            .fold(0.0, f64::max))
    }

    /// Fluid particles whose kernel sum falls below `beta * rho_ref` become surface
    /// particles. Surface and wall labels never change.
    pub fn classify_surface(&self, kernel: &KernelSpec, beta: f64, rho_ref: f64) -> Result<Vec<Role>> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(IsphError::Usage(format!("beta must lie in (0, 1], got {beta}")));
        }
        let inter = self.interactions(kernel)?;
        let sums = self.kernel_sums(&inter, kernel);
        Ok(self
            .roles
            .iter()
            .zip(&sums)
            .map(|(&role, &s)| match role {
                Role::Fluid if s < beta * rho_ref => Role::Surface,
                other => other,
            })
            .collect())
    }
}
