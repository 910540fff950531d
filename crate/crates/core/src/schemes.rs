//! Time stepping: prediction, pressure Poisson solve, correction and advection.
//!
//! [`Scheme`] owns the kernel, physical parameters and configuration of a run. Each step
//! is a pure function of the incoming state; [`Scheme::run`] adds the loop over `k` and
//! the streaming stability-bound monitor.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditions::{audit, connectivity, step_limit, ConditionsConfig, ConditionsReport};
use crate::diagnostics::{
    evaluate_bound, theorem_constant, BoundInputs, ChainChecks, RunMeta, StepDiagnostics, Theorem,
};
use crate::error::{IsphError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{assemble_poisson, assemble_prediction, Certificate, LinearProblem, SolverSettings};
use crate::modified::{solve_particle_volumes, variable_dt};
use crate::neighbors::Interactions;
use crate::operators::{IndexSet, Operators, ScalarField, TrialSpace, VectorField};
use crate::state::{ParticleState, Role};
use crate::Vector;

/// Slack of the correction growth check.
const GROWTH_SLACK: f64 = 1e-10;
/// Slack of the prediction energy check.
const ENERGY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeVariant {
    #[serde(rename = "implicit")]
    Implicit,
    #[serde(rename = "semi")]
    SemiImplicit,
    #[serde(rename = "mod-implicit")]
    ModifiedImplicit,
    #[serde(rename = "mod-semi")]
    ModifiedSemiImplicit,
}

impl SchemeVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeVariant::Implicit => "implicit",
            SchemeVariant::SemiImplicit => "semi",
            SchemeVariant::ModifiedImplicit => "mod-implicit",
            SchemeVariant::ModifiedSemiImplicit => "mod-semi",
        }
    }

    /// The stability theorem covering this scheme.
    pub fn theorem(self) -> Theorem {
        if self.is_implicit() {
            Theorem::Two
        } else {
            Theorem::Three
        }
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, SchemeVariant::Implicit | SchemeVariant::ModifiedImplicit)
    }

    /// Modified variants solve for particle volumes at the start of every step.
    pub fn is_modified(self) -> bool {
        matches!(self, SchemeVariant::ModifiedImplicit | SchemeVariant::ModifiedSemiImplicit)
    }
}

impl FromStr for SchemeVariant {
    type Err = IsphError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(SchemeVariant::Implicit),
            "semi" => Ok(SchemeVariant::SemiImplicit),
            "mod-implicit" => Ok(SchemeVariant::ModifiedImplicit),
            "mod-semi" => Ok(SchemeVariant::ModifiedSemiImplicit),
            other => Err(IsphError::Usage(format!(
                "unknown scheme {other:?} (expected implicit, semi, mod-implicit or mod-semi)"
            ))),
        }
    }
}

impl std::fmt::Display for SchemeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClassifier {
    /// Keep the partition of the initial state.
    Fixed,
    /// Fluid particles with kernel sum below `beta` times the initial reference become
    /// surface particles.
    KernelDensity { beta: f64 },
}

impl Default for SurfaceClassifier {
    fn default() -> Self {
        SurfaceClassifier::KernelDensity { beta: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReclassifyTiming {
    /// After advecting to `x^{k+1}`, so the next audit sees the new partition.
    #[default]
    AfterAdvection,
    /// At the start of each step, before the audit.
    StartOfStep,
}

/// Index set on which `u*` enters the divergence of the pressure right-hand side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceDomain {
    /// Every particle; wall velocities are zero but their volumes still weight the sum.
    #[default]
    All,
    FluidSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeStep {
    Fixed(f64),
    /// `δ` times the time-step limit of the current state; needs `δ` configured.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum BodyForce {
    #[default]
    None,
    Constant(Vector),
    /// One constant vector per particle.
    PerParticle(Vec<Vector>),
}

impl BodyForce {
    /// Standard gravity pointing down the second axis (2D) or the third axis (3D).
    pub fn gravity(dim: usize) -> Self {
        let mut g = Vector::zeros();
        g[dim - 1] = -9.81;
        BodyForce::Constant(g)
    }

    /// `f_i^k`; zero on wall particles.
    pub fn evaluate(&self, state: &ParticleState) -> Result<Vec<Vector>> {
        let n = state.len();
        let mut f = match self {
            BodyForce::None => vec![Vector::zeros(); n],
            BodyForce::Constant(g) => vec![*g; n],
            BodyForce::PerParticle(v) => {
                if v.len() != n {
                    return Err(IsphError::Usage(format!(
                        "per-particle force has {} entries for {n} particles",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        for (fi, r) in f.iter_mut().zip(state.roles()) {
            if *r == Role::Wall {
                *fi = Vector::zeros();
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidParams {
    pub rho: f64,
    pub nu: f64,
    pub dt: TimeStep,
    pub end_time: f64,
    pub force: BodyForce,
}

impl FluidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(IsphError::Usage(format!("density must be positive, got {}", self.rho)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(IsphError::Usage(format!("viscosity must be non-negative, got {}", self.nu)));
        }
        if !(self.end_time >= 0.0 && self.end_time.is_finite()) {
            return Err(IsphError::Usage(format!("end time must be non-negative, got {}", self.end_time)));
        }
        if let TimeStep::Fixed(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(IsphError::Usage(format!("time step must be positive, got {dt}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub variant: SchemeVariant,
    pub conditions: ConditionsConfig,
    pub surface: SurfaceClassifier,
    pub timing: ReclassifyTiming,
    pub solver: SolverSettings,
    /// Reject steps whose pre-step audit fails. Measurements are recorded either way.
    pub audit: bool,
    pub divergence: DivergenceDomain,
    /// Write the prediction and pressure matrices of every step into this directory.
    pub dump_matrices: Option<PathBuf>,
}

impl SchemeConfig {
    pub fn new(variant: SchemeVariant) -> Self {
        SchemeConfig {
            variant,
            conditions: ConditionsConfig::default(),
            surface: SurfaceClassifier::default(),
            timing: ReclassifyTiming::default(),
            solver: SolverSettings::default(),
            audit: true,
            divergence: DivergenceDomain::default(),
            dump_matrices: None,
        }
    }

    pub fn validate(&self, params: &FluidParams) -> Result<()> {
        self.conditions.validate()?;
        if let SurfaceClassifier::KernelDensity { beta } = self.surface {
            if !(beta > 0.0 && beta <= 1.0) {
                return Err(IsphError::Usage(format!("beta must lie in (0, 1], got {beta}")));
            }
        }
        let variable = self.variant == SchemeVariant::ModifiedSemiImplicit || params.dt == TimeStep::Adaptive;
        if variable && self.conditions.delta.is_none() {
            return Err(IsphError::Usage(format!(
                "the {} scheme with this time step needs delta configured",
                self.variant
            )));
        }
        if variable && params.nu == 0.0 {
            return Err(IsphError::Usage("a variable time step needs a positive viscosity".into()));
        }
        Ok(())
    }
}

/// Outcome of one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// `x^{k+1}`, `u^{k+1}`, and the pressures `p^{k+1}` at the step's start positions.
    pub state: ParticleState,
    /// `u*`; zero on walls.
    pub predicted: Vec<Vector>,
    /// Row `k + 1` without the bound, which depends on the run history.
    pub diagnostics: StepDiagnostics,
}

/// A finished or aborted run. `rows[0]` describes the initial state.
#[derive(Debug)]
pub struct Trajectory {
    pub meta: RunMeta,
    pub rows: Vec<StepDiagnostics>,
    pub final_state: ParticleState,
    /// The error that stopped the run, tagged with the failing step.
    pub error: Option<IsphError>,
}

impl Trajectory {
    pub fn into_result(self) -> Result<Self> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scheme {
    kernel: KernelSpec,
    params: FluidParams,
    config: SchemeConfig,
    rho_ref: f64,
    domain: Option<(Vector, Vector)>,
}

fn squared_norm(ops: &Operators, v: &[Vector]) -> Result<f64> {
    let f = VectorField::from_global(IndexSet::all(v.len()), v)?;
    Ok(ops.l2_norm(&f)?.powi(2))
}

fn dump(problem: &LinearProblem, dir: &std::path::Path, name: &str, k: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join(format!("{name}_{k:06}.mtx")))?;
    problem.write_coordinate(std::io::BufWriter::new(file))
}

impl Scheme {
    /// `initial` fixes the density reference of the kernel-density surface classifier.
    pub fn new(kernel: KernelSpec, params: FluidParams, config: SchemeConfig, initial: &ParticleState) -> Result<Self> {
        params.validate()?;
        config.validate(&params)?;
        if kernel.dim() != initial.dim() {
            return Err(IsphError::Usage(format!(
                "kernel is {}-dimensional but the state is {}-dimensional",
                kernel.dim(),
                initial.dim()
            )));
        }
        let rho_ref = initial.reference_density(&kernel)?;
        Ok(Scheme {
            kernel,
            params,
            config,
            rho_ref,
            domain: None,
        })
    }

    /// Particles outside this box are counted in the diagnostics.
    pub fn with_domain(mut self, min: Vector, max: Vector) -> Self {
        self.domain = Some((min, max));
        self
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn params(&self) -> &FluidParams {
        &self.params
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn meta(&self, dim: usize) -> RunMeta {
        RunMeta {
            scheme: self.config.variant.as_str().to_string(),
            theorem: self.config.variant.theorem(),
            dim,
            nu: self.params.nu,
            end_time: self.params.end_time,
            c0: self.config.conditions.c0,
            delta: self.config.conditions.delta,
        }
    }

    fn reclassify(&self, state: &mut ParticleState) -> Result<()> {
        if let SurfaceClassifier::KernelDensity { beta } = self.config.surface {
            let roles = state.classify_surface(&self.kernel, beta, self.rho_ref)?;
            state.set_roles(roles)?;
        }
        Ok(())
    }

    fn out_of_bounds(&self, state: &ParticleState) -> usize {
        let Some((lo, hi)) = self.domain else { return 0 };
        let d = state.dim();
        state
            .positions()
            .iter()
            .filter(|x| (0..d).any(|c| x[c] < lo[c] || x[c] > hi[c]))
            .count()
    }

    /// Row 0 of a run.
    pub fn initial_diagnostics(&self, state: &ParticleState) -> Result<StepDiagnostics> {
        let inter = state.interactions(&self.kernel)?;
        let ops = Operators::new(state, &inter)?;
        let u = VectorField::from_global(state.all_indices(), state.velocities())?;
        let u_l2_sq = ops.l2_norm(&u)?.powi(2);
        Ok(StepDiagnostics {
            k: state.step,
            t: state.time,
            dt: 0.0,
            u_l2: u_l2_sq.sqrt(),
            u_h1: ops.h1_seminorm(&u)?,
            u_l2_sq,
            prediction_iters: 0,
            poisson_iters: 0,
            connectivity_ok: None,
            semireg_s: None,
            dt_limit: None,
            dt_admissible: None,
            f_hm1_sq: None,
            f_l2_sq: None,
            inputs: BoundInputs {
                u0_sq: u_l2_sq,
                ..Default::default()
            },
            bound: None,
            out_of_bounds: self.out_of_bounds(state),
            volume_solve_ok: None,
            min_volume: state.min_volume(),
            semireg_residual: None,
            chain: None,
            report: None,
        })
    }

    /// One step of the configured variant.
    pub fn step(&self, state: &ParticleState) -> Result<StepResult> {
        self.step_capped(state, self.config.variant.is_implicit(), f64::INFINITY)
    }

    /// One step with the implicit viscous prediction.
    pub fn step_implicit(&self, state: &ParticleState) -> Result<StepResult> {
        self.step_capped(state, true, f64::INFINITY)
    }

    /// One step with the explicit viscous prediction.
    pub fn step_semi_implicit(&self, state: &ParticleState) -> Result<StepResult> {
        self.step_capped(state, false, f64::INFINITY)
    }

    fn step_size(&self, state: &ParticleState, inter: &Interactions) -> Result<f64> {
        let variable =
            self.config.variant == SchemeVariant::ModifiedSemiImplicit || self.params.dt == TimeStep::Adaptive;
        if !variable {
            let TimeStep::Fixed(dt) = self.params.dt else { unreachable!() };
            return Ok(dt);
        }
        let delta = self.config.conditions.delta.expect("validated");
        let dt = if self.config.variant.is_modified() {
            variable_dt(state.volumes(), inter, delta, self.params.nu)?
        } else {
            delta * step_limit(state.volumes(), inter, self.params.nu)?
        };
        if !dt.is_finite() {
            return Err(IsphError::Usage(
                "every particle is isolated; the variable time step is unbounded".into(),
            ));
        }
        Ok(dt)
    }

    fn check_audit(&self, report: &ConditionsReport, implicit: bool) -> Result<()> {
        if !self.config.audit {
            return Ok(());
        }
        let mut reasons = Vec::new();
        if !report.connectivity_ok {
            reasons.push(format!(
                "{} fluid particle(s) are not h-connected",
                report.disconnected_fluid_indices.len()
            ));
        }
        if report.semireg_ok == Some(false) {
            reasons.push(format!(
                "semi-regularity S = {} exceeds {}",
                report.semireg_s,
                report.semireg_bound.unwrap_or(f64::NAN)
            ));
        }
        if !implicit && report.timestep_ok == Some(false) {
            reasons.push(format!(
                "dt = {} exceeds the admissible {}",
                report.dt,
                report.dt_admissible.unwrap_or(f64::NAN)
            ));
        }
        if reasons.is_empty() {
            Ok(())
        } else {
            Err(IsphError::StepRejected {
                reason: reasons.join("; "),
                report: Box::new(report.clone()),
            })
        }
    }

    fn step_capped(&self, state: &ParticleState, implicit: bool, max_dt: f64) -> Result<StepResult> {
        let nu = self.params.nu;
        let rho = self.params.rho;
        let dim = state.dim();
        let mut st = state.clone();
        if self.config.timing == ReclassifyTiming::StartOfStep {
            self.reclassify(&mut st)?;
        }
        let inter = st.interactions(&self.kernel)?;

        let mut volume_solve_ok = None;
        if self.config.variant.is_modified() {
            let solve = solve_particle_volumes(&st, &inter)?;
            volume_solve_ok = Some(solve.is_feasible());
            st.set_volumes(solve.into_volumes()?)?;
        }
        let dt = self.step_size(&st, &inter)?.min(max_dt);

        let report = if nu > 0.0 {
            let r = audit(&st, &self.kernel, &inter, dt, nu, &self.config.conditions)?;
            self.check_audit(&r, implicit)?;
            Some(r)
        } else {
            let conn = connectivity(&st, &inter);
            if self.config.audit && !conn.ok {
                return Err(IsphError::Usage(format!(
                    "{} fluid particle(s) are not h-connected",
                    conn.disconnected.len()
                )));
            }
            None
        };

        let n = st.len();
        let all = st.all_indices();
        let ops = Operators::new(&st, &inter)?;
        let force = self.params.force.evaluate(&st)?;
        let u_k = st.velocities().to_vec();

        // Prediction.
        let mut prediction_iters = 0;
        let mut predicted = vec![Vector::zeros(); n];
        let fs = st.fluid_surface_indices();
        if implicit {
            let problem = assemble_prediction(&st, &inter, dt, nu, &u_k, &force)?;
            if let Some(dir) = &self.config.dump_matrices {
                dump(&problem, dir, "prediction", st.step)?;
            }
            let sol = problem.solve(&self.config.solver)?;
            prediction_iters = sol.iterations;
            for &i in fs.members() {
                for c in 0..dim {
                    predicted[i][c] = sol.values[c][i];
                }
            }
        } else {
            let u = VectorField::from_global(all.clone(), &u_k)?;
            let lap = ops.laplacian(&u)?;
            for &i in fs.members() {
                predicted[i] = u_k[i] + dt * (nu * lap.global()[i] + force[i]);
            }
        }

        // Pressure.
        let domain = match self.config.divergence {
            DivergenceDomain::All => all.clone(),
            DivergenceDomain::FluidSurface => fs.clone(),
        };
        let poisson = assemble_poisson(&st, &inter, dt, rho, &predicted, &domain)?;
        if let Some(dir) = &self.config.dump_matrices {
            dump(&poisson, dir, "poisson", st.step)?;
        }
        if let Certificate::Singular { reason, .. } = &poisson.certificate {
            let report = match &report {
                Some(r) => r.clone(),
                None => audit(&st, &self.kernel, &inter, dt, 1.0, &self.config.conditions)?,
            };
            return Err(IsphError::StepRejected {
                reason: format!("pressure system is singular: {reason}"),
                report: Box::new(report),
            });
        }
        let psol = poisson.solve(&self.config.solver)?;
        let pressures = psol.values.into_iter().next().unwrap_or_else(|| vec![0.0; n]);

        // Correction on fluid and surface particles.
        let p = ScalarField::from_global(fs.clone(), &pressures)?;
        let grad = ops.gradient_minus(&p)?;
        let mut u_new = vec![Vector::zeros(); n];
        for &i in fs.members() {
            u_new[i] = predicted[i] - (dt / rho) * grad.global()[i];
        }

        // Chain checks at the step's positions and volumes.
        let u_star_sq = squared_norm(&ops, &predicted)?;
        let u_new_sq = squared_norm(&ops, &u_new)?;
        let u_k_sq = squared_norm(&ops, &u_k)?;
        let f_field = VectorField::from_global(all.clone(), &force)?;
        let f_l2_sq = ops.l2_norm(&f_field)?.powi(2);
        let f_hm1_sq = ops.h_minus1_seminorm(&f_field, TrialSpace::WallPinned)?.powi(2);
        let c_tilde = report
            .as_ref()
            .map_or(0.0, |r| ((r.semireg_s - dim as f64) / dt).max(0.0));
        let growth = 1.0 + c_tilde * (2.0 + c_tilde * dt) * dt;
        let prediction_energy_ok = (implicit && nu > 0.0)
            .then(|| u_star_sq <= (u_k_sq + dt / (2.0 * nu) * f_hm1_sq) * (1.0 + ENERGY_SLACK));
        let laplacian_margin = match (&report, implicit) {
            (Some(r), false) if r.dt_limit.is_finite() => {
                let u = VectorField::from_global(all.clone(), &u_k)?;
                let h1 = ops.h1_seminorm_squared(&u)?;
                let lap = ops.l2_norm(&ops.laplacian(&u)?)?.powi(2);
                let delta_tilde = dt / r.dt_limit;
                let margin = dt * nu / (2.0 * delta_tilde) * lap - h1;
                Some(if h1 > 0.0 { margin / h1 } else { margin })
            }
            _ => None,
        };
        let chain = ChainChecks {
            u_star_l2_sq: u_star_sq,
            c_tilde,
            correction_growth_ok: u_new_sq <= growth * u_star_sq * (1.0 + GROWTH_SLACK),
            prediction_energy_ok,
            laplacian_margin,
        };

        st.set_pressures(pressures);
        let mut next = st.advect(&u_new, dt)?;
        if self.config.timing == ReclassifyTiming::AfterAdvection {
            self.reclassify(&mut next)?;
        }

        let next_inter = next.interactions(&self.kernel)?;
        let next_ops = Operators::new(&next, &next_inter)?;
        let u_next = VectorField::from_global(next.all_indices(), next.velocities())?;
        let diagnostics = StepDiagnostics {
            k: next.step,
            t: next.time,
            dt,
            u_l2: u_new_sq.sqrt(),
            u_h1: next_ops.h1_seminorm(&u_next)?,
            u_l2_sq: u_new_sq,
            prediction_iters,
            poisson_iters: psol.iterations,
            connectivity_ok: Some(report.as_ref().is_none_or(|r| r.connectivity_ok)),
            semireg_s: report.as_ref().map(|r| r.semireg_s),
            dt_limit: report.as_ref().map(|r| r.dt_limit),
            dt_admissible: report.as_ref().and_then(|r| r.dt_admissible),
            f_hm1_sq: Some(f_hm1_sq),
            f_l2_sq: Some(f_l2_sq),
            inputs: BoundInputs::default(),
            bound: None,
            out_of_bounds: self.out_of_bounds(&next),
            volume_solve_ok,
            min_volume: st.min_volume(),
            semireg_residual: volume_solve_ok
                .and(report.as_ref())
                .map(|r| (r.semireg_s - dim as f64).abs()),
            chain: Some(chain),
            report,
        };
        Ok(StepResult {
            state: next,
            predicted,
            diagnostics,
        })
    }

    /// Runs to the end time. With a fixed step this takes `floor(T/Δt)` steps; with a
    /// variable step the last one is shortened to land on `T`. A failing step ends the
    /// run and is returned in [`Trajectory::error`]; observer errors abort immediately.
    pub fn run<F>(&self, initial: &ParticleState, mut observer: F) -> Result<Trajectory>
    where
        F: FnMut(&StepDiagnostics, &ParticleState) -> Result<()>,
    {
        let meta = self.meta(initial.dim());
        let mut monitor = Monitor::new(&meta);
        let mut row0 = self.initial_diagnostics(initial)?;
        monitor.observe(&mut row0);
        observer(&row0, initial)?;
        let mut rows = vec![row0];
        let mut state = initial.clone();
        let t_end = self.params.end_time;
        let fixed_steps = match self.params.dt {
            TimeStep::Fixed(dt) if self.config.variant != SchemeVariant::ModifiedSemiImplicit => {
                Some(((t_end / dt) * (1.0 + 1e-12)).floor() as usize)
            }
            _ => None,
        };
        let mut error = None;
        let mut taken = 0usize;
        loop {
            let cap = match fixed_steps {
                Some(k) if taken >= k => break,
                Some(_) => f64::INFINITY,
                None => {
                    let remaining = t_end - state.time;
                    if remaining <= 1e-12 * t_end.max(f64::MIN_POSITIVE) {
                        break;
                    }
                    remaining
                }
            };
            match self.step_capped(&state, self.config.variant.is_implicit(), cap) {
                Ok(res) => {
                    let mut row = res.diagnostics;
                    monitor.observe(&mut row);
                    observer(&row, &res.state)?;
                    rows.push(row);
                    state = res.state;
                    taken += 1;
                }
                Err(e) => {
                    error = Some(e.at_step(state.step));
                    break;
                }
            }
        }
        Ok(Trajectory {
            meta,
            rows,
            final_state: state,
            error,
        })
    }
}

/// Streaming bound evaluation with the configured constants, or the running measured
/// ones where none are configured.
struct Monitor {
    theorem: Theorem,
    dim: usize,
    nu: f64,
    end_time: f64,
    c0: Option<f64>,
    delta: Option<f64>,
    measured_c0: f64,
    measured_delta: f64,
    inputs: BoundInputs,
}

impl Monitor {
    fn new(meta: &RunMeta) -> Self {
        Monitor {
            theorem: meta.theorem,
            dim: meta.dim,
            nu: meta.nu,
            end_time: meta.end_time,
            c0: meta.c0,
            delta: meta.delta,
            measured_c0: 0.0,
            measured_delta: 0.0,
            inputs: BoundInputs::default(),
        }
    }

    fn observe(&mut self, row: &mut StepDiagnostics) {
        if row.k == 0 || row.dt == 0.0 {
            self.inputs = BoundInputs {
                u0_sq: row.u_l2_sq,
                ..Default::default()
            };
            row.inputs = self.inputs;
            return;
        }
        self.inputs.sum_dt_f_hm1_sq += row.dt * row.f_hm1_sq.unwrap_or(0.0);
        self.inputs.sum_dt2_f_l2_sq += row.dt * row.dt * row.f_l2_sq.unwrap_or(0.0);
        row.inputs = self.inputs;
        if let Some(s) = row.semireg_s {
            self.measured_c0 = self.measured_c0.max(((s - self.dim as f64) / row.dt).max(0.0));
        }
        if let Some(l) = row.dt_limit {
            if l.is_finite() {
                self.measured_delta = self.measured_delta.max(row.dt / l);
            }
        }
        if !(self.nu > 0.0) {
            return;
        }
        let c0 = self.c0.unwrap_or(self.measured_c0);
        let delta = match self.theorem {
            Theorem::Two => None,
            Theorem::Three => match self.delta {
                Some(d) => Some(d),
                None if self.measured_delta < 1.0 => Some(self.measured_delta.max(f64::MIN_POSITIVE)),
                None => return,
            },
        };
        if let Ok(c) = theorem_constant(self.theorem, self.end_time, self.nu, c0, delta) {
            row.bound = Some(evaluate_bound(self.theorem, c, row.u_l2_sq, &self.inputs, self.dim));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Jittered block: bottom two rows wall, top row surface.
    fn column(nx: usize, ny: usize, s: f64, seed: u64, jitter: f64) -> ParticleState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::new();
        let mut roles = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let (dx, dy) = if j >= 2 {
                    (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
                } else {
                    (0.0, 0.0)
                };
                pos.push(Vector::new((i as f64 + dx) * s, (j as f64 + dy) * s, 0.0));
                roles.push(if j < 2 {
                    Role::Wall
                } else if j == ny - 1 {
                    Role::Surface
                } else {
                    Role::Fluid
                });
            }
        }
        let n = pos.len();
        let vel = (0..n)
            .map(|i| {
                if roles[i] == Role::Wall {
                    Vector::zeros()
                } else {
                    Vector::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)
                }
            })
            .collect();
        ParticleState::new(2, pos, vel, vec![s * s; n], roles).unwrap()
    }

    fn params(nu: f64, dt: f64) -> FluidParams {
        FluidParams {
            rho: 1000.0,
            nu,
            dt: TimeStep::Fixed(dt),
            end_time: 10.0 * dt,
            force: BodyForce::gravity(2),
        }
    }

    fn scheme(st: &ParticleState, variant: SchemeVariant, p: FluidParams) -> Scheme {
        let k = KernelSpec::cubic(2, 0.12).unwrap();
        let mut c = SchemeConfig::new(variant);
        c.surface = SurfaceClassifier::Fixed;
        Scheme::new(k, p, c, st).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            SchemeVariant::Implicit,
            SchemeVariant::SemiImplicit,
            SchemeVariant::ModifiedImplicit,
            SchemeVariant::ModifiedSemiImplicit,
        ] {
            assert_eq!(v.as_str().parse::<SchemeVariant>().unwrap(), v);
        }
        assert!("explicit".parse::<SchemeVariant>().is_err());
        assert_eq!(SchemeVariant::ModifiedSemiImplicit.theorem(), Theorem::Three);
    }

    #[test]
    fn walls_stay_at_rest() {
        let st = column(8, 8, 0.1, 1, 0.2);
        for v in [SchemeVariant::Implicit, SchemeVariant::SemiImplicit] {
            let sch = scheme(&st, v, params(0.05, 1e-3));
            let r = sch.step(&st).unwrap();
            for i in st.wall_indices().members() {
                assert_eq!(r.state.velocities()[*i], Vector::zeros());
                assert_eq!(r.predicted[*i], Vector::zeros());
                assert_eq!(r.state.positions()[*i], st.positions()[*i]);
            }
        }
    }

    #[test]
    fn zero_viscosity_schemes_coincide() {
        let st = column(7, 7, 0.1, 2, 0.2);
        let mut p = params(0.0, 1e-3);
        p.force = BodyForce::Constant(Vector::new(0.3, -1.0, 0.0));
        let sch = scheme(&st, SchemeVariant::Implicit, p.clone());
        let a = sch.step_implicit(&st).unwrap();
        let b = sch.step_semi_implicit(&st).unwrap();
        for i in 0..st.len() {
            let expect = if st.roles()[i] == Role::Wall {
                Vector::zeros()
            } else {
                st.velocities()[i] + 1e-3 * Vector::new(0.3, -1.0, 0.0)
            };
            assert!((a.predicted[i] - expect).norm() <= 1e-13 * (1.0 + expect.norm()));
            assert!((a.predicted[i] - b.predicted[i]).norm() <= 1e-13);
            assert!((a.state.velocities()[i] - b.state.velocities()[i]).norm() <= 1e-10);
        }
    }

    #[test]
    fn semi_implicit_prediction_matches_direct_sum() {
        let st = column(6, 7, 0.1, 3, 0.2);
        let (nu, dt) = (0.07, 2e-3);
        let sch = scheme(&st, SchemeVariant::SemiImplicit, params(nu, dt));
        let r = sch.step(&st).unwrap();
        let k = sch.kernel();
        let (x, u, v) = (st.positions(), st.velocities(), st.volumes());
        let g = Vector::new(0.0, -9.81, 0.0);
        for i in 0..st.len() {
            if st.roles()[i] == Role::Wall {
                continue;
            }
            let mut lap = Vector::zeros();
            for j in 0..st.len() {
                let rij = (x[i] - x[j]).norm();
                if j != i && rij < k.support_radius() {
                    lap -= v[j] * (-2.0 * k.dwh(rij) / rij) * (u[i] - u[j]);
                }
            }
            let expect = u[i] + dt * (nu * lap + g);
            assert!((r.predicted[i] - expect).norm() <= 1e-13 * expect.norm().max(1.0));
        }
    }

    #[test]
    fn pressure_bookkeeping_agrees() {
        let st = column(8, 8, 0.1, 4, 0.2);
        let (rho, dt) = (1000.0, 1e-3);
        let sch = scheme(&st, SchemeVariant::Implicit, params(0.05, dt));
        let r = sch.step(&st).unwrap();
        // Recompute at the step's start positions with the fluid-surface domain.
        let inter = st.interactions(sch.kernel()).unwrap();
        let ops = Operators::new(&st, &inter).unwrap();
        let fs = st.fluid_surface_indices();
        let fl = st.fluid_indices();
        let p = ScalarField::from_global(fs.clone(), r.state.pressures()).unwrap();
        let ustar = VectorField::from_global(fs.clone(), &r.predicted).unwrap();
        let unew = VectorField::from_global(fs.clone(), r.state.velocities()).unwrap();
        let gp = ops.gradient_minus(&p).unwrap();
        let dgp = ops.divergence_plus(&gp).unwrap();
        let pf = p.restrict(&fl).unwrap();
        let lhs = ops.inner_product(&pf, &ops.divergence_plus(&unew).unwrap().restrict(&fl).unwrap()).unwrap();
        let a = ops.inner_product(&pf, &ops.divergence_plus(&ustar).unwrap().restrict(&fl).unwrap()).unwrap();
        let b = ops.inner_product(&pf, &dgp.restrict(&fl).unwrap()).unwrap();
        let rhs = a - dt / rho * b;
        assert!((lhs - rhs).abs() <= 1e-11 * a.abs().max(b.abs() * dt / rho).max(1e-300));
    }

    #[test]
    fn quiescent_state_is_a_fixed_point() {
        let mut st = column(6, 6, 0.1, 5, 0.0);
        let n = st.len();
        st = ParticleState::new(2, st.positions().to_vec(), vec![Vector::zeros(); n], st.volumes().to_vec(), st.roles().to_vec()).unwrap();
        let mut p = params(0.05, 1e-3);
        p.force = BodyForce::None;
        for v in [SchemeVariant::Implicit, SchemeVariant::SemiImplicit] {
            let sch = scheme(&st, v, p.clone());
            let traj = sch.run(&st, |_, _| Ok(())).unwrap().into_result().unwrap();
            assert_eq!(traj.rows.len(), 11);
            assert_eq!(traj.final_state.positions(), st.positions());
            assert!(traj.final_state.velocities().iter().all(|u| *u == Vector::zeros()));
            assert!(traj.final_state.pressures().iter().all(|p| *p == 0.0));
            assert!(traj.rows.iter().skip(1).all(|r| r.bound.unwrap().ok));
        }
    }

    #[test]
    fn empty_run_emits_only_the_initial_row() {
        let st = column(5, 5, 0.1, 6, 0.1);
        let mut p = params(0.05, 1e-3);
        p.end_time = 0.0;
        let traj = scheme(&st, SchemeVariant::Implicit, p).run(&st, |_, _| Ok(())).unwrap();
        assert_eq!(traj.rows.len(), 1);
        assert!(traj.error.is_none());
    }

    #[test]
    fn adaptive_run_lands_on_end_time() {
        let st = column(6, 6, 0.1, 7, 0.1);
        let k = KernelSpec::cubic(2, 0.12).unwrap();
        let mut c = SchemeConfig::new(SchemeVariant::SemiImplicit);
        c.conditions = ConditionsConfig::new(None, Some(0.5)).unwrap();
        let p = FluidParams {
            rho: 1.0,
            nu: 0.5,
            dt: TimeStep::Adaptive,
            end_time: 0.01,
            force: BodyForce::None,
        };
        let traj = Scheme::new(k, p, c, &st).unwrap().run(&st, |_, _| Ok(())).unwrap();
        let traj = traj.into_result().unwrap();
        assert!((traj.final_state.time - 0.01).abs() <= 1e-15);
        for r in traj.rows.iter().skip(1) {
            assert!(r.dt <= 0.5 * r.dt_limit.unwrap() * (1.0 + 1e-15));
            assert!(r.chain.unwrap().laplacian_margin.unwrap() <= 1e-10);
        }
    }

    #[test]
    fn sealed_fluid_rejects_the_step() {
        // No surface particles: the pressure system has a null space.
        let st = column(5, 5, 0.1, 8, 0.0);
        let roles: Vec<Role> = st.roles().iter().map(|r| if *r == Role::Surface { Role::Fluid } else { *r }).collect();
        let mut st = st;
        st.set_roles(roles).unwrap();
        let mut c = SchemeConfig::new(SchemeVariant::Implicit);
        c.surface = SurfaceClassifier::Fixed;
        c.audit = false;
        let sch = Scheme::new(KernelSpec::cubic(2, 0.12).unwrap(), params(0.05, 1e-3), c, &st).unwrap();
        match sch.step(&st) {
            Err(IsphError::StepRejected { reason, .. }) => assert!(reason.contains("singular")),
            other => panic!("expected rejection, got {other:?}"),
        }
        let traj = sch.run(&st, |_, _| Ok(())).unwrap();
        assert!(matches!(traj.error, Some(IsphError::AtStep { step: 0, .. })));
    }

    #[test]
    fn adaptive_needs_delta() {
        let st = column(4, 4, 0.1, 9, 0.0);
        let mut p = params(0.05, 1e-3);
        p.dt = TimeStep::Adaptive;
        let c = SchemeConfig::new(SchemeVariant::Implicit);
        assert!(Scheme::new(KernelSpec::cubic(2, 0.12).unwrap(), p, c, &st).is_err());
    }
}
