//! JSON scenario files: particle generators, volumes, kernel, physics and conditions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionsConfig;
use crate::error::{IsphError, Result};
use crate::kernels::KernelSpec;
use crate::modified::solve_particle_volumes;
use crate::schemes::{
    BodyForce, DivergenceDomain, FluidParams, Scheme, SchemeConfig, SchemeVariant, SurfaceClassifier, TimeStep,
};
use crate::state::{ParticleState, Role};
use crate::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Lattice points `min + s·(i, j[, l])` inside `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub role: Role,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitParticle {
    pub position: Vec<f64>,
    pub role: Role,
    #[serde(default)]
    pub velocity: Option<Vec<f64>>,
    #[serde(default)]
    pub volume: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeNamed {
    /// `|Ω| / N` with `|Ω|` the domain box measure.
    Uniform,
    /// `spacing^d` for block particles; explicit particles need a volume.
    Lattice,
    /// Every particle lists its own.
    Explicit,
    /// Solved from the volume system at the initial positions.
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VolumeSpec {
    Named(VolumeNamed),
    Constant { constant: f64 },
}

impl Default for VolumeSpec {
    fn default() -> Self {
        VolumeSpec::Named(VolumeNamed::Lattice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelNamed {
    Cubic,
    Quintic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelChoice {
    Named(KernelNamed),
    Custom { custom: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepChoice {
    Fixed(f64),
    /// Only `"adaptive"` is accepted.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForceChoice {
    Vector(Vec<f64>),
    /// `"gravity"` or `"none"`.
    Named(String),
    PerParticle { per_particle: Vec<Vec<f64>> },
}

impl Default for ForceChoice {
    fn default() -> Self {
        ForceChoice::Named("none".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VelocityChoice {
    Constant(Vec<f64>),
    PerParticle { per_particle: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDensityConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SurfaceChoice {
    /// `"fixed"` or `"kernel_density"`.
    Named(String),
    KernelDensity { kernel_density: KernelDensityConfig },
}

impl Default for SurfaceChoice {
    fn default() -> Self {
        SurfaceChoice::Named("fixed".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dimension: usize,
    pub domain: Domain,
    #[serde(default)]
    pub blocks: Vec<Block>,
    #[serde(default)]
    pub particles: Vec<ExplicitParticle>,
    #[serde(default)]
    pub volumes: VolumeSpec,
    pub kernel: KernelChoice,
    pub smoothing_length: f64,
    pub density: f64,
    pub viscosity: f64,
    pub dt: StepChoice,
    pub end_time: f64,
    #[serde(default)]
    pub body_force: ForceChoice,
    #[serde(default)]
    pub initial_velocity: Option<VelocityChoice>,
    #[serde(default)]
    pub surface: SurfaceChoice,
    #[serde(default)]
    pub conditions: ConditionsConfig,
    /// Particles whose predicted velocity enters the pressure right-hand side.
    #[serde(default)]
    pub divergence_domain: DivergenceDomain,
    #[serde(default)]
    pub seed: u64,
    /// Uniform random displacement of non-wall block particles, as a fraction of the
    /// block spacing.
    #[serde(default)]
    pub jitter: f64,
    /// Free-form description.
    #[serde(default)]
    pub description: Option<String>,
    /// `(Σ V_i |u_i|²)^{1/2}` of the initial state, when recorded.
    #[serde(default)]
    pub initial_l2_norm: Option<f64>,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> IsphError {
    IsphError::Scenario(msg.into())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario; custom kernel paths resolve relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    fn vector(&self, what: &str, v: &[f64]) -> Result<Vector> {
        if v.len() != self.dimension {
            return Err(bad(format!("{what} has {} components, expected {}", v.len(), self.dimension)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("{what} is not finite")));
        }
        Ok(Vector::new(v[0], v[1], if self.dimension == 3 { v[2] } else { 0.0 }))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dimension == 2 || self.dimension == 3) {
            return Err(bad(format!("dimension must be 2 or 3, got {}", self.dimension)));
        }
        let (lo, hi) = self.domain()?;
        if (0..self.dimension).any(|c| !(hi[c] > lo[c])) {
            return Err(bad("domain max must exceed min in every coordinate"));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            self.vector(&format!("block {k} min"), &b.min)?;
            self.vector(&format!("block {k} max"), &b.max)?;
            if !(b.spacing > 0.0 && b.spacing.is_finite()) {
                return Err(bad(format!("block {k} spacing must be positive")));
            }
        }
        if self.blocks.is_empty() && self.particles.is_empty() {
            return Err(bad("scenario has no particles"));
        }
        if !(self.smoothing_length > 0.0) {
            return Err(bad("smoothing_length must be positive"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(bad("jitter must lie in [0, 0.5)"));
        }
        self.conditions.validate().map_err(|e| bad(e.to_string()))?;
        self.time_step()?;
        self.params()?.validate().map_err(|e| bad(e.to_string()))?;
        self.surface_classifier()?;
        if let TimeStep::Fixed(dt) = self.time_step()? {
            if dt > self.end_time && self.end_time > 0.0 {
                return Err(bad("dt must not exceed end_time"));
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<(Vector, Vector)> {
        Ok((self.vector("domain min", &self.domain.min)?, self.vector("domain max", &self.domain.max)?))
    }

    fn domain_measure(&self) -> f64 {
        (0..self.dimension).map(|c| self.domain.max[c] - self.domain.min[c]).product()
    }

    pub fn time_step(&self) -> Result<TimeStep> {
        match &self.dt {
            StepChoice::Fixed(dt) => Ok(TimeStep::Fixed(*dt)),
            StepChoice::Named(s) if s == "adaptive" => Ok(TimeStep::Adaptive),
            StepChoice::Named(s) => Err(bad(format!("dt must be a number or \"adaptive\", got {s:?}"))),
        }
    }

    pub fn surface_classifier(&self) -> Result<SurfaceClassifier> {
        match &self.surface {
            SurfaceChoice::Named(s) if s == "fixed" => Ok(SurfaceClassifier::Fixed),
            SurfaceChoice::Named(s) if s == "kernel_density" => Ok(SurfaceClassifier::default()),
            SurfaceChoice::Named(s) => Err(bad(format!("unknown surface classifier {s:?}"))),
            SurfaceChoice::KernelDensity { kernel_density } => Ok(SurfaceClassifier::KernelDensity {
                beta: kernel_density.beta,
            }),
        }
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        let (d, h) = (self.dimension, self.smoothing_length);
        match &self.kernel {
            KernelChoice::Named(KernelNamed::Cubic) => KernelSpec::cubic(d, h),
            KernelChoice::Named(KernelNamed::Quintic) => KernelSpec::quintic(d, h),
            KernelChoice::Custom { custom } => {
                let path = match &self.base_dir {
                    Some(dir) if custom.is_relative() => dir.join(custom),
                    _ => custom.clone(),
                };
                KernelSpec::from_table_file(&path, d, h)
            }
        }
    }

    fn force(&self) -> Result<BodyForce> {
        match &self.body_force {
            ForceChoice::Vector(v) => Ok(BodyForce::Constant(self.vector("body_force", v)?)),
            ForceChoice::Named(s) if s == "gravity" => Ok(BodyForce::gravity(self.dimension)),
            ForceChoice::Named(s) if s == "none" => Ok(BodyForce::None),
            ForceChoice::Named(s) => Err(bad(format!("unknown body force {s:?}"))),
            ForceChoice::PerParticle { per_particle } => Ok(BodyForce::PerParticle(
                per_particle
                    .iter()
                    .enumerate()
                    .map(|(i, v)| self.vector(&format!("body force {i}"), v))
                    .collect::<Result<_>>()?,
            )),
        }
    }

    pub fn params(&self) -> Result<FluidParams> {
        Ok(FluidParams {
            rho: self.density,
            nu: self.viscosity,
            dt: self.time_step()?,
            end_time: self.end_time,
            force: self.force()?,
        })
    }

    /// Scheme configuration with this scenario's conditions and surface classifier.
    pub fn scheme_config(&self, variant: SchemeVariant) -> Result<SchemeConfig> {
        let mut c = SchemeConfig::new(variant);
        c.conditions = self.conditions;
        c.surface = self.surface_classifier()?;
        c.divergence = self.divergence_domain;
        Ok(c)
    }

    /// The initial state: generated and explicit particles, their volumes, and
    /// velocities sampled from the initial field with walls at rest.
    pub fn init(&self) -> Result<ParticleState> {
        let d = self.dimension;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut pos = Vec::new();
        let mut roles = Vec::new();
        let mut vols: Vec<Option<f64>> = Vec::new();
        let mut vels: Vec<Option<Vector>> = Vec::new();
        for b in &self.blocks {
            let lo = self.vector("block min", &b.min)?;
            let hi = self.vector("block max", &b.max)?;
            let mut count = [1usize; 3];
            for c in 0..d {
                count[c] = (((hi[c] - lo[c]) / b.spacing) * (1.0 + 1e-12) + 1e-9).floor().max(0.0) as usize + 1;
            }
            for l in 0..count[2] {
                for j in 0..count[1] {
                    for i in 0..count[0] {
                        let mut x = lo + Vector::new(i as f64, j as f64, l as f64) * b.spacing;
                        if self.jitter > 0.0 && b.role != Role::Wall {
                            for c in 0..d {
                                x[c] += rng.random_range(-self.jitter..=self.jitter) * b.spacing;
                            }
                        }
                        pos.push(x);
                        roles.push(b.role);
                        vols.push(Some(b.spacing.powi(d as i32)));
                        vels.push(None);
                    }
                }
            }
        }
        let first_explicit = pos.len();
        for (k, p) in self.particles.iter().enumerate() {
            pos.push(self.vector(&format!("particle {k} position"), &p.position)?);
            roles.push(p.role);
            vols.push(p.volume);
            vels.push(
                p.velocity
                    .as_ref()
                    .map(|v| self.vector(&format!("particle {k} velocity"), v))
                    .transpose()?,
            );
        }
        let n = pos.len();

        let velocities: Vec<Vector> = match &self.initial_velocity {
            None => vec![Vector::zeros(); n],
            Some(VelocityChoice::Constant(v)) => vec![self.vector("initial_velocity", v)?; n],
            Some(VelocityChoice::PerParticle { per_particle }) => {
                if per_particle.len() != n {
                    return Err(bad(format!(
                        "initial_velocity lists {} vectors for {n} particles",
                        per_particle.len()
                    )));
                }
                per_particle
                    .iter()
                    .enumerate()
                    .map(|(i, v)| self.vector(&format!("initial velocity {i}"), v))
                    .collect::<Result<_>>()?
            }
        };
        let velocities: Vec<Vector> = (0..n)
            .map(|i| {
                if roles[i] == Role::Wall {
                    Vector::zeros()
                } else {
                    vels[i].unwrap_or(velocities[i])
                }
            })
            .collect();

        let volumes: Vec<f64> = match &self.volumes {
            VolumeSpec::Constant { constant } => vec![*constant; n],
            VolumeSpec::Named(VolumeNamed::Uniform) | VolumeSpec::Named(VolumeNamed::Modified) => {
                vec![self.domain_measure() / n as f64; n]
            }
            VolumeSpec::Named(VolumeNamed::Lattice) => vols
                .iter()
                .enumerate()
                .map(|(i, v)| v.ok_or_else(|| bad(format!("particle {} needs a volume", i - first_explicit))))
                .collect::<Result<_>>()?,
            VolumeSpec::Named(VolumeNamed::Explicit) => {
                if !self.blocks.is_empty() {
                    return Err(bad("explicit volumes cannot be used with blocks"));
                }
                vols
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| bad(format!("particle {i} needs a volume"))))
                    .collect::<Result<_>>()?
            }
        };
        let mut state = ParticleState::new(d, pos, velocities, volumes, roles)?;
        if self.volumes == VolumeSpec::Named(VolumeNamed::Modified) {
            let inter = state.interactions(&self.kernel()?)?;
            let solve = solve_particle_volumes(&state, &inter)?;
            state.set_volumes(solve.into_volumes()?)?;
        }
        Ok(state)
    }

    /// A ready scheme and its initial state.
    pub fn build(&self, variant: SchemeVariant) -> Result<(Scheme, ParticleState)> {
        self.build_with(self.scheme_config(variant)?)
    }

    /// As [`Scenario::build`] with an adjusted configuration.
    pub fn build_with(&self, config: SchemeConfig) -> Result<(Scheme, ParticleState)> {
        let state = self.init()?;
        let (lo, hi) = self.domain()?;
        let scheme = Scheme::new(self.kernel()?, self.params()?, config, &state)?.with_domain(lo, hi);
        Ok((scheme, state))
    }
}
