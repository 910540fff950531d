//! Incompressible SPH schemes with auditable discrete-parameter conditions.

pub mod conditions;
pub mod diagnostics;
pub mod error;
pub mod floats;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod modified;
pub mod neighbors;
pub mod operators;
pub mod quadrature;
pub mod scenario;
pub mod schemes;
pub mod state;

/// Points and vectors; in two dimensions the third component is zero.
pub type Vector = nalgebra::Vector3<f64>;

pub use conditions::{ConditionsConfig, ConditionsReport};
pub use diagnostics::{BoundReport, RunMeta, StepDiagnostics, Theorem};
pub use error::{IsphError, Result};
pub use kernels::{KernelKind, KernelSpec};
pub use neighbors::Interactions;
pub use modified::{solve_particle_volumes, variable_dt};
pub use operators::{IndexSet, Operators, ScalarField, TrialSpace, VectorField};
pub use scenario::Scenario;
pub use schemes::{BodyForce, FluidParams, Scheme, SchemeConfig, SchemeVariant, StepResult, Trajectory};
pub use state::{ParticleState, Role, StateRecord};
