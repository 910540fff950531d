//! Sparse matrices, Krylov solvers and the two linear systems of a time step.

mod krylov;
mod problems;
mod sparse;

pub use krylov::{bicgstab, conjugate_gradient, IterativeOutcome, IterativeSettings};
pub use problems::{
    assemble_poisson, assemble_prediction, sealed_fluid_components, solve, symmetric_rank_deficiency,
    Certificate, LinearProblem, ProblemKind, Solution, SolveMethod, SolverSettings, SpdEvidence,
    DENSE_LIMIT,
};
pub use sparse::CsrMatrix;
