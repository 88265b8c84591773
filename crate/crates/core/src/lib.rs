//! Solver and diagnostics for quadratically regularized optimal transport on the line.

pub mod analysis;
pub mod cli;
pub mod discrete;
pub mod dual;
pub mod error;
pub mod fmt;
pub mod harness;
pub mod marginals;
pub mod monge;
pub mod quadrature;
pub mod roots;

pub use analysis::{PlanAnalysis, PlanDiagnostics, MongeDistances, SupportSection};
pub use dual::{dual_objective, marginal_residual, solve, solve_warm, Init, PotentialPair, SolverConfig};
pub use error::{QotError, Result};
pub use marginals::{Family, Marginal, MarginalSpec};
pub use monge::{kantorovich_potential, monge_map, ot_cost, MongeSolution};
