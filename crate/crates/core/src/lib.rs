//! Forward-resolvent solvers for dynamic, stochastic, and coupled variational inclusions.

pub mod linalg;
pub mod operators;
pub mod resolvents;
pub mod schedules;
pub mod solvers;
pub mod analysis;
pub mod experiment;

pub use linalg::{Matrix, NormKind, Vector};
pub use operators::{CoupledPair, DynamicOp, OperatorMetadata, RngState, StaticOp, StochasticOp};
pub use schedules::Schedule;
pub use solvers::{solve_coupled, solve_dynamic, solve_stochastic, SolverReport, StopRule, Verdict};
