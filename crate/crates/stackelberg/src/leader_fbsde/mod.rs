//! LQ control of a fully coupled forward-backward system and the leader's problem built on it.
//!
//! The indefinite route enlarges the state to (X, Y), treats (u, Zʲ) as controls, solves a
//! Riccati equation with terminal penalty i·|Y_T − F X_T − ξ|² for a sequence of i, recovers the
//! decoupling blocks P1, P2, P3 and extrapolates to i = ∞. The definite route decouples the
//! Hamiltonian system directly and serves as a cross-check.

pub mod cost;
pub mod definite;
pub mod enlarged;
pub mod gain;
pub mod problem;
pub mod relations;
pub mod stack;

pub use cost::{leader_cost_closed_form, LeaderCost};
pub use definite::{solve_definite_decoupling, DefiniteDecoupling};
pub use enlarged::{build_enlarged_system, EnlargedSystem};
pub use gain::{adjoint_feedback, leader_gain, leader_gain_definite, AdjointFeedback, LeaderGain};
pub use problem::{map_leader_problem, FbsdeLqProblem};
pub use stack::{
    default_i_sequence, solve_riccati_stack, solve_riccati_stack_limit, ConvergenceReport, LeaderRiccatiStack, StackRoute,
};
