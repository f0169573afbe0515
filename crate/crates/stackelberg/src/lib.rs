//! Partially observed linear-quadratic Stackelberg differential games with one leader and
//! N followers: Riccati and FBSDE solvers, filters, Monte Carlo checks and a formation front end.

pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod filtering;
pub mod formation;
pub mod follower;
pub mod leader_fbsde;
pub mod linalg;
pub mod model;
pub mod odesolve;
pub mod simulate;

pub use error::{Error, Result};
