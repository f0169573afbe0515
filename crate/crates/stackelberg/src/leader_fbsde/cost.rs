//! The leader's optimal cost: reduced (filtered) part plus the estimation-error part.

use serde::Serialize;

use super::enlarged::EnlargedSystem;
use super::problem::FbsdeLqProblem;
use super::stack::{extrapolate_to_zero, level_value_from_m5, LeaderRiccatiStack, RegularizationLevel};
use crate::filtering::{self, CovarianceSystem};
use crate::follower::FollowerSolution;
use crate::linalg::Mat;
use crate::model::GameSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct LeaderCost {
    /// ½ min over Y0 of the value quadratic form, extrapolated in 1/i.
    pub reduced: f64,
    /// ½[ℝ₂ + ∫M5] per level, extrapolated in 1/i.
    pub reduced_m5: f64,
    /// E[eᵀG2e](T) + E∫eᵀQ2e through the weight p.
    pub error_part: f64,
    /// The same through the covariance directly.
    pub error_part_covariance: f64,
    pub total: f64,
    /// The reduced/error split is exact only when the leader's filter gain vanishes; otherwise the
    /// filtered state and the error are correlated.
    pub split_exact: bool,
}

fn extrapolate(levels: &[&RegularizationLevel], vals: &[f64]) -> f64 {
    let eps: Vec<f64> = levels.iter().map(|l| 1.0 / l.i).collect();
    let v: Vec<Mat> = vals.iter().map(|&x| Mat::from_element(1, 1, x)).collect();
    extrapolate_to_zero(&eps, &v)[(0, 0)]
}

pub fn leader_cost_closed_form(
    spec: &GameSpec,
    followers: &[FollowerSolution],
    cov: &CovarianceSystem,
    problem: &FbsdeLqProblem,
    es: &EnlargedSystem,
    stack: &LeaderRiccatiStack,
) -> Result<LeaderCost> {
    if !stack.grid.same_as(&spec.grid) || !cov.sigma_tilde.grid.same_as(&spec.grid) {
        return Err(Error::GridMismatch("leader cost inputs live on different grids".into()));
    }
    if stack.levels.len() < 3 {
        return Err(Error::PreconditionViolated("the closed-form leader cost needs regularization levels".into()));
    }
    let k = stack.levels.len();
    let tail: Vec<&RegularizationLevel> = stack.levels[k.saturating_sub(3)..].iter().collect();
    let values: Vec<f64> = tail.iter().map(|l| l.value).collect();
    let m5: Vec<f64> = tail.iter().map(|l| level_value_from_m5(es, problem, l)).collect::<Result<_>>()?;
    let reduced = extrapolate(&tail, &values);
    let reduced_m5 = extrapolate(&tail, &m5);
    let error_part = filtering::error_cost_via_weight(spec, followers, cov)?;
    let error_part_covariance = filtering::error_cost_via_covariance(spec, cov);
    Ok(LeaderCost {
        reduced,
        reduced_m5,
        error_part,
        error_part_covariance,
        total: reduced + error_part,
        split_exact: cov.gain.max_abs() == 0.0,
    })
}
