//! Feedback form of the leader's optimal control on the original (X, Y) variables.

use super::definite::DefiniteDecoupling;
use super::stack::LeaderRiccatiStack;
use crate::linalg::{self, Mat};
use crate::model::TimeGrid;
use crate::odesolve::MatrixTrajectory;
use crate::{Error, Result};

/// u(t) = gx·X + gy·Y + affine. For the leader, Y is the stacked filtered follower adjoint.
#[derive(Debug, Clone)]
pub struct LeaderGain {
    pub gx: MatrixTrajectory,
    pub gy: MatrixTrajectory,
    pub affine: MatrixTrajectory,
}

/// u = L6·X + L7·h + S3 with the adjoint h of the backward equation as second state.
#[derive(Debug, Clone)]
pub struct AdjointFeedback {
    pub gx: MatrixTrajectory,
    pub gh: MatrixTrajectory,
    pub affine: MatrixTrajectory,
}

pub fn adjoint_feedback(stack: &LeaderRiccatiStack) -> AdjointFeedback {
    let grid = stack.grid;
    let tr = |f: &dyn Fn(usize) -> Mat| MatrixTrajectory::from_fn(grid, |k| f(k));
    AdjointFeedback {
        gx: tr(&|k| stack.relations[k].l6.clone()),
        gh: tr(&|k| stack.relations[k].l7.clone()),
        affine: tr(&|k| stack.relations[k].s3.clone()),
    }
}

impl AdjointFeedback {
    pub fn from_definite(dd: &DefiniteDecoupling) -> Self {
        AdjointFeedback { gx: dd.gx.clone(), gh: dd.gh.clone(), affine: dd.affine.clone() }
    }
}

/// Eliminates h = P3⁻¹(P2ᵀX − Y + φ2) on [0, T − Δt]; the terminal node, where P3 vanishes,
/// is extrapolated linearly from the two preceding nodes.
fn eliminate(
    grid: TimeGrid,
    fb: &AdjointFeedback,
    p2t: impl Fn(usize) -> Mat,
    p3: impl Fn(usize) -> Mat,
    phi2: impl Fn(usize) -> Mat,
) -> Result<LeaderGain> {
    let steps = grid.steps;
    if steps < 2 {
        return Err(Error::PreconditionViolated("gain elimination needs at least two steps".into()));
    }
    let (mut gx, mut gy, mut aff) = (Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1));
    for k in 0..steps {
        let t = grid.t(k);
        let p3i = linalg::inverse_checked(&p3(k)).map_err(|_| Error::P3Singular { t })?.0;
        let w = fb.gh.at(k) * p3i;
        gx.push(fb.gx.at(k) + &w * p2t(k));
        gy.push(-&w);
        aff.push(&w * phi2(k) + fb.affine.at(k));
    }
    for v in [&mut gx, &mut gy, &mut aff] {
        let last = &v[steps - 1] * 2.0 - &v[steps - 2];
        v.push(last);
    }
    let tr = |values| MatrixTrajectory { grid, values, symmetric: false };
    Ok(LeaderGain { gx: tr(gx), gy: tr(gy), affine: tr(aff) })
}

pub fn leader_gain(stack: &LeaderRiccatiStack) -> Result<LeaderGain> {
    let fb = adjoint_feedback(stack);
    eliminate(
        stack.grid,
        &fb,
        |k| stack.p2.at(k).transpose(),
        |k| stack.p3.at(k).clone(),
        |k| stack.phi2.at(k).clone(),
    )
}

/// The same elimination with Y = Q3X − Q4h + φ2 from the definite decoupling.
pub fn leader_gain_definite(dd: &DefiniteDecoupling, n: usize) -> Result<LeaderGain> {
    let d = dd.q.shape().0;
    let nn = d - n;
    let fb = AdjointFeedback::from_definite(dd);
    eliminate(
        dd.grid,
        &fb,
        |k| linalg::block(dd.q.at(k), n, 0, nn, n),
        |k| -linalg::block(dd.q.at(k), n, n, nn, nn),
        |k| linalg::block(dd.phi.at(k), n, 0, nn, 1),
    )
}
