//! End-to-end equilibrium: follower gains, leader error moments, reduced leader problem,
//! regularized Riccati stack and the leader's feedback.

use serde::Serialize;

use crate::filtering::{self, CovarianceSystem};
use crate::follower::{self, FollowerSolution, U2Affine};
use crate::leader_fbsde::{
    adjoint_feedback, build_enlarged_system, default_i_sequence, leader_cost_closed_form, map_leader_problem,
    solve_riccati_stack, solve_riccati_stack_limit, AdjointFeedback, ConvergenceReport, EnlargedSystem,
    FbsdeLqProblem, LeaderCost, LeaderRiccatiStack,
};
use crate::linalg::Mat;
use crate::model::{self, GameSpec};
use crate::odesolve::MatrixTrajectory;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub spec: GameSpec,
    /// Gains and Riccati data; their affine parts are computed against u2 ≡ 0 and are not used
    /// by the equilibrium, where the adjoints follow the leader's state.
    pub followers: Vec<FollowerSolution>,
    pub covariance: CovarianceSystem,
    pub problem: FbsdeLqProblem,
    pub enlarged: EnlargedSystem,
    pub stack: LeaderRiccatiStack,
    pub feedback: AdjointFeedback,
}

/// Leader-side quantities at one node: stacked follower adjoint and leader control.
#[derive(Debug, Clone)]
pub struct LeaderNode {
    pub adjoint: Mat,
    pub control: Mat,
}

/// Which solver produces the leader's Riccati stack.
#[derive(Debug, Clone, PartialEq)]
pub enum StackMethod {
    Regularized(Vec<f64>),
    LimitOde,
    /// The regularized route, falling back to the limit equations when it fails (for instance
    /// when P1 or P3 vanish identically and P̃ has no inverse).
    Auto(Vec<f64>),
}

impl Default for StackMethod {
    fn default() -> Self {
        StackMethod::Auto(default_i_sequence())
    }
}

pub fn solve_equilibrium(spec: &GameSpec) -> Result<Equilibrium> {
    solve_equilibrium_with(spec, &StackMethod::default())
}

pub fn solve_equilibrium_with(spec: &GameSpec, method: &StackMethod) -> Result<Equilibrium> {
    let v = model::validate(spec);
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let followers = follower::solve_followers(spec, &U2Affine::Zero)?;
    let covariance = filtering::solve_covariance_system(spec, &followers)?;
    let problem = map_leader_problem(spec, &followers, &covariance.sigma_tilde)?;
    let enlarged = build_enlarged_system(&problem)?;
    let stack = match method {
        StackMethod::Regularized(i_sequence) => solve_riccati_stack(&enlarged, &problem, i_sequence)?,
        StackMethod::LimitOde => solve_riccati_stack_limit(&problem)?,
        StackMethod::Auto(i_sequence) => match solve_riccati_stack(&enlarged, &problem, i_sequence) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("regularized leader stack failed ({e}); using the limit equations");
                let mut s = solve_riccati_stack_limit(&problem)?;
                s.report.fallback = Some(e.to_string());
                s
            }
        },
    };
    let feedback = adjoint_feedback(&stack);
    Ok(Equilibrium { spec: spec.clone(), followers, covariance, problem, enlarged, stack, feedback })
}

impl Equilibrium {
    pub fn leader_cost(&self) -> Result<LeaderCost> {
        leader_cost_closed_form(&self.spec, &self.followers, &self.covariance, &self.problem, &self.enlarged, &self.stack)
    }

    pub fn report(&self) -> &ConvergenceReport {
        &self.stack.report
    }

    /// Y = P2ᵀX̌ − P3h + φ2 and u2 = L6X̌ + L7h + S3 at node k.
    pub fn leader_node(&self, k: usize, xcheck: &Mat, h: &Mat) -> LeaderNode {
        let s = &self.stack;
        let adjoint = s.p2.at(k).transpose() * xcheck - s.p3.at(k) * h + s.phi2.at(k);
        let control = self.feedback.gx.at(k) * xcheck + self.feedback.gh.at(k) * h + self.feedback.affine.at(k);
        LeaderNode { adjoint, control }
    }

    /// Noise-free mean of (X̌, h) by Heun's method on the closed-loop coefficients, h(0) = 0.
    pub fn mean_path(&self) -> (MatrixTrajectory, MatrixTrajectory) {
        let grid = self.spec.grid;
        let dt = grid.dt();
        let f = |k: usize, x: &Mat, h: &Mat| {
            let nm = &self.stack.nmats[k];
            (&nm.n1 * x + &nm.n2 * h + &nm.n3, &nm.n7 * x + &nm.n8 * h + &nm.n9)
        };
        let mut xs = vec![self.spec.x0.clone()];
        let mut hs = vec![Mat::zeros(self.stack.nn, 1)];
        for k in 0..grid.steps {
            let (x, h) = (&xs[k], &hs[k]);
            let (dx1, dh1) = f(k, x, h);
            let (xp, hp) = (x + &dx1 * dt, h + &dh1 * dt);
            let (dx2, dh2) = f(k + 1, &xp, &hp);
            let xn = x + (dx1 + dx2) * (0.5 * dt);
            let hn = h + (dh1 + dh2) * (0.5 * dt);
            xs.push(xn);
            hs.push(hn);
        }
        let tr = |values| MatrixTrajectory { grid, values, symmetric: false };
        (tr(xs), tr(hs))
    }

    /// The leader control along the noise-free mean path. It is the equilibrium control itself
    /// whenever the leader's filter gain vanishes.
    pub fn mean_leader_control(&self) -> MatrixTrajectory {
        let (x, h) = self.mean_path();
        MatrixTrajectory::from_fn(self.spec.grid, |k| self.leader_node(k, x.at(k), h.at(k)).control)
    }

    /// Followers solved against a deterministic leader input.
    pub fn followers_against(&self, u2: &MatrixTrajectory) -> Result<Vec<FollowerSolution>> {
        follower::solve_followers(&self.spec, &U2Affine::Path(u2.clone()))
    }

    pub fn summary(&self) -> Result<EquilibriumSummary> {
        let cost = if self.stack.levels.is_empty() { None } else { Some(self.leader_cost()?) };
        let follower_costs = if self.covariance.gain.max_abs() == 0.0 {
            let fs = self.followers_against(&self.mean_leader_control())?;
            Some(fs.iter().map(|f| follower::follower_cost_closed_form(&self.spec, f)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(EquilibriumSummary {
            leader_cost: cost,
            follower_costs,
            convergence: self.stack.report.clone(),
            gain_at_zero: GainSnapshot {
                gx: rows(self.feedback.gx.first()),
                gh: rows(self.feedback.gh.first()),
                affine: rows(self.feedback.affine.first()),
            },
        })
    }
}

pub fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GainSnapshot {
    pub gx: Vec<Vec<f64>>,
    pub gh: Vec<Vec<f64>>,
    pub affine: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSummary {
    /// Needs the regularized stack.
    pub leader_cost: Option<LeaderCost>,
    /// Only available when the leader's control is deterministic.
    pub follower_costs: Option<Vec<f64>>,
    pub convergence: ConvergenceReport,
    pub gain_at_zero: GainSnapshot,
}
