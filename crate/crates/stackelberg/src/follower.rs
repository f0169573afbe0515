//! Each follower's partially observed LQ problem for a given leader input.

use rayon::prelude::*;

use crate::linalg::{self, Mat};
use crate::model::GameSpec;
use crate::odesolve::{self, Direction, MatrixTrajectory};
use crate::{Error, Result};

/// The leader input that enters a follower's affine equation.
#[derive(Debug, Clone)]
pub enum U2Affine {
    Zero,
    Path(MatrixTrajectory),
    /// A control adapted to observations rather than a function of time.
    PathDependent,
}

impl U2Affine {
    fn at(&self, t: f64, m: usize) -> Mat {
        match self {
            U2Affine::Path(p) => p.eval(t),
            _ => Mat::zeros(m, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FollowerSolution {
    pub index: usize,
    pub p: MatrixTrajectory,
    pub pi: MatrixTrajectory,
    pub phi: MatrixTrajectory,
    pub lambda: MatrixTrajectory,
    pub pi_vec: MatrixTrajectory,
    pub beta1: MatrixTrajectory,
    pub beta2: MatrixTrajectory,
    pub gain_state: MatrixTrajectory,
    pub gain_affine: MatrixTrajectory,
    pub delta: MatrixTrajectory,
    pub sigma: MatrixTrajectory,
    pub u2: U2Affine,
}

/// Drift of the observation-unobservable error, A − (Σf1ᵀ + C1K1ᵀ)(K1K1ᵀ)⁻¹f1.
pub fn error_drift(spec: &GameSpec, sigma: &Mat, t: f64) -> Result<Mat> {
    let g = &spec.grid;
    let o = &spec.observations;
    let k1 = o.k1.eval(t, g);
    let f1 = o.f1.eval(t, g);
    let kk = linalg::inverse_or(&(&k1 * k1.transpose()), "K1 K1^T", t)?;
    Ok(spec.dynamics.a.eval(t, g) - (sigma * f1.transpose() + spec.dynamics.c1.eval(t, g) * k1.transpose()) * kk * f1)
}

/// Δ = Σ(K1⁻¹f1)ᵀ.
pub fn delta_at(spec: &GameSpec, sigma: &Mat, t: f64) -> Result<Mat> {
    let g = &spec.grid;
    let k1inv = linalg::inverse_or(&spec.observations.k1.eval(t, g), "K1", t)?;
    Ok(sigma * (k1inv * spec.observations.f1.eval(t, g)).transpose())
}

/// Kc = −R⁻¹(BᵀP + S).
pub fn state_gain(spec: &GameSpec, i: usize, p: &Mat, t: f64) -> Result<Mat> {
    let g = &spec.grid;
    let c = &spec.follower_costs[i];
    let rinv = linalg::inverse_or(&c.r.eval(t, g), "R1i", t)?;
    Ok(-rinv * (spec.dynamics.b1[i].eval(t, g).transpose() * p + c.s.eval(t, g)))
}

pub fn solve_follower_with_sigma(
    spec: &GameSpec,
    i: usize,
    u2: &U2Affine,
    sigma: &MatrixTrajectory,
) -> Result<FollowerSolution> {
    if matches!(u2, U2Affine::PathDependent) {
        return Err(Error::NonDeterministicDriver(
            "the follower affine equation needs a deterministic leader input".into(),
        ));
    }
    if let U2Affine::Path(p) = u2 {
        if !p.grid.same_as(&spec.grid) {
            return Err(Error::GridMismatch("u2 path grid differs from spec grid".into()));
        }
    }
    let grid = spec.grid;
    let (n, m) = (spec.dims.n, spec.dims.m);
    let (l1, l2) = (spec.dims.l1, spec.dims.l2);
    let d = &spec.dynamics;
    let c = &spec.follower_costs[i];
    let p = odesolve::solve_terminal_riccati(&d.a, &d.b1[i], &c.s, &c.r, &c.q, &c.g, &grid)?;

    let pi = odesolve::integrate_matrix_ode(
        |t, x| {
            let at = error_drift(spec, &sigma.eval(t), t)?;
            Ok(-(at.transpose() * x + x * &at + c.q.eval(t, &grid)))
        },
        &c.g,
        Direction::Backward,
        &grid,
        true,
    )?;

    let phi = odesolve::integrate_matrix_ode(
        |t, f| {
            let pt = p.eval(t);
            let kc = state_gain(spec, i, &pt, t)?;
            let acl = d.a.eval(t, &grid) + d.b1[i].eval(t, &grid) * &kc;
            let src = &pt * (d.b2.eval(t, &grid) * u2.at(t, m) + d.alpha.eval(t, &grid))
                + c.q_lin.eval(t, &grid)
                + kc.transpose() * c.r_lin.eval(t, &grid);
            Ok(-(acl.transpose() * f + src))
        },
        &c.g_lin,
        Direction::Backward,
        &grid,
        false,
    )?;

    let pi_vec = odesolve::integrate_matrix_ode(
        |t, f| {
            let at = error_drift(spec, &sigma.eval(t), t)?;
            Ok(-(at.transpose() * f + c.q_lin.eval(t, &grid)))
        },
        &c.g_lin,
        Direction::Backward,
        &grid,
        false,
    )?;

    let mut gain_state = Vec::with_capacity(grid.len());
    let mut gain_affine = Vec::with_capacity(grid.len());
    let mut delta = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t = grid.t(k);
        gain_state.push(state_gain(spec, i, p.at(k), t)?);
        let rinv = linalg::inverse_or(&c.r.node(k), "R1i", t)?;
        gain_affine.push(-rinv * (d.b1[i].node(k).transpose() * phi.at(k) + c.r_lin.node(k)));
        delta.push(delta_at(spec, sigma.at(k), t)?);
    }
    let traj = |values| MatrixTrajectory { grid, values, symmetric: false };
    Ok(FollowerSolution {
        index: i,
        p,
        pi,
        phi,
        lambda: MatrixTrajectory::constant(grid, Mat::zeros(n, l1)),
        pi_vec,
        beta1: MatrixTrajectory::constant(grid, Mat::zeros(n, l1)),
        beta2: MatrixTrajectory::constant(grid, Mat::zeros(n, l2)),
        gain_state: traj(gain_state),
        gain_affine: traj(gain_affine),
        delta: traj(delta),
        sigma: sigma.clone(),
        u2: u2.clone(),
    })
}

pub fn solve_follower(spec: &GameSpec, i: usize, u2: &U2Affine) -> Result<FollowerSolution> {
    let sigma = odesolve::solve_filter_covariance(spec)?;
    solve_follower_with_sigma(spec, i, u2, &sigma)
}

/// All followers, solved in parallel against a shared filter covariance.
pub fn solve_followers(spec: &GameSpec, u2: &U2Affine) -> Result<Vec<FollowerSolution>> {
    let sigma = odesolve::solve_filter_covariance(spec)?;
    (0..spec.dims.followers)
        .into_par_iter()
        .map(|i| solve_follower_with_sigma(spec, i, u2, &sigma))
        .collect()
}

/// Integrand of the closed-form cost at node k (excluding the initial quadratic term).
fn cost_integrand(spec: &GameSpec, sol: &FollowerSolution, k: usize) -> Result<f64> {
    let t = spec.grid.t(k);
    let d = &spec.dynamics;
    let c = &spec.follower_costs[sol.index];
    let i = sol.index;
    let delta = sol.delta.at(k);
    let c1 = d.c1.node(k);
    let c2 = d.c2.node(k);
    let pi = sol.pi.at(k);
    let p = sol.p.at(k);
    let phi = sol.phi.at(k);
    let rinv = linalg::inverse_or(&c.r.node(k), "R1i", t)?;
    let v = d.b1[i].node(k).transpose() * phi + c.r_lin.node(k);
    let dc = delta + &c1;
    let u2 = sol.u2.at(t, spec.dims.m);
    let mut s = (pi * (delta * delta.transpose() + &c2 * c2.transpose())).trace();
    s += (p * &dc * dc.transpose()).trace();
    s -= (v.transpose() * rinv * &v)[(0, 0)];
    s += 2.0 * (phi.transpose() * (d.b2.node(k) * u2 + d.alpha.node(k)))[(0, 0)];
    s -= 2.0 * (delta.transpose() * sol.beta1.at(k)).trace();
    s += 2.0 * (c2.transpose() * sol.beta2.at(k)).trace();
    s += 2.0 * (dc.transpose() * sol.lambda.at(k)).trace();
    Ok(s)
}

/// Optimal cost of follower `sol.index` against the deterministic leader input stored in `sol`.
pub fn follower_cost_closed_form(spec: &GameSpec, sol: &FollowerSolution) -> Result<f64> {
    if !sol.p.grid.same_as(&spec.grid) {
        return Err(Error::GridMismatch("follower solution grid differs from spec grid".into()));
    }
    let x0 = &spec.x0;
    let head = (x0.transpose() * (sol.p.first() * x0 + sol.phi.first() * 2.0))[(0, 0)];
    let f: Vec<f64> = (0..spec.grid.len()).map(|k| cost_integrand(spec, sol, k)).collect::<Result<_>>()?;
    Ok(head + odesolve::trapezoid(&spec.grid, &f))
}

/// The Π-weighted part of the cost computed from the covariance directly: tr(GΣ_T) + ∫tr(QΣ).
pub fn residual_cost_via_sigma(spec: &GameSpec, sol: &FollowerSolution) -> f64 {
    let c = &spec.follower_costs[sol.index];
    let f: Vec<f64> = (0..spec.grid.len()).map(|k| (c.q.node(k) * sol.sigma.at(k)).trace()).collect();
    (&c.g * sol.sigma.last()).trace() + odesolve::trapezoid(&spec.grid, &f)
}

/// The same quantity through the Π equation: ∫tr(Π(ΔΔᵀ + C2C2ᵀ)).
pub fn residual_cost_via_pi(spec: &GameSpec, sol: &FollowerSolution) -> f64 {
    let f: Vec<f64> = (0..spec.grid.len())
        .map(|k| {
            let dl = sol.delta.at(k);
            let c2 = spec.dynamics.c2.node(k);
            (sol.pi.at(k) * (dl * dl.transpose() + &c2 * c2.transpose())).trace()
        })
        .collect();
    odesolve::trapezoid(&spec.grid, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientFn, Dims, TimeGrid};

    fn scalar_spec(steps: usize) -> GameSpec {
        GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, TimeGrid::new(1.0, steps))
    }

    #[test]
    fn zero_costs_give_zero_gains() {
        let spec = scalar_spec(100);
        let sol = solve_follower(&spec, 0, &U2Affine::Zero).unwrap();
        assert_eq!(sol.p.max_abs(), 0.0);
        assert_eq!(sol.gain_state.max_abs(), 0.0);
        assert_eq!(sol.phi.max_abs(), 0.0);
        assert_eq!(follower_cost_closed_form(&spec, &sol).unwrap(), 0.0);
    }

    #[test]
    fn tanh_gain_at_origin() {
        let mut spec = scalar_spec(1000);
        spec.dynamics.b1[0] = CoefficientFn::scalar(1.0);
        spec.follower_costs[0].q = CoefficientFn::scalar(1.0);
        let sol = solve_follower(&spec, 0, &U2Affine::Zero).unwrap();
        assert!((sol.gain_state.first()[(0, 0)] + 1f64.tanh()).abs() < 1e-6);
    }

    #[test]
    fn noiseless_cost_is_initial_quadratic() {
        let mut spec = scalar_spec(400);
        spec.dynamics.a = CoefficientFn::scalar(0.3);
        spec.dynamics.b1[0] = CoefficientFn::scalar(1.0);
        spec.follower_costs[0].q = CoefficientFn::scalar(2.0);
        spec.follower_costs[0].g = Mat::from_element(1, 1, 0.5);
        spec.x0 = Mat::from_element(1, 1, 1.5);
        let sol = solve_follower(&spec, 0, &U2Affine::Zero).unwrap();
        let j = follower_cost_closed_form(&spec, &sol).unwrap();
        assert!((j - 2.25 * sol.p.first()[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn path_dependent_leader_is_rejected() {
        let spec = scalar_spec(10);
        assert!(matches!(solve_follower(&spec, 0, &U2Affine::PathDependent), Err(Error::NonDeterministicDriver(_))));
    }

    #[test]
    fn residual_cost_routes_agree() {
        let mut spec = scalar_spec(2000);
        spec.dynamics.a = CoefficientFn::scalar(0.2);
        spec.dynamics.c1 = CoefficientFn::scalar(0.4);
        spec.dynamics.c2 = CoefficientFn::scalar(0.7);
        spec.observations.f1 = CoefficientFn::scalar(1.3);
        spec.observations.k1 = CoefficientFn::scalar(0.8);
        spec.follower_costs[0].q = CoefficientFn::scalar(1.1);
        spec.follower_costs[0].g = Mat::from_element(1, 1, 0.6);
        let sol = solve_follower(&spec, 0, &U2Affine::Zero).unwrap();
        let a = residual_cost_via_sigma(&spec, &sol);
        let b = residual_cost_via_pi(&spec, &sol);
        assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn gain_identity_holds_at_every_node() {
        let mut spec = scalar_spec(200);
        spec.dynamics.b1[0] = CoefficientFn::scalar(0.7);
        spec.follower_costs[0].q = CoefficientFn::scalar(1.0);
        spec.follower_costs[0].s = CoefficientFn::scalar(0.2);
        spec.follower_costs[0].r = CoefficientFn::scalar(1.5);
        let sol = solve_follower(&spec, 0, &U2Affine::Zero).unwrap();
        for k in 0..spec.grid.len() {
            let want = -(0.7 * sol.p.at(k)[(0, 0)] + 0.2) / 1.5;
            assert!((sol.gain_state.at(k)[(0, 0)] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
