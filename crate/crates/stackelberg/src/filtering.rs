//! Leader-side error moments and per-path filter recursions.
//!
//! With e = X − X̌ and D = X̂ − X̌ the error dynamics are
//! de = [(A − Lf2)e + BK·D]dt + C1dW¹ + (C2 − LK2)dW² and
//! dD = [(A + BK)D − Lf2·e]dt + C1dW¹ − LK2dW²,
//! where BK = Σ B1iKci and L = (Σ̃f2ᵀ + C2K2ᵀ)(K2K2ᵀ)⁻¹. The follower adjoints are adapted to the
//! leader's observations in the equilibrium branch, so their error moments vanish identically.

use crate::follower::FollowerSolution;
use crate::linalg::{self, Mat};
use crate::model::GameSpec;
use crate::odesolve::{self, Direction, MatrixTrajectory};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CovarianceSystem {
    /// E[(X − X̌)(X − X̌)ᵀ].
    pub sigma_tilde: MatrixTrajectory,
    /// E[(X̂ − X̌)(X − X̌)ᵀ].
    pub cross: MatrixTrajectory,
    /// E[(X̂ − X̌)(X̂ − X̌)ᵀ].
    pub cross_sq: MatrixTrajectory,
    /// E[(φi − φ̌i)(X − X̌)ᵀ] per follower.
    pub sigma_check: Vec<MatrixTrajectory>,
    /// E[(X̂ − X̌)(φi − φ̌i)ᵀ] per follower.
    pub cross_phi: Vec<MatrixTrajectory>,
    /// E[(φi − φ̌i)(φi − φ̌i)ᵀ] per follower.
    pub phi_err_sq: Vec<MatrixTrajectory>,
    /// γ̌i = Σ̌i f2ᵀ(K2K2ᵀ)⁻¹.
    pub gamma_check: Vec<MatrixTrajectory>,
    /// λ² = Σ̃f2ᵀ + C2K2ᵀ.
    pub lambda2: MatrixTrajectory,
    /// Leader filter gain L = λ²(K2K2ᵀ)⁻¹.
    pub gain: MatrixTrajectory,
    pub sweeps: usize,
    pub residual: f64,
}

/// Σ B1i·Kci at time t.
pub fn follower_feedback(spec: &GameSpec, followers: &[FollowerSolution], t: f64) -> Mat {
    let n = spec.dims.n;
    followers
        .iter()
        .fold(Mat::zeros(n, n), |acc, f| acc + spec.dynamics.b1[f.index].eval(t, &spec.grid) * f.gain_state.eval(t))
}

/// L = (Σ̃f2ᵀ + C2K2ᵀ)(K2K2ᵀ)⁻¹.
pub fn leader_filter_gain(spec: &GameSpec, sigma_tilde: &Mat, t: f64) -> Result<Mat> {
    let g = &spec.grid;
    let o = &spec.observations;
    let k2 = o.k2.eval(t, g);
    let kk = linalg::inverse_or(&(&k2 * k2.transpose()), "K2 K2^T", t)?;
    Ok((sigma_tilde * o.f2.eval(t, g).transpose() + spec.dynamics.c2.eval(t, g) * k2.transpose()) * kk)
}

fn moment_rhs(spec: &GameSpec, followers: &[FollowerSolution], t: f64, x: &Mat) -> Result<Mat> {
    let n = spec.dims.n;
    let g = &spec.grid;
    let (s, gm, dl) = (linalg::block(x, 0, 0, n, n), linalg::block(x, 0, n, n, n), linalg::block(x, 0, 2 * n, n, n));
    let a = spec.dynamics.a.eval(t, g);
    let c1 = spec.dynamics.c1.eval(t, g);
    let c2 = spec.dynamics.c2.eval(t, g);
    let f2 = spec.observations.f2.eval(t, g);
    let k2 = spec.observations.k2.eval(t, g);
    let l = leader_filter_gain(spec, &s, t)?;
    let bk = follower_feedback(spec, followers, t);
    let ae = &a - &l * &f2;
    let ad = &a + &bk;
    let c1c1 = &c1 * c1.transpose();
    let ne = &c2 - &l * &k2;
    let lk = &l * &k2;
    let ds = &ae * &s + &s * ae.transpose() + &bk * &gm + gm.transpose() * bk.transpose() + &c1c1 + &ne * ne.transpose();
    let dg = &ad * &gm - &l * &f2 * &s + &gm * ae.transpose() + &dl * bk.transpose() + &c1c1 - &lk * ne.transpose();
    let dd = &ad * &dl + &dl * ad.transpose() - &l * &f2 * &gm - gm.transpose() * (&l * &f2).transpose()
        + &c1c1
        + &lk * lk.transpose();
    Ok(linalg::hstack(&[&ds, &dg, &dd]))
}

/// Integrates the leader-side moment system forward from zero (x0 is known to everyone).
pub fn solve_covariance_system(spec: &GameSpec, followers: &[FollowerSolution]) -> Result<CovarianceSystem> {
    let n = spec.dims.n;
    let grid = spec.grid;
    if followers.len() != spec.dims.followers {
        return Err(Error::ShapeMismatch(format!(
            "{} follower solutions for {} followers",
            followers.len(),
            spec.dims.followers
        )));
    }
    let packed = odesolve::integrate_matrix_ode(
        |t, x| moment_rhs(spec, followers, t, x),
        &Mat::zeros(n, 3 * n),
        Direction::Forward,
        &grid,
        false,
    )?;
    let sym = |c: usize| MatrixTrajectory {
        grid,
        values: packed.values.iter().map(|m| linalg::sym(&linalg::block(m, 0, c * n, n, n))).collect(),
        symmetric: true,
    };
    let sigma_tilde = sym(0);
    let cross_sq = sym(2);
    let cross = packed.map(|_, m| linalg::block(m, 0, n, n, n));
    let k2 = &spec.observations.k2;
    let lambda2 = MatrixTrajectory::from_fn(grid, |k| {
        sigma_tilde.at(k) * spec.observations.f2.node(k).transpose() + spec.dynamics.c2.node(k) * k2.node(k).transpose()
    });
    let gain = MatrixTrajectory {
        grid,
        values: (0..grid.len())
            .map(|k| leader_filter_gain(spec, sigma_tilde.at(k), grid.t(k)))
            .collect::<Result<_>>()?,
        symmetric: false,
    };
    let zeros = |r: usize, c: usize| vec![MatrixTrajectory::constant(grid, Mat::zeros(r, c)); followers.len()];
    Ok(CovarianceSystem {
        sigma_tilde,
        cross,
        cross_sq,
        sigma_check: zeros(n, n),
        cross_phi: zeros(n, n),
        phi_err_sq: zeros(n, n),
        gamma_check: zeros(n, spec.dims.l2),
        lambda2,
        gain,
        sweeps: 1,
        residual: 0.0,
    })
}

/// Weight p of the leader's estimation-error cost: ṗ + p(A − Lf2) + (A − Lf2)ᵀp + Q2 = 0, p(T) = G2.
pub fn error_cost_weight(spec: &GameSpec, cov: &CovarianceSystem) -> Result<MatrixTrajectory> {
    let g = spec.grid;
    odesolve::integrate_matrix_ode(
        |t, p| {
            let ae = spec.dynamics.a.eval(t, &g) - cov.gain.eval(t) * spec.observations.f2.eval(t, &g);
            Ok(-(p * &ae + ae.transpose() * p + spec.leader_cost.q.eval(t, &g)))
        },
        &spec.leader_cost.g,
        Direction::Backward,
        &g,
        true,
    )
}

/// E[eᵀG2e](T) + E∫eᵀQ2e through the weight p: ∫tr(p·noise) + 2tr(p·BK·Γ).
pub fn error_cost_via_weight(spec: &GameSpec, followers: &[FollowerSolution], cov: &CovarianceSystem) -> Result<f64> {
    let p = error_cost_weight(spec, cov)?;
    let g = &spec.grid;
    let f: Vec<f64> = (0..g.len())
        .map(|k| {
            let t = g.t(k);
            let c1 = spec.dynamics.c1.node(k);
            let ne = spec.dynamics.c2.node(k) - cov.gain.at(k) * spec.observations.k2.node(k);
            let noise = &c1 * c1.transpose() + &ne * ne.transpose();
            let bk = follower_feedback(spec, followers, t);
            (p.at(k) * noise).trace() + 2.0 * (p.at(k) * bk * cov.cross.at(k)).trace()
        })
        .collect();
    Ok(odesolve::trapezoid(g, &f))
}

/// The same quantity read off the covariance: tr(G2Σ̃(T)) + ∫tr(Q2Σ̃).
pub fn error_cost_via_covariance(spec: &GameSpec, cov: &CovarianceSystem) -> f64 {
    let g = &spec.grid;
    let f: Vec<f64> = (0..g.len()).map(|k| (spec.leader_cost.q.node(k) * cov.sigma_tilde.at(k)).trace()).collect();
    (&spec.leader_cost.g * cov.sigma_tilde.last()).trace() + odesolve::trapezoid(g, &f)
}

/// Filter estimates carried along one simulated path.
#[derive(Debug, Clone)]
pub struct FilterState {
    /// Estimate given the followers' observations.
    pub xhat: Mat,
    /// Estimate given the leader's observations.
    pub xcheck: Mat,
    /// Last innovation increments dV and dU.
    pub dv: Mat,
    pub du: Mat,
}

impl FilterState {
    pub fn new(x0: &Mat, l1: usize, l2: usize) -> Self {
        FilterState { xhat: x0.clone(), xcheck: x0.clone(), dv: Mat::zeros(l1, 1), du: Mat::zeros(l2, 1) }
    }
}

/// Gains applied to the innovations at one node, with the observation drifts they correct.
#[derive(Debug, Clone)]
pub struct FilterGains {
    /// (Σf1ᵀ + C1K1ᵀ)(K1K1ᵀ)⁻¹.
    pub hat: Mat,
    /// (Σ̃f2ᵀ + C2K2ᵀ)(K2K2ᵀ)⁻¹.
    pub check: Mat,
    pub f1: Mat,
    pub g1: Mat,
    pub f2: Mat,
    pub g2: Mat,
}

impl FilterGains {
    pub fn at(spec: &GameSpec, sigma: &Mat, sigma_tilde: &Mat, t: f64) -> Result<Self> {
        let g = &spec.grid;
        let o = &spec.observations;
        let k1 = o.k1.eval(t, g);
        let kk1 = linalg::inverse_or(&(&k1 * k1.transpose()), "K1 K1^T", t)?;
        let f1 = o.f1.eval(t, g);
        let hat = (sigma * f1.transpose() + spec.dynamics.c1.eval(t, g) * k1.transpose()) * kk1;
        Ok(FilterGains {
            hat,
            check: leader_filter_gain(spec, sigma_tilde, t)?,
            f1,
            g1: o.g1.eval(t, g),
            f2: o.f2.eval(t, g),
            g2: o.g2.eval(t, g),
        })
    }
}

/// One Euler–Maruyama step of both filters. `drift_hat` and `drift_check` are the full drifts of
/// the two estimates at the current node (they contain the controls, which the caller evaluates).
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    state: &mut FilterState,
    gains: &FilterGains,
    t: f64,
    dy1: &Mat,
    dy2: &Mat,
    drift_hat: &Mat,
    drift_check: &Mat,
    dt: f64,
) -> Result<()> {
    state.dv.copy_from(dy1);
    state.dv.gemm(-dt, &gains.f1, &state.xhat, 1.0);
    linalg::axpy(&mut state.dv, -dt, &gains.g1);
    state.du.copy_from(dy2);
    state.du.gemm(-dt, &gains.f2, &state.xcheck, 1.0);
    linalg::axpy(&mut state.du, -dt, &gains.g2);
    linalg::axpy(&mut state.xhat, dt, drift_hat);
    state.xhat.gemm(1.0, &gains.hat, &state.dv, 1.0);
    linalg::axpy(&mut state.xcheck, dt, drift_check);
    state.xcheck.gemm(1.0, &gains.check, &state.du, 1.0);
    if !linalg::is_finite(&state.xhat) || !linalg::is_finite(&state.xcheck) {
        return Err(Error::NonFinite { t });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::follower::{solve_followers, U2Affine};
    use crate::model::{CoefficientFn, Dims, TimeGrid};

    fn scalar(steps: usize) -> GameSpec {
        GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, TimeGrid::new(1.0, steps))
    }

    #[test]
    fn noiseless_system_has_zero_moments() {
        let mut spec = scalar(50);
        spec.dynamics.a = CoefficientFn::scalar(0.4);
        spec.observations.f2 = CoefficientFn::scalar(1.0);
        let fs = solve_followers(&spec, &U2Affine::Zero).unwrap();
        let cov = solve_covariance_system(&spec, &fs).unwrap();
        assert_eq!(cov.sigma_tilde.max_abs(), 0.0);
        assert_eq!(cov.cross.max_abs(), 0.0);
        assert_eq!(cov.cross_sq.max_abs(), 0.0);
    }

    #[test]
    fn uninformative_leader_observation_gives_lyapunov_covariance() {
        // f2 = 0, C2 = 0, B1 = 0: Σ̃' = 2aΣ̃ + c², Σ̃(t) = c²(e^{2at} − 1)/(2a)
        let mut spec = scalar(1000);
        let (a, c) = (0.3, 0.7);
        spec.dynamics.a = CoefficientFn::scalar(a);
        spec.dynamics.c1 = CoefficientFn::scalar(c);
        let fs = solve_followers(&spec, &U2Affine::Zero).unwrap();
        let cov = solve_covariance_system(&spec, &fs).unwrap();
        for k in 0..=1000 {
            let t = spec.grid.t(k);
            let exact = c * c * ((2.0 * a * t).exp() - 1.0) / (2.0 * a);
            assert!((cov.sigma_tilde.at(k)[(0, 0)] - exact).abs() < 1e-10);
            // here X̂ = X, so all three moments coincide
            assert!((cov.cross.at(k)[(0, 0)] - exact).abs() < 1e-10);
            assert!((cov.cross_sq.at(k)[(0, 0)] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn kalman_bucy_limit() {
        // C1 = 0, C2 = 1, f2 = 1, K2 = 1, a = 0: Σ̃' = −Σ̃² − 2Σ̃
        let mut spec = scalar(1000);
        spec.dynamics.c2 = CoefficientFn::scalar(1.0);
        spec.observations.f2 = CoefficientFn::scalar(1.0);
        let fs = solve_followers(&spec, &U2Affine::Zero).unwrap();
        let cov = solve_covariance_system(&spec, &fs).unwrap();
        // Σ̃ ≡ 0 solves it: the only noise is the observation noise, which the filter sees exactly
        assert!(cov.sigma_tilde.max_abs() < 1e-14);
        assert!((cov.gain.at(500)[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn error_cost_routes_agree() {
        let mut spec = scalar(2000);
        spec.dynamics.a = CoefficientFn::scalar(0.2);
        spec.dynamics.b1 = vec![CoefficientFn::scalar(1.0)];
        spec.dynamics.c1 = CoefficientFn::scalar(0.5);
        spec.dynamics.c2 = CoefficientFn::scalar(0.3);
        spec.observations.f2 = CoefficientFn::scalar(0.8);
        spec.follower_costs[0].q = CoefficientFn::scalar(1.0);
        spec.follower_costs[0].g = Mat::from_element(1, 1, 0.5);
        spec.leader_cost.q = CoefficientFn::scalar(1.3);
        spec.leader_cost.g = Mat::from_element(1, 1, 0.4);
        let fs = solve_followers(&spec, &U2Affine::Zero).unwrap();
        let cov = solve_covariance_system(&spec, &fs).unwrap();
        assert!(cov.cross.max_abs() > 1e-3);
        let a = error_cost_via_weight(&spec, &fs, &cov).unwrap();
        let b = error_cost_via_covariance(&spec, &cov);
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn filter_step_without_gain_follows_drift() {
        let spec = scalar(10);
        let mut st = FilterState::new(&Mat::from_element(1, 1, 1.0), 1, 1);
        let gains = FilterGains::at(&spec, &Mat::zeros(1, 1), &Mat::zeros(1, 1), 0.0).unwrap();
        assert_eq!(gains.hat[(0, 0)], 0.0);
        let drift = Mat::from_element(1, 1, 2.0);
        let dy = Mat::from_element(1, 1, 5.0);
        filter_step(&mut st, &gains, 0.0, &dy, &dy, &drift, &drift, 0.1).unwrap();
        assert!((st.xhat[(0, 0)] - 1.2).abs() < 1e-15);
        assert!((st.xcheck[(0, 0)] - 1.2).abs() < 1e-15);
        assert_eq!(st.dv[(0, 0)], 5.0);
    }

    #[test]
    fn follower_innovation_is_the_raw_increment() {
        let mut spec = scalar(10);
        spec.dynamics.c1 = CoefficientFn::scalar(0.6);
        let gains = FilterGains::at(&spec, &Mat::from_element(1, 1, 0.3), &Mat::zeros(1, 1), 0.0).unwrap();
        let mut st = FilterState::new(&Mat::from_element(1, 1, -2.0), 1, 1);
        let dw = Mat::from_element(1, 1, 0.037);
        let zero = Mat::zeros(1, 1);
        filter_step(&mut st, &gains, 0.0, &dw, &zero, &zero, &zero, 0.01).unwrap();
        assert_eq!(st.dv, dw);
        assert!((st.xhat[(0, 0)] - (-2.0 + 0.6 * 0.037)).abs() < 1e-15);
    }

    /// One Euler step of the leader filter against a discrete Kalman update of the exactly
    /// discretized pair x' = e^{aΔt}x + w, z = fΔt·x + v with correlated (w, v).
    fn kalman_gap(dt: f64) -> f64 {
        let (a, c, f, k, p, x) = (0.4, 0.7, 1.3, 0.9, 0.25, 0.8);
        let mut spec = scalar(10);
        spec.dynamics.a = CoefficientFn::scalar(a);
        spec.dynamics.c2 = CoefficientFn::scalar(c);
        spec.observations.f2 = CoefficientFn::scalar(f);
        spec.observations.k2 = CoefficientFn::scalar(k);
        let dy = 0.5 * dt;
        let gains = FilterGains::at(&spec, &Mat::zeros(1, 1), &Mat::from_element(1, 1, p), 0.0).unwrap();
        let mut st = FilterState::new(&Mat::from_element(1, 1, x), 1, 1);
        let zero = Mat::zeros(1, 1);
        let drift = Mat::from_element(1, 1, a * x);
        filter_step(&mut st, &gains, 0.0, &zero, &Mat::from_element(1, 1, dy), &zero, &drift, dt).unwrap();

        let phi = (a * dt).exp();
        let (h, r) = (f * dt, k * k * dt);
        let cross = c * k * (phi - 1.0) / a;
        let gain = (phi * p * h + cross) / (h * p * h + r);
        let kalman = phi * x + gain * (dy - h * x);
        (st.xcheck[(0, 0)] - kalman).abs()
    }

    #[test]
    fn leader_filter_step_matches_discrete_kalman_to_second_order() {
        let (g1, g2) = (kalman_gap(1e-2), kalman_gap(1e-3));
        assert!(g1 < 1e-3, "{g1}");
        let ratio = g1 / g2;
        assert!((50.0..200.0).contains(&ratio), "gap ratio {ratio}");
    }
}
