//! Coefficients of the fully coupled forward-backward LQ problem and the leader's instance of it.

use crate::follower::FollowerSolution;
use crate::linalg::{self, Mat};
use crate::model::{CoefficientFn, Definiteness, GameSpec, TimeGrid};
use crate::odesolve::MatrixTrajectory;
use crate::{Error, Result};

/// Forward state X (n), backward state Y (nn = N·n), control u (m), `channels` Brownian channels.
///
/// Forward: dX = [A1X + B1ᵀY + Σ C1ʲᵀZʲ + D1u + E1]dt + Σ [A2ʲX + B2ʲᵀY + C2ʲᵀZʲ + D2ʲu + E2ʲ]dBʲ.
/// Backward: dY = −[A3X + B3ᵀY + Σ C3ʲᵀZʲ + D3u + E3]dt + Σ Zʲ dBʲ, Y_T = F X_T + ξ.
/// Cost: ½E[∫ XᵀA4X + YᵀB4Y + Σ ZʲᵀC4ʲZʲ + uᵀD4u dt + X_TᵀG X_T + Y_0ᵀH Y_0].
#[derive(Debug, Clone)]
pub struct FbsdeLqProblem {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub nn: usize,
    pub channels: usize,
    pub x0: Mat,
    pub a1: CoefficientFn,
    pub b1: CoefficientFn,
    pub c1: Vec<CoefficientFn>,
    pub d1: CoefficientFn,
    pub e1: CoefficientFn,
    pub a2: Vec<CoefficientFn>,
    pub b2: Vec<CoefficientFn>,
    pub c2: Vec<CoefficientFn>,
    pub d2: Vec<CoefficientFn>,
    pub e2: Vec<CoefficientFn>,
    pub a3: CoefficientFn,
    pub b3: CoefficientFn,
    pub c3: Vec<CoefficientFn>,
    pub d3: CoefficientFn,
    pub e3: CoefficientFn,
    pub a4: CoefficientFn,
    pub b4: CoefficientFn,
    pub c4: Vec<CoefficientFn>,
    pub d4: CoefficientFn,
    pub g: Mat,
    pub h: Mat,
    pub f: Mat,
    pub xi: Mat,
    pub definiteness: Definiteness,
}

/// All coefficients evaluated at one time.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub a1: Mat,
    pub b1: Mat,
    pub c1: Vec<Mat>,
    pub d1: Mat,
    pub e1: Mat,
    pub a2: Vec<Mat>,
    pub b2: Vec<Mat>,
    pub c2: Vec<Mat>,
    pub d2: Vec<Mat>,
    pub e2: Vec<Mat>,
    pub a3: Mat,
    pub b3: Mat,
    pub c3: Vec<Mat>,
    pub d3: Mat,
    pub e3: Mat,
    pub a4: Mat,
    pub b4: Mat,
    pub c4: Vec<Mat>,
    pub d4: Mat,
}

impl FbsdeLqProblem {
    pub fn zeros(n: usize, m: usize, nn: usize, channels: usize, grid: TimeGrid) -> Self {
        let z = CoefficientFn::zeros;
        let per = |r, c| vec![z(r, c); channels];
        FbsdeLqProblem {
            grid,
            n,
            m,
            nn,
            channels,
            x0: Mat::zeros(n, 1),
            a1: z(n, n),
            b1: z(nn, n),
            c1: per(nn, n),
            d1: z(n, m),
            e1: z(n, 1),
            a2: per(n, n),
            b2: per(nn, n),
            c2: per(nn, n),
            d2: per(n, m),
            e2: per(n, 1),
            a3: z(nn, n),
            b3: z(nn, nn),
            c3: per(nn, nn),
            d3: z(nn, m),
            e3: z(nn, 1),
            a4: z(n, n),
            b4: z(nn, nn),
            c4: per(nn, nn),
            d4: CoefficientFn::constant(linalg::eye(m)),
            g: Mat::zeros(n, n),
            h: Mat::zeros(nn, nn),
            f: Mat::zeros(nn, n),
            xi: Mat::zeros(nn, 1),
            definiteness: Definiteness::Definite,
        }
    }

    pub fn at(&self, t: f64) -> Coeffs {
        let g = &self.grid;
        let ev = |c: &CoefficientFn| c.eval(t, g);
        let evs = |v: &[CoefficientFn]| v.iter().map(|c| c.eval(t, g)).collect::<Vec<_>>();
        Coeffs {
            a1: ev(&self.a1),
            b1: ev(&self.b1),
            c1: evs(&self.c1),
            d1: ev(&self.d1),
            e1: ev(&self.e1),
            a2: evs(&self.a2),
            b2: evs(&self.b2),
            c2: evs(&self.c2),
            d2: evs(&self.d2),
            e2: evs(&self.e2),
            a3: ev(&self.a3),
            b3: ev(&self.b3),
            c3: evs(&self.c3),
            d3: ev(&self.d3),
            e3: ev(&self.e3),
            a4: ev(&self.a4),
            b4: ev(&self.b4),
            c4: evs(&self.c4),
            d4: ev(&self.d4),
        }
    }

    pub fn node(&self, k: usize) -> Coeffs {
        self.at(self.grid.t(k))
    }

    /// Checks every block shape; also rejects several channels with control-dependent noise,
    /// which the channel-split enlargement cannot represent.
    pub fn check(&self) -> Result<()> {
        let (n, m, nn, l) = (self.n, self.m, self.nn, self.channels);
        let mut bad = Vec::new();
        fn one(bad: &mut Vec<String>, name: &str, c: &CoefficientFn, r: usize, cc: usize) {
            if c.shape() != (r, cc) {
                bad.push(format!("{name} is {:?}, expected ({r}, {cc})", c.shape()));
            }
        }
        one(&mut bad, "A1", &self.a1, n, n);
        one(&mut bad, "B1", &self.b1, nn, n);
        one(&mut bad, "D1", &self.d1, n, m);
        one(&mut bad, "E1", &self.e1, n, 1);
        one(&mut bad, "A3", &self.a3, nn, n);
        one(&mut bad, "B3", &self.b3, nn, nn);
        one(&mut bad, "D3", &self.d3, nn, m);
        one(&mut bad, "E3", &self.e3, nn, 1);
        one(&mut bad, "A4", &self.a4, n, n);
        one(&mut bad, "B4", &self.b4, nn, nn);
        one(&mut bad, "D4", &self.d4, m, m);
        for (name, v, r, c) in [
            ("C1", &self.c1, nn, n),
            ("A2", &self.a2, n, n),
            ("B2", &self.b2, nn, n),
            ("C2", &self.c2, nn, n),
            ("D2", &self.d2, n, m),
            ("E2", &self.e2, n, 1),
            ("C3", &self.c3, nn, nn),
            ("C4", &self.c4, nn, nn),
        ] {
            if v.len() != l {
                bad.push(format!("{name} has {} channels, expected {l}", v.len()));
                continue;
            }
            for (j, x) in v.iter().enumerate() {
                one(&mut bad, &format!("{name}[{j}]"), x, r, c);
            }
        }
        for (name, x, r, c) in [
            ("G", &self.g, n, n),
            ("H", &self.h, nn, nn),
            ("F", &self.f, nn, n),
            ("xi", &self.xi, nn, 1),
            ("x0", &self.x0, n, 1),
        ] {
            if x.shape() != (r, c) {
                bad.push(format!("{name} is {:?}, expected ({r}, {c})", x.shape()));
            }
        }
        if !bad.is_empty() {
            return Err(Error::ShapeMismatch(bad.join("; ")));
        }
        if l > 1 && self.d2.iter().any(|d| !d.is_zero()) {
            return Err(Error::PreconditionViolated(
                "control-dependent diffusion needs a single Brownian channel".into(),
            ));
        }
        Ok(())
    }
}

fn nodes(grid: &TimeGrid, f: impl FnMut(usize) -> Mat) -> CoefficientFn {
    CoefficientFn::Nodes((0..grid.len()).map(f).collect())
}

fn require_zero(c: &CoefficientFn, what: &str) -> Result<()> {
    if c.is_zero() {
        Ok(())
    } else {
        Err(Error::PreconditionViolated(format!("{what} must vanish")))
    }
}

/// The leader's reduced, completely observed problem with the followers' responses substituted.
/// State X̌ (filter of X given the leader's observations), backward state the stacked φ̌ of the
/// followers, noise the leader's normalized innovation.
pub fn map_leader_problem(
    spec: &GameSpec,
    followers: &[FollowerSolution],
    sigma_tilde: &MatrixTrajectory,
) -> Result<FbsdeLqProblem> {
    let o = &spec.observations;
    require_zero(&o.f1, "f1")?;
    require_zero(&o.g1, "g1")?;
    let lc = &spec.leader_cost;
    require_zero(&lc.s, "leader S")?;
    require_zero(&lc.q_lin, "leader q")?;
    require_zero(&lc.r_lin, "leader r")?;
    if linalg::max_abs(&lc.g_lin) != 0.0 {
        return Err(Error::PreconditionViolated("leader g must vanish".into()));
    }
    let grid = spec.grid;
    if !sigma_tilde.grid.same_as(&grid) || followers.iter().any(|f| !f.p.grid.same_as(&grid)) {
        return Err(Error::GridMismatch("leader inputs live on different grids".into()));
    }
    let nf = spec.dims.followers;
    if followers.len() != nf {
        return Err(Error::ShapeMismatch(format!("{} follower solutions for {nf} followers", followers.len())));
    }
    let (n, m, l) = (spec.dims.n, spec.dims.m, spec.dims.l2);
    let nn = nf * n;
    let d = &spec.dynamics;

    let kc = |i: usize, k: usize| followers[i].gain_state.at(k).clone();
    let rinv = |i: usize, k: usize| linalg::inverse_or(&spec.follower_costs[i].r.node(k), "R1i", grid.t(k));
    let mut minv = vec![Vec::with_capacity(grid.len()); nf];
    for k in 0..grid.len() {
        for (i, mi) in minv.iter_mut().enumerate() {
            mi.push(rinv(i, k)?);
        }
    }
    let mmat = |i: usize, k: usize| {
        let b = d.b1[i].node(k);
        &b * &minv[i][k] * b.transpose()
    };

    let mut p = FbsdeLqProblem::zeros(n, m, nn, l, grid);
    p.x0 = spec.x0.clone();
    p.definiteness = spec.leader_definiteness;
    p.a1 = nodes(&grid, |k| {
        let mut a = d.a.node(k);
        for i in 0..nf {
            a += d.b1[i].node(k) * kc(i, k);
        }
        a
    });
    p.b1 = nodes(&grid, |k| {
        let blocks: Vec<Mat> = (0..nf).map(|i| -mmat(i, k)).collect();
        linalg::vstack(&blocks.iter().collect::<Vec<_>>())
    });
    p.d1 = d.b2.clone();
    p.e1 = nodes(&grid, |k| {
        let mut e = d.alpha.node(k);
        for i in 0..nf {
            e -= d.b1[i].node(k) * &minv[i][k] * spec.follower_costs[i].r_lin.node(k);
        }
        e
    });
    let mut e2 = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t = grid.t(k);
        let k2inv = linalg::inverse_or(&o.k2.node(k), "K2", t)?;
        e2.push(sigma_tilde.at(k) * o.f2.node(k).transpose() * k2inv.transpose() + d.c2.node(k));
    }
    p.e2 = (0..l).map(|j| nodes(&grid, |k| Mat::from_column_slice(e2[k].nrows(), 1, e2[k].column(j).as_slice()))).collect();
    p.b3 = nodes(&grid, |k| {
        let blocks: Vec<Mat> = (0..nf).map(|i| d.a.node(k) + d.b1[i].node(k) * kc(i, k)).collect();
        linalg::block_diag(&blocks.iter().collect::<Vec<_>>())
    });
    p.d3 = nodes(&grid, |k| {
        let blocks: Vec<Mat> = (0..nf).map(|i| followers[i].p.at(k) * d.b2.node(k)).collect();
        linalg::vstack(&blocks.iter().collect::<Vec<_>>())
    });
    p.e3 = nodes(&grid, |k| {
        let blocks: Vec<Mat> = (0..nf)
            .map(|i| {
                let c = &spec.follower_costs[i];
                followers[i].p.at(k) * d.alpha.node(k) + c.q_lin.node(k) + kc(i, k).transpose() * c.r_lin.node(k)
            })
            .collect();
        linalg::vstack(&blocks.iter().collect::<Vec<_>>())
    });
    p.a4 = scale(&lc.q, 2.0);
    p.d4 = scale(&lc.r, 2.0);
    p.g = &lc.g * 2.0;
    let xi: Vec<Mat> = spec.follower_costs.iter().map(|c| c.g_lin.clone()).collect();
    p.xi = linalg::vstack(&xi.iter().collect::<Vec<_>>());
    p.check()?;
    Ok(p)
}

fn scale(c: &CoefficientFn, s: f64) -> CoefficientFn {
    match c {
        CoefficientFn::Constant(m) => CoefficientFn::Constant(m * s),
        CoefficientFn::Nodes(v) => CoefficientFn::Nodes(v.iter().map(|m| m * s).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::follower;
    use crate::model::{Dims, GameSpec};

    fn sc(x: f64) -> CoefficientFn {
        CoefficientFn::scalar(x)
    }

    fn scalar_game() -> GameSpec {
        let mut s = GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, TimeGrid::new(1.0, 100));
        s.dynamics.a = sc(0.3);
        s.dynamics.b1 = vec![sc(0.8)];
        s.dynamics.b2 = sc(0.5);
        s.dynamics.alpha = sc(0.1);
        s.dynamics.c1 = sc(0.2);
        s.dynamics.c2 = sc(0.3);
        s.observations.f2 = sc(1.0);
        s.follower_costs[0].q = sc(1.0);
        s.follower_costs[0].g = Mat::from_element(1, 1, 0.5);
        s.follower_costs[0].g_lin = Mat::from_element(1, 1, 0.25);
        s.leader_cost.q = sc(1.5);
        s.leader_cost.g = Mat::from_element(1, 1, 0.7);
        s.leader_cost.r = sc(-2.0);
        s
    }

    fn mapped(spec: &GameSpec) -> FbsdeLqProblem {
        let fs = follower::solve_followers(spec, &follower::U2Affine::Zero).unwrap();
        let st = MatrixTrajectory::constant(spec.grid, Mat::from_element(1, 1, 0.4));
        map_leader_problem(spec, &fs, &st).unwrap()
    }

    #[test]
    fn weights_are_doubled_and_terminal_data_stacked() {
        let spec = scalar_game();
        let p = mapped(&spec);
        assert_eq!(p.d4.node(0)[(0, 0)], -4.0);
        assert_eq!(p.a4.node(3)[(0, 0)], 3.0);
        assert_eq!(p.g[(0, 0)], 1.4);
        assert_eq!(p.xi[(0, 0)], 0.25);
        assert!(p.f.iter().all(|x| *x == 0.0) && p.h.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_follower_input_reduces_forward_drift() {
        let mut spec = scalar_game();
        spec.dynamics.b1 = vec![sc(0.0)];
        let p = mapped(&spec);
        let c = p.node(10);
        assert_eq!(c.a1[(0, 0)], 0.3);
        assert_eq!(c.b1[(0, 0)], 0.0);
        assert_eq!(c.d1[(0, 0)], 0.5);
        assert_eq!(c.e1[(0, 0)], 0.1);
    }

    #[test]
    fn innovation_loading_includes_filter_term() {
        let spec = scalar_game();
        let p = mapped(&spec);
        // Σ̃ f2ᵀ K2⁻ᵀ + C2 = 0.4 + 0.3
        assert!((p.e2[0].node(5)[(0, 0)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn nonzero_follower_observation_is_rejected() {
        let mut spec = scalar_game();
        spec.observations.f1 = sc(1.0);
        let fs = follower::solve_followers(&spec, &follower::U2Affine::Zero).unwrap();
        let st = MatrixTrajectory::constant(spec.grid, Mat::zeros(1, 1));
        assert!(matches!(map_leader_problem(&spec, &fs, &st), Err(Error::PreconditionViolated(_))));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut p = FbsdeLqProblem::zeros(1, 1, 2, 1, TimeGrid::new(1.0, 4));
        p.b3 = CoefficientFn::zeros(1, 1);
        assert!(matches!(p.check(), Err(Error::ShapeMismatch(_))));
    }
}
