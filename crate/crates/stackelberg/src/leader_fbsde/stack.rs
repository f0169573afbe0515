//! Regularized Riccati solves of the enlarged problem, block recovery and the i → ∞ limit.

use rayon::prelude::*;
use serde::Serialize;

use super::enlarged::{EnlargedAt, EnlargedSystem};
use super::problem::FbsdeLqProblem;
use super::relations::{self, MMats, NMats, PBlocks, Relations};
use crate::linalg::{self, Mat};
use crate::model::{Definiteness, TimeGrid};
use crate::odesolve::{self, Direction, MatrixTrajectory};
use crate::{Error, Result};

/// Relative step-doubling tolerance of the regularized Riccati solves.
pub const REFINE_RTOL: f64 = 1e-10;

/// i = 1, 2, 4, …, 1024.
pub fn default_i_sequence() -> Vec<f64> {
    (0..=10).map(|k| 2f64.powi(k)).collect()
}

/// One regularization index: the augmented Riccati matrix [[P̃, η], [ηᵀ, 2c]] and its recovery.
#[derive(Debug, Clone)]
pub struct RegularizationLevel {
    pub i: f64,
    pub pbar: MatrixTrajectory,
    pub p1: MatrixTrajectory,
    pub p2: MatrixTrajectory,
    pub p3: MatrixTrajectory,
    pub phi1: MatrixTrajectory,
    pub phi2: MatrixTrajectory,
    pub recovery_residual: f64,
    /// Optimal reduced cost from the value function at t = 0.
    pub value: f64,
}

impl RegularizationLevel {
    pub fn dim(&self) -> usize {
        self.pbar.shape().0 - 1
    }

    pub fn tilde_p(&self, k: usize) -> Mat {
        let d = self.dim();
        linalg::block(self.pbar.at(k), 0, 0, d, d)
    }

    pub fn eta(&self, k: usize) -> Mat {
        let d = self.dim();
        linalg::block(self.pbar.at(k), 0, d, d, 1)
    }

    pub fn blocks(&self, k: usize) -> PBlocks {
        PBlocks {
            p1: self.p1.at(k).clone(),
            p2: self.p2.at(k).clone(),
            p3: self.p3.at(k).clone(),
            phi1: self.phi1.at(k).clone(),
            phi2: self.phi2.at(k).clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub i: f64,
    pub value: f64,
    pub recovery_residual: f64,
    pub p3_at_terminal: f64,
}

/// How P1, P2, P3 were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StackRoute {
    /// Regularized enlarged Riccati solves extrapolated in 1/i.
    Regularized,
    /// Direct backward integration of the limit equations for (P1, P2, P3).
    LimitOde,
}

/// Convergence diagnostics of the regularization sequence.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub route: StackRoute,
    /// Why the regularized route was abandoned, when it was.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub levels: Vec<LevelReport>,
    /// Indices whose Riccati equation failed and were left out.
    pub skipped_levels: Vec<f64>,
    /// Max-node relative change of (P1, P2, P3) between successive indices.
    pub raw_changes: Vec<f64>,
    /// The same for successive quadratic extrapolants in 1/i.
    pub extrapolated_changes: Vec<f64>,
    pub raw_converged: bool,
    pub extrapolated_converged: bool,
    pub recovery_residual: f64,
    pub mainrela_residual: f64,
    /// Max-node distance between the extrapolated blocks and a direct solve of their limit ODE.
    pub limit_ode_distance: f64,
    pub limit_ode_consistency: f64,
    pub m1_inertia: (usize, usize, usize),
    pub p1_eigen_range: (f64, f64),
    pub p3_eigen_range: (f64, f64),
    /// Smallest eigenvalue modulus of P3 over [0, T).
    pub p3_floor: f64,
    /// Directions with a negative terminal penalty.
    pub penalty_negative_directions: usize,
}

#[derive(Debug, Clone)]
pub struct LeaderRiccatiStack {
    pub grid: TimeGrid,
    pub n: usize,
    pub nn: usize,
    pub definiteness: Definiteness,
    pub levels: Vec<RegularizationLevel>,
    pub tilde_p: MatrixTrajectory,
    pub p1: MatrixTrajectory,
    pub p2: MatrixTrajectory,
    pub p3: MatrixTrajectory,
    /// Affine terms integrated from their own backward equations (integrands vanish).
    pub phi1: MatrixTrajectory,
    pub phi2: MatrixTrajectory,
    /// Affine terms recovered from η and extrapolated.
    pub phi1_recovered: MatrixTrajectory,
    pub phi2_recovered: MatrixTrajectory,
    pub relations: Vec<Relations>,
    pub nmats: Vec<NMats>,
    /// Per node and channel, at the largest index.
    pub mmats: Vec<Vec<MMats>>,
    pub tilde_phi: MatrixTrajectory,
    pub gamma_tilde: MatrixTrajectory,
    pub m5: Vec<f64>,
    pub signature: Mat,
    pub report: ConvergenceReport,
}

impl LeaderRiccatiStack {
    pub fn blocks(&self, k: usize) -> PBlocks {
        PBlocks {
            p1: self.p1.at(k).clone(),
            p2: self.p2.at(k).clone(),
            p3: self.p3.at(k).clone(),
            phi1: self.phi1.at(k).clone(),
            phi2: self.phi2.at(k).clone(),
        }
    }
}

struct Augmented {
    a: Mat,
    b: Vec<Mat>,
    c: Vec<Mat>,
    d: Vec<Mat>,
    q: Mat,
}

/// Appends the constant coordinate that carries the inhomogeneous terms.
fn augment(es: &EnlargedAt) -> Augmented {
    let d = es.a.nrows();
    let pad_row = |m: &Mat| linalg::vstack(&[m, &Mat::zeros(1, m.ncols())]);
    let a = pad_row(&linalg::hstack(&[&es.a, &es.e]));
    let c = es.c.iter().zip(&es.ee).map(|(c, e)| pad_row(&linalg::hstack(&[c, e]))).collect();
    let b = es.b.iter().map(pad_row).collect();
    let dd = es.d.iter().map(pad_row).collect();
    let mut q = Mat::zeros(d + 1, d + 1);
    linalg::set_block(&mut q, 0, 0, &es.q);
    Augmented { a, b, c, d: dd, q }
}

fn m1_inverse(m1: &Mat, definite: bool, t: f64, channel: usize) -> Result<Mat> {
    if definite {
        return match linalg::sym(m1).cholesky() {
            Some(ch) => Ok(ch.inverse()),
            None => Err(Error::M1NotPD { t, channel }),
        };
    }
    linalg::inverse_or(m1, "M1", t)
}

/// Ṗ = −PA − AᵀP − Σ CᵀPC − Q + Σ M2ᵀM1⁻¹M2 for the (augmented) state.
fn riccati_rhs(aug: &Augmented, r: &[Mat], p: &Mat, definite: bool, t: f64) -> Result<Mat> {
    let mut out = -(p * &aug.a + aug.a.transpose() * p + &aug.q);
    for j in 0..aug.b.len() {
        let pc = p * &aug.c[j];
        out -= aug.c[j].transpose() * &pc;
        let m1 = &r[j] + aug.d[j].transpose() * p * &aug.d[j];
        let m2 = aug.b[j].transpose() * p + aug.d[j].transpose() * &pc;
        out += m2.transpose() * m1_inverse(&m1, definite, t, j)? * m2;
    }
    Ok(out)
}

/// Right-hand side of the plain enlarged Riccati equation.
pub fn tilde_riccati_rhs(es: &EnlargedAt, ptilde: &Mat, definite: bool, t: f64) -> Result<Mat> {
    let aug = Augmented { a: es.a.clone(), b: es.b.clone(), c: es.c.clone(), d: es.d.clone(), q: es.q.clone() };
    riccati_rhs(&aug, &es.r, ptilde, definite, t)
}

/// Terminal data of the penalty i·(Y − FX − ξ)ᵀS(Y − FX − ξ).
fn terminal(p: &FbsdeLqProblem, i: f64, s: &Mat) -> Mat {
    let (n, nn) = (p.n, p.nn);
    let ft = p.f.transpose();
    let si = s * i;
    let mut m = Mat::zeros(n + nn + 1, n + nn + 1);
    linalg::set_block(&mut m, 0, 0, &(&p.g + &ft * &si * &p.f));
    linalg::set_block(&mut m, 0, n, &-(&ft * &si));
    linalg::set_block(&mut m, n, 0, &-(&si * &p.f));
    linalg::set_block(&mut m, n, n, &si);
    let eta1 = &ft * &si * &p.xi;
    let eta2 = -(&si * &p.xi);
    linalg::set_block(&mut m, 0, n + nn, &eta1);
    linalg::set_block(&mut m, n, n + nn, &eta2);
    linalg::set_block(&mut m, n + nn, 0, &eta1.transpose());
    linalg::set_block(&mut m, n + nn, n, &eta2.transpose());
    m[(n + nn, n + nn)] = (p.xi.transpose() * &si * &p.xi)[(0, 0)];
    m
}

/// Sign pattern of the penalty. The limit P3 vanishes at T and its sign just before T is fixed
/// by the problem (with a negative control weight it is typically nonpositive); the regularized
/// P3 = S/i at T must leave T on the same side, otherwise P̃3 = P3⁻¹ passes through a pole.
pub fn penalty_signature(p: &FbsdeLqProblem) -> Mat {
    let nn = p.nn;
    if p.definiteness == Definiteness::Definite || p.grid.steps < 2 {
        return linalg::eye(nn);
    }
    let Ok((_, _, p3, _)) = solve_limit_blocks(p) else {
        return linalg::eye(nn);
    };
    let eig = linalg::sym(p3.at(p.grid.steps - 1)).symmetric_eigen();
    let signs = eig.eigenvalues.map(|l| if l < 0.0 { -1.0 } else { 1.0 });
    &eig.eigenvectors * Mat::from_diagonal(&signs) * eig.eigenvectors.transpose()
}

/// Minimum over y of zᵀP̄z + yᵀHy with z = (x0, y, 1).
fn initial_value(pbar: &Mat, h: &Mat, x0: &Mat, n: usize, t: f64) -> Result<f64> {
    let nn = h.nrows();
    let d = n + nn;
    let fixed: Vec<usize> = (0..n).chain(std::iter::once(d)).collect();
    let free: Vec<usize> = (n..d).collect();
    let pick = |rows: &[usize], cols: &[usize]| Mat::from_fn(rows.len(), cols.len(), |a, b| pbar[(rows[a], cols[b])]);
    let sff = pick(&fixed, &fixed);
    let sfy = pick(&fixed, &free);
    let syy = pick(&free, &free) + h;
    let z = linalg::vstack(&[x0, &Mat::from_element(1, 1, 1.0)]);
    let yy = linalg::inverse_or(&syy, "P̃3 + H", t)?;
    Ok((z.transpose() * (sff - &sfy * yy * sfy.transpose()) * &z)[(0, 0)])
}

/// Integrates the augmented Riccati equation for one index and recovers (P1, P2, P3, φ1, φ2).
pub fn solve_level(es: &EnlargedSystem, p: &FbsdeLqProblem, i: f64, signature: &Mat) -> Result<RegularizationLevel> {
    let definite = p.definiteness == Definiteness::Definite;
    let grid = p.grid;
    let (n, nn) = (p.n, p.nn);
    let pbar = odesolve::integrate_matrix_ode_refined(
        |t, m| {
            let e = es.at(t);
            riccati_rhs(&augment(&e), &e.r, m, definite, t)
        },
        &terminal(p, i, signature),
        Direction::Backward,
        &grid,
        true,
        REFINE_RTOL,
    )?;
    let d = n + nn;
    let (mut p1, mut p2, mut p3, mut f1, mut f2) = (vec![], vec![], vec![], vec![], vec![]);
    let mut residual: f64 = 0.0;
    for k in 0..grid.len() {
        let t = grid.t(k);
        let m = pbar.at(k);
        let pt1 = linalg::block(m, 0, 0, n, n);
        let pt2 = linalg::block(m, 0, n, n, nn);
        let pt3 = linalg::block(m, n, n, nn, nn);
        let eta1 = linalg::block(m, 0, d, n, 1);
        let eta2 = linalg::block(m, n, d, nn, 1);
        let q3 = linalg::inverse_or(&pt3, "P̃3", t)?;
        let q2 = -(&pt2 * &q3);
        let q1 = &pt1 - &q2 * &pt3 * q2.transpose();
        // identities checked with an independent inverse of P3
        let q3inv = linalg::inverse_or(&q3, "P3", t)?;
        let rel = |a: Mat, b: &Mat| a.norm() / (1.0 + b.norm());
        residual = residual
            .max(rel(&q3inv - &pt3, &pt3))
            .max(rel(&q2 + &pt2 * &q3, &q2))
            .max(rel(&q1 - &pt1 + &q2 * &q3inv * q2.transpose(), &pt1));
        f1.push(&eta1 + &q2 * &eta2);
        f2.push(-(&q3 * &eta2));
        p1.push(q1);
        p2.push(q2);
        p3.push(q3);
    }
    let value = 0.5 * initial_value(pbar.at(0), &p.h, &p.x0, n, 0.0)?;
    let tr = |values, symmetric| MatrixTrajectory { grid, values, symmetric };
    Ok(RegularizationLevel {
        i,
        pbar,
        p1: tr(p1, true),
        p2: tr(p2, false),
        p3: tr(p3, true),
        phi1: tr(f1, false),
        phi2: tr(f2, false),
        recovery_residual: residual,
        value,
    })
}

/// Value at ε = 0 of the interpolating polynomial through (εₖ, vₖ) (Neville).
pub fn extrapolate_to_zero(eps: &[f64], vals: &[Mat]) -> Mat {
    let mut t: Vec<Mat> = vals.to_vec();
    let n = eps.len();
    for lvl in 1..n {
        for k in 0..n - lvl {
            let (e0, e1) = (eps[k], eps[k + lvl]);
            t[k] = (&t[k + 1] * e0 - &t[k] * e1) / (e0 - e1);
        }
    }
    t[0].clone()
}

const EXTRAPOLATION_POINTS: usize = 3;

/// Max-node change relative to the block size, floored at one so that blocks tending to zero
/// are measured absolutely.
fn rel_change(a: &[&MatrixTrajectory], b: &[&MatrixTrajectory]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_node_diff(y) / y.max_abs().max(1.0))
        .fold(0.0, f64::max)
}

fn extrapolated_traj(levels: &[&RegularizationLevel], f: impl Fn(&RegularizationLevel) -> &MatrixTrajectory) -> MatrixTrajectory {
    let eps: Vec<f64> = levels.iter().map(|l| 1.0 / l.i).collect();
    let first = f(levels[0]);
    MatrixTrajectory::from_fn(first.grid, |k| {
        let vals: Vec<Mat> = levels.iter().map(|l| f(l).at(k).clone()).collect();
        extrapolate_to_zero(&eps, &vals)
    })
}

fn extrapolate_scalar(levels: &[&RegularizationLevel], f: impl Fn(&RegularizationLevel) -> f64) -> f64 {
    let eps: Vec<f64> = levels.iter().map(|l| 1.0 / l.i).collect();
    let vals: Vec<Mat> = levels.iter().map(|l| Mat::from_element(1, 1, f(l))).collect();
    extrapolate_to_zero(&eps, &vals)[(0, 0)]
}

/// Extrapolated reduced cost from the last three indices.
pub fn extrapolated_value(levels: &[RegularizationLevel]) -> f64 {
    let k = levels.len();
    let tail: Vec<&RegularizationLevel> = levels[k.saturating_sub(EXTRAPOLATION_POINTS)..].iter().collect();
    extrapolate_scalar(&tail, |l| l.value)
}

/// Direct integration of the limit decoupling ODE from (G, Fᵀ, 0).
pub fn solve_limit_blocks(p: &FbsdeLqProblem) -> Result<(MatrixTrajectory, MatrixTrajectory, MatrixTrajectory, f64)> {
    let (n, nn) = (p.n, p.nn);
    let grid = p.grid;
    let mut term = Mat::zeros(n + nn, n + nn);
    linalg::set_block(&mut term, 0, 0, &p.g);
    linalg::set_block(&mut term, 0, n, &p.f.transpose());
    linalg::set_block(&mut term, n, 0, &p.f);
    let mut consistency: f64 = 0.0;
    let packed = odesolve::integrate_matrix_ode(
        |t, m| {
            let blocks = PBlocks {
                p1: linalg::block(m, 0, 0, n, n),
                p2: linalg::block(m, 0, n, n, nn),
                p3: linalg::block(m, n, n, nn, nn),
                phi1: Mat::zeros(n, 1),
                phi2: Mat::zeros(nn, 1),
            };
            let c = p.at(t);
            let r = relations::relations(&c, &blocks, t)?;
            let (d1, d2, d3, res) = relations::p_derivative(&c, &blocks, &r);
            consistency = consistency.max(res.norm());
            let mut out = Mat::zeros(n + nn, n + nn);
            linalg::set_block(&mut out, 0, 0, &d1);
            linalg::set_block(&mut out, 0, n, &d2);
            linalg::set_block(&mut out, n, 0, &d2.transpose());
            linalg::set_block(&mut out, n, n, &d3);
            Ok(out)
        },
        &term,
        Direction::Backward,
        &grid,
        false,
    )?;
    let pick = |r, c, h, w| packed.map(|_, m| linalg::block(m, r, c, h, w));
    Ok((pick(0, 0, n, n), pick(0, n, n, nn), pick(n, n, nn, nn), consistency))
}

/// Integrates the affine terms backward from φ1(T) = 0, φ2(T) = ξ along given decoupling blocks.
pub fn solve_affine(
    p: &FbsdeLqProblem,
    p1: &MatrixTrajectory,
    p2: &MatrixTrajectory,
    p3: &MatrixTrajectory,
) -> Result<(MatrixTrajectory, MatrixTrajectory)> {
    let (n, nn) = (p.n, p.nn);
    let term = linalg::vstack(&[&Mat::zeros(n, 1), &p.xi]);
    let packed = odesolve::integrate_matrix_ode(
        |t, f| {
            let blocks = PBlocks {
                p1: p1.eval(t),
                p2: p2.eval(t),
                p3: p3.eval(t),
                phi1: linalg::block(f, 0, 0, n, 1),
                phi2: linalg::block(f, n, 0, nn, 1),
            };
            let c = p.at(t);
            let r = relations::relations(&c, &blocks, t)?;
            let (d1, d2) = relations::phi_derivative(&c, &blocks, &r);
            Ok(linalg::vstack(&[&d1, &d2]))
        },
        &term,
        Direction::Backward,
        &p.grid,
        false,
    )?;
    Ok((packed.map(|_, m| linalg::block(m, 0, 0, n, 1)), packed.map(|_, m| linalg::block(m, n, 0, nn, 1))))
}

/// φ̃ = −P̃⁻¹η, its drift γ̃ and the scalar M5 at one node of one level.
pub fn affine_enlarged(es: &EnlargedAt, level: &RegularizationLevel, k: usize, definite: bool) -> Result<(Mat, Mat, f64)> {
    let t = level.pbar.grid.t(k);
    let pt = level.tilde_p(k);
    let ptinv = linalg::inverse_or(&pt, "P̃", t)?;
    let phit = -(&ptinv * level.eta(k));
    let pdot = tilde_riccati_rhs(es, &pt, definite, t)?;
    let mm = relations::m_mats(es, &pt);
    let mut g = (&pdot + es.a.transpose() * &pt) * &phit - &pt * &es.e;
    let mut m5 = 0.0;
    for (j, mj) in mm.iter().enumerate() {
        let m1i = linalg::inverse_or(&mj.m1, "M1", t)?;
        let w = mj.m2.transpose() * &m1i;
        g -= &w * &mj.m3 * &phit;
        g -= (es.c[j].transpose() * &pt - &w * &mj.m4) * &es.ee[j];
        let v = &mj.m4 * &es.ee[j] - &mj.m3 * &phit;
        m5 -= (v.transpose() * &m1i * &v)[(0, 0)];
        m5 += (es.ee[j].transpose() * &pt * &es.ee[j])[(0, 0)];
    }
    let gamma = &ptinv * g;
    let s = |a: &Mat, m: &Mat, b: &Mat| (a.transpose() * m * b)[(0, 0)];
    m5 += -s(&phit, &pt, &es.e) - s(&phit, &pt, &gamma) + s(&phit, &pdot, &phit) - s(&es.e, &pt, &phit)
        - s(&gamma, &pt, &phit);
    Ok((phit, gamma, m5))
}

/// Reduced cost ½[ℝ₂ + ∫M5] of one level (H = 0).
pub fn level_value_from_m5(es: &EnlargedSystem, p: &FbsdeLqProblem, level: &RegularizationLevel) -> Result<f64> {
    if linalg::max_abs(&p.h) != 0.0 {
        return Err(Error::PreconditionViolated("the M5 cost form needs H = 0".into()));
    }
    let definite = p.definiteness == Definiteness::Definite;
    let grid = p.grid;
    let mut m5 = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        m5.push(affine_enlarged(&es.at(grid.t(k)), level, k, definite)?.2);
    }
    Ok(0.5 * (r2(level.p1.at(0), level.phi1.at(0), &p.x0)? + odesolve::trapezoid(&grid, &m5)))
}

/// ℝ₂ = (x0 + P1⁻¹φ1)ᵀP1(x0 + P1⁻¹φ1).
pub fn r2(p1: &Mat, phi1: &Mat, x0: &Mat) -> Result<f64> {
    let z = if linalg::max_abs(phi1) == 0.0 { x0.clone() } else { x0 + linalg::inverse_or(p1, "P1(0)", 0.0)? * phi1 };
    Ok((z.transpose() * p1 * &z)[(0, 0)])
}

/// Solves every index (in parallel), extrapolates to i = ∞ and assembles the derived quantities.
pub fn solve_riccati_stack(es: &EnlargedSystem, p: &FbsdeLqProblem, i_sequence: &[f64]) -> Result<LeaderRiccatiStack> {
    p.check()?;
    if i_sequence.len() < EXTRAPOLATION_POINTS || i_sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::PreconditionViolated(format!(
            "need at least {EXTRAPOLATION_POINTS} increasing regularization indices"
        )));
    }
    let definite = p.definiteness == Definiteness::Definite;
    let grid = p.grid;
    let (n, nn) = (p.n, p.nn);
    let signature = penalty_signature(p);
    let attempts: Vec<Result<RegularizationLevel>> =
        i_sequence.par_iter().map(|&i| solve_level(es, p, i, &signature)).collect();
    // small indices may meet a singular M1 that the larger ones avoid; the top indices must succeed
    let mut levels = Vec::with_capacity(attempts.len());
    let mut skipped = Vec::new();
    let top_start = attempts.len() - EXTRAPOLATION_POINTS;
    for (k, (a, &i)) in attempts.into_iter().zip(i_sequence).enumerate() {
        match a {
            Ok(l) => levels.push(l),
            Err(e) if k < top_start => {
                log::warn!("regularization index {i} skipped: {e}");
                skipped.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    log::info!("solved {} regularization levels", levels.len());

    let raw_changes: Vec<f64> = levels
        .windows(2)
        .map(|w| rel_change(&[&w[0].p1, &w[0].p2, &w[0].p3], &[&w[1].p1, &w[1].p2, &w[1].p3]))
        .collect();
    let k_last = raw_changes.len();
    if k_last >= 3 && !(raw_changes[k_last - 1] < raw_changes[k_last - 2] && raw_changes[k_last - 2] < raw_changes[k_last - 3])
    {
        return Err(Error::RegularizationDiverged(format!("successive changes {:?}", &raw_changes[k_last - 3..])));
    }
    let windows: Vec<Vec<&RegularizationLevel>> = (EXTRAPOLATION_POINTS..=levels.len())
        .map(|end| levels[end - EXTRAPOLATION_POINTS..end].iter().collect())
        .collect();
    let extrap: Vec<[MatrixTrajectory; 3]> = windows
        .iter()
        .map(|w| [extrapolated_traj(w, |l| &l.p1), extrapolated_traj(w, |l| &l.p2), extrapolated_traj(w, |l| &l.p3)])
        .collect();
    let extrapolated_changes: Vec<f64> = extrap
        .windows(2)
        .map(|w| rel_change(&[&w[0][0], &w[0][1], &w[0][2]], &[&w[1][0], &w[1][1], &w[1][2]]))
        .collect();
    let last_window = windows.last().expect("non-empty");
    let [p1, p2, p3] = extrap.last().expect("non-empty").clone();
    let p1 = p1.map(|_, m| linalg::sym(m));
    let p3 = p3.map(|_, m| linalg::sym(m));
    let phi1_recovered = extrapolated_traj(last_window, |l| &l.phi1);
    let phi2_recovered = extrapolated_traj(last_window, |l| &l.phi2);

    let (phi1, phi2) = solve_affine(p, &p1, &p2, &p3)?;
    let (lp1, lp2, lp3, limit_ode_consistency) = solve_limit_blocks(p)?;
    let limit_ode_distance = lp1.max_node_diff(&p1).max(lp2.max_node_diff(&p2)).max(lp3.max_node_diff(&p3));

    let mut rels = Vec::with_capacity(grid.len());
    let mut nmats = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let c = p.node(k);
        let b = PBlocks {
            p1: p1.at(k).clone(),
            p2: p2.at(k).clone(),
            p3: p3.at(k).clone(),
            phi1: phi1.at(k).clone(),
            phi2: phi2.at(k).clone(),
        };
        let r = relations::relations(&c, &b, grid.t(k))?;
        nmats.push(relations::n_mats(&c, &b, &r));
        rels.push(r);
    }

    let top = levels.last().expect("non-empty");
    let mut mmats = Vec::with_capacity(grid.len());
    let (mut tphi, mut gam, mut m5) = (vec![], vec![], vec![]);
    let mut mainrela: f64 = 0.0;
    let mut inertia = (0, 0, 0);
    for k in 0..grid.len() {
        let t = grid.t(k);
        let e = es.at(t);
        let pt = top.tilde_p(k);
        let mm = relations::m_mats(&e, &pt);
        let c = p.node(k);
        let b = top.blocks(k);
        let r = relations::relations(&c, &b, t)?;
        mainrela = mainrela.max(mainrela_residual(&mm, &r, &b, t)?);
        for mj in &mm {
            let ine = linalg::inertia(&linalg::sym(&mj.m1), 1e-12);
            if ine.0 > inertia.0 || (ine.0 == inertia.0 && ine.1 > inertia.1) {
                inertia = ine;
            }
        }
        mmats.push(mm);
        let (a, g, s) = affine_enlarged(&e, top, k, definite)?;
        tphi.push(a);
        gam.push(g);
        m5.push(s);
    }
    let recovery_residual = levels.iter().map(|l| l.recovery_residual).fold(0.0, f64::max);
    let eig_range = |tr: &MatrixTrajectory, k: usize| (linalg::min_eig(tr.at(k)), linalg::max_eig(tr.at(k)));
    let p3_floor = (0..grid.steps)
        .map(|k| linalg::sym(p3.at(k)).symmetric_eigenvalues().amin())
        .fold(f64::INFINITY, f64::min);
    let report = ConvergenceReport {
        route: StackRoute::Regularized,
        fallback: None,
        levels: levels
            .iter()
            .map(|l| LevelReport {
                i: l.i,
                value: l.value,
                recovery_residual: l.recovery_residual,
                p3_at_terminal: linalg::max_eig(l.p3.last()),
            })
            .collect(),
        skipped_levels: skipped,
        raw_converged: raw_changes.last().is_some_and(|c| *c < 1e-6),
        extrapolated_converged: extrapolated_changes.last().is_some_and(|c| *c < 1e-6),
        raw_changes,
        extrapolated_changes,
        recovery_residual,
        mainrela_residual: mainrela,
        limit_ode_distance,
        limit_ode_consistency,
        m1_inertia: inertia,
        p1_eigen_range: eig_range(&p1, 0),
        p3_eigen_range: eig_range(&p3, 0),
        p3_floor,
        penalty_negative_directions: linalg::inertia(&signature, 0.5).0,
    };
    let tr = |values| MatrixTrajectory { grid, values, symmetric: false };
    Ok(LeaderRiccatiStack {
        grid,
        n,
        nn,
        definiteness: p.definiteness,
        tilde_p: top.pbar.map(|_, m| linalg::block(m, 0, 0, n + nn, n + nn)),
        levels,
        p1,
        p2,
        p3,
        phi1,
        phi2,
        phi1_recovered,
        phi2_recovered,
        relations: rels,
        nmats,
        mmats,
        tilde_phi: tr(tphi),
        gamma_tilde: tr(gam),
        m5,
        signature,
        report,
    })
}

/// The stack from the limit equations alone, without regularization. Quantities that only exist
/// per level (P̃, M matrices, φ̃, γ̃, M5) are left empty and the mainrela residual is NaN.
pub fn solve_riccati_stack_limit(p: &FbsdeLqProblem) -> Result<LeaderRiccatiStack> {
    p.check()?;
    let grid = p.grid;
    let (n, nn) = (p.n, p.nn);
    let (p1, p2, p3, limit_ode_consistency) = solve_limit_blocks(p)?;
    let p1 = p1.map(|_, m| linalg::sym(m));
    let p3 = p3.map(|_, m| linalg::sym(m));
    let (phi1, phi2) = solve_affine(p, &p1, &p2, &p3)?;
    let mut rels = Vec::with_capacity(grid.len());
    let mut nmats = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let b = PBlocks {
            p1: p1.at(k).clone(),
            p2: p2.at(k).clone(),
            p3: p3.at(k).clone(),
            phi1: phi1.at(k).clone(),
            phi2: phi2.at(k).clone(),
        };
        let r = relations::relations(&p.node(k), &b, grid.t(k))?;
        nmats.push(relations::n_mats(&p.node(k), &b, &r));
        rels.push(r);
    }
    let eig_range = |tr: &MatrixTrajectory, k: usize| (linalg::min_eig(tr.at(k)), linalg::max_eig(tr.at(k)));
    let p3_floor = (0..grid.steps)
        .map(|k| linalg::sym(p3.at(k)).symmetric_eigenvalues().amin())
        .fold(f64::INFINITY, f64::min);
    let report = ConvergenceReport {
        route: StackRoute::LimitOde,
        fallback: None,
        levels: vec![],
        skipped_levels: vec![],
        raw_changes: vec![],
        extrapolated_changes: vec![],
        raw_converged: false,
        extrapolated_converged: false,
        recovery_residual: 0.0,
        mainrela_residual: f64::NAN,
        limit_ode_distance: 0.0,
        limit_ode_consistency,
        m1_inertia: (0, 0, 0),
        p1_eigen_range: eig_range(&p1, 0),
        p3_eigen_range: eig_range(&p3, 0),
        p3_floor,
        penalty_negative_directions: 0,
    };
    let empty = MatrixTrajectory { grid, values: vec![Mat::zeros(0, 0); grid.len()], symmetric: false };
    Ok(LeaderRiccatiStack {
        grid,
        n,
        nn,
        definiteness: p.definiteness,
        levels: vec![],
        tilde_p: empty.clone(),
        phi1_recovered: phi1.clone(),
        phi2_recovered: phi2.clone(),
        p1,
        p2,
        p3,
        phi1,
        phi2,
        relations: rels,
        nmats,
        mmats: vec![],
        tilde_phi: empty.clone(),
        gamma_tilde: empty,
        m5: vec![],
        signature: linalg::eye(nn),
        report,
    })
}

/// ‖M1⁻¹M2 + [[L6 + L7P3⁻¹P2ᵀ, −L7P3⁻¹], [L10 + L11P3⁻¹P2ᵀ, −L11P3⁻¹]]‖, worst channel.
pub fn mainrela_residual(mm: &[MMats], r: &Relations, b: &PBlocks, t: f64) -> Result<f64> {
    let p3i = linalg::inverse_or(&b.p3, "P3", t)?;
    let p2t = b.p2.transpose();
    let mut worst: f64 = 0.0;
    for (j, mj) in mm.iter().enumerate() {
        let lhs = linalg::inverse_or(&mj.m1, "M1", t)? * &mj.m2;
        let top = linalg::hstack(&[&(&r.l6 + &r.l7 * &p3i * &p2t), &-(&r.l7 * &p3i)]);
        let bot = linalg::hstack(&[&(&r.l10[j] + &r.l11[j] * &p3i * &p2t), &-(&r.l11[j] * &p3i)]);
        let rhs = linalg::vstack(&[&top, &bot]);
        worst = worst.max((&lhs + &rhs).norm() / (1.0 + rhs.norm()));
    }
    Ok(worst)
}

/// Max-node distance of `a` to `b` relative to the size of `b`.
pub fn relative_distance(a: &MatrixTrajectory, b: &MatrixTrajectory) -> f64 {
    a.max_node_diff(b) / b.max_abs().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_recovery_arithmetic() {
        // P̃1 = 2, P̃2 = 1, P̃3 = 1
        let pt3 = Mat::from_element(1, 1, 1.0);
        let p3 = linalg::inverse_or(&pt3, "", 0.0).unwrap();
        let p2 = -(Mat::from_element(1, 1, 1.0) * &p3);
        let p1 = Mat::from_element(1, 1, 2.0) - &p2 * linalg::inverse_or(&p3, "", 0.0).unwrap() * p2.transpose();
        assert_eq!((p1[(0, 0)], p2[(0, 0)], p3[(0, 0)]), (1.0, -1.0, 1.0));
    }

    #[test]
    fn neville_reproduces_polynomials() {
        let eps = [1.0, 0.5, 0.25];
        let f = |e: f64| Mat::from_element(1, 1, 3.0 - 2.0 * e + 5.0 * e * e);
        let vals: Vec<Mat> = eps.iter().map(|&e| f(e)).collect();
        assert!((extrapolate_to_zero(&eps, &vals)[(0, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn initial_value_is_schur_minimum() {
        // [[2, 1, 0], [1, 1, 0], [0, 0, 0]] at x0 = 1: min over y of 2 + 2y + y² = 1.
        let pbar = Mat::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let v = initial_value(&pbar, &Mat::zeros(1, 1), &Mat::from_element(1, 1, 1.0), 1, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }
}
