//! Decoupling Ỹ = QX̃ + φ for a positive definite control weight, with X̃ = (X, h), Ỹ = (m, Y)
//! and Z̃ʲ = (nʲ, Zʲ) after eliminating the control through stationarity.

use super::problem::{Coeffs, FbsdeLqProblem};
use crate::linalg::{self, Mat};
use crate::model::TimeGrid;
use crate::odesolve::{self, Direction, MatrixTrajectory};
use crate::{Error, Result};

/// Coefficients of the Hamiltonian system in decoupling form at one time.
#[derive(Debug, Clone)]
pub struct HamiltonianBlocks {
    pub a1: Mat,
    pub b1: Mat,
    pub c1: Vec<Mat>,
    pub a2: Vec<Mat>,
    pub b2: Vec<Mat>,
    pub c2: Vec<Mat>,
    pub a3: Mat,
    pub b3: Mat,
    pub c3: Vec<Mat>,
    pub e1: Mat,
    pub e2: Vec<Mat>,
    pub e3: Mat,
}

pub fn hamiltonian_blocks(c: &Coeffs, t: f64) -> Result<HamiltonianBlocks> {
    let (n, nn) = (c.a1.nrows(), c.b3.nrows());
    let di = linalg::inverse_or(&c.d4, "D4", t)?;
    let z = |r, cc| Mat::zeros(r, cc);
    let blk = |a: &Mat, b: &Mat, cc: &Mat, d: &Mat| linalg::vstack(&[&linalg::hstack(&[a, b]), &linalg::hstack(&[cc, d])]);
    let (d1t, d3t) = (c.d1.transpose(), c.d3.transpose());
    let a1 = blk(&c.a1, &-(&c.d1 * &di * &d3t), &z(nn, n), &c.b3);
    let b1 = blk(&-(&c.d1 * &di * &d1t), &c.b1.transpose(), &c.b1, &c.b4);
    let l = c.c1.len();
    let mut hb = HamiltonianBlocks {
        b3: a1.transpose(),
        a1,
        b1,
        c1: vec![],
        a2: vec![],
        b2: vec![],
        c2: vec![],
        a3: blk(&c.a4, &c.a3.transpose(), &c.a3, &-(&c.d3 * &di * &d3t)),
        c3: vec![],
        e1: linalg::vstack(&[&c.e1, &z(nn, 1)]),
        e2: vec![],
        e3: linalg::vstack(&[&z(n, 1), &c.e3]),
    };
    for j in 0..l {
        let d2t = c.d2[j].transpose();
        hb.c1.push(blk(&-(&c.d1 * &di * &d2t), &c.c1[j].transpose(), &c.b2[j], &z(nn, nn)));
        let a2 = blk(&c.a2[j], &-(&c.d2[j] * &di * &d3t), &z(nn, n), &c.c3[j]);
        hb.c3.push(a2.transpose());
        hb.a2.push(a2);
        hb.b2.push(blk(&-(&c.d2[j] * &di * &d1t), &c.b2[j].transpose(), &c.c1[j], &z(nn, nn)));
        hb.c2.push(blk(&-(&c.d2[j] * &di * &d2t), &c.c2[j].transpose(), &c.c2[j], &c.c4[j]));
        hb.e2.push(linalg::vstack(&[&c.e2[j], &z(nn, 1)]));
    }
    Ok(hb)
}

#[derive(Debug, Clone)]
pub struct DefiniteDecoupling {
    pub grid: TimeGrid,
    pub q: MatrixTrajectory,
    pub phi: MatrixTrajectory,
    /// Per channel: kʲ = (I − QC̃2ʲ)⁻¹Q(B̃2ʲQ + Ã2ʲ), Jʲ = (I − QC̃2ʲ)⁻¹QB̃2ʲ, Iʲ = (I − QC̃2ʲ)⁻¹.
    pub k: Vec<MatrixTrajectory>,
    pub j: Vec<MatrixTrajectory>,
    pub i: Vec<MatrixTrajectory>,
    /// u = gx·X + gh·h + affine.
    pub gx: MatrixTrajectory,
    pub gh: MatrixTrajectory,
    pub affine: MatrixTrajectory,
}

fn i_minus_qc(q: &Mat, c2: &Mat, t: f64) -> Result<Mat> {
    let m = linalg::eye(q.nrows()) - q * c2;
    linalg::inverse_checked(&m).map(|(x, _)| x).map_err(|_| Error::SingularIminusQC { t })
}

fn rhs(hb: &HamiltonianBlocks, q: &Mat, phi: &Mat, t: f64) -> Result<(Mat, Mat)> {
    let mut dq = q * &hb.a1 + &hb.b3 * q + q * &hb.b1 * q + &hb.a3;
    let mut dphi = (q * &hb.b1 + &hb.b3) * phi + q * &hb.e1 + &hb.e3;
    for j in 0..hb.c1.len() {
        let ij = i_minus_qc(q, &hb.c2[j], t)?;
        let w = q * &hb.c1[j] + &hb.c3[j];
        let k = &ij * q * (&hb.b2[j] * q + &hb.a2[j]);
        let jj = &ij * q * &hb.b2[j];
        dq += &w * k;
        dphi += &w * (jj * phi + &ij * q * &hb.e2[j]);
    }
    Ok((-dq, -dphi))
}

/// Integrates the packed [Q | φ] backward from [F̃ | ξ̃] and forms the control feedback.
pub fn solve_definite_decoupling(p: &FbsdeLqProblem) -> Result<DefiniteDecoupling> {
    p.check()?;
    let (n, nn) = (p.n, p.nn);
    let d = n + nn;
    let grid = p.grid;
    if (0..grid.len()).any(|k| linalg::min_eig(&linalg::sym(&p.d4.node(k))) <= 0.0) {
        return Err(Error::PreconditionViolated("the decoupling route needs D4 positive definite".into()));
    }
    let mut term = Mat::zeros(d, d + 1);
    linalg::set_block(&mut term, 0, 0, &p.g);
    linalg::set_block(&mut term, 0, n, &p.f.transpose());
    linalg::set_block(&mut term, n, 0, &p.f);
    linalg::set_block(&mut term, n, d, &p.xi);
    let packed = odesolve::integrate_matrix_ode(
        |t, x| {
            let hb = hamiltonian_blocks(&p.at(t), t)?;
            let (dq, dphi) = rhs(&hb, &linalg::block(x, 0, 0, d, d), &linalg::block(x, 0, d, d, 1), t)?;
            Ok(linalg::hstack(&[&dq, &dphi]))
        },
        &term,
        Direction::Backward,
        &grid,
        false,
    )?;
    let q = packed.map(|_, x| linalg::block(x, 0, 0, d, d));
    let phi = packed.map(|_, x| linalg::block(x, 0, d, d, 1));
    let l = p.channels;
    let (mut ks, mut js, mut is) = (vec![vec![]; l], vec![vec![]; l], vec![vec![]; l]);
    let (mut gx, mut gh, mut aff) = (vec![], vec![], vec![]);
    for kk in 0..grid.len() {
        let t = grid.t(kk);
        let c = p.node(kk);
        let hb = hamiltonian_blocks(&c, t)?;
        let (qk, fk) = (q.at(kk), phi.at(kk));
        let di = linalg::inverse_or(&c.d4, "D4", t)?;
        let mut ax = c.d1.transpose() * linalg::block(qk, 0, 0, n, n);
        let mut ah = c.d3.transpose() + c.d1.transpose() * linalg::block(qk, 0, n, n, nn);
        let mut ac = c.d1.transpose() * linalg::block(fk, 0, 0, n, 1);
        for j in 0..l {
            let ij = i_minus_qc(qk, &hb.c2[j], t)?;
            let k = &ij * qk * (&hb.b2[j] * qk + &hb.a2[j]);
            let jj = &ij * qk * &hb.b2[j];
            let nconst = &jj * fk + &ij * qk * &hb.e2[j];
            let d2t = c.d2[j].transpose();
            ax += &d2t * linalg::block(&k, 0, 0, n, n);
            ah += &d2t * linalg::block(&k, 0, n, n, nn);
            ac += &d2t * linalg::block(&nconst, 0, 0, n, 1);
            ks[j].push(k);
            js[j].push(jj);
            is[j].push(ij);
        }
        gx.push(-(&di * ax));
        gh.push(-(&di * ah));
        aff.push(-(&di * ac));
    }
    let tr = |values| MatrixTrajectory { grid, values, symmetric: false };
    Ok(DefiniteDecoupling {
        grid,
        q,
        phi,
        k: ks.into_iter().map(tr).collect(),
        j: js.into_iter().map(tr).collect(),
        i: is.into_iter().map(tr).collect(),
        gx: tr(gx),
        gh: tr(gh),
        affine: tr(aff),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientFn;

    #[test]
    fn zero_problem_keeps_terminal_data() {
        let mut p = FbsdeLqProblem::zeros(1, 1, 2, 1, TimeGrid::new(1.0, 20));
        p.xi = Mat::from_row_slice(2, 1, &[0.3, -0.4]);
        let dd = solve_definite_decoupling(&p).unwrap();
        assert_eq!(dd.q.max_abs(), 0.0);
        for k in 0..21 {
            assert_eq!(dd.phi.at(k).as_slice(), &[0.0, 0.3, -0.4]);
        }
    }

    #[test]
    fn without_backward_noise_coupling_i_is_identity() {
        let mut p = FbsdeLqProblem::zeros(1, 1, 1, 1, TimeGrid::new(1.0, 20));
        p.a1 = CoefficientFn::scalar(0.2);
        p.d1 = CoefficientFn::scalar(1.0);
        p.a4 = CoefficientFn::scalar(1.0);
        p.a2[0] = CoefficientFn::scalar(0.3);
        p.g = Mat::from_element(1, 1, 1.0);
        let dd = solve_definite_decoupling(&p).unwrap();
        for k in 0..21 {
            assert_eq!(dd.i[0].at(k), &linalg::eye(2));
            let q = dd.q.at(k);
            let hb = hamiltonian_blocks(&p.node(k), 0.0).unwrap();
            let expect = q * (&hb.b2[0] * q + &hb.a2[0]);
            assert!((dd.k[0].at(k) - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn scalar_lq_matches_standard_riccati() {
        // n = 1, no backward coupling: Q1 solves the usual control Riccati with R = D4.
        let mut p = FbsdeLqProblem::zeros(1, 1, 1, 1, TimeGrid::new(1.0, 1000));
        p.d1 = CoefficientFn::scalar(1.0);
        p.a4 = CoefficientFn::scalar(1.0);
        let dd = solve_definite_decoupling(&p).unwrap();
        for k in 0..1001 {
            let t = p.grid.t(k);
            assert!((dd.q.at(k)[(0, 0)] - (1.0 - t).tanh()).abs() < 1e-9);
            assert!((dd.gx.at(k)[(0, 0)] + (1.0 - t).tanh()).abs() < 1e-9);
        }
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let mut p = FbsdeLqProblem::zeros(1, 1, 1, 1, TimeGrid::new(1.0, 10));
        p.d4 = CoefficientFn::scalar(-1.0);
        assert!(matches!(solve_definite_decoupling(&p), Err(Error::PreconditionViolated(_))));
    }
}
