//! Pointwise algebra of the decoupled system: with m = P1X + P2h + φ1 and Y = P2ᵀX − P3h + φ2,
//! the control u, the adjoint integrands nʲ and the backward integrands Zʲ are affine in (X, h).

use super::enlarged::EnlargedAt;
use super::problem::Coeffs;
use crate::linalg::{self, Mat};
use crate::Result;

/// Decoupling blocks at one time.
#[derive(Debug, Clone)]
pub struct PBlocks {
    pub p1: Mat,
    pub p2: Mat,
    pub p3: Mat,
    pub phi1: Mat,
    pub phi2: Mat,
}

/// L- and S-quantities; per-channel entries are indexed by channel.
#[derive(Debug, Clone)]
pub struct Relations {
    pub l1: Vec<Mat>,
    pub l2: Vec<Mat>,
    pub l3: Vec<Mat>,
    pub l4: Vec<Mat>,
    pub s1: Vec<Mat>,
    pub s2: Vec<Mat>,
    pub l5: Mat,
    pub l6: Mat,
    pub l7: Mat,
    pub s3: Mat,
    pub l8: Vec<Mat>,
    pub l9: Vec<Mat>,
    pub l10: Vec<Mat>,
    pub l11: Vec<Mat>,
    pub s4: Vec<Mat>,
    pub s5: Vec<Mat>,
}

fn inv(m: &Mat, what: &str, t: f64) -> Result<Mat> {
    linalg::inverse_or(m, what, t)
}

/// The L/S formulas, evaluated one after another.
pub fn relations(c: &Coeffs, p: &PBlocks, t: f64) -> Result<Relations> {
    let l = c.c1.len();
    let n = c.a1.nrows();
    let nn = c.b3.nrows();
    let (p1, p2, p3) = (&p.p1, &p.p2, &p.p3);
    let p2t = p2.transpose();
    let (phi1, phi2) = (&p.phi1, &p.phi2);
    let mut r = Relations {
        l1: vec![],
        l2: vec![],
        l3: vec![],
        l4: vec![],
        s1: vec![],
        s2: vec![],
        l5: c.d4.clone(),
        l6: Mat::zeros(0, 0),
        l7: Mat::zeros(0, 0),
        s3: Mat::zeros(0, 0),
        l8: vec![],
        l9: vec![],
        l10: vec![],
        l11: vec![],
        s4: vec![],
        s5: vec![],
    };
    let mut l1inv = Vec::with_capacity(l);
    let mut l2inv = Vec::with_capacity(l);
    for j in 0..l {
        let (a2, b2, c1, c2, c3, c4, e2) = (&c.a2[j], &c.b2[j], &c.c1[j], &c.c2[j], &c.c3[j], &c.c4[j], &c.e2[j]);
        let b2t = b2.transpose();
        let c2t = c2.transpose();
        let l1 = linalg::eye(nn) - &p2t * &c2t + p3 * c4;
        let l1i = inv(&l1, "L1", t)?;
        let w = (p1 * &c2t + p2 * c4) * &l1i;
        let l2 = linalg::eye(n) + &w * p3 * c2 - p2 * c2;
        let l3 = p1 * a2 + p1 * &b2t * &p2t + p2 * c1 * p1 + &w * (&p2t * a2 + &p2t * &b2t * &p2t - p3 * c1 * p1);
        let l4 = -(p1 * &b2t * p3) + &w * (-(&p2t * &b2t * p3) - p3 * c3 - p3 * c1 * p2) + p2 * c3 + p2 * c1 * p2;
        let s1 = &w * &p2t + p1;
        let s2 = (p1 * &b2t + &w * &p2t * &b2t) * phi2 + (-(&w * p3 * c1) + p2 * c1) * phi1
            + &w * &p2t * e2
            + p1 * e2;
        let l2i = inv(&l2, "L2", t)?;
        r.l5 += c.d2[j].transpose() * &l2i * &s1 * &c.d2[j];
        r.l1.push(l1);
        r.l2.push(l2);
        r.l3.push(l3);
        r.l4.push(l4);
        r.s1.push(s1);
        r.s2.push(s2);
        l1inv.push(l1i);
        l2inv.push(l2i);
    }
    let l5i = inv(&r.l5, "L5", t)?;
    let mut a6 = c.d1.transpose() * p1;
    let mut a7 = c.d3.transpose() + c.d1.transpose() * p2;
    let mut a3 = c.d1.transpose() * phi1;
    for j in 0..l {
        let dl = c.d2[j].transpose() * &l2inv[j];
        a6 += &dl * &r.l3[j];
        a7 += &dl * &r.l4[j];
        a3 += &dl * &r.s2[j];
    }
    r.l6 = -(&l5i * a6);
    r.l7 = -(&l5i * a7);
    r.s3 = -(&l5i * a3);
    for j in 0..l {
        let (b2, c1, c2, c3, d2, e2) = (&c.b2[j], &c.c1[j], &c.c2[j], &c.c3[j], &c.d2[j], &c.e2[j]);
        let b2t = b2.transpose();
        let l8 = &l2inv[j] * (&r.l3[j] + &r.s1[j] * d2 * &r.l6);
        let l9 = &l2inv[j] * (&r.l4[j] + &r.s1[j] * d2 * &r.l7);
        let s4 = &l2inv[j] * (&r.s1[j] * d2 * &r.s3 + &r.s2[j]);
        let l10 = &l1inv[j]
            * (&p2t * &c.a2[j] + &p2t * &b2t * &p2t + &p2t * d2 * &r.l6 - p3 * c1 * p1 - p3 * c2 * &l8);
        let l11 = &l1inv[j]
            * (-(&p2t * &b2t * p3) + &p2t * d2 * &r.l7 - p3 * c3 - p3 * c1 * p2 - p3 * c2 * &l9);
        let s5 = &l1inv[j] * (&p2t * &b2t * phi2 + &p2t * d2 * &r.s3 + &p2t * e2 - p3 * c1 * phi1 - p3 * c2 * &s4);
        r.l8.push(l8);
        r.l9.push(l9);
        r.l10.push(l10);
        r.l11.push(l11);
        r.s4.push(s4);
        r.s5.push(s5);
    }
    Ok(r)
}

/// Affine map (X, h) ↦ coefficient·X + coefficient·h + constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub x: Mat,
    pub h: Mat,
    pub c: Mat,
}

#[derive(Debug, Clone)]
pub struct DirectFeedback {
    pub u: Affine,
    pub n: Vec<Affine>,
    pub z: Vec<Affine>,
}

/// Solves the stacked linear system for w = (u, n¹, Z¹, …, nˡ, Zˡ) in one factorization.
pub fn relations_direct(c: &Coeffs, p: &PBlocks, t: f64) -> Result<DirectFeedback> {
    let l = c.c1.len();
    let n = c.a1.nrows();
    let nn = c.b3.nrows();
    let m = c.d4.nrows();
    let size = m + l * (n + nn);
    let cols = n + nn + 1;
    let (p1, p2, p3) = (&p.p1, &p.p2, &p.p3);
    let p2t = p2.transpose();
    // m and Y as affine maps of (X, h, 1)
    let mrow = linalg::hstack(&[p1, p2, &p.phi1]);
    let yrow = linalg::hstack(&[&p2t, &-p3, &p.phi2]);
    let xrow = linalg::hstack(&[&linalg::eye(n), &Mat::zeros(n, nn + 1)]);
    let hrow = linalg::hstack(&[&Mat::zeros(nn, n), &linalg::eye(nn), &Mat::zeros(nn, 1)]);
    let one = |v: &Mat| linalg::hstack(&[&Mat::zeros(v.nrows(), n + nn), v]);

    let mut a = Mat::zeros(size, size);
    let mut rhs = Mat::zeros(size, cols);
    linalg::set_block(&mut a, 0, 0, &c.d4);
    linalg::set_block(&mut rhs, 0, 0, &(-(c.d1.transpose() * &mrow) - c.d3.transpose() * &hrow));
    for j in 0..l {
        let (on, oz) = (m + j * (n + nn), m + j * (n + nn) + n);
        let (c2t, d2) = (c.c2[j].transpose(), &c.d2[j]);
        linalg::set_block(&mut a, 0, on, &d2.transpose());
        // σX = A2X + B2ᵀY + E2 + C2ᵀZ + D2u, σh = C3h + C1m + C2n + C4Z
        let sx_free = &c.a2[j] * &xrow + c.b2[j].transpose() * &yrow + one(&c.e2[j]);
        let sh_free = &c.c3[j] * &hrow + &c.c1[j] * &mrow;
        // n − P1(C2ᵀZ + D2u) − P2(C2n + C4Z) = P1 σX_free + P2 σh_free
        linalg::set_block(&mut a, on, on, &(linalg::eye(n) - p2 * &c.c2[j]));
        linalg::set_block(&mut a, on, oz, &(-(p1 * &c2t) - p2 * &c.c4[j]));
        linalg::set_block(&mut a, on, 0, &-(p1 * d2));
        linalg::set_block(&mut rhs, on, 0, &(p1 * &sx_free + p2 * &sh_free));
        // Z − P2ᵀ(C2ᵀZ + D2u) + P3(C2n + C4Z) = P2ᵀ σX_free − P3 σh_free
        linalg::set_block(&mut a, oz, oz, &(linalg::eye(nn) - &p2t * &c2t + p3 * &c.c4[j]));
        linalg::set_block(&mut a, oz, on, &(p3 * &c.c2[j]));
        linalg::set_block(&mut a, oz, 0, &-(&p2t * d2));
        linalg::set_block(&mut rhs, oz, 0, &(&p2t * &sx_free - p3 * &sh_free));
    }
    let w = inv(&a, "stationarity system", t)? * rhs;
    let split = |r0: usize, h: usize| Affine {
        x: linalg::block(&w, r0, 0, h, n),
        h: linalg::block(&w, r0, n, h, nn),
        c: linalg::block(&w, r0, n + nn, h, 1),
    };
    Ok(DirectFeedback {
        u: split(0, m),
        n: (0..l).map(|j| split(m + j * (n + nn), n)).collect(),
        z: (0..l).map(|j| split(m + j * (n + nn) + n, nn)).collect(),
    })
}

/// Closed-loop coefficients of (X, h).
#[derive(Debug, Clone)]
pub struct NMats {
    pub n1: Mat,
    pub n2: Mat,
    pub n3: Mat,
    pub n4: Vec<Mat>,
    pub n5: Vec<Mat>,
    pub n6: Vec<Mat>,
    pub n7: Mat,
    pub n8: Mat,
    pub n9: Mat,
    pub n10: Vec<Mat>,
    pub n11: Vec<Mat>,
    pub n12: Vec<Mat>,
}

pub fn n_mats(c: &Coeffs, p: &PBlocks, r: &Relations) -> NMats {
    let l = c.c1.len();
    let (p1, p2, p3) = (&p.p1, &p.p2, &p.p3);
    let p2t = p2.transpose();
    let b1t = c.b1.transpose();
    let mut n1 = &c.a1 + &b1t * &p2t + &c.d1 * &r.l6;
    let mut n2 = -(&b1t * p3) + &c.d1 * &r.l7;
    let mut n3 = &b1t * &p.phi2 + &c.e1 + &c.d1 * &r.s3;
    let mut n7 = &c.b1 * p1 + &c.b4 * &p2t;
    let mut n8 = &c.b3 + &c.b1 * p2 - &c.b4 * p3;
    let mut n9 = &c.b1 * &p.phi1 + &c.b4 * &p.phi2;
    let (mut n4, mut n5, mut n6, mut n10, mut n11, mut n12) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for j in 0..l {
        let c1t = c.c1[j].transpose();
        let c2t = c.c2[j].transpose();
        let b2t = c.b2[j].transpose();
        n1 += &c1t * &r.l10[j];
        n2 += &c1t * &r.l11[j];
        n3 += &c1t * &r.s5[j];
        n7 += &c.b2[j] * &r.l8[j];
        n8 += &c.b2[j] * &r.l9[j];
        n9 += &c.b2[j] * &r.s4[j];
        n4.push(&c.a2[j] + &b2t * &p2t + &c2t * &r.l10[j] + &c.d2[j] * &r.l6);
        n5.push(-(&b2t * p3) + &c2t * &r.l11[j] + &c.d2[j] * &r.l7);
        n6.push(&b2t * &p.phi2 + &c2t * &r.s5[j] + &c.d2[j] * &r.s3 + &c.e2[j]);
        n10.push(&c.c1[j] * p1 + &c.c2[j] * &r.l8[j] + &c.c4[j] * &r.l10[j]);
        n11.push(&c.c3[j] + &c.c1[j] * p2 + &c.c2[j] * &r.l9[j] + &c.c4[j] * &r.l11[j]);
        n12.push(&c.c1[j] * &p.phi1 + &c.c2[j] * &r.s4[j] + &c.c4[j] * &r.s5[j]);
    }
    NMats { n1, n2, n3, n4, n5, n6, n7, n8, n9, n10, n11, n12 }
}

/// Time derivatives (φ̇1, φ̇2) of the affine decoupling terms.
pub fn phi_derivative(c: &Coeffs, p: &PBlocks, r: &Relations) -> (Mat, Mat) {
    let l = c.c1.len();
    let (p1, p2, p3) = (&p.p1, &p.p2, &p.p3);
    let p2t = p2.transpose();
    let b1t = c.b1.transpose();
    let mut f2 = (&p2t * &b1t - p3 * &c.b4 + c.b3.transpose()) * &p.phi2 - p3 * &c.b1 * &p.phi1
        + (&p2t * &c.d1 + &c.d3) * &r.s3
        + &p2t * &c.e1
        + &c.e3;
    let mut f1 = (p1 * &b1t + p2 * &c.b4) * &p.phi2 + (p2 * &c.b1 + c.a1.transpose()) * &p.phi1 + p1 * &c.d1 * &r.s3
        + p1 * &c.e1;
    for j in 0..l {
        f2 += (&p2t * c.c1[j].transpose() + c.c3[j].transpose()) * &r.s5[j] - p3 * &c.b2[j] * &r.s4[j];
        f1 += p1 * c.c1[j].transpose() * &r.s5[j] + (p2 * &c.b2[j] + c.a2[j].transpose()) * &r.s4[j];
    }
    (-f1, -f2)
}

/// Time derivatives (Ṗ1, Ṗ2, Ṗ3) of the decoupling field, read off from the X- and h-coefficients
/// of the m and Y drifts. The redundant X-coefficient of Y gives a consistency residual.
pub fn p_derivative(c: &Coeffs, p: &PBlocks, r: &Relations) -> (Mat, Mat, Mat, Mat) {
    let nm = n_mats(c, p, r);
    let l = c.c1.len();
    let (p1, p2, p3) = (&p.p1, &p.p2, &p.p3);
    let p2t = p2.transpose();
    let mut rhs1 = c.a1.transpose() * p1 + &c.a4;
    let mut rhs2 = c.a3.transpose() + c.a1.transpose() * p2;
    let mut rhs3 = -(c.b3.transpose() * p3) + c.d3.clone() * &r.l7;
    let mut rhs2t = &c.a3 + c.b3.transpose() * &p2t + &c.d3 * &r.l6;
    for j in 0..l {
        rhs1 += c.a2[j].transpose() * &r.l8[j];
        rhs2 += c.a2[j].transpose() * &r.l9[j];
        rhs3 += c.c3[j].transpose() * &r.l11[j];
        rhs2t += c.c3[j].transpose() * &r.l10[j];
    }
    let dp1 = -(rhs1 + p1 * &nm.n1 + p2 * &nm.n7);
    let dp2 = -(rhs2 + p1 * &nm.n2 + p2 * &nm.n8);
    let dp3 = &p2t * &nm.n2 - p3 * &nm.n8 + rhs3;
    let dp2t = -(rhs2t + &p2t * &nm.n1 - p3 * &nm.n7);
    let residual = dp2t - dp2.transpose();
    (dp1, dp2, dp3, residual)
}

/// M-quantities of the enlarged Riccati for one channel.
#[derive(Debug, Clone)]
pub struct MMats {
    pub m1: Mat,
    pub m2: Mat,
    pub m3: Mat,
    pub m4: Mat,
}

pub fn m_mats(es: &EnlargedAt, ptilde: &Mat) -> Vec<MMats> {
    (0..es.b.len())
        .map(|j| {
            let dt = es.d[j].transpose();
            let m3 = es.b[j].transpose() * ptilde;
            let m4 = &dt * ptilde;
            MMats {
                m1: &es.r[j] + &m4 * &es.d[j],
                m2: &m3 + &m4 * &es.c[j],
                m3,
                m4,
            }
        })
        .collect()
}
