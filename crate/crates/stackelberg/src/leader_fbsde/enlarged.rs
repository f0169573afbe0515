//! Forward LQ problem in the enlarged state X̃ = (X, Y) with per-channel control ũʲ = (u, Zʲ).

use super::problem::{Coeffs, FbsdeLqProblem};
use crate::linalg::{self, Mat};
use crate::model::{CoefficientFn, TimeGrid};
use crate::Result;

/// Blocks at one time.
#[derive(Debug, Clone)]
pub struct EnlargedAt {
    pub a: Mat,
    pub b: Vec<Mat>,
    pub c: Vec<Mat>,
    pub d: Vec<Mat>,
    pub e: Mat,
    pub ee: Vec<Mat>,
    pub q: Mat,
    pub r: Vec<Mat>,
}

impl EnlargedAt {
    /// The control u is shared by all channels; each channel carries 1/l of its drift and weight.
    pub fn from_coeffs(c: &Coeffs) -> Self {
        let l = c.c1.len();
        let w = 1.0 / l as f64;
        let nn = c.b3.nrows();
        let a = linalg::vstack(&[
            &linalg::hstack(&[&c.a1, &c.b1.transpose()]),
            &linalg::hstack(&[&-&c.a3, &-c.b3.transpose()]),
        ]);
        let b = (0..l)
            .map(|j| {
                linalg::vstack(&[
                    &linalg::hstack(&[&(&c.d1 * w), &c.c1[j].transpose()]),
                    &linalg::hstack(&[&(&c.d3 * -w), &-c.c3[j].transpose()]),
                ])
            })
            .collect();
        let cc = (0..l)
            .map(|j| {
                let top = linalg::hstack(&[&c.a2[j], &c.b2[j].transpose()]);
                linalg::vstack(&[&top, &Mat::zeros(nn, top.ncols())])
            })
            .collect();
        let d = (0..l)
            .map(|j| {
                let m = c.d1.ncols();
                linalg::vstack(&[
                    &linalg::hstack(&[&c.d2[j], &c.c2[j].transpose()]),
                    &linalg::hstack(&[&Mat::zeros(nn, m), &linalg::eye(nn)]),
                ])
            })
            .collect();
        let e = linalg::vstack(&[&c.e1, &-&c.e3]);
        let ee = (0..l).map(|j| linalg::vstack(&[&c.e2[j], &Mat::zeros(nn, 1)])).collect();
        let q = linalg::block_diag(&[&c.a4, &c.b4]);
        let r = (0..l).map(|j| linalg::block_diag(&[&(&c.d4 * w), &c.c4[j]])).collect();
        EnlargedAt { a, b, c: cc, d, e, ee, q, r }
    }
}

/// Nodal enlarged blocks on the problem grid.
#[derive(Debug, Clone)]
pub struct EnlargedSystem {
    pub grid: TimeGrid,
    pub channels: usize,
    pub a: CoefficientFn,
    pub b: Vec<CoefficientFn>,
    pub c: Vec<CoefficientFn>,
    pub d: Vec<CoefficientFn>,
    pub e: CoefficientFn,
    pub ee: Vec<CoefficientFn>,
    pub q: CoefficientFn,
    pub r: Vec<CoefficientFn>,
}

impl EnlargedSystem {
    pub fn at(&self, t: f64) -> EnlargedAt {
        let g = &self.grid;
        let evs = |v: &[CoefficientFn]| v.iter().map(|c| c.eval(t, g)).collect();
        EnlargedAt {
            a: self.a.eval(t, g),
            b: evs(&self.b),
            c: evs(&self.c),
            d: evs(&self.d),
            e: self.e.eval(t, g),
            ee: evs(&self.ee),
            q: self.q.eval(t, g),
            r: evs(&self.r),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape().0
    }
}

pub fn build_enlarged_system(p: &FbsdeLqProblem) -> Result<EnlargedSystem> {
    p.check()?;
    let constant = is_constant(p);
    let samples: Vec<EnlargedAt> = if constant {
        vec![EnlargedAt::from_coeffs(&p.at(0.0))]
    } else {
        (0..p.grid.len()).map(|k| EnlargedAt::from_coeffs(&p.node(k))).collect()
    };
    let lift = |f: &dyn Fn(&EnlargedAt) -> Mat| {
        if constant {
            CoefficientFn::Constant(f(&samples[0]))
        } else {
            CoefficientFn::Nodes(samples.iter().map(f).collect())
        }
    };
    let l = p.channels;
    Ok(EnlargedSystem {
        grid: p.grid,
        channels: l,
        a: lift(&|s| s.a.clone()),
        b: (0..l).map(|j| lift(&|s| s.b[j].clone())).collect(),
        c: (0..l).map(|j| lift(&|s| s.c[j].clone())).collect(),
        d: (0..l).map(|j| lift(&|s| s.d[j].clone())).collect(),
        e: lift(&|s| s.e.clone()),
        ee: (0..l).map(|j| lift(&|s| s.ee[j].clone())).collect(),
        q: lift(&|s| s.q.clone()),
        r: (0..l).map(|j| lift(&|s| s.r[j].clone())).collect(),
    })
}

fn is_constant(p: &FbsdeLqProblem) -> bool {
    let single = [&p.a1, &p.b1, &p.d1, &p.e1, &p.a3, &p.b3, &p.d3, &p.e3, &p.a4, &p.b4, &p.d4];
    let multi = [&p.c1, &p.a2, &p.b2, &p.c2, &p.d2, &p.e2, &p.c3, &p.c4];
    single.iter().all(|c| c.is_constant()) && multi.iter().all(|v| v.iter().all(|c| c.is_constant()))
}
