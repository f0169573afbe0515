//! Fixed-step RK4 for matrix ODEs and the Riccati equations built on it.

use std::io::Write;

use crate::linalg::{self, Mat};
use crate::model::{CoefficientFn, GameSpec, TimeGrid};
use crate::{Error, Result};

/// Iterates with Frobenius norm above this are treated as a finite-time escape.
pub const BLOWUP_NORM: f64 = 1e12;
pub const SYM_TOL: f64 = 1e-9;
const MAX_SUBSTEPS: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<Mat>,
    pub symmetric: bool,
}

impl MatrixTrajectory {
    pub fn constant(grid: TimeGrid, m: Mat) -> Self {
        MatrixTrajectory { grid, values: vec![m; grid.len()], symmetric: false }
    }

    pub fn from_fn(grid: TimeGrid, f: impl FnMut(usize) -> Mat) -> Self {
        MatrixTrajectory { grid, values: (0..grid.len()).map(f).collect(), symmetric: false }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        self.values.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Mat {
        let (k, w) = self.grid.locate(t);
        if w == 0.0 || k + 1 >= self.values.len() {
            self.values[k].clone()
        } else {
            &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
        }
    }

    pub fn map(&self, f: impl Fn(usize, &Mat) -> Mat) -> Self {
        MatrixTrajectory {
            grid: self.grid,
            values: self.values.iter().enumerate().map(|(k, m)| f(k, m)).collect(),
            symmetric: false,
        }
    }

    pub fn as_coefficient(&self) -> CoefficientFn {
        CoefficientFn::Nodes(self.values.clone())
    }

    pub fn max_node_diff(&self, other: &MatrixTrajectory) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| linalg::max_abs(&(a - b)))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "row", "col", "value"])?;
        for (k, m) in self.values.iter().enumerate() {
            let t = self.grid.t(k).to_string();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    wr.write_record([t.as_str(), &i.to_string(), &j.to_string(), &m[(i, j)].to_string()])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Trapezoidal rule over grid samples.
pub fn trapezoid(grid: &TimeGrid, f: &[f64]) -> f64 {
    let dt = grid.dt();
    let n = f.len();
    if n < 2 {
        return 0.0;
    }
    dt * (f[1..n - 1].iter().sum::<f64>() + 0.5 * (f[0] + f[n - 1]))
}

fn check(m: &Mat, t: f64) -> Result<()> {
    if !linalg::is_finite(m) || m.norm() > BLOWUP_NORM {
        Err(Error::NonFinite { t })
    } else {
        Ok(())
    }
}

fn rk4_step<F>(rhs: &mut F, t: f64, m: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    let k1 = rhs(t, m)?;
    check(&k1, t)?;
    let k2 = rhs(t + 0.5 * h, &(m + &k1 * (0.5 * h)))?;
    check(&k2, t + 0.5 * h)?;
    let k3 = rhs(t + 0.5 * h, &(m + &k2 * (0.5 * h)))?;
    check(&k3, t + 0.5 * h)?;
    let k4 = rhs(t + h, &(m + &k3 * h))?;
    check(&k4, t + h)?;
    let out = m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    check(&out, t + h)?;
    Ok(out)
}

fn substeps<F>(rhs: &mut F, t: f64, m: &Mat, h: f64, count: usize) -> Result<Mat>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    let hs = h / count as f64;
    let mut x = m.clone();
    for s in 0..count {
        x = rk4_step(rhs, t + s as f64 * hs, &x, hs)?;
    }
    Ok(x)
}

fn integrate_impl<F>(
    mut rhs: F,
    boundary: &Mat,
    direction: Direction,
    grid: &TimeGrid,
    symmetrize: bool,
    rtol: Option<f64>,
) -> Result<MatrixTrajectory>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    let steps = grid.steps;
    let mut values = vec![Mat::zeros(0, 0); steps + 1];
    let (start, h) = match direction {
        Direction::Forward => (0, grid.dt()),
        Direction::Backward => (steps, -grid.dt()),
    };
    check(boundary, grid.t(start))?;
    values[start] = boundary.clone();
    let mut m = boundary.clone();
    let mut count = 1usize;
    for s in 0..steps {
        let (k, next) = match direction {
            Direction::Forward => (s, s + 1),
            Direction::Backward => (steps - s, steps - s - 1),
        };
        let t = grid.t(k);
        m = match rtol {
            None => rk4_step(&mut rhs, t, &m, h)?,
            Some(tol) => {
                count = (count / 2).max(1);
                let mut coarse = substeps(&mut rhs, t, &m, h, count).ok();
                loop {
                    let fine = substeps(&mut rhs, t, &m, h, 2 * count);
                    count *= 2;
                    match (fine, &coarse) {
                        (Ok(f), Some(c)) if (&f - c).norm() <= tol * (1.0 + f.norm()) => break f,
                        (Err(e), _) if count >= MAX_SUBSTEPS => return Err(e),
                        (Ok(_), _) if count >= MAX_SUBSTEPS => return Err(Error::NonFinite { t: grid.t(next) }),
                        (f, _) => coarse = f.ok(),
                    }
                }
            }
        };
        if symmetrize {
            let res = linalg::asym_residual(&m);
            if res > SYM_TOL * (1.0 + m.norm()) {
                return Err(Error::SymmetryLoss { t: grid.t(next), residual: res });
            }
            m = linalg::sym(&m);
        }
        values[next] = m.clone();
    }
    Ok(MatrixTrajectory { grid: *grid, values, symmetric: symmetrize })
}

/// Classic RK4 on the grid. With `symmetrize`, each step is projected onto symmetric matrices
/// after checking that the raw update stayed symmetric to tolerance.
pub fn integrate_matrix_ode<F>(
    rhs: F,
    boundary: &Mat,
    direction: Direction,
    grid: &TimeGrid,
    symmetrize: bool,
) -> Result<MatrixTrajectory>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    integrate_impl(rhs, boundary, direction, grid, symmetrize, None)
}

/// RK4 with step doubling inside each grid interval until two refinements agree to `rtol`.
/// Values are still reported on the grid nodes.
pub fn integrate_matrix_ode_refined<F>(
    rhs: F,
    boundary: &Mat,
    direction: Direction,
    grid: &TimeGrid,
    symmetrize: bool,
    rtol: f64,
) -> Result<MatrixTrajectory>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    integrate_impl(rhs, boundary, direction, grid, symmetrize, Some(rtol))
}

/// Ṗ + AᵀP + PA − (PB + Sᵀ)R⁻¹(BᵀP + S) + Q = 0, P(T) = G.
pub fn solve_terminal_riccati(
    a: &CoefficientFn,
    b: &CoefficientFn,
    s: &CoefficientFn,
    r: &CoefficientFn,
    q: &CoefficientFn,
    g: &Mat,
    grid: &TimeGrid,
) -> Result<MatrixTrajectory> {
    let rhs = |t: f64, p: &Mat| -> Result<Mat> {
        let a = a.eval(t, grid);
        let b = b.eval(t, grid);
        let s = s.eval(t, grid);
        let rinv = linalg::inverse_or(&r.eval(t, grid), "R", t)?;
        let k = b.transpose() * p + s;
        Ok(-(a.transpose() * p + p * &a - k.transpose() * rinv * &k + q.eval(t, grid)))
    };
    integrate_matrix_ode(rhs, g, Direction::Backward, grid, true)
}

/// Forward filter-error covariance Σ with Σ(0) = 0.
pub fn solve_filter_covariance(spec: &GameSpec) -> Result<MatrixTrajectory> {
    let grid = &spec.grid;
    let d = &spec.dynamics;
    let o = &spec.observations;
    let n = spec.dims.n;
    let rhs = |t: f64, sig: &Mat| -> Result<Mat> {
        let k1 = o.k1.eval(t, grid);
        let k1inv = linalg::inverse_or(&k1, "K1", t)?;
        let kkinv = linalg::inverse_or(&(&k1 * k1.transpose()), "K1 K1^T", t)?;
        let f1 = o.f1.eval(t, grid);
        let c2 = d.c2.eval(t, grid);
        let abar = d.a.eval(t, grid) - d.c1.eval(t, grid) * &k1inv * &f1;
        Ok(&abar * sig + sig * abar.transpose() - sig * f1.transpose() * kkinv * &f1 * sig + &c2 * c2.transpose())
    };
    integrate_matrix_ode(rhs, &Mat::zeros(n, n), Direction::Forward, grid, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, GameSpec};

    fn s(x: f64) -> CoefficientFn {
        CoefficientFn::scalar(x)
    }

    #[test]
    fn zero_rhs_keeps_boundary() {
        let g = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let grid = TimeGrid::new(1.0, 50);
        let tr = integrate_matrix_ode(|_, m| Ok(m * 0.0), &g, Direction::Backward, &grid, true).unwrap();
        assert!(tr.values.iter().all(|m| *m == g));
    }

    #[test]
    fn exponential_decay_oracle() {
        let grid = TimeGrid::new(1.0, 1000);
        let tr = integrate_matrix_ode(|_, m| Ok(m * -2.0), &Mat::from_element(1, 1, 1.0), Direction::Forward, &grid, false)
            .unwrap();
        assert!((tr.last()[(0, 0)] - (-2.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_order_on_exponential() {
        let err = |steps| {
            let grid = TimeGrid::new(1.0, steps);
            let tr = integrate_matrix_ode(|_, m| Ok(m * -2.0), &Mat::from_element(1, 1, 1.0), Direction::Forward, &grid, false)
                .unwrap();
            (0..grid.len()).map(|k| (tr.at(k)[(0, 0)] - (-2.0 * grid.t(k)).exp()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(20) / err(40);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn tanh_riccati_oracle() {
        let grid = TimeGrid::new(1.0, 1000);
        let p = solve_terminal_riccati(&s(0.0), &s(1.0), &s(0.0), &s(1.0), &s(1.0), &Mat::zeros(1, 1), &grid).unwrap();
        let err = (0..grid.len()).map(|k| (p.at(k)[(0, 0)] - (1.0 - grid.t(k)).tanh()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_cost_gives_zero_riccati() {
        let grid = TimeGrid::new(1.0, 100);
        let p = solve_terminal_riccati(&s(0.3), &s(1.0), &s(0.0), &s(1.0), &s(0.0), &Mat::zeros(1, 1), &grid).unwrap();
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn filter_covariance_tanh_oracle() {
        let grid = TimeGrid::new(1.0, 1000);
        let mut spec = GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, grid);
        spec.observations.f1 = s(1.0);
        spec.dynamics.c2 = s(1.0);
        let sig = solve_filter_covariance(&spec).unwrap();
        let err = (0..grid.len()).map(|k| (sig.at(k)[(0, 0)] - grid.t(k).tanh()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn filter_covariance_vanishes_without_c2() {
        let grid = TimeGrid::new(1.0, 100);
        let mut spec = GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, grid);
        spec.observations.f1 = s(1.0);
        spec.dynamics.c1 = s(0.7);
        spec.dynamics.a = s(0.4);
        assert_eq!(solve_filter_covariance(&spec).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn escape_is_reported() {
        let grid = TimeGrid::new(1.0, 1000);
        let r = integrate_matrix_ode(|_, m| Ok(-(m * m)), &Mat::from_element(1, 1, 10.0), Direction::Backward, &grid, true);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn refined_handles_stiff_terminal_value() {
        // ẏ = y², y(1) = 1000 has y(t) = 1 / (1.001 − t).
        let grid = TimeGrid::new(1.0, 10);
        let tr = integrate_matrix_ode_refined(
            |_, m| Ok(m * m),
            &Mat::from_element(1, 1, 1000.0),
            Direction::Backward,
            &grid,
            true,
            1e-10,
        )
        .unwrap();
        let exact = |t: f64| 1.0 / (1.001 - t);
        for k in 0..grid.len() {
            let e = exact(grid.t(k));
            assert!((tr.at(k)[(0, 0)] - e).abs() <= 1e-9 * e.abs(), "{k}");
        }
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let grid = TimeGrid::new(2.0, 7);
        let f: Vec<f64> = grid.times().iter().map(|t| 3.0 * t + 1.0).collect();
        assert!((trapezoid(&grid, &f) - 8.0).abs() < 1e-12);
    }
}
