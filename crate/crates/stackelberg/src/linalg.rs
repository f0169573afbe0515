//! Small dense helpers on top of nalgebra.

use nalgebra as na;

pub type Mat = na::DMatrix<f64>;

/// Condition-number cap used by every guarded inverse.
pub const COND_CAP: f64 = 1e12;

pub fn zeros(r: usize, c: usize) -> Mat {
    Mat::zeros(r, c)
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn col(v: &[f64]) -> Mat {
    Mat::from_column_slice(v.len(), 1, v)
}

fn norm1(m: &Mat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse with a 1-norm condition guard. Returns the inverse and the condition estimate,
/// or `None` with the estimate when the matrix is singular or above the cap.
pub fn inverse_checked(m: &Mat) -> Result<(Mat, f64), f64> {
    assert!(m.is_square(), "inverse of non-square {}x{}", m.nrows(), m.ncols());
    if m.nrows() == 0 {
        return Ok((m.clone(), 1.0));
    }
    let lu = m.clone().lu();
    match lu.try_inverse() {
        Some(inv) => {
            let cond = norm1(m) * norm1(&inv);
            if cond.is_finite() && cond < COND_CAP {
                Ok((inv, cond))
            } else {
                Err(cond)
            }
        }
        None => Err(f64::INFINITY),
    }
}

pub fn inverse_or(m: &Mat, what: &str, t: f64) -> crate::Result<Mat> {
    inverse_checked(m).map(|(i, _)| i).map_err(|cond| crate::Error::Singular {
        what: what.to_string(),
        t,
        cond,
    })
}

/// y += a·x in place.
pub fn axpy(y: &mut Mat, a: f64, x: &Mat) {
    y.zip_apply(x, |yi, xi| *yi += a * xi);
}

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asym_residual(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return vec![];
    }
    let mut ev: Vec<f64> = na::SymmetricEigen::new(sym(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn min_eig(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eig(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// (negative, zero, positive) eigenvalue counts of the symmetric part.
pub fn inertia(m: &Mat, tol: f64) -> (usize, usize, usize) {
    let ev = sym_eigenvalues(m);
    let scale = ev.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let neg = ev.iter().filter(|&&x| x < -tol * scale).count();
    let pos = ev.iter().filter(|&&x| x > tol * scale).count();
    (neg, ev.len() - neg - pos, pos)
}

pub fn block(m: &Mat, r: usize, c: usize, h: usize, w: usize) -> Mat {
    m.view((r, c), (h, w)).into_owned()
}

pub fn set_block(m: &mut Mat, r: usize, c: usize, b: &Mat) {
    m.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        set_block(&mut out, i, j, b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let c = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(r, c);
    let mut i = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        set_block(&mut out, i, 0, b);
        i += b.nrows();
    }
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let r = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(r, c);
    let mut j = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        set_block(&mut out, 0, j, b);
        j += b.ncols();
    }
    out
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}
