//! Dense linear algebra and seeded randomness shared by the rest of the crate.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{spd_solve, sym_eig, SymEigen};
pub use matrix::{axpy, dot, norm, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Gaussian random projection matrix of shape `out_dim × input_dim`.
///
/// Entries are i.i.d. `N(0, 1/out_dim)`, so squared norms are preserved in expectation.
pub fn random_projection(input_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Matrix> {
    if out_dim == 0 || out_dim > input_dim {
        return Err(Error::Shape(format!(
            "cannot project {input_dim} dims down to {out_dim}"
        )));
    }
    let scale = (1.0 / out_dim as f64).sqrt();
    let data = (0..out_dim * input_dim)
        .map(|_| rng.gaussian() * scale)
        .collect();
    Matrix::new(out_dim, input_dim, data)
}

/// Applies `proj` (k × d) to every row of `points` (n × d), giving n × k.
pub fn project_rows(points: &Matrix, proj: &Matrix) -> Result<Matrix> {
    if points.cols() != proj.cols() {
        return Err(Error::Shape(format!(
            "points have {} dims, projection expects {}",
            points.cols(),
            proj.cols()
        )));
    }
    let (n, k) = (points.rows(), proj.rows());
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let x = points.row(i);
        for (o, r) in out.row_mut(i).iter_mut().zip(0..k) {
            *o = dot(proj.row(r), x);
        }
    }
    Ok(out)
}

/// Squared Euclidean distances between all rows of `points`.
///
/// Each pair is computed once from the coordinate differences and mirrored,
/// so the result is exactly symmetric with an exact zero diagonal.
pub fn pairwise_sqdist(points: &Matrix) -> Result<Matrix> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Shape("no points".into()));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = sqdist(points.row(i), points.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

#[inline]
pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
