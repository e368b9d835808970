use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigendecomposition of a real symmetric matrix, `m = Q diag(values) Qᵀ`.
///
/// Eigenvalues are sorted ascending; column `i` of `vectors` belongs to `values[i]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let q = &self.vectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| q.get(i, k) * self.values[k] * q.get(j, k))
                .sum()
        })
    }
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    let asym = m
        .asymmetry()
        .ok_or_else(|| Error::Shape(format!("{}x{} matrix is not square", m.rows(), m.cols())))?;
    let scale = m.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Shape(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Cyclic Jacobi eigensolver.
///
/// Each rotation annihilates one off-diagonal pair; sweeps repeat until the
/// off-diagonal mass drops to roundoff relative to the Frobenius norm.
pub fn sym_eig(m: &Matrix) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.rows();
    // symmetrize so the iteration only ever sees an exactly symmetric matrix
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let mut v = Matrix::identity(n);
    let frob = a.frobenius();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q).powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * frob || off == 0.0 {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a.get(p, p), a.get(q, q));
                // negligible against both diagonal entries: drop it
                if (app.abs() + 1e3 * apq.abs() == app.abs())
                    && (aqq.abs() + 1e3 * apq.abs() == aqq.abs())
                {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a.set(k, p, new_kp);
                    a.set(p, k, new_kp);
                    a.set(k, q, new_kq);
                    a.set(q, k, new_kq);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(SymEigen { values, vectors })
}

/// Solves `m x = b` for symmetric positive definite `m` by Cholesky factorization.
pub fn spd_solve(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let n = m.rows();
    if b.len() != n {
        return Err(Error::Shape(format!(
            "right-hand side of length {} for a {n}x{n} system",
            b.len()
        )));
    }
    // lower triangle, row-major
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Singular(format!(
                        "non-positive pivot {sum:e} at row {i}"
                    )));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Ok(x)
}
