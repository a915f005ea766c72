use super::tensor::{dot, squared_norm, Tensor};
use crate::error::{shape_err, Result};

/// Relative singular-value cutoff used by [`orthonormal_basis`].
pub const RANK_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Singular values of a `d x m` matrix, descending, computed by one-sided
/// Jacobi rotations. Also returns the rotated columns (`U * sigma`).
fn jacobi_columns(columns: &Tensor) -> Result<Vec<(f64, Vec<f64>)>> {
    if columns.ndim() != 2 || columns.shape()[0] == 0 || columns.shape()[1] == 0 {
        return shape_err(format!("orthonormal_basis needs a non-empty d x m matrix, got {:?}", columns.shape()));
    }
    let (d, m) = (columns.shape()[0], columns.shape()[1]);
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| (0..d).map(|i| columns.get2(i, j)).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = squared_norm(&cols[p]);
                let beta = squared_norm(&cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (up, uq) = (&mut lo[p], &mut hi[0]);
                for i in 0..d {
                    let (a, b) = (up[i], uq[i]);
                    up[i] = c * a - s * b;
                    uq[i] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut out: Vec<(f64, Vec<f64>)> = cols.into_iter().map(|c| (squared_norm(&c).sqrt(), c)).collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(out)
}

/// Singular values of `columns`, descending.
pub fn singular_values(columns: &Tensor) -> Result<Vec<f64>> {
    Ok(jacobi_columns(columns)?.into_iter().map(|(s, _)| s).collect())
}

/// Orthonormal basis (`d x r`) of the column space of a `d x m` matrix,
/// keeping directions whose singular value exceeds [`RANK_TOLERANCE`] times
/// the largest. An all-zero input yields `r = 0`.
pub fn orthonormal_basis(columns: &Tensor) -> Result<Tensor> {
    let d = columns.shape().first().copied().unwrap_or(0);
    let svs = jacobi_columns(columns)?;
    let largest = svs[0].0;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if largest > 0.0 {
        for (sigma, mut u) in svs {
            if sigma <= RANK_TOLERANCE * largest {
                break;
            }
            for x in &mut u {
                *x /= sigma;
            }
            // A final Gram-Schmidt pass removes rounding drift between columns.
            for b in &basis {
                let proj = dot(&u, b);
                for (x, y) in u.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
            let n = squared_norm(&u).sqrt();
            for x in &mut u {
                *x /= n;
            }
            basis.push(u);
        }
    }
    let r = basis.len();
    let mut data = vec![0.0; d * r];
    for (j, b) in basis.iter().enumerate() {
        for i in 0..d {
            data[i * r + j] = b[i];
        }
    }
    Tensor::new(vec![d, r], data)
}

/// `||v - B B^T v||^2` for an orthonormal `d x r` basis `B`.
#[allow(clippy::needless_range_loop)]
pub fn project_residual(basis: &Tensor, v: &[f64]) -> Result<f64> {
    if basis.ndim() != 2 || basis.shape()[0] != v.len() {
        return shape_err(format!("basis {:?} against vector of length {}", basis.shape(), v.len()));
    }
    let (d, r) = (basis.shape()[0], basis.shape()[1]);
    let mut coeff = vec![0.0; r];
    for i in 0..d {
        for (j, c) in coeff.iter_mut().enumerate() {
            *c += basis.data()[i * r + j] * v[i];
        }
    }
    let mut residual = 0.0;
    for i in 0..d {
        let proj: f64 = (0..r).map(|j| basis.data()[i * r + j] * coeff[j]).sum();
        let e = v[i] - proj;
        residual += e * e;
    }
    Ok(residual.clamp(0.0, squared_norm(v)))
}

/// `B B^T v`.
pub fn project(basis: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if basis.ndim() != 2 || basis.shape()[0] != v.len() {
        return shape_err(format!("basis {:?} against vector of length {}", basis.shape(), v.len()));
    }
    let bt_v = basis.transpose()?.matmul(&Tensor::new(vec![v.len(), 1], v.to_vec())?)?;
    Ok(basis.matmul(&bt_v)?.into_data())
}
