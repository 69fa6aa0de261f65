use nalgebra::{DMatrix, SymmetricEigen};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

pub(crate) fn to_dmatrix(m: &Tensor) -> Result<DMatrix<f64>> {
    if m.ndim() != 2 {
        return dim_err(format!("expected a matrix, got {:?}", m.shape()));
    }
    Ok(DMatrix::from_row_slice(m.shape()[0], m.shape()[1], m.data()))
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![r, c], data).expect("shape")
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &Tensor) -> Result<Tensor> {
    psd_sqrt_checked(m, f64::INFINITY)
}

/// [`psd_sqrt`] that rejects eigenvalues below `-rel_tol * max |lambda|`.
pub fn psd_sqrt_checked(m: &Tensor, rel_tol: f64) -> Result<Tensor> {
    if m.ndim() != 2 || m.shape()[0] != m.shape()[1] {
        return dim_err(format!("psd_sqrt needs a square matrix, got {:?}", m.shape()));
    }
    m.ensure_finite("psd_sqrt input")?;
    let n = m.shape()[0];
    let scale = m.data().iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get2(i, j) - m.get2(j, i)).abs() > 1e-8 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let dm = to_dmatrix(m)?;
    let sym = (&dm + dm.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -rel_tol * top) {
        return Err(Error::InvalidArgument(format!("matrix not PSD: eigenvalue {l}")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(from_dmatrix(&s))
}
