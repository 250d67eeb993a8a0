//! Small dense helpers shared across modules.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

/// Infinity norm (maximum absolute row sum) of `M Mᵀ − I`.
pub fn row_orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m * m.transpose();
    let k = gram.nrows();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let target = if i == j { 1.0 } else { 0.0 };
                    (gram[(i, j)] - target).abs()
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Row-orthonormal polar factor of a wide (rows ≤ cols) matrix.
///
/// For `Y = U Σ Wᵀ` this returns `U Wᵀ = (Y Yᵀ)^{-1/2} Y`, the closest matrix
/// with orthonormal rows in Frobenius norm. Fails when `Y` loses row rank.
pub fn polar_rows(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = y.shape();
    if rows > cols {
        return Err(Error::arg(format!(
            "polar factor needs rows <= cols, got {rows}x{cols}"
        )));
    }
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateStep {
            sigma_min: f64::NAN,
        });
    }
    let svd = y.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    if !(sigma_max > 0.0) || sigma_min <= sigma_max * 1e-12 {
        return Err(Error::DegenerateStep { sigma_min });
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    Ok(u * v_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polar_of_row_orthonormal_is_itself() {
        let s = 0.5_f64.sqrt();
        let m = DMatrix::from_row_slice(2, 3, &[s, s, 0.0, 0.0, 0.0, 1.0]);
        let p = polar_rows(&m).unwrap();
        assert!((p - &m).abs().max() < 1e-14);
    }

    #[test]
    fn polar_rejects_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(polar_rows(&m), Err(Error::DegenerateStep { .. })));
    }

    #[test]
    fn orthonormality_error_of_identity_is_zero() {
        assert_eq!(row_orthonormality_error(&DMatrix::identity(3, 3)), 0.0);
    }
}
