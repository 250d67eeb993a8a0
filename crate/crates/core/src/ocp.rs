//! Ordinal constraint projection.
//!
//! The Gram matrix `M = Σ x_i x_iᵀ` of the (unit-norm, centered) training
//! data is eigendecomposed and its leading `d_svd` eigenvectors become the
//! rows of `Z`. Points and centers are embedded as `u = Z x`, and triplet
//! constraints are evaluated in that space.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_D_SVD: usize = 16;

#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub m: DMatrix<f64>,
}

/// `d_svd × d` projection with orthonormal rows and their eigenvalues,
/// sorted in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalProjection {
    pub z: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl OrdinalProjection {
    pub fn d_svd(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// `Z = I_d` with unit eigenvalues.
    pub fn identity(d: usize) -> Self {
        Self {
            z: DMatrix::identity(d, d),
            eigenvalues: vec![1.0; d],
        }
    }
}

/// Embedded vectors stored as the columns of a `dim × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPoints {
    pub vectors: DMatrix<f64>,
}

impl EmbeddedPoints {
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i).iter().copied().collect()
    }

    /// Builds from a list of equal-length vectors.
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::arg("embedded vectors differ in dimension"));
        }
        Ok(Self {
            vectors: DMatrix::from_fn(dim, vectors.len(), |r, c| vectors[c][r]),
        })
    }
}

fn as_matrix(data: &DataMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.n(), data.d(), data.as_slice())
}

pub fn compute_gram(train: &DataMatrix) -> Result<GramMatrix> {
    if train.is_empty() {
        return Err(Error::arg("gram matrix of an empty training set"));
    }
    let x = as_matrix(train);
    let mut m = x.tr_mul(&x);
    // symmetrize away the last-ulp asymmetry of the blocked product
    let t = m.transpose();
    m += t;
    m *= 0.5;
    Ok(GramMatrix { m })
}

/// Leading `d_svd` eigenpairs of `M`. Each eigenvector is signed so that its
/// largest-magnitude component (first one on ties) is non-negative.
pub fn svd_project(gram: &GramMatrix, d_svd: usize) -> Result<OrdinalProjection> {
    let d = gram.m.nrows();
    if d_svd == 0 || d_svd > d {
        return Err(Error::arg(format!(
            "d_svd must lie in 1..={d}, got {d_svd}"
        )));
    }
    let eig = SymmetricEigen::new(gram.m.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut z = DMatrix::zeros(d_svd, d);
    let mut eigenvalues = Vec::with_capacity(d_svd);
    for (row, &idx) in order.iter().take(d_svd).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for c in 1..d {
            if v[c].abs() > v[pivot].abs() {
                pivot = c;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            z[(row, c)] = sign * v[c];
        }
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(OrdinalProjection { z, eigenvalues })
}

/// `u_i = Z x_i` for every row of `points`.
pub fn embed(projection: &OrdinalProjection, points: &DataMatrix) -> Result<EmbeddedPoints> {
    if points.d() != projection.d() && !points.is_empty() {
        return Err(Error::arg(format!(
            "points have dimension {} but the projection expects {}",
            points.d(),
            projection.d()
        )));
    }
    let x = as_matrix(points);
    Ok(EmbeddedPoints {
        vectors: &projection.z * x.transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, preprocess};
    use crate::linalg::row_orthonormality_error;
    use proptest::prelude::*;

    #[test]
    fn gram_of_single_basis_vector() {
        let x = DataMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let g = compute_gram(&x).unwrap();
        assert_eq!(g.m, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn gram_of_orthonormal_set_is_identity() {
        let x = DataMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(compute_gram(&x).unwrap().m, DMatrix::identity(2, 2));
    }

    #[test]
    fn gram_trace_counts_unit_vectors() {
        let x = preprocess(&gen_synthetic(4, 300, 10, 0.3, 1).unwrap()).unwrap();
        let g = compute_gram(&x).unwrap();
        assert!((g.m.trace() - 300.0).abs() < 1e-9);
        assert_eq!(g.m, g.m.transpose());
    }

    #[test]
    fn identity_gram_gives_orthogonal_z() {
        let g = GramMatrix {
            m: DMatrix::identity(4, 4),
        };
        let p = svd_project(&g, 4).unwrap();
        assert!(p.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-12));
        assert!(row_orthonormality_error(&p.z) < 1e-12);
        assert!(row_orthonormality_error(&p.z.transpose()) < 1e-12);
    }

    #[test]
    fn diagonal_gram_picks_largest_axis() {
        let g = GramMatrix {
            m: DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
        };
        let p = svd_project(&g, 1).unwrap();
        assert_eq!(p.eigenvalues, vec![4.0]);
        assert!((p.z[(0, 0)] - 1.0).abs() < 1e-15 && p.z[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rank() {
        let g = GramMatrix {
            m: DMatrix::identity(3, 3),
        };
        assert!(svd_project(&g, 4).is_err());
        assert!(svd_project(&g, 0).is_err());
    }

    #[test]
    fn identity_projection_keeps_points() {
        let x = DataMatrix::from_rows(&[vec![0.5, -2.0, 3.0]]).unwrap();
        let e = embed(&OrdinalProjection::identity(3), &x).unwrap();
        assert_eq!(e.column(0), vec![0.5, -2.0, 3.0]);
        let wrong = DataMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(embed(&OrdinalProjection::identity(3), &wrong).is_err());
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let x = preprocess(&gen_synthetic(5, 200, 8, 0.4, 2).unwrap()).unwrap();
        let g = compute_gram(&x).unwrap();
        let p = svd_project(&g, 5).unwrap();
        for r in 0..p.d_svd() {
            let row = p.z.row(r);
            let pivot = row
                .iter()
                .cloned()
                .fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot >= 0.0);
        }
        assert_eq!(svd_project(&g, 5).unwrap(), p);
    }

    /// Cyclic Jacobi eigenvalue iteration, kept independent of nalgebra.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| m[(i, j)]).collect())
            .collect();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn truncation_residual_matches_discarded_spectrum() {
        let x = preprocess(&gen_synthetic(6, 120, 9, 0.5, 13).unwrap()).unwrap();
        let g = compute_gram(&x).unwrap();
        let oracle = jacobi_eigenvalues(&g.m);
        let full = svd_project(&g, 9).unwrap();
        for (a, b) in full.eigenvalues.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9 * oracle[0], "{a} vs {b}");
        }
        assert!(full.eigenvalues.iter().all(|&l| l >= -1e-8 * oracle[0]));
        for k in 1..=9 {
            let p = svd_project(&g, k).unwrap();
            let lambda =
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p.eigenvalues.clone()));
            let recon = p.z.transpose() * lambda * &p.z;
            let rel = (&g.m - recon).norm() / g.m.norm();
            let discarded = oracle[k..].iter().map(|l| l * l).sum::<f64>().sqrt() / g.m.norm();
            assert!(rel <= discarded + 1e-9, "k={k}: {rel} > {discarded}");
            assert!(row_orthonormality_error(&p.z) < 1e-8);
        }
    }

    #[test]
    fn full_rank_embedding_is_isometric() {
        let x = preprocess(&gen_synthetic(4, 60, 7, 0.5, 21).unwrap()).unwrap();
        let p = svd_project(&compute_gram(&x).unwrap(), 7).unwrap();
        let e = embed(&p, &x).unwrap();
        for i in 0..x.n() {
            for j in 0..x.n() {
                let orig = crate::linalg::squared_distance(x.row(i), x.row(j)).sqrt();
                let emb = (e.vectors.column(i) - e.vectors.column(j)).norm();
                assert!((orig - emb).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn embed_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed: u64) {
            let x = preprocess(&gen_synthetic(3, 30, 6, 0.5, seed).unwrap()).unwrap();
            let p = svd_project(&compute_gram(&x).unwrap(), 3).unwrap();
            let u: Vec<f64> = x.row(0).to_vec();
            let v: Vec<f64> = x.row(1).to_vec();
            let combo: Vec<f64> = u.iter().zip(&v).map(|(s, t)| a * s + b * t).collect();
            let pts = DataMatrix::from_rows(&[u, v, combo]).unwrap();
            let e = embed(&p, &pts).unwrap();
            let lhs = e.vectors.column(2).clone_owned();
            let rhs = e.vectors.column(0) * a + e.vectors.column(1) * b;
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }
    }
}
