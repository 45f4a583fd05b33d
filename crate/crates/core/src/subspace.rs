//! Reduced SVD of the data matrix, `Y = V·R`, and the orthogonal complement `V⊥`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, QR, SVD};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    /// `d × D`, orthonormal columns spanning the data.
    pub v: DMatrix<f64>,
    /// `D × N` coordinates of the data in the `V` basis.
    pub r: DMatrix<f64>,
    /// `d × (d − D)`, orthonormal columns spanning the complement.
    pub v_perp: DMatrix<f64>,
    /// Singular values above the cutoff, descending.
    pub singular_values: Vec<f64>,
    pub rank_tol: f64,
}

impl SubspaceBasis {
    pub fn ambient_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn off_dim(&self) -> usize {
        self.v_perp.ncols()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v.tr_mul(x)
    }

    pub fn project_perp(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v_perp.tr_mul(x)
    }

    /// `max |VᵀV − I|`, `max |V⊥ᵀV⊥ − I|`, `max |VᵀV⊥|`.
    pub fn orthonormality_defects(&self) -> (f64, f64, f64) {
        let dv = (self.v.tr_mul(&self.v) - DMatrix::identity(self.rank(), self.rank())).amax();
        let dp = (self.v_perp.tr_mul(&self.v_perp) - DMatrix::identity(self.off_dim(), self.off_dim())).amax();
        let cross = if self.rank() == 0 || self.off_dim() == 0 {
            0.0
        } else {
            self.v.tr_mul(&self.v_perp).amax()
        };
        (dv, dp, cross)
    }

    pub fn reconstruction_error(&self, data: &DataMatrix) -> f64 {
        (&self.v * &self.r - data.matrix()).norm() / data.matrix().norm()
    }

    pub fn to_json(&self) -> SubspaceJson {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        SubspaceJson {
            v: rows(&self.v),
            r: rows(&self.r),
            d: self.rank(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Persisted form: `{"V": [[..]], "R": [[..]], "D": int}` with matrices stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceJson {
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: usize,
}

/// Reduced SVD with relative rank cutoff `rank_tol · σ_max`.
pub fn svd_decompose(data: &DataMatrix, rank_tol: f64) -> Result<SubspaceBasis> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(invalid(format!("rank_tol must lie in (0, 1), got {rank_tol}")));
    }
    let y = data.matrix();
    let d = y.nrows();
    let svd = SVD::new(y.clone(), true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma_max = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    if sigma_max == 0.0 {
        return Err(Error::ZeroData);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > rank_tol * sigma_max)
        .collect();
    let rank = keep.len();

    let v = DMatrix::from_fn(d, rank, |i, k| u[(i, keep[k])]);
    let r = DMatrix::from_fn(rank, y.ncols(), |k, j| svd.singular_values[keep[k]] * vt[(keep[k], j)]);
    let v_perp = orthogonal_complement(&v);

    Ok(SubspaceBasis {
        v,
        r,
        v_perp,
        singular_values: keep.iter().map(|&i| svd.singular_values[i]).collect(),
        rank_tol,
    })
}

/// Completes orthonormal `V` (`d × D`) to a basis: QR of `[V | I_d]` yields a full
/// orthogonal `Q` whose trailing `d − D` columns span `range(V)⊥`.
pub fn orthogonal_complement(v: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, rank) = v.shape();
    if rank >= d {
        return DMatrix::zeros(d, 0);
    }
    let mut aug = DMatrix::zeros(d, rank + d);
    aug.columns_mut(0, rank).copy_from(v);
    aug.columns_mut(rank, d).fill_with_identity();
    let q = QR::new(aug).q();
    let mut comp = q.columns(rank, d - rank).into_owned();
    // One pass of re-orthogonalization against V keeps VᵀV⊥ at round-off level.
    let overlap = v.tr_mul(&comp);
    comp -= v * overlap;
    let qr = QR::new(comp);
    qr.q()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSpec;

    #[test]
    fn rank_one_point() {
        let data = DataMatrix::from_points(&[vec![2.0, 0.0]]).unwrap();
        let b = svd_decompose(&data, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.rank(), 1);
        assert!((b.v[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(b.v[(1, 0)].abs() < 1e-14);
        assert_eq!(b.off_dim(), 1);
        assert!(b.reconstruction_error(&data) < 1e-12);
    }

    #[test]
    fn near_duplicate_column_collapses() {
        // Y = [e1, e1 + 1e-14 e2]: singular values ≈ √2 and ≈ 7.07e-15, the latter below 1e-10·σ_max.
        let data = DataMatrix::from_points(&[vec![1.0, 0.0], vec![1.0, 1e-14]]).unwrap();
        let oracle = SVD::new(data.matrix().clone(), false, false).singular_values;
        let smax = oracle.max();
        let expected = oracle.iter().filter(|&&s| s > 1e-10 * smax).count();
        assert_eq!(expected, 1);
        assert_eq!(svd_decompose(&data, 1e-10).unwrap().rank(), 1);
    }

    #[test]
    fn embedded_subspace_rank() {
        let data = crate::data::synthetic::unit_cube_subspace(RngSpec::new(4, 0), 200, 100, 20).unwrap();
        let b = svd_decompose(&data, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.rank(), 20);
        assert_eq!(b.off_dim(), 80);
        let (a, p, c) = b.orthonormality_defects();
        assert!(a < 1e-10 && p < 1e-10 && c < 1e-10, "{a} {p} {c}");
        assert!(b.reconstruction_error(&data) < 1e-8);
        // V⊥ spans exactly the zeroed coordinates
        assert!(b.v_perp.rows(0, 20).amax() < 1e-10);
    }

    #[test]
    fn zero_data_rejected() {
        let data = DataMatrix::from_points(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(svd_decompose(&data, 1e-10), Err(Error::ZeroData)));
    }

    #[test]
    fn bad_tolerance_rejected() {
        let data = DataMatrix::from_points(&[vec![1.0]]).unwrap();
        assert!(svd_decompose(&data, 0.0).is_err());
        assert!(svd_decompose(&data, 1.0).is_err());
    }

    #[test]
    fn full_rank_has_empty_complement() {
        let data = DataMatrix::from_points(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = svd_decompose(&data, 1e-10).unwrap();
        assert_eq!(b.rank(), 2);
        assert_eq!(b.v_perp.ncols(), 0);
    }

    #[test]
    fn json_shape() {
        let data = DataMatrix::from_points(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = svd_decompose(&data, 1e-10).unwrap();
        let j = b.to_json();
        assert_eq!(j.d, 2);
        assert_eq!(j.v.len(), 3);
        assert_eq!(j.r.len(), 2);
        assert_eq!(j.r[0].len(), 2);
        let text = serde_json::to_string(&j).unwrap();
        assert!(text.contains("\"V\"") && text.contains("\"R\"") && text.contains("\"D\""));
    }
}
