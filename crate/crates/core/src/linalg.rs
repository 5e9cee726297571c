//! Small dense symmetric-matrix support: the [`CovMatrix`] newtype and its
//! clamped Cholesky factorization.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest tolerated asymmetry |a_ij − a_ji|.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Cholesky pivots in [−PSD_TOL, 0] are clamped to zero; below that the
/// matrix is rejected.
pub const PSD_TOL: f64 = 1e-10;

/// A symmetric p×p matrix used as a covariance or scale parameter.
///
/// Positive semi-definiteness is checked when a factorization is needed,
/// so differences of covariances (which need not be PSD) share the type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct CovMatrix(Array2<f64>);

impl CovMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c || r == 0 {
            return Err(Error::DimMismatch(format!("covariance must be square and non-empty, got {r}x{c}")));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("covariance has non-finite entries".into()));
        }
        for i in 0..r {
            for j in 0..i {
                let d = (entries[[i, j]] - entries[[j, i]]).abs();
                let scale = entries[[i, j]].abs().max(entries[[j, i]].abs()).max(1.0);
                if d > SYMMETRY_TOL * scale {
                    return Err(Error::Parameter(format!(
                        "covariance not symmetric at ({i},{j}): {} vs {}",
                        entries[[i, j]],
                        entries[[j, i]]
                    )));
                }
            }
        }
        Ok(CovMatrix(entries))
    }

    /// Symmetrizes `(a + aᵀ)/2` before validating.
    pub fn symmetrized(entries: Array2<f64>) -> Result<Self> {
        let t = entries.t().to_owned();
        CovMatrix::new((entries + t) * 0.5)
    }

    pub fn identity(p: usize) -> Self {
        CovMatrix(Array2::eye(p))
    }

    pub fn zeros(p: usize) -> Self {
        CovMatrix(Array2::zeros((p, p)))
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        CovMatrix::new(Array2::from_diag(&Array1::from(d.to_vec())))
    }

    /// Unit-variance matrix with common off-diagonal correlation `rho`.
    pub fn equicorrelated(p: usize, rho: f64) -> Self {
        let mut m = Array2::from_elem((p, p), rho);
        m.diag_mut().fill(1.0);
        CovMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        CovMatrix(&self.0 * c)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    /// Lower-triangular L with L Lᵀ = self.
    ///
    /// Negative pivots down to −[`PSD_TOL`] (relative to the diagonal scale)
    /// are clamped to zero; the corresponding column of L is zeroed.
    pub fn cholesky(&self) -> Result<Array2<f64>> {
        let p = self.dim();
        let a = &self.0;
        let scale = a.diag().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut l = Array2::<f64>::zeros((p, p));
        for j in 0..p {
            let mut pivot = a[[j, j]];
            for k in 0..j {
                pivot -= l[[j, k]] * l[[j, k]];
            }
            if pivot < -PSD_TOL * scale {
                return Err(Error::Decomposition(format!(
                    "matrix is not positive semi-definite (pivot {pivot:.3e} at index {j})"
                )));
            }
            if pivot <= PSD_TOL * scale {
                // Degenerate direction: the column stays zero.
                continue;
            }
            let d = pivot.sqrt();
            l[[j, j]] = d;
            for i in (j + 1)..p {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / d;
            }
        }
        Ok(l)
    }
}

impl TryFrom<Vec<Vec<f64>>> for CovMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimMismatch("covariance rows must all have length p".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let a = Array2::from_shape_vec((p, p), flat).map_err(|e| Error::DimMismatch(e.to_string()))?;
        CovMatrix::new(a)
    }
}

impl From<CovMatrix> for Vec<Vec<f64>> {
    fn from(m: CovMatrix) -> Self {
        m.0.outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// y = L z for lower-triangular L.
pub(crate) fn lower_mul(l: &Array2<f64>, z: ArrayView1<f64>, out: &mut [f64]) {
    let p = l.nrows();
    for i in 0..p {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[[i, k]] * z[k];
        }
        out[i] = s;
    }
}
