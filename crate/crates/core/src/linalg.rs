//! Small dense linear-algebra helpers over `nalgebra` plus serde adapters
//! that write matrices as nested JSON arrays.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn cholesky(a: &Mat) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    a.clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

/// Inverse of a symmetric positive-definite matrix; result is re-symmetrized.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    let inv = cholesky(a)?.inverse();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric(a: &Mat, tol: f64) -> bool {
    a.is_square()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

/// Eigenvalues of a symmetric matrix sorted in descending order, with the
/// matching eigenvectors as columns.
pub fn sym_eigen_desc(a: &Mat) -> (Vec<f64>, Mat) {
    let eig = symmetrize(a).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn rows_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension {
            expected: ncols,
            got: bad.len(),
        });
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `#[serde(with = "crate::linalg::serde_mat")]` for `DMatrix<f64>` fields.
pub mod serde_mat {
    use super::{mat_to_rows, rows_to_mat, Mat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        rows_to_mat(&rows).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "crate::linalg::serde_vec")]` for `DVector<f64>` fields.
pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod serde_bool_mat {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use nalgebra::DMatrix;

    pub fn serialize<S: Serializer>(m: &DMatrix<bool>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<bool>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<bool>, D::Error> {
        let rows = Vec::<Vec<bool>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged boolean matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}
