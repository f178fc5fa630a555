//! Small dense linear-algebra helpers and signed permutations.

use nalgebra::linalg::SVD;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `P` with `P[i, perm[i]] = signs[i]`, so `(P A)` row `i` is
/// `signs[i] * A` row `perm[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(d: usize) -> Self {
        SignedPermutation { perm: (0..d).collect(), signs: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn matrix(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            m[(i, self.perm[i])] = self.signs[i];
        }
        m
    }

    /// Applies to the rows of `a`.
    pub fn apply(&self, a: &Matrix) -> Matrix {
        Matrix::from_fn(a.nrows(), a.ncols(), |i, j| self.signs[i] * a[(self.perm[i], j)])
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p) && self.signs.iter().all(|&s| s > 0.0)
    }
}

pub const MAX_ENUMERATION_DIM: usize = 6;

/// All permutations of `0..d` in lexicographic order.
pub fn permutations(d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..d).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(k) = (0..d.saturating_sub(1)).rev().find(|&k| p[k] < p[k + 1]) else {
            break;
        };
        let l = (k + 1..d).rev().find(|&l| p[k] < p[l]).unwrap();
        p.swap(k, l);
        p[k + 1..].reverse();
    }
    out
}

/// The `2^d d!` elements of `SP(d)`, identity first.
pub fn signed_permutations(d: usize) -> Result<Vec<SignedPermutation>> {
    if d > MAX_ENUMERATION_DIM {
        return Err(Error::InvalidArgument(format!(
            "signed-permutation enumeration limited to d <= {MAX_ENUMERATION_DIM}, got {d}"
        )));
    }
    let mut out = Vec::with_capacity((1 << d) * permutations(d).len());
    for perm in permutations(d) {
        for mask in 0..(1usize << d) {
            let signs = (0..d).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            out.push(SignedPermutation { perm: perm.clone(), signs });
        }
    }
    Ok(out)
}

/// True when `q` is within `tol` (max-abs) of a signed permutation matrix.
pub fn is_signed_permutation(q: &Matrix, tol: f64) -> bool {
    let d = q.nrows();
    if q.ncols() != d {
        return false;
    }
    let mut used = vec![false; d];
    for i in 0..d {
        let mut hit = None;
        for j in 0..d {
            let v = q[(i, j)].abs();
            if (v - 1.0).abs() <= tol {
                if hit.is_some() {
                    return false;
                }
                hit = Some(j);
            } else if v > tol {
                return false;
            }
        }
        match hit {
            Some(j) if !used[j] => used[j] = true,
            _ => return false,
        }
    }
    true
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal absorbed).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `max |Q Q' - I|`.
pub fn orthogonality_error(q: &Matrix) -> f64 {
    let d = q.nrows();
    let p = q * q.transpose() - Matrix::identity(d, d);
    p.amax()
}

pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let svd = SVD::new(a.clone(), false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// 2-norm condition number; infinite for singular or non-finite input.
pub fn condition_number(a: &Matrix) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    a.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix is not invertible", a.nrows(), a.ncols())))
}

/// Inverse of a symmetric positive semidefinite matrix after adding
/// `ridge * trace / dim` to the diagonal.
pub fn ridge_inverse(s: &Matrix, ridge: f64) -> Result<Matrix> {
    let k = s.nrows();
    let sym = (s + s.transpose()) * 0.5;
    let lam = ridge * sym.trace().abs().max(f64::MIN_POSITIVE) / k as f64;
    let reg = &sym + Matrix::identity(k, k) * lam;
    match reg.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => inverse(&reg),
    }
}

/// Whitening matrix `W` with `W S W' = I`: the inverse Cholesky factor.
pub fn whitening(s: &Matrix) -> Result<Matrix> {
    let sym = (s + s.transpose()) * 0.5;
    let ch = sym
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance matrix is not positive definite".into()))?;
    inverse(&ch.l())
}

/// Lower Cholesky factor of a symmetric positive definite matrix (after
/// symmetrizing), falling back to an eigen square root for PSD input.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    let sym = (s + s.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * eig.eigenvalues.amax()) {
        return Err(Error::InvalidArgument("matrix is not positive semidefinite".into()));
    }
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&sq) * eig.eigenvectors.transpose())
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inv_sqrt_spd(s: &Matrix) -> Result<Matrix> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Singular("matrix is not positive definite".into()));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Row-major entries.
pub fn to_rows(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("matrix rows empty or of unequal length".into()));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Serde adapter writing a matrix as a row-major array of arrays.
pub mod rows_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Same as [`rows_serde`] for `Option<Matrix>`.
pub mod opt_rows_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Matrix>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.map(|r| from_rows(&r).map_err(serde::de::Error::custom)).transpose()
    }
}

/// Same as [`rows_serde`] for `Vec<Matrix>`.
pub mod vec_rows_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &[Matrix], s: S) -> std::result::Result<S::Ok, S::Error> {
        m.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Matrix>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.iter().map(|r| from_rows(r).map_err(serde::de::Error::custom)).collect()
    }
}

/// Same as [`rows_serde`] for `Option<Vec<Matrix>>`.
pub mod opt_vec_rows_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Vec<Matrix>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(|v| v.iter().map(to_rows).collect::<Vec<_>>()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<Matrix>>, D::Error> {
        let all = Option::<Vec<Vec<Vec<f64>>>>::deserialize(d)?;
        all.map(|v| v.iter().map(|r| from_rows(r).map_err(serde::de::Error::custom)).collect())
            .transpose()
    }
}
