//! Estimation-error metrics that ignore signed row permutations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SignedPermutation, MAX_ENUMERATION_DIM};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub d_f: f64,
    pub d_a: f64,
    /// The `Q` attaining the minimum in `d_F`.
    pub permutation: SignedPermutation,
    /// False when `d > 6` and the minimum was found greedily.
    pub exact: bool,
}

fn check(a_hat: &Matrix, a0: &Matrix) -> Result<()> {
    if a_hat.shape() != a0.shape() || a_hat.nrows() != a_hat.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "matrices of shape {:?} and {:?}",
            a_hat.shape(),
            a0.shape()
        )));
    }
    Ok(())
}

fn frob_value(a_hat_inv: &Matrix, a0: &Matrix, p: &SignedPermutation) -> f64 {
    let d = a0.nrows();
    let m = a_hat_inv * p.apply(a0) - Matrix::identity(d, d);
    m.norm() / (d * d) as f64
}

/// Greedy signed assignment from the largest entries of `Â A_0^{-1}`.
fn greedy_permutation(a_hat: &Matrix, a0: &Matrix) -> Result<SignedPermutation> {
    let d = a0.nrows();
    let c = a_hat * linalg::inverse(a0)?;
    let mut perm = vec![usize::MAX; d];
    let mut signs = vec![1.0; d];
    let mut row_used = vec![false; d];
    let mut col_used = vec![false; d];
    for _ in 0..d {
        let mut best = (0, 0, -1.0);
        for i in (0..d).filter(|&i| !row_used[i]) {
            for j in (0..d).filter(|&j| !col_used[j]) {
                if c[(i, j)].abs() > best.2 {
                    best = (i, j, c[(i, j)].abs());
                }
            }
        }
        let (i, j, _) = best;
        row_used[i] = true;
        col_used[j] = true;
        perm[i] = j;
        signs[i] = if c[(i, j)] < 0.0 { -1.0 } else { 1.0 };
    }
    Ok(SignedPermutation { perm, signs })
}

/// `min_{Q ∈ SP(d)} ‖Â^{-1} Q A_0 - I‖_F / d²` with its minimizer.
pub fn frobenius_error_detail(a_hat: &Matrix, a0: &Matrix) -> Result<(f64, SignedPermutation, bool)> {
    check(a_hat, a0)?;
    let d = a0.nrows();
    let inv = linalg::inverse(a_hat)?;
    if d > MAX_ENUMERATION_DIM {
        let p = greedy_permutation(a_hat, a0)?;
        return Ok((frob_value(&inv, a0, &p), p, false));
    }
    let mut best: Option<(f64, SignedPermutation)> = None;
    for p in linalg::signed_permutations(d)? {
        let v = frob_value(&inv, a0, &p);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, p));
        }
    }
    let (v, p) = best.unwrap();
    Ok((v, p, true))
}

pub fn frobenius_error(a_hat: &Matrix, a0: &Matrix) -> Result<f64> {
    Ok(frobenius_error_detail(a_hat, a0)?.0)
}

/// Amari error of `M = A_0 Â^{-1}`: row and column terms averaged over `2d`.
pub fn amari_error(a_hat: &Matrix, a0: &Matrix) -> Result<f64> {
    check(a_hat, a0)?;
    // full pivoting makes the inverse of `PÂ` exactly the column-permuted inverse of `Â`
    let lu = a_hat.clone().full_piv_lu();
    let inv = lu
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("estimated matrix is not invertible".into()))?;
    Ok(amari_index(&(a0 * inv)))
}

/// Amari index of an arbitrary square matrix.
///
/// Terms are summed in sorted order, so permuting rows or columns of `m`
/// leaves the result bit-identical.
pub fn amari_index(m: &Matrix) -> f64 {
    let d = m.nrows();
    let a = m.abs();
    let term = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let max = v[v.len() - 1];
        v.iter().sum::<f64>() / max - 1.0
    };
    let mut rows: Vec<f64> = (0..d).map(|i| term(a.row(i).iter().copied().collect())).collect();
    let mut cols: Vec<f64> = (0..d).map(|j| term(a.column(j).iter().copied().collect())).collect();
    rows.sort_by(f64::total_cmp);
    cols.sort_by(f64::total_cmp);
    (rows.iter().sum::<f64>() + cols.iter().sum::<f64>()) / (2.0 * d as f64)
}

pub fn error_metrics(a_hat: &Matrix, a0: &Matrix) -> Result<ErrorMetrics> {
    let (d_f, permutation, exact) = frobenius_error_detail(a_hat, a0)?;
    Ok(ErrorMetrics { d_f, d_a: amari_error(a_hat, a0)?, permutation, exact })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a0() -> Matrix {
        Matrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0])
    }

    #[test]
    fn zero_on_orbit() {
        let a = a0();
        assert_eq!(frobenius_error(&a, &a).unwrap(), 0.0);
        let mut flipped = -a.clone();
        flipped.row_mut(0).neg_mut();
        assert!(frobenius_error(&flipped, &a).unwrap() < 1e-15);
        for p in linalg::signed_permutations(2).unwrap() {
            assert!(amari_error(&p.apply(&a), &a).unwrap() < 1e-15);
        }
    }

    #[test]
    fn frobenius_small_perturbation_by_hand() {
        let a = a0();
        let mut ah = a.clone();
        ah[(0, 0)] += 0.01;
        let inv = ah.clone().try_inverse().unwrap();
        let mut vals = Vec::new();
        for perm in [[0usize, 1], [1, 0]] {
            for s0 in [1.0, -1.0] {
                for s1 in [1.0, -1.0] {
                    let q = Matrix::from_fn(2, 2, |i, j| if perm[i] == j { [s0, s1][i] } else { 0.0 });
                    vals.push((&inv * q * &a - Matrix::identity(2, 2)).norm() / 4.0);
                }
            }
        }
        assert_eq!(vals.len(), 8);
        let expect = vals.into_iter().fold(f64::INFINITY, f64::min);
        assert!((frobenius_error(&ah, &a).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn amari_hand_value() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((amari_index(&m) - 0.5).abs() < 1e-15);
        // with A_0 = M and Â = I, M = A_0 Â^{-1}
        assert!((amari_error(&Matrix::identity(2, 2), &m).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn amari_rows_scale_free() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
        let scaled = Matrix::from_row_slice(2, 2, &[5.0, 1.5, 0.2, 1.0]);
        let row_term = |x: &Matrix| (0..2).map(|i| x.row(i).abs().sum() / x.row(i).abs().max() - 1.0).sum::<f64>();
        assert!((row_term(&m) - row_term(&scaled)).abs() < 1e-15);
    }

    #[test]
    fn singular_estimate_is_an_error() {
        let s = Matrix::zeros(2, 2);
        assert!(frobenius_error(&s, &a0()).is_err());
        assert!(amari_error(&s, &a0()).is_err());
    }

    #[test]
    fn greedy_is_exact_near_the_orbit() {
        let a = Matrix::from_fn(7, 7, |i, j| if i == j { 2.0 } else { 0.1 * ((i * 7 + j) % 5) as f64 });
        let p = SignedPermutation { perm: vec![3, 1, 0, 2, 6, 5, 4], signs: vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0] };
        let m = error_metrics(&p.apply(&a), &a).unwrap();
        assert!(!m.exact);
        assert!(m.d_f < 1e-14);
    }
}
