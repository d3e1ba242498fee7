//! Thin SVD with the rank truncation used throughout the ROLANN pipeline.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Singular values below this fraction of the largest are discarded.
pub const RANK_TOL: f64 = 1e-12;

/// Left singular vectors and singular values of a `d × n` matrix.
///
/// Returns `U` as `d × r` and `S` of length `r`, sorted descending, with
/// `r` the numerical rank. Wide inputs are first reduced by a QR
/// factorisation of the transpose, so the cost is `O(n·d²)`.
pub fn thin_left_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (d, n) = a.shape();
    if d == 0 {
        return Err(CoreError::Input("matrix has no rows".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite entry in design matrix".into()));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(d, 0), DVector::zeros(0)));
    }
    // D = Rᵀ Qᵀ with Q orthonormal, so D and Rᵀ share U and S.
    let reduced = if n > d { a.transpose().qr().unpack_r().transpose() } else { a.clone() };
    // nalgebra's SVD loses several digits of the Gram matrix on ordinary
    // inputs; faer's stays at working precision.
    let m = faer::Mat::<f64>::from_fn(reduced.nrows(), reduced.ncols(), |i, j| reduced[(i, j)]);
    let svd = m.thin_svd().map_err(|e| CoreError::Numeric(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let s_max = if s.nrows() > 0 { s[0] } else { 0.0 };
    let rank = (0..s.nrows()).take_while(|&i| s[i] > RANK_TOL * s_max && s[i] > 0.0).count();
    let u_f = svd.U();
    Ok((DMatrix::from_fn(d, rank, |i, j| u_f[(i, j)]), DVector::from_fn(rank, |i, _| s[i])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_gram_matrix_of_wide_input() {
        let a = DMatrix::from_fn(3, 40, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + (j as f64).sin());
        let (u, s) = thin_left_svd(&a).unwrap();
        let us = &u * DMatrix::from_diagonal(&s);
        let diff = &us * us.transpose() - &a * a.transpose();
        assert!(diff.amax() < 1e-9 * (&a * a.transpose()).amax());
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn gram_error_stays_at_working_precision() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(122);
        let (d, m) = (24, 343);
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = DMatrix::from_fn(d, m, |i, _| if i == d - 1 { 1.0 } else { c[i] + rng.gen_range(-1.5..1.5) });
        let (u, s) = thin_left_svd(&a).unwrap();
        let us = &u * DMatrix::from_diagonal(&s);
        let g = &a * a.transpose();
        assert!((&us * us.transpose() - &g).amax() < 1e-12 * g.amax());
    }

    #[test]
    fn drops_null_directions() {
        let mut a = DMatrix::zeros(4, 6);
        for j in 0..6 {
            a[(0, j)] = j as f64 + 1.0;
            a[(1, j)] = 2.0 * (j as f64 + 1.0);
        }
        let (u, s) = thin_left_svd(&a).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(u.shape(), (4, 1));
    }

    #[test]
    fn empty_column_set_has_rank_zero() {
        let (u, s) = thin_left_svd(&DMatrix::zeros(5, 0)).unwrap();
        assert_eq!((u.ncols(), s.len()), (0, 0));
    }
}
