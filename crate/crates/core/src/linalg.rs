//! Small dense helpers: Cholesky factorization and triangular solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Scalar;

/// Lower-triangular `L` with `a = L Lᵀ`, or `None` when `a` is not
/// numerically positive definite.
pub fn cholesky<S: Scalar>(a: ArrayView2<'_, S>) -> Option<Array2<S>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d.is_nan() || d <= S::zero() || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower<S: Scalar>(l: ArrayView2<'_, S>, b: ArrayView1<'_, S>) -> Array1<S> {
    let n = l.nrows();
    let mut x = Array1::<S>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// `ln det(L Lᵀ)` from the factor.
pub fn log_det_from_cholesky<S: Scalar>(l: ArrayView2<'_, S>) -> S {
    let two = S::of(2.0);
    l.diag().iter().map(|&d| two * d.ln()).sum()
}

/// Inverse of `L Lᵀ`.
pub fn spd_inverse_from_cholesky(l: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let y = solve_lower(l, e.view());
        // solve Lᵀ x = y
        let mut x = Array1::<f64>::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
        inv.column_mut(j).assign(&x);
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn factor_reproduces_matrix() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        assert!((&back - &a).iter().all(|v: &f64| v.abs() < 1e-12));
        let inv = spd_inverse_from_cholesky(l.view());
        let eye = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((eye[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let det = 4.0 * (5.0 * 3.0 - 1.0) - 2.0 * (2.0 * 3.0 - 0.4) + 0.4 * (2.0 - 5.0 * 0.4);
        assert!((log_det_from_cholesky(l.view()) - f64::ln(det)).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_fails() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }
}
