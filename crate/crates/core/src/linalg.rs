//! Small dense helpers for the logistic fit.

use crate::scalar::Scalar;

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `k x k`)
/// by Cholesky factorization. Returns `None` if a pivot is not positive.
pub(crate) fn cholesky_solve<T: Scalar>(a: &[T], b: &[T], k: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s = s - l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut y = vec![T::zero(); k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s = s - l[i * k + p] * y[p];
        }
        y[i] = s / l[i * k + i];
    }
    let mut x = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in i + 1..k {
            s = s - l[p * k + i] * x[p];
        }
        x[i] = s / l[i * k + i];
    }
    Some(x)
}
