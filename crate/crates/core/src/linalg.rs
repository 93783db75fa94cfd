//! Small dense solves (thin-plate-spline systems are at most a few dozen unknowns).

use crate::scalar::Scalar;

/// Solve `a · x = b` for several right-hand sides by Gaussian elimination with partial pivoting.
///
/// `a` is row-major n×n, `b` is row-major n×m. Returns `None` when a pivot falls below
/// `rel_tol` times the largest magnitude in `a`.
pub fn solve<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, rel_tol: T) -> Option<Vec<T>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * m);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let scale = a.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return None;
    }
    let tol = scale * rel_tol;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
        if a[pivot_row * n + col].abs() <= tol || !a[pivot_row * n + col].is_finite() {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            for k in 0..m {
                b.swap(col * m + k, pivot_row * m + k);
            }
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= factor * v;
            }
            for k in 0..m {
                let v = b[col * m + k];
                b[row * m + k] -= factor * v;
            }
        }
    }
    let mut x = vec![T::zero(); n * m];
    for row in (0..n).rev() {
        for k in 0..m {
            let mut acc = b[row * m + k];
            for j in row + 1..n {
                acc -= a[row * n + j] * x[j * m + k];
            }
            x[row * m + k] = acc / a[row * n + row];
        }
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [2 1; 1 3] x = [3; 5] -> x = [0.8, 1.4]
        let x = solve(&[2.0, 1.0, 1.0, 3.0], &[3.0, 5.0], 2, 1, 1e-12).unwrap();
        assert!((x[0] - 0.8_f64).abs() < 1e-12);
        assert!((x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn needs_pivoting() {
        let x = solve(&[0.0, 1.0, 1.0, 0.0], &[2.0, 7.0], 2, 1, 1e-12).unwrap();
        assert_eq!(x, vec![7.0, 2.0]);
    }

    #[test]
    fn singular_is_rejected() {
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0], 2, 1, 1e-12_f64).is_none());
    }
}
