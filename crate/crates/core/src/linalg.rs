//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::matrix::Matrix;
use crate::scalar::Real;

pub const MAX_SWEEPS: usize = 100;
/// Convergence when every off-diagonal entry is below this fraction of the largest input entry.
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Descending.
    pub values: Vec<T>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix<T>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Eigen-pairs of a symmetric matrix, sorted by descending eigenvalue.
///
/// Only the upper triangle is trusted; the lower triangle is mirrored first.
pub fn symmetric_eigen<T: Real>(input: &Matrix<T>) -> SymmetricEigen<T> {
    let n = input.rows();
    assert_eq!(n, input.cols(), "symmetric_eigen needs a square matrix");
    let mut a = input.clone();
    for i in 0..n {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let scale = a.as_slice().iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let rel = T::lit(OFF_DIAGONAL_TOLERANCE).max(T::epsilon() * T::lit(4.0));
    let tol = rel * scale;
    let mut v = Matrix::<T>::identity(n);

    let max_off = |a: &Matrix<T>| {
        let mut m = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                m = m.max(a[(p, q)].abs());
            }
        }
        m
    };

    let mut sweeps = 0;
    let mut converged = scale == T::zero() || max_off(&a) <= tol;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol * T::lit(1e-3) {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
        converged = max_off(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep index order
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(c, order[r])]);
    SymmetricEigen {
        values,
        vectors,
        sweeps,
        converged,
    }
}

fn rotate<T: Real>(a: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let n = a.rows();
    // A <- A J
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    // A <- J^T A
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = T::zero();
    a[(q, p)] = T::zero();
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input_is_sorted() {
        let m = Matrix::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let e = symmetric_eigen(&m);
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(e.vectors.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn two_by_two() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = symmetric_eigen(&m);
        assert!((e.values[0] - 3.0f64).abs() < 1e-12);
        assert!((e.values[1] - 1.0f64).abs() < 1e-12);
        let v = e.vectors.row(0);
        assert!((v[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let n = 12;
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = Matrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = next();
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        let e = symmetric_eigen(&m);
        assert!(e.converged);
        let vt = e.vectors.transpose();
        let lambda = Matrix::from_fn(n, n, |r, c| if r == c { e.values[r] } else { 0.0 });
        let back = vt.matmul(&lambda).unwrap().matmul(&e.vectors).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-10);
        let gram = e.vectors.matmul(&vt).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(n)) < 1e-12);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn works_in_f32() {
        let m = Matrix::from_vec(2, 2, vec![4.0f32, 1.0, 1.0, 3.0]).unwrap();
        let e = symmetric_eigen(&m);
        assert!(e.converged);
        let tr: f32 = e.values.iter().sum();
        assert!((tr - 7.0).abs() < 1e-5);
    }
}
