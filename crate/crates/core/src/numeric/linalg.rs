//! Small dense linear algebra on row-major buffers.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Inverse of an `n × n` matrix by Gauss-Jordan elimination with partial
/// pivoting.
pub fn inverse<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    if a.len() != n * n {
        return Err(Error::shape("inverse", format!("{} values for {n}x{n}", a.len())));
    }
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    let scale = a.iter().fold(T::zero(), |acc, v| acc.max(v.abs())).max(T::one());
    let tiny = T::epsilon() * T::from_f64_lossy(n as f64) * scale;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().partial_cmp(&m[y * n + col].abs()).unwrap())
            .unwrap();
        if m[pivot * n + col].abs() <= tiny {
            return Err(Error::Singular("inverse"));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] = m[col * n + j] / p;
            inv[col * n + j] = inv[col * n + j] / p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                m[r * n + j] = m[r * n + j] - f * m[col * n + j];
                inv[r * n + j] = inv[r * n + j] - f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

/// Orthonormalizes the columns of a row-major `rows × cols` matrix in place
/// by modified Gram-Schmidt with one re-orthogonalization pass, preserving
/// the column span and orientation (positive diagonal of the triangular
/// factor).
///
/// Returns [`Error::RankDeficient`] when a column is numerically inside the
/// span of the earlier ones.
pub fn orthonormalize_columns<T: Scalar>(u: &mut [T], rows: usize, cols: usize) -> Result<()> {
    if u.len() != rows * cols || cols > rows {
        return Err(Error::shape("orthonormalize", format!("{rows}x{cols} basis")));
    }
    let col_norm = |u: &[T], c: usize| -> T {
        (0..rows).map(|r| u[r * cols + c] * u[r * cols + c]).sum::<T>().sqrt()
    };
    let threshold = T::from_f64_lossy(1e-10);
    for c in 0..cols {
        let original = col_norm(u, c);
        for _pass in 0..2 {
            for prev in 0..c {
                let dot: T = (0..rows).map(|r| u[r * cols + c] * u[r * cols + prev]).sum();
                for r in 0..rows {
                    u[r * cols + c] = u[r * cols + c] - dot * u[r * cols + prev];
                }
            }
        }
        let norm = col_norm(u, c);
        if !(norm > threshold * original.max(T::min_positive_value())) || !norm.is_finite() {
            return Err(Error::RankDeficient { column: c });
        }
        for r in 0..rows {
            u[r * cols + c] = u[r * cols + c] / norm;
        }
    }
    Ok(())
}

/// Largest absolute entry of `UᵀU − I`.
pub fn orthonormality_defect<T: Scalar>(u: &[T], rows: usize, cols: usize) -> T {
    let mut gram = vec![T::zero(); cols * cols];
    gemm(T::one(), MatRef::new(u, rows, cols).t(), MatRef::new(u, rows, cols), T::zero(), &mut gram);
    let mut worst = T::zero();
    for i in 0..cols {
        for j in 0..cols {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((gram[i * cols + j] - target).abs());
        }
    }
    worst
}

/// Spectral norm (largest singular value) by power iteration on `WᵀW`.
///
/// Iterates until the relative change of the estimate drops below `tol` or
/// `max_iters` is reached. The starting vector is deterministic.
pub fn spectral_norm<T: Scalar>(w: &[T], rows: usize, cols: usize, max_iters: usize, tol: f64) -> T {
    assert_eq!(w.len(), rows * cols);
    // Perturbed constant start avoids being orthogonal to the top singular
    // vector for structured inputs.
    let mut v: Vec<T> = (0..cols)
        .map(|i| T::one() + T::from_f64_lossy(((i * 7919) % 97) as f64 / 997.0))
        .collect();
    let mut wv = vec![T::zero(); rows];
    let mut estimate = T::zero();
    for _ in 0..max_iters {
        let vn = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if vn == T::zero() {
            return T::zero();
        }
        for x in v.iter_mut() {
            *x = *x / vn;
        }
        gemm(T::one(), MatRef::new(w, rows, cols), MatRef::new(&v, cols, 1), T::zero(), &mut wv);
        let next = wv.iter().map(|x| *x * *x).sum::<T>().sqrt();
        gemm(T::one(), MatRef::new(w, rows, cols).t(), MatRef::new(&wv, rows, 1), T::zero(), &mut v);
        let done = (next - estimate).abs() <= T::from_f64_lossy(tol) * next;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_2x2() {
        let inv = inverse::<f64>(&[4.0, 7.0, 2.0, 6.0], 2).unwrap();
        let expect = [0.6, -0.7, -0.2, 0.4];
        for (a, b) in inv.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn inverse_rejects_singular() {
        assert!(matches!(inverse(&[1.0, 2.0, 2.0, 4.0], 2), Err(Error::Singular(_))));
    }

    #[test]
    fn single_column_is_normalized() {
        let mut u: Vec<f64> = vec![3.0, 4.0];
        orthonormalize_columns(&mut u, 2, 1).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dependent_columns_are_reported() {
        let mut u = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(matches!(
            orthonormalize_columns(&mut u, 3, 2),
            Err(Error::RankDeficient { column: 1 })
        ));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let w: [f64; 9] = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        assert!((spectral_norm(&w, 3, 3, 1000, 1e-15) - 3.0).abs() < 1e-12);
    }
}
