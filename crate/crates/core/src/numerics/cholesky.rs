use super::{Matrix, Scalar};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-5;

/// Absolute shift `damping · mean(diag A)`.
pub fn damping_shift<T: Scalar>(a: &Matrix<T>, damping: f64) -> f64 {
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a.get(i, i).widen()).sum::<f64>() / n as f64;
    damping * mean_diag
}

fn check_square_symmetric<T: Scalar>(a: &Matrix<T>) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let scale = a.data().iter().map(|v| v.widen().abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j).widen() - a.get(j, i).widen()).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Lower factor of `A + λI` in `f64`, reading only the lower triangle.
pub(crate) fn cholesky_f64<T: Scalar>(a: &Matrix<T>, shift: f64) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = a.get(j, j).widen() + shift;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d.is_nan() || d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { column: j, pivot: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j).widen();
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Lower-triangular `L` with `L·Lᵀ = A + damping·mean(diag A)·I`.
pub fn cholesky_spd<T: Scalar>(a: &Matrix<T>, damping: f64) -> Result<Matrix<T>> {
    check_square_symmetric(a)?;
    if damping < 0.0 {
        return Err(Error::InvalidArgument(format!("damping must be non-negative, got {damping}")));
    }
    let shift = damping_shift(a, damping);
    let l = cholesky_f64(a, shift)?;
    Ok(Matrix::from_parts(a.rows(), a.rows(), l.into_iter().map(T::from_wide).collect()))
}

/// Inverse of a lower-triangular factor, row-major `n×n`.
pub(crate) fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0f64; n * n];
    for c in 0..n {
        inv[c * n + c] = 1.0 / l[c * n + c];
        for r in (c + 1)..n {
            let mut s = 0.0;
            for k in c..r {
                s += l[r * n + k] * inv[k * n + c];
            }
            inv[r * n + c] = -s / l[r * n + r];
        }
    }
    inv
}

/// `(A + λI)⁻¹` in `f64` via `L⁻ᵀ·L⁻¹`.
pub(crate) fn invert_spd_f64<T: Scalar>(a: &Matrix<T>, shift: f64) -> Result<Vec<f64>> {
    let n = a.rows();
    let l = cholesky_f64(a, shift)?;
    let li = invert_lower(&l, n);
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            // (L⁻ᵀ L⁻¹)_ij = Σ_k Li[k,i]·Li[k,j], k ≥ max(i, j)
            let s: f64 = (i..n).map(|k| li[k * n + i] * li[k * n + j]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(out)
}

/// `B = (A + damping·mean(diag A)·I)⁻¹` for symmetric positive definite `A`.
pub fn invert_spd<T: Scalar>(a: &Matrix<T>, damping: f64) -> Result<Matrix<T>> {
    check_square_symmetric(a)?;
    if damping < 0.0 {
        return Err(Error::InvalidArgument(format!("damping must be non-negative, got {damping}")));
    }
    let shift = damping_shift(a, damping);
    let inv = invert_spd_f64(a, shift)?;
    Ok(Matrix::from_parts(a.rows(), a.rows(), inv.into_iter().map(T::from_wide).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn_matrix, RngStream};

    fn random_spd(seed: u64, n: usize) -> Matrix<f64> {
        let m: Matrix<f64> = randn_matrix(&mut RngStream::new(seed), n, n, 1.0).unwrap();
        let mut a = m.matmul_transposed(&m).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        a
    }

    fn shifted(a: &Matrix<f64>, damping: f64) -> Matrix<f64> {
        let shift = damping_shift(a, damping);
        let mut s = a.clone();
        for i in 0..a.rows() {
            s.set(i, i, s.get(i, i) + shift);
        }
        s
    }

    #[test]
    fn identity_factor() {
        let l = cholesky_spd(&Matrix::<f64>::identity(3), 0.0).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn hand_two_by_two() {
        let a = Matrix::<f64>::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky_spd(&a, 0.0).unwrap();
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(0, 1), 0.0);
        assert_eq!(l.get(1, 0), 1.0);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn damping_is_relative_to_mean_diagonal() {
        let l = cholesky_spd(&Matrix::<f64>::identity(2), 0.01).unwrap();
        assert!((l.get(0, 0) - 1.01f64.sqrt()).abs() < 1e-15);
        assert!((l.get(1, 1) - 1.01f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(1, 0), 0.0);
    }

    #[test]
    fn reports_failing_column() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky_spd(&a, 0.0) {
            Err(Error::NotPositiveDefinite { column, .. }) => assert_eq!(column, 1),
            other => panic!("unexpected {other:?}"),
        }
        let rect = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(cholesky_spd(&rect, 0.0), Err(Error::NotSquare { .. })));
        let asym = Matrix::<f64>::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_spd(&asym, 0.0), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn reconstruction_round_trip() {
        for seed in 0..1000 {
            let n = 1 + (seed as usize % 9);
            let a = random_spd(seed, n);
            let damping = if seed % 2 == 0 { 0.0 } else { 0.01 };
            let l = cholesky_spd(&a, damping).unwrap();
            for r in 0..n {
                for c in (r + 1)..n {
                    assert_eq!(l.get(r, c), 0.0);
                }
            }
            let target = shifted(&a, damping);
            let err = l.matmul_transposed(&l).unwrap().sub(&target).unwrap().frobenius_norm();
            assert!(err / target.frobenius_norm() <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(invert_spd(&Matrix::<f64>::identity(4), 0.0).unwrap(), Matrix::identity(4));
        let b = invert_spd(&Matrix::<f64>::from_diag(&[2.0, 4.0]), 0.0).unwrap();
        assert!(b.max_abs_diff(&Matrix::from_diag(&[0.5, 0.25])).unwrap() < 1e-15);
        let a = random_spd(42, 8);
        let b = invert_spd(&a, 0.0).unwrap();
        let err = a.matmul(&b).unwrap().sub(&Matrix::identity(8)).unwrap().frobenius_norm();
        assert!(err <= 1e-4 * 8.0, "{err}");
    }

    #[test]
    fn inverse_with_damping_f32() {
        let a: Matrix<f32> = random_spd(5, 6).cast();
        let b = invert_spd(&a, 0.05).unwrap();
        let target = shifted(&a.cast(), 0.05);
        let err = target.matmul(&b.cast()).unwrap().sub(&Matrix::identity(6)).unwrap().frobenius_norm();
        assert!(err <= 1e-4 * 6.0, "{err}");
    }
}
