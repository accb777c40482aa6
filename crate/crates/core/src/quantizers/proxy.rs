use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Scalar};

/// `‖X(W − Ŵ)ᵀ‖_F²` accumulated in `f64`.
pub fn proxy_loss<T: Scalar>(w: &Matrix<T>, w_hat: &Matrix<T>, x: &Matrix<T>) -> Result<f64> {
    w.same_shape(w_hat)?;
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "activations have {} features, weights have {} inputs",
            x.cols(),
            w.cols()
        )));
    }
    let diff: Vec<Vec<f64>> = (0..w.rows())
        .map(|r| w.row(r).iter().zip(w_hat.row(r)).map(|(&a, &b)| a.widen() - b.widen()).collect())
        .collect();
    let mut total = 0.0;
    for s in 0..x.rows() {
        let xs: Vec<f64> = x.row(s).iter().map(|v| v.widen()).collect();
        for d in &diff {
            let y = dot(&xs, d);
            total += y * y;
        }
    }
    Ok(total)
}

/// Same objective through the Gram matrix `G = XᵀX`: `Σ_r d_r G d_rᵀ`.
pub(crate) fn proxy_loss_gram(diff: &[f64], rows: usize, gram: &Matrix<f64>) -> f64 {
    let n = gram.cols();
    debug_assert_eq!(diff.len(), rows * n);
    let mut total = 0.0;
    for r in 0..rows {
        let d = &diff[r * n..(r + 1) * n];
        for i in 0..n {
            if d[i] == 0.0 {
                continue;
            }
            total += d[i] * dot(gram.row(i), d);
        }
    }
    total.max(0.0)
}

pub(crate) fn weight_diff<T: Scalar>(w: &Matrix<T>, w_hat: &Matrix<T>) -> Vec<f64> {
    w.data().iter().zip(w_hat.data()).map(|(&a, &b)| a.widen() - b.widen()).collect()
}
