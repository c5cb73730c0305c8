use nalgebra::{DMatrix, DVector};

use super::TrainError;
use crate::numerics::Tensor;

/// Ordinary least squares `y ~ [1, x, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub intercept: f64,
    pub coef_x: Vec<f64>,
    pub coef_t: f64,
}

impl LeastSquaresFit {
    /// Fits on the rows `ids` through an SVD solve, which also copes with
    /// rank-deficient designs.
    pub fn fit(x: &Tensor, t: &[f64], y: &[f64], ids: &[usize]) -> Result<Self, TrainError> {
        let d = x.cols();
        if t.len() != x.rows() || y.len() != x.rows() {
            return Err(TrainError::SizeMismatch(t.len(), x.rows()));
        }
        if ids.is_empty() {
            return Err(TrainError::LeastSquares("no rows to fit".into()));
        }
        let design = DMatrix::from_fn(ids.len(), d + 2, |r, c| {
            let i = ids[r];
            match c {
                0 => 1.0,
                c if c <= d => x.get(i, c - 1),
                _ => t[i],
            }
        });
        let target = DVector::from_iterator(ids.len(), ids.iter().map(|&i| y[i]));
        let beta = design
            .svd(true, true)
            .solve(&target, 1e-10)
            .map_err(|e| TrainError::LeastSquares(e.to_string()))?;
        Ok(Self {
            intercept: beta[0],
            coef_x: beta.iter().skip(1).take(d).copied().collect(),
            coef_t: beta[d + 1],
        })
    }

    pub fn predict(&self, x: &[f64], t: f64) -> f64 {
        self.intercept + self.coef_x.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.coef_t * t
    }

    /// Prediction at `t = 1` minus prediction at `t = 0`: the treatment
    /// coefficient for every node.
    pub fn effects(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| self.predict(x.row(i), 1.0) - self.predict(x.row(i), 0.0))
            .collect()
    }
}

/// Per-node effect estimates of the least-squares baseline fit on `train`.
pub fn least_squares_effect(x: &Tensor, t: &[f64], y: &[f64], train: &[usize]) -> Result<Vec<f64>, TrainError> {
    Ok(LeastSquaresFit::fit(x, t, y, train)?.effects(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_model() {
        let x = Tensor::from_fn(20, 2, |i, j| ((i * 2 + j) as f64 * 0.7).sin());
        let t: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let y: Vec<f64> = (0..20)
            .map(|i| 0.5 + 2.0 * x.get(i, 0) - 1.0 * x.get(i, 1) + 3.0 * t[i])
            .collect();
        let ids: Vec<usize> = (0..20).collect();
        let fit = LeastSquaresFit::fit(&x, &t, &y, &ids).unwrap();
        assert!((fit.intercept - 0.5).abs() < 1e-10);
        assert!((fit.coef_x[0] - 2.0).abs() < 1e-10);
        assert!((fit.coef_x[1] + 1.0).abs() < 1e-10);
        assert!((fit.coef_t - 3.0).abs() < 1e-10);
        assert!(fit.effects(&x).iter().all(|&e| (e - 3.0).abs() < 1e-10));
    }

    #[test]
    fn empty_rows_error() {
        let x = Tensor::zeros(2, 1);
        assert!(LeastSquaresFit::fit(&x, &[0.0, 1.0], &[0.0, 1.0], &[]).is_err());
    }
}
