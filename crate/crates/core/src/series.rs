//! Multivariate time series container.

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;

/// An `N × n` real sequence: one row per time point.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Matrix,
}

impl TimeSeries {
    pub fn new(values: Matrix) -> Self {
        Self { values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::new(Matrix::from_rows(rows)?))
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self::new(Matrix::zeros(len, dim))
    }

    /// Number of time points `N`.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of components `n`.
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        self.values.row_mut(t)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.col(i)
    }

    /// Drops the first `k` time points.
    pub fn skip(&self, k: usize) -> TimeSeries {
        TimeSeries::new(self.values.slice_rows(k.min(self.len()), self.len()))
    }

    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        TimeSeries::new(self.values.slice_rows(start, end))
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }

    /// Lag-embedded inputs for time points `order..N`.
    ///
    /// Row `r` (time `t = order + r`) is `[x_t, x_{t−1}, …, x_{t−order}]`
    /// when `include_current`, otherwise `[x_{t−1}, …, x_{t−order}]`.
    pub fn lagged(&self, order: usize, include_current: bool) -> Result<Matrix> {
        if order == 0 {
            return Err(Error::InvalidConfig("lag order must be >= 1".into()));
        }
        if self.len() <= order {
            return Err(shape_err(format!("more than {order} time points"), self.len()));
        }
        let n = self.dim();
        let first = if include_current { 0 } else { 1 };
        let width = (order + 1 - first) * n;
        let rows = self.len() - order;
        let mut m = Matrix::zeros(rows, width);
        for r in 0..rows {
            let t = r + order;
            let row = m.row_mut(r);
            for (k, lag) in (first..=order).enumerate() {
                row[k * n..(k + 1) * n].copy_from_slice(self.at(t - lag));
            }
        }
        Ok(m)
    }

    /// Per-component mean and standard deviation (population).
    pub fn standardization(&self) -> (Vec<f64>, Vec<f64>) {
        let means = self.values.col_means();
        let mut sd = vec![0.0; self.dim()];
        for t in 0..self.len() {
            for ((s, v), m) in sd.iter_mut().zip(self.at(t)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let n = self.len().max(1) as f64;
        let sd = sd.into_iter().map(|s| (s / n).sqrt()).collect();
        (means, sd)
    }
}

impl From<Matrix> for TimeSeries {
    fn from(values: Matrix) -> Self {
        Self::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagged_layout() {
        let x = TimeSeries::from_rows(&[vec![0.0, 10.0], vec![1.0, 11.0], vec![2.0, 12.0], vec![3.0, 13.0]]).unwrap();
        let m = x.lagged(1, true).unwrap();
        assert_eq!(m.shape(), (3, 4));
        assert_eq!(m.row(0), &[1.0, 11.0, 0.0, 10.0]);
        let m = x.lagged(2, false).unwrap();
        assert_eq!(m.row(1), &[2.0, 12.0, 1.0, 11.0]);
        assert!(x.lagged(4, true).is_err());
    }
}
