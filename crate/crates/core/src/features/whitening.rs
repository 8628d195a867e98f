use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{mismatch, Error, Result};
use crate::matrix::Matrix;

/// Eigenvalues below this fraction of the largest are clamped before inverse-sqrt scaling.
pub const EIGEN_FLOOR_RATIO: f64 = 1e-10;

/// PCA whitening: `y = (x − mean) · projection`, with `projection` of shape `D_in × D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    mean: Vec<f64>,
    projection: Matrix,
}

impl WhiteningModel {
    pub fn new(mean: Vec<f64>, projection: Matrix) -> Result<Self> {
        if projection.rows() != mean.len() {
            return Err(mismatch("whitening projection rows", mean.len(), projection.rows()));
        }
        if projection.cols() == 0 || projection.cols() > projection.rows() {
            return Err(Error::InvalidConfig(format!(
                "whitening output dim {} must be in 1..={}",
                projection.cols(),
                projection.rows()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || !projection.is_finite() {
            return Err(Error::MalformedInput("whitening model has non-finite entries".into()));
        }
        Ok(Self { mean, projection })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(mismatch("whitening input", self.input_dim(), v.len()));
        }
        let mut out = alloc::vec![0.0; self.output_dim()];
        for (i, (&x, &mu)) in v.iter().zip(&self.mean).enumerate() {
            let c = x - mu;
            if c == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.projection.row(i)) {
                *o += c * p;
            }
        }
        Ok(out)
    }
}

/// Fits PCA whitening on `samples` (population covariance, `1/n`).
///
/// Components are ordered by decreasing eigenvalue and each eigenvector's sign
/// is fixed so that its largest-magnitude entry is positive, which makes the
/// model reproducible across eigensolvers.
pub fn fit_whitening(samples: &[Vec<f64>], output_dim: usize) -> Result<WhiteningModel> {
    let n = samples.len();
    if n <= output_dim {
        return Err(Error::InsufficientData { needed: output_dim, got: n });
    }
    let dim = samples[0].len();
    if output_dim == 0 || output_dim > dim {
        return Err(Error::InvalidConfig(format!(
            "whitening output dim {output_dim} must be in 1..={dim}"
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(mismatch("whitening sample", dim, bad.len()));
    }

    let mut mean = alloc::vec![0.0; dim];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = alloc::vec![0.0; dim];
    for s in samples {
        centered.iter_mut().zip(s.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let largest = eig.eigenvalues[order[0]];
    if largest.is_nan() || largest <= 0.0 {
        return Err(Error::Degenerate("whitening samples have zero variance".into()));
    }
    let floor = largest * EIGEN_FLOOR_RATIO;

    let mut projection = Matrix::zeros(dim, output_dim);
    for (k, &idx) in order.iter().take(output_dim).enumerate() {
        let lambda = eig.eigenvalues[idx].max(floor);
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / libm::sqrt(lambda);
        for i in 0..dim {
            projection.set(i, k, col[i] * scale);
        }
    }
    WhiteningModel::new(mean, projection)
}
