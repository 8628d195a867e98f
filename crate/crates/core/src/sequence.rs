use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

/// An `f × d` sequence of frame descriptors, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptorSequence(Matrix);

impl FrameDescriptorSequence {
    pub fn new(rows: Matrix) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(Error::MalformedInput(format!(
                "frame sequence must be non-empty, got {}x{}",
                rows.rows(),
                rows.cols()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::MalformedInput("frame sequence contains non-finite values".into()));
        }
        Ok(Self(rows))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn rows(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator {
        self.0.row_iter()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Largest deviation of any row norm from one.
    pub fn max_unit_norm_error(&self) -> f64 {
        self.rows().map(|r| libm::fabs(norm(r) - 1.0)).fold(0.0, f64::max)
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::OutOfRange(format!(
                "segment [{start}, {}) of a {}-frame sequence",
                start + len,
                self.frames()
            )));
        }
        let d = self.dim();
        let data: Vec<f64> = self.0.as_slice()[start * d..(start + len) * d].to_vec();
        Self::new(Matrix::from_vec(len, d, data)?)
    }
}
