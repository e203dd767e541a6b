use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::sq_norm;

/// Two observation matrices with aligned rows: `x` is N×p, `y` is N×q.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl DataPair {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                context: "row counts of X and Y",
                expected: x.nrows(),
                found: y.nrows(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("non-finite entries".into()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Column-centered copy together with the removed means.
    pub fn centered(&self) -> (DataPair, DVector<f64>, DVector<f64>) {
        let (x, mx) = center_columns(&self.x);
        let (y, my) = center_columns(&self.y);
        (DataPair { x, y }, mx, my)
    }

    /// Rows selected by index (with repetition allowed).
    pub fn select_rows(&self, rows: &[usize]) -> DataPair {
        DataPair {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }

    pub(crate) fn sq_norms(&self) -> (f64, f64) {
        (sq_norm(&self.x), sq_norm(&self.y))
    }

    pub(crate) fn check_dims(&self, p: usize, q: usize) -> Result<()> {
        if self.p() != p {
            return Err(Error::DimensionMismatch {
                context: "columns of X",
                expected: p,
                found: self.p(),
            });
        }
        if self.q() != q {
            return Err(Error::DimensionMismatch {
                context: "columns of Y",
                expected: q,
                found: self.q(),
            });
        }
        Ok(())
    }
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let means = column_means(m);
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}
