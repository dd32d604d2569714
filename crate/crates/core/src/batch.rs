//! Flat row-major batches of fixed-dimension vectors.

use crate::{Error, Result};

/// A batch of `count` vectors of dimension `dim`, stored contiguously
/// row-major. The layout keeps hot loops (network evaluation, sampling
/// steps) on dense slices without per-row allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    /// Empty batch of the given dimension.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "batch dimension must be positive");
        Batch { dim, data: Vec::new() }
    }

    /// Batch of `count` zero vectors.
    pub fn zeros(count: usize, dim: usize) -> Self {
        assert!(dim > 0, "batch dimension must be positive");
        Batch { dim, data: vec![0.0; count * dim] }
    }

    /// Wraps an existing flat buffer; `data.len()` must divide evenly by `dim`.
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "flat buffer of length {} is not a whole number of rows of dimension {}",
                data.len(),
                dim
            )));
        }
        Ok(Batch { dim, data })
    }

    /// Single-row batch borrowing nothing; convenient in tests.
    pub fn from_row(row: &[f64]) -> Self {
        Batch { dim: row.len(), data: row.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row dimension mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-wise concatenation: `[a_i ; b_i]` for every row i.
    pub fn concat_rows(a: &Batch, b: &Batch) -> Result<Batch> {
        if a.count() != b.count() {
            return Err(Error::Shape(format!(
                "cannot concatenate batches with {} and {} rows",
                a.count(),
                b.count()
            )));
        }
        let mut out = Batch::new(a.dim + b.dim);
        for (ra, rb) in a.rows().zip(b.rows()) {
            out.data.extend_from_slice(ra);
            out.data.extend_from_slice(rb);
        }
        Ok(out)
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
