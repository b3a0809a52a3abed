//! Fixed-capacity FIFO queues of unit-norm embeddings.

use crate::error::{Error, Result};
use crate::numerics::{assert_unit_rows, Mat};

/// Ring buffer holding the `capacity` most recently enqueued unit vectors.
#[derive(Debug, Clone)]
pub struct InstanceQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    /// Slot the next row is written to.
    cursor: usize,
    fill: usize,
}

impl InstanceQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue needs positive capacity and dim, got {capacity}x{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    /// True once the queue holds at least `capacity / 4` entries (and at least one).
    pub fn is_warm(&self) -> bool {
        self.fill >= (self.capacity / 4).max(1)
    }

    /// Appends rows in order, evicting the oldest entries once full.
    pub fn enqueue_batch(&mut self, batch: &Mat) -> Result<()> {
        if batch.rows() > 0 && batch.cols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: batch.cols(),
            });
        }
        assert_unit_rows(batch)?;
        for row in batch.row_iter() {
            let start = self.cursor * self.dim;
            self.data[start..start + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Owned snapshot of the stored rows, oldest first.
    pub fn as_matrix(&self) -> Result<Mat> {
        if self.fill == 0 {
            return Err(Error::EmptyQueue);
        }
        let oldest = if self.fill < self.capacity { 0 } else { self.cursor };
        let mut data = Vec::with_capacity(self.fill * self.dim);
        for k in 0..self.fill {
            let slot = (oldest + k) % self.capacity;
            data.extend_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
        }
        Mat::new(self.fill, self.dim, data)
    }
}
