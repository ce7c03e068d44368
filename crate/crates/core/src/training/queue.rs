use ndarray::{s, Array2, ArrayView1, ArrayView2};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-3;

/// Fixed-capacity FIFO of unit image embeddings from the momentum encoder,
/// stored as a ring buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    buffer: Array2<f64>,
    len: usize,
    cursor: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryQueue {
            buffer: Array2::zeros((capacity, dim)),
            len: 0,
            cursor: 0,
        }
    }

    /// A full queue of random unit vectors, the usual starting state, so the
    /// image-level loss sees a constant number of negatives from step 0.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let mut buffer = Array2::from_shape_simple_fn((capacity, dim), || {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        for mut row in buffer.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row /= n;
        }
        MemoryQueue {
            buffer,
            len: capacity,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of the slot the next entry goes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Appends one embedding, evicting the oldest when full.
    pub fn push(&mut self, v: ArrayView1<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "queue holds {}-d embeddings, got {}",
                self.dim(),
                v.len()
            )));
        }
        let n = v.dot(&v).sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!("queue entries must be unit-norm, got norm {n}")));
        }
        if self.capacity() == 0 {
            return Ok(());
        }
        self.buffer.row_mut(self.cursor).assign(&v);
        self.cursor = (self.cursor + 1) % self.capacity();
        self.len = (self.len + 1).min(self.capacity());
        Ok(())
    }

    pub fn extend(&mut self, rows: ArrayView2<f64>) -> Result<()> {
        rows.rows().into_iter().try_for_each(|r| self.push(r))
    }

    /// Stored entries in slot order; the order is irrelevant as negatives.
    pub fn negatives(&self) -> ArrayView2<'_, f64> {
        self.buffer.slice(s![..self.len, ..])
    }

    /// Stored entries from oldest to newest.
    pub fn ordered(&self) -> Array2<f64> {
        let start = if self.len < self.capacity() { 0 } else { self.cursor };
        let mut out = Array2::zeros((self.len, self.dim()));
        for i in 0..self.len {
            out.row_mut(i)
                .assign(&self.buffer.row((start + i) % self.capacity().max(1)));
        }
        out
    }
}
