//! Fixed-capacity FIFO queue of negative keys. Only unmixed, unit-norm keys
//! are accepted — mixture provenance is threaded through [`TaggedKeys`] so a
//! mixed embedding can never silently become a negative.

use crate::error::{Error, Result};
use crate::types::{EmbeddingBatch, KeySource, TaggedKeys};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    /// Ring storage, `len·dim` floats; `cursor` points at the oldest slot
    /// once the ring is full.
    data: Vec<f32>,
    cursor: usize,
    len: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0);
        Self {
            dim,
            capacity,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// FIFO append of every row in `keys`, evicting the oldest beyond
    /// capacity. Rejects mixed-provenance and non-unit keys.
    pub fn enqueue(&mut self, keys: &TaggedKeys) -> Result<()> {
        if keys.source != KeySource::Unmixed {
            return Err(Error::invalid(
                "enqueue",
                "memory bank only accepts unmixed keys",
            ));
        }
        self.enqueue_rows(&keys.keys)
    }

    fn enqueue_rows(&mut self, keys: &EmbeddingBatch) -> Result<()> {
        if keys.d != self.dim {
            return Err(Error::ShapeMismatch {
                op: "enqueue",
                lhs: vec![self.capacity, self.dim],
                rhs: vec![keys.n, keys.d],
            });
        }
        for i in 0..keys.n {
            let row = keys.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::NotUnitNorm {
                    op: "enqueue",
                    row: i,
                    norm,
                });
            }
            self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            if self.len < self.capacity {
                self.len += 1;
            }
        }
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn snapshot(&self) -> EmbeddingBatch {
        let mut data = Vec::with_capacity(self.len * self.dim);
        let start = if self.len < self.capacity {
            0
        } else {
            self.cursor
        };
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            data.extend_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
        }
        EmbeddingBatch {
            data,
            n: self.len,
            d: self.dim,
        }
    }

    /// Serialize contents (oldest first) for checkpointing.
    pub fn to_records(&self) -> (Vec<f32>, usize) {
        let snap = self.snapshot();
        (snap.data, snap.n)
    }

    /// Rebuild a bank from checkpointed contents.
    pub fn from_rows(capacity: usize, dim: usize, rows: &[f32]) -> Result<Self> {
        if rows.len() % dim != 0 || rows.len() / dim > capacity {
            return Err(Error::Format(format!(
                "bank payload of {} floats does not fit capacity {capacity} × dim {dim}",
                rows.len()
            )));
        }
        let mut bank = Self::new(capacity, dim);
        let batch = EmbeddingBatch {
            data: rows.to_vec(),
            n: rows.len() / dim,
            d: dim,
        };
        bank.enqueue_rows(&batch)?;
        Ok(bank)
    }
}
