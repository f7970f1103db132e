//! Shared dense-value containers passed between subsystems.

use crate::error::{Error, Result};

/// Dense N×C×H×W float batch, row-major, the unit of training input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Vec<f32>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageBatch {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch {
                op: "ImageBatch::new",
                lhs: vec![n, c, h, w],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[((i * self.c + ch) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, ch: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[((i * self.c + ch) * self.h + y) * self.w + x]
    }

    /// Per-image slice of length C·H·W.
    pub fn image(&self, i: usize) -> &[f32] {
        let stride = self.c * self.h * self.w;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Reverses the batch axis: `out[i] = self[N−1−i]`.
    pub fn reversed(&self) -> Self {
        let stride = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.n).rev() {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        Self {
            data,
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
        }
    }
}

/// N×D embedding rows, the currency of all losses and the kNN monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub data: Vec<f32>,
    pub n: usize,
    pub d: usize,
}

impl EmbeddingBatch {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "EmbeddingBatch::new",
                lhs: vec![n, d],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { data, n, d })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Reverses the batch axis: `out[i] = self[N−1−i]`.
    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..self.n).rev() {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            n: self.n,
            d: self.d,
        }
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_deviation(&self) -> f32 {
        (0..self.n)
            .map(|i| {
                let norm = self.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                (norm - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }
}

/// Where a key embedding came from; the memory bank only accepts unmixed keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    Unmixed,
    Mixed,
}

/// Key embeddings carrying their provenance through the training step.
#[derive(Debug, Clone)]
pub struct TaggedKeys {
    pub keys: EmbeddingBatch,
    pub source: KeySource,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reversed_is_involution() {
        let b = ImageBatch::new(3, 1, 2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(b.reversed().reversed(), b);
        let e = EmbeddingBatch::new(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(e.reversed().reversed(), e);
    }

    #[test]
    fn reversed_single_row_unchanged() {
        let e = EmbeddingBatch::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.reversed(), e);
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        assert!(ImageBatch::new(2, 3, 4, 4, vec![0.0; 10]).is_err());
        assert!(EmbeddingBatch::new(2, 3, vec![0.0; 5]).is_err());
    }
}
