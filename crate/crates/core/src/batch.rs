/// A set of equal-length samples stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "sample dimension must be positive");
        Batch {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, samples: usize) -> Self {
        let mut b = Batch::new(dim);
        b.data.reserve(samples * dim);
        b
    }

    /// Builds a batch from rows; all rows must share one non-zero length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Option<Self> {
        let dim = rows.first()?.as_ref().len();
        if dim == 0 || rows.iter().any(|r| r.as_ref().len() != dim) {
            return None;
        }
        let mut b = Batch::with_capacity(dim, rows.len());
        for r in rows {
            b.push(r.as_ref());
        }
        Some(b)
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.dim, "sample dimension mismatch");
        self.data.extend_from_slice(sample);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Coordinate-wise sample mean, `None` when empty.
    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut sum = vec![0.0; self.dim];
        for x in self.iter() {
            for (s, v) in sum.iter_mut().zip(x) {
                *s += v;
            }
        }
        let n = self.len() as f64;
        Some(sum.into_iter().map(|s| s / n).collect())
    }
}
