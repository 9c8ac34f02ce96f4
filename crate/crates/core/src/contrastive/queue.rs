use crate::tensor::{norm, Real, Tensor, TensorError};

/// Fixed-capacity FIFO ring of unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue<T: Real = f32> {
    capacity: usize,
    dim: usize,
    data: Vec<T>,
    len: usize,
    /// Slot that the next enqueue writes.
    cursor: usize,
}

impl<T: Real> EmbeddingQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, TensorError> {
        if capacity == 0 || dim == 0 {
            return Err(TensorError::InvalidArgument("queue capacity and dim must be positive".into()));
        }
        Ok(Self { capacity, dim, data: vec![T::zero(); capacity * dim], len: 0, cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn check(&self, e: &[T]) -> Result<(), TensorError> {
        if e.len() != self.dim {
            return Err(TensorError::ShapeMismatch { op: "enqueue", detail: format!("queue dim {}, got {}", self.dim, e.len()) });
        }
        let n = norm(e).as_f64();
        if !((n - 1.0).abs() <= 1e-5) {
            return Err(TensorError::InvalidArgument(format!("queue entries must be unit-norm, got norm {n}")));
        }
        Ok(())
    }

    /// Appends `e`, evicting the oldest entry once full.
    pub fn enqueue(&mut self, e: &[T]) -> Result<(), TensorError> {
        self.check(e)?;
        self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(e);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Enqueues every row of a `[B, dim]` tensor, all or nothing.
    pub fn enqueue_rows(&mut self, rows: &Tensor<T>) -> Result<(), TensorError> {
        for row in rows.data().chunks(self.dim) {
            self.check(row)?;
        }
        for row in rows.data().chunks(self.dim) {
            self.enqueue(row)?;
        }
        Ok(())
    }

    /// Entry `i` in age order (0 = oldest).
    pub fn get(&self, i: usize) -> &[T] {
        assert!(i < self.len, "queue index {i} out of {}", self.len);
        let slot = (self.cursor + self.capacity - self.len + i) % self.capacity;
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Contents, oldest first, as a flat row-major buffer.
    pub fn to_rows(&self) -> Vec<T> {
        self.iter().flat_map(|r| r.iter().copied()).collect()
    }

    /// Rebuilds a queue from rows in age order, as written by [`EmbeddingQueue::to_rows`].
    pub fn from_rows(capacity: usize, dim: usize, rows: &[T]) -> Result<Self, TensorError> {
        let mut q = Self::new(capacity, dim)?;
        if !rows.len().is_multiple_of(dim) || rows.len() / dim > capacity {
            return Err(TensorError::InvalidArgument(format!("{} values do not form at most {capacity} rows of {dim}", rows.len())));
        }
        for row in rows.chunks(dim) {
            q.enqueue(row)?;
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(i: usize) -> [f64; 3] {
        let mut e = [0.0; 3];
        e[i % 3] = 1.0;
        e
    }

    #[test]
    fn fifo_eviction() {
        let mut q = EmbeddingQueue::<f64>::new(2, 3).unwrap();
        q.enqueue(&basis(0)).unwrap();
        assert_eq!(q.len(), 1);
        q.enqueue(&basis(1)).unwrap();
        q.enqueue(&basis(2)).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.get(0), basis(1));
        assert_eq!(q.get(1), basis(2));
    }

    #[test]
    fn rejects_bad_entries() {
        let mut q = EmbeddingQueue::<f64>::new(2, 3).unwrap();
        assert!(q.enqueue(&[1.0, 0.0]).is_err());
        assert!(q.enqueue(&[1.0, 1.0, 0.0]).is_err());
        let rows = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(q.enqueue_rows(&rows).is_err());
        assert!(q.is_empty());
        assert!(EmbeddingQueue::<f64>::new(0, 3).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let mut q = EmbeddingQueue::<f64>::new(3, 3).unwrap();
        for i in 0..5 {
            q.enqueue(&basis(i)).unwrap();
        }
        let r = EmbeddingQueue::from_rows(3, 3, &q.to_rows()).unwrap();
        assert_eq!(r.to_rows(), q.to_rows());
    }

    proptest! {
        #[test]
        fn matches_replay(cap in 1usize..12, ids in proptest::collection::vec(0usize..1000, 0..40)) {
            let d = 2;
            let vecs: Vec<[f64; 2]> = ids.iter().map(|&i| { let a = i as f64; [a.cos(), a.sin()] }).collect();
            let mut q = EmbeddingQueue::<f64>::new(cap, d).unwrap();
            for (n, v) in vecs.iter().enumerate() {
                q.enqueue(v).unwrap();
                let start = (n + 1).saturating_sub(cap);
                prop_assert_eq!(q.len(), n + 1 - start);
                for (i, want) in vecs[start..=n].iter().enumerate() {
                    prop_assert_eq!(q.get(i), &want[..]);
                }
            }
        }
    }
}
