//! FIFO memory bank of normalized logit rows.

use std::collections::VecDeque;

use rand::seq::index;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{normalize_rows, Normalization};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LogitQueue {
    capacity: usize,
    width: usize,
    rows: VecDeque<Vec<f64>>,
    labels: VecDeque<usize>,
}

impl LogitQueue {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(LogitQueue {
            capacity,
            width,
            rows: VecDeque::with_capacity(capacity),
            labels: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Labels of the stored rows, oldest first. Diagnostics only.
    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().copied()
    }

    /// Appends `rows` (copied) and evicts the oldest entries beyond capacity.
    pub fn enqueue_batch(&mut self, rows: &Tensor, labels: &[usize]) -> Result<()> {
        if rows.shape().len() != 2 || rows.cols() != self.width {
            return Err(Error::Shape {
                op: "enqueue_batch",
                lhs: rows.shape().to_vec(),
                rhs: vec![rows.rows(), self.width],
            });
        }
        if labels.len() != rows.rows() {
            return Err(Error::Shape {
                op: "enqueue_batch labels",
                lhs: rows.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let skip = rows.rows().saturating_sub(self.capacity);
        for r in skip..rows.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
                self.labels.pop_front();
            }
            self.rows.push_back(rows.row(r).to_vec());
            self.labels.push_back(labels[r]);
        }
        Ok(())
    }

    /// Snapshot of all stored rows as `[K' x C]`, oldest first.
    pub fn current_negatives(&self) -> Result<Tensor> {
        if self.rows.is_empty() {
            return Err(Error::EmptyQueue);
        }
        let mut data = Vec::with_capacity(self.rows.len() * self.width);
        for r in &self.rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![self.rows.len(), self.width], data)
    }

    /// Fills the queue with normalized logits of up to `capacity` randomly
    /// drawn training samples under `params`.
    pub fn warmup_fill(
        &mut self,
        data: &Dataset,
        params: &ModelParams,
        mode: Normalization,
        rng: &mut Rng,
    ) -> Result<()> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Empty("warmup_fill dataset"));
        }
        let take = (self.capacity - self.len().min(self.capacity)).min(n);
        let idx = index::sample(rng, n, take).into_vec();
        for chunk in idx.chunks(256) {
            let x = data.x.select_rows(chunk);
            let logits = params.logits(&x)?;
            let rows = normalize_rows(&logits, mode)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i].max(0) as usize).collect();
            self.enqueue_batch(&rows, &labels)?;
        }
        Ok(())
    }
}
