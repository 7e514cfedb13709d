//! Fixed-capacity FIFO of unit-normalized representations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub report_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationQueue {
    capacity: usize,
    dim: usize,
    /// Oldest first.
    entries: VecDeque<QueueEntry>,
}

/// A retrieved queue entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    pub report_id: String,
    pub score: f64,
}

impl RepresentationQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(
                "queue capacity and dimension must be positive".into(),
            ));
        }
        Ok(RepresentationQueue {
            capacity,
            dim,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends `batch` in order, evicting the oldest entries beyond capacity.
    /// Embeddings are normalized to unit length on the way in; the whole batch
    /// is rejected if any dimension is wrong or any embedding is zero.
    pub fn enqueue(&mut self, batch: Vec<(Vec<f64>, String)>) -> Result<()> {
        let mut normalized = Vec::with_capacity(batch.len());
        for (emb, id) in batch {
            if emb.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: emb.len(),
                });
            }
            let norm = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Config(format!(
                    "cannot enqueue embedding with norm {norm}"
                )));
            }
            normalized.push(QueueEntry {
                embedding: emb.iter().map(|x| x / norm).collect(),
                report_id: id,
            });
        }
        for entry in normalized {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(entry);
        }
        Ok(())
    }

    /// Rebuilds a queue from stored entries without renormalizing them.
    pub fn restore(capacity: usize, dim: usize, entries: Vec<QueueEntry>) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        if entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "{} queue entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        if let Some(e) = entries.iter().find(|e| e.embedding.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.embedding.len(),
            });
        }
        q.entries = entries.into();
        Ok(q)
    }

    /// Removes and returns all entries, oldest first.
    pub fn drain(&mut self) -> Vec<QueueEntry> {
        self.entries.drain(..).collect()
    }

    /// `[len, dim]` matrix of embeddings, oldest first.
    pub fn embedding_matrix(&self) -> Mat {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(&e.embedding);
        }
        Mat::from_vec(self.entries.len(), self.dim, data)
    }

    /// The `k` entries with the highest dot product with `query`; ties go to
    /// the newer entry. Fewer than `k` entries yields all of them.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Retrieved>> {
        self.top_k_filtered(query, k, |_| true)
    }

    /// [`top_k`](Self::top_k) over entries accepted by `keep`.
    pub fn top_k_filtered(
        &self,
        query: &[f64],
        k: usize,
        keep: impl Fn(&QueueEntry) -> bool,
    ) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::Config("top-k retrieval needs k >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if self.entries.is_empty() {
            return Err(Error::ColdQueue);
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| keep(e))
            .map(|(i, e)| (dot(&e.embedding, query), i))
            .collect();
        if scored.is_empty() {
            return Err(Error::ColdQueue);
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Retrieved {
                report_id: self.entries[i].report_id.clone(),
                score,
            })
            .collect())
    }
}

/// Ids of the top-`k` entries for `query`.
pub fn top_k_retrieve(q: &RepresentationQueue, query: &[f64], k: usize) -> Result<Vec<String>> {
    Ok(q.top_k(query, k)?.into_iter().map(|r| r.report_id).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
