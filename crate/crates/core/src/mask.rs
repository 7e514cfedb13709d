//! Attention visibility masks.

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

/// Additive value used for blocked positions when a mask is materialised as a
/// matrix added to attention logits. `exp(BLOCKED)` underflows to exactly 0.
pub const BLOCKED: f64 = -1e9;

/// Boolean `[queries, keys]` visibility matrix; `true` means the query may
/// attend to the key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        AttentionMask { rows, cols, allowed }
    }

    /// Lower-triangular mask: position `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Every query sees exactly the keys flagged in `visible`.
    pub fn key_padding(rows: usize, visible: &[bool]) -> Self {
        Self::from_fn(rows, visible.len(), |_, j| visible[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// `0` where visible, [`BLOCKED`] elsewhere.
    pub fn additive(&self) -> Mat {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { BLOCKED })
            .collect();
        Mat::from_vec(self.rows, self.cols, data)
    }
}
