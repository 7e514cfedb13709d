//! Word vectors for graph node initialisation.
//!
//! Node features are the mean of the entity's word vectors plus a level
//! vector. A table can be loaded from a text file; the desk-scale default
//! derives a deterministic pseudo-random vector for each word from a seed.
//!
//! Text format, one row per line, whitespace separated:
//!
//! ```text
//! <level:global> 0.1 -0.3 ...
//! <level:organ> ...
//! <level:finding> ...
//! <pad> ...
//! effusion 0.02 0.4 ...
//! ```
//!
//! The three level rows are required; `<pad>` defaults to zeros.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, NodeLevel};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddingTable {
    dim: usize,
    words: HashMap<String, Vec<f64>>,
    levels: [Vec<f64>; 3],
    pad: Vec<f64>,
    /// When set, words missing from `words` get a vector derived from this
    /// seed instead of failing.
    hash_seed: Option<u64>,
}

fn hashed_vector(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(s);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl NodeEmbeddingTable {
    /// Seeded table: every word resolves to a fixed pseudo-random vector.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        NodeEmbeddingTable {
            dim,
            words: HashMap::new(),
            levels: [
                hashed_vector(seed, "<level:global>", dim),
                hashed_vector(seed, "<level:organ>", dim),
                hashed_vector(seed, "<level:finding>", dim),
            ],
            pad: vec![0.0; dim],
            hash_seed: Some(seed),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut words = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| err(i + 1, e.to_string()))?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(err(i + 1, format!("expected {d} values, found {}", vals.len())))
                }
                _ => {}
            }
            words.insert(key.to_lowercase(), vals);
        }
        let dim = dim
            .filter(|&d| d > 0)
            .ok_or_else(|| err(1, "empty table".into()))?;
        let mut take = |k: &str| words.remove(k).ok_or_else(|| err(1, format!("missing row {k}")));
        let levels = [
            take("<level:global>")?,
            take("<level:organ>")?,
            take("<level:finding>")?,
        ];
        let pad = words.remove("<pad>").unwrap_or_else(|| vec![0.0; dim]);
        Ok(NodeEmbeddingTable {
            dim,
            words,
            levels,
            pad,
            hash_seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word(&self, w: &str) -> Option<Vec<f64>> {
        match self.words.get(w) {
            Some(v) => Some(v.clone()),
            None => self.hash_seed.map(|s| hashed_vector(s, w, self.dim)),
        }
    }

    pub fn level(&self, level: NodeLevel) -> &[f64] {
        match level {
            NodeLevel::Global => &self.levels[0],
            NodeLevel::Organ => &self.levels[1],
            NodeLevel::Finding => &self.levels[2],
            NodeLevel::Pad => &self.pad,
        }
    }
}

/// `[nodes, dim]` features: mean word vector plus level vector per real
/// node; pad rows hold the pad vector.
pub fn init_node_features(g: &KnowledgeGraph, table: &NodeEmbeddingTable) -> Result<Mat> {
    let dim = table.dim();
    let mut out = Mat::zeros(g.len(), dim);
    for (i, node) in g.nodes().iter().enumerate() {
        let row = out.row_mut(i);
        if node.level == NodeLevel::Pad {
            row.copy_from_slice(table.level(NodeLevel::Pad));
            continue;
        }
        let mut count = 0usize;
        for w in node.entity.words() {
            let v = table
                .word(w)
                .ok_or_else(|| Error::UnresolvableEntity(node.entity.to_string()))?;
            for (r, x) in row.iter_mut().zip(&v) {
                *r += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::UnresolvableEntity(node.entity.to_string()));
        }
        let level = table.level(node.level);
        for (r, l) in row.iter_mut().zip(level) {
            *r = *r / count as f64 + l;
        }
    }
    Ok(out)
}
