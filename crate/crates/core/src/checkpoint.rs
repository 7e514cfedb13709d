//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `KGRCKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order. The header records the
//! config hash and a SHA-256 digest of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::queue::{QueueEntry, RepresentationQueue};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"KGRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    report_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    epoch: usize,
    adam_step: u64,
    best_cider: Option<f64>,
    payload_sha256: String,
    tensors: Vec<TensorMeta>,
    image_queue: QueueMeta,
    report_queue: QueueMeta,
}

/// Everything needed to resume training or evaluate exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub best_cider: Option<f64>,
    pub params: Vec<(String, Mat)>,
    pub momentum: Vec<(String, Mat)>,
    pub adam_step: u64,
    pub adam_m: Vec<Mat>,
    pub adam_v: Vec<Mat>,
    pub image_queue: RepresentationQueue,
    pub report_queue: RepresentationQueue,
}

fn named(store: &ParamStore) -> Vec<(String, Mat)> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        config_hash: &str,
        step: u64,
        epoch: usize,
        best_cider: Option<f64>,
        state: &ModelState,
        opt: &AdamW,
        image_queue: &RepresentationQueue,
        report_queue: &RepresentationQueue,
    ) -> Self {
        let (m, v) = opt.moments();
        Checkpoint {
            config_hash: config_hash.to_string(),
            step,
            epoch,
            best_cider,
            params: named(&state.params),
            momentum: named(&state.momentum),
            adam_step: opt.steps(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            image_queue: image_queue.clone(),
            report_queue: report_queue.clone(),
        }
    }

    /// Copies parameters and momentum weights into `state`, checking names
    /// and shapes.
    pub fn apply_to(&self, state: &mut ModelState) -> Result<()> {
        for (store, saved) in [
            (&mut state.params, &self.params),
            (&mut state.momentum, &self.momentum),
        ] {
            if store.len() != saved.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} tensors, model has {}",
                    saved.len(),
                    store.len()
                )));
            }
            for (name, value) in saved {
                store
                    .assign(name, value.clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        opt.restore(self.adam_step, self.adam_m.clone(), self.adam_v.clone())
    }

    /// Fails with [`Error::HashMismatch`] unless the recorded hash equals
    /// `expected`.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                expected: expected.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |group: &str, name: String, m: &Mat| {
            tensors.push(TensorMeta {
                group: group.into(),
                name,
                rows: m.rows(),
                cols: m.cols(),
            });
            for x in m.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (n, m) in &self.params {
            push("param", n.clone(), m);
        }
        for (n, m) in &self.momentum {
            push("momentum", n.clone(), m);
        }
        for (i, m) in self.adam_m.iter().enumerate() {
            push("adam_m", i.to_string(), m);
        }
        for (i, m) in self.adam_v.iter().enumerate() {
            push("adam_v", i.to_string(), m);
        }
        push("queue", "image".into(), &self.image_queue.embedding_matrix());
        push("queue", "report".into(), &self.report_queue.embedding_matrix());
        let queue_meta = |q: &RepresentationQueue| QueueMeta {
            capacity: q.capacity(),
            dim: q.dim(),
            report_ids: q.entries().map(|e| e.report_id.clone()).collect(),
        };
        let header = Header {
            config_hash: self.config_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            adam_step: self.adam_step,
            best_cider: self.best_cider,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors,
            image_queue: queue_meta(&self.image_queue),
            report_queue: queue_meta(&self.report_queue),
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(24 + header.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload digest mismatch"));
        }
        let mut offset = 0usize;
        let mut tensors: Vec<(TensorMeta, Mat)> = Vec::new();
        for meta in header.tensors {
            let n = meta.rows * meta.cols;
            let end = offset + 8 * n;
            if end > payload.len() {
                return Err(bad("truncated payload"));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            let m = Mat::from_vec(meta.rows, meta.cols, data);
            tensors.push((meta, m));
        }
        if offset != payload.len() {
            return Err(bad("trailing payload bytes"));
        }
        let take = |group: &str| -> Vec<(String, Mat)> {
            tensors
                .iter()
                .filter(|(m, _)| m.group == group)
                .map(|(m, t)| (m.name.clone(), t.clone()))
                .collect()
        };
        let queue = |meta: &QueueMeta, name: &str| -> Result<RepresentationQueue> {
            let (_, mat) = take("queue")
                .into_iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| bad("missing queue tensor"))?;
            if mat.rows() != meta.report_ids.len() {
                return Err(bad("queue ids do not match embeddings"));
            }
            let entries = meta
                .report_ids
                .iter()
                .enumerate()
                .map(|(i, id)| QueueEntry {
                    embedding: mat.row(i).to_vec(),
                    report_id: id.clone(),
                })
                .collect();
            RepresentationQueue::restore(meta.capacity, meta.dim, entries)
        };
        let strip = |v: Vec<(String, Mat)>| v.into_iter().map(|(_, m)| m).collect::<Vec<_>>();
        Ok(Checkpoint {
            config_hash: header.config_hash,
            step: header.step,
            epoch: header.epoch,
            best_cider: header.best_cider,
            params: take("param"),
            momentum: take("momentum"),
            adam_step: header.adam_step,
            adam_m: strip(take("adam_m")),
            adam_v: strip(take("adam_v")),
            image_queue: queue(&header.image_queue, "image")?,
            report_queue: queue(&header.report_queue, "report")?,
        })
    }
}
