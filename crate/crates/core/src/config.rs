//! Run configuration: presets, JSON loading and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;

/// Dataset locations. Unset file paths default to the names written by the
/// synthetic generator inside `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub kb: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub base_graph: Option<PathBuf>,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Word-vector table; a seeded hashed table is used when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// CE label lexicon; the built-in 14-label table when absent.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

impl DataConfig {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        DataConfig {
            dir: dir.into(),
            kb: None,
            lexicon: None,
            base_graph: None,
            vocab: None,
            embeddings: None,
            labels: None,
        }
    }

    fn or_default(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.dir.join(name))
    }

    pub fn kb_path(&self) -> PathBuf {
        self.or_default(&self.kb, "kb.jsonl")
    }

    pub fn lexicon_path(&self) -> PathBuf {
        self.or_default(&self.lexicon, "lexicon.txt")
    }

    pub fn base_graph_path(&self) -> PathBuf {
        self.or_default(&self.base_graph, "base_graph.json")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.or_default(&self.vocab, "vocab.txt")
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dir);
        for p in [
            &mut self.kb,
            &mut self.lexicon,
            &mut self.base_graph,
            &mut self.vocab,
            &mut self.embeddings,
            &mut self.labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub queue_capacity: usize,
    /// Reports retrieved per image.
    pub top_k: usize,
    /// Triplets admitted per graph update.
    pub triplet_cap: usize,
    /// Node count every dynamic graph is padded to.
    pub pad_target: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Seed of the hashed word-vector table.
    #[serde(default)]
    pub embedding_seed: u64,
    pub max_generation_len: usize,
    #[serde(default = "one")]
    pub beam_width: usize,
    #[serde(default)]
    pub bleu_smoothing: bool,
    /// Use only the first `n` training records.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Run validation every this many epochs (and after the last one).
    #[serde(default = "one")]
    pub validate_every: usize,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn desk(data_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            data: DataConfig::in_dir(data_dir),
            output_dir: output_dir.into(),
            queue_capacity: 256,
            top_k: 3,
            triplet_cap: 16,
            pad_target: 16,
            batch_size: 4,
            epochs: 30,
            learning_rate: 1.5e-3,
            weight_decay: 0.02,
            momentum: 0.995,
            seed: 0,
            embedding_seed: 0,
            max_generation_len: 60,
            beam_width: 1,
            bleu_smoothing: false,
            train_limit: None,
            validate_every: 1,
        }
    }

    /// Full-scale hyperparameters; `queue_capacity` is 65,536 or 1,380
    /// depending on the dataset.
    pub fn full_scale(
        data_dir: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
        queue_capacity: usize,
    ) -> Self {
        RunConfig {
            model: ModelConfig::full_scale(),
            queue_capacity,
            triplet_cap: 90,
            pad_target: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            max_generation_len: 100,
            ..Self::desk(data_dir, output_dir)
        }
    }

    /// Reads JSON; relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let counts = [
            ("queue_capacity", self.queue_capacity),
            ("top_k", self.top_k),
            ("triplet_cap", self.triplet_cap),
            ("pad_target", self.pad_target),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_generation_len", self.max_generation_len),
            ("beam_width", self.beam_width),
            ("validate_every", self.validate_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train_limit must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        if self.max_generation_len + 1 > self.model.max_text_len {
            return Err(Error::Config(format!(
                "max_generation_len {} needs max_text_len > {}",
                self.max_generation_len, self.max_generation_len
            )));
        }
        Ok(())
    }

    /// Checks that every input file exists, naming the first missing one.
    pub fn check_inputs(&self) -> Result<()> {
        let mut required = vec![
            self.data.dir.join("reports.jsonl"),
            self.data.kb_path(),
            self.data.lexicon_path(),
            self.data.base_graph_path(),
            self.data.vocab_path(),
        ];
        required.extend(self.data.embeddings.iter().cloned());
        required.extend(self.data.labels.iter().cloned());
        match required.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::MissingFile(p)),
            None => Ok(()),
        }
    }
}

/// Digest tying a checkpoint to the model shape, vocabulary and node table.
pub fn model_hash(model: &ModelConfig, vocab_fingerprint: &str, embedding_tag: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    h.update([0]);
    h.update(vocab_fingerprint.as_bytes());
    h.update([0]);
    h.update(embedding_tag.as_bytes());
    hex::encode(h.finalize())
}
