//! Inference pipeline: retrieval, dynamic graph construction, graph-enhanced
//! visual features and autoregressive decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{model_hash, RunConfig};
use crate::embedding::{init_node_features, NodeEmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{
    build_base_graph, pad_graph, update_graph_bounded, BaseGraphSpec, EntityId, GraphDump, KnowledgeGraph,
    Triplet,
};
use crate::image::GrayImage;
use crate::metrics::LabelLexicon;
use crate::nn::ModelState;
use crate::queue::{RepresentationQueue, Retrieved};
use crate::triplets::{extract_entities, query_triplets, EntityLexicon, TripletStore};
use crate::vocab::{self, Vocab};

/// Knowledge base, lexicons and lookup tables shared by training and
/// inference.
#[derive(Clone, Debug)]
pub struct Resources {
    pub vocab: Vocab,
    pub store: TripletStore,
    pub lexicon: EntityLexicon,
    pub base_graph: KnowledgeGraph,
    pub embeddings: NodeEmbeddingTable,
    /// Identifies the node table in the model hash.
    pub embedding_tag: String,
    pub labels: LabelLexicon,
    /// Report text by id, for everything that can sit in the queues.
    pub reports: HashMap<String, String>,
}

impl Resources {
    /// Loads every file named by `cfg`; `reports` maps retrievable report
    /// ids to their text.
    pub fn load(cfg: &RunConfig, reports: HashMap<String, String>) -> Result<Self> {
        cfg.check_inputs()?;
        let d = &cfg.data;
        let (store, dropped) = TripletStore::load(&d.kb_path())?;
        if dropped > 0 {
            log::info!(
                "dropped {dropped} duplicate triplets from {}",
                d.kb_path().display()
            );
        }
        let (embeddings, embedding_tag) = match &d.embeddings {
            Some(p) => {
                let t = NodeEmbeddingTable::load(p)?;
                (t, format!("file:{}", p.display()))
            }
            None => (
                NodeEmbeddingTable::hashed(cfg.model.d_model, cfg.embedding_seed),
                format!("hashed:{}", cfg.embedding_seed),
            ),
        };
        if embeddings.dim() != cfg.model.d_model {
            return Err(Error::DimensionMismatch {
                expected: cfg.model.d_model,
                got: embeddings.dim(),
            });
        }
        let labels = match &d.labels {
            Some(p) => LabelLexicon::load(p)?,
            None => LabelLexicon::chexpert_like(),
        };
        Ok(Resources {
            vocab: Vocab::load(&d.vocab_path())?,
            store,
            lexicon: EntityLexicon::load(&d.lexicon_path())?,
            base_graph: build_base_graph(&BaseGraphSpec::load(&d.base_graph_path())?)?,
            embeddings,
            embedding_tag,
            labels,
            reports,
        })
    }

    /// Hash of the model config (with this vocabulary) and node table.
    pub fn model_hash(&self, cfg: &RunConfig) -> String {
        let mut m = cfg.model.clone();
        m.vocab_size = self.vocab.len();
        model_hash(&m, &self.vocab.fingerprint(), &self.embedding_tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSettings {
    pub top_k: usize,
    pub triplet_cap: usize,
    pub pad_target: usize,
}

impl From<&RunConfig> for GraphSettings {
    fn from(c: &RunConfig) -> Self {
        GraphSettings {
            top_k: c.top_k,
            triplet_cap: c.triplet_cap,
            pad_target: c.pad_target,
        }
    }
}

/// Image-side and report-side momentum queues.
#[derive(Clone, Debug, PartialEq)]
pub struct Queues {
    pub image: RepresentationQueue,
    pub report: RepresentationQueue,
}

impl Queues {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Queues {
            image: RepresentationQueue::new(capacity, dim)?,
            report: RepresentationQueue::new(capacity, dim)?,
        })
    }
}

/// A per-image graph and how it was built.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    /// Padded to the pad target.
    pub graph: KnowledgeGraph,
    pub retrieved: Vec<Retrieved>,
    pub entities: Vec<EntityId>,
    pub triplets: Vec<Triplet>,
    /// Node-adding triplets dropped because the graph was full.
    pub skipped: usize,
    /// True when the report queue had nothing to retrieve.
    pub cold: bool,
}

/// Retrieves the top-k reports for `query`, extracts their entities, queries
/// triplets and applies them to the base graph. `exclude` hides one report
/// id (the sample's own report during training).
pub fn construct_graph(
    res: &Resources,
    settings: &GraphSettings,
    report_queue: &RepresentationQueue,
    query: &[f64],
    exclude: Option<&str>,
) -> Result<DynamicGraph> {
    let retrieved =
        match report_queue.top_k_filtered(query, settings.top_k, |e| exclude != Some(e.report_id.as_str())) {
            Ok(r) => r,
            Err(Error::ColdQueue) => {
                return Ok(DynamicGraph {
                    graph: pad_graph(&res.base_graph, settings.pad_target)?,
                    retrieved: Vec::new(),
                    entities: Vec::new(),
                    triplets: Vec::new(),
                    skipped: 0,
                    cold: true,
                })
            }
            Err(e) => return Err(e),
        };
    let mut entities: Vec<EntityId> = Vec::new();
    for r in &retrieved {
        let Some(text) = res.reports.get(&r.report_id) else {
            log::warn!("retrieved report {} has no text; ignoring it", r.report_id);
            continue;
        };
        for e in extract_entities(text, &res.lexicon) {
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
    }
    let triplets = query_triplets(&res.store, &entities, settings.triplet_cap);
    let (g, skipped) = update_graph_bounded(
        &res.base_graph,
        &triplets,
        settings.triplet_cap,
        settings.pad_target,
    )?;
    Ok(DynamicGraph {
        graph: pad_graph(&g, settings.pad_target)?,
        retrieved,
        entities,
        triplets,
        skipped,
        cold: false,
    })
}

/// Visual features of one sample on a tape.
pub struct VisualForward {
    /// Image encoder output.
    pub visual: Var,
    /// Unit `[1, p]` projection of the image `[CLS]`.
    pub image_emb: Var,
    /// Graph-enhanced features (the plain visual features when the graph is
    /// disabled).
    pub enhanced: Var,
    pub graph: Option<DynamicGraph>,
}

pub fn forward_visual(
    t: &mut Tape,
    state: &ModelState,
    res: &Resources,
    settings: &GraphSettings,
    queues: &Queues,
    views: &[&GrayImage],
    exclude: Option<&str>,
) -> Result<VisualForward> {
    let model = &state.model;
    let visual = model.encode_views(t, views)?;
    let image_emb = model.image_embedding(t, visual);
    if !model.config().use_graph {
        return Ok(VisualForward {
            visual,
            image_emb,
            enhanced: visual,
            graph: None,
        });
    }
    let query = t.value(image_emb).data().to_vec();
    let dg = construct_graph(res, settings, &queues.report, &query, exclude)?;
    let feats = init_node_features(&dg.graph, &res.embeddings)?;
    let f_n = t.constant(feats);
    let f_g = model.relational_self_attention(t, f_n, &dg.graph)?;
    let enhanced = model.graph_attention(t, visual, f_g, &dg.graph.real_mask())?;
    Ok(VisualForward {
        visual,
        image_emb,
        enhanced,
        graph: Some(dg),
    })
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// Generated ids after `[Decode]`, including a final `[EOS]` if produced.
    pub tokens: Vec<usize>,
    pub text: String,
    pub graph: Option<DynamicGraph>,
}

/// Beam search over the decoder; width 1 is greedy decoding. Ties favour the
/// lower token id. Stops at `[EOS]` or after `max_len` tokens.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    state: &ModelState,
    res: &Resources,
    settings: &GraphSettings,
    queues: &Queues,
    views: &[&GrayImage],
    max_len: usize,
    beam_width: usize,
) -> Result<Generation> {
    if max_len == 0 || beam_width == 0 {
        return Err(Error::Config("max_len and beam width must be positive".into()));
    }
    let (memory, graph) = {
        let mut t = Tape::new(&state.params);
        let vf = forward_visual(&mut t, state, res, settings, queues, views, None)?;
        (t.value(vf.enhanced).clone(), vf.graph)
    };
    let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(vec![vocab::DECODE], 0.0, false)];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.2) {
            break;
        }
        let mut cands: Vec<(Vec<usize>, f64, bool)> = Vec::new();
        for (tokens, score, done) in &beams {
            if *done {
                cands.push((tokens.clone(), *score, true));
                continue;
            }
            let mut t = Tape::new(&state.params);
            let mem = t.constant(memory.clone());
            let lp = state.model.decode(&mut t, tokens, mem)?;
            let last = t.value(lp).row(tokens.len() - 1).to_vec();
            let mut order: Vec<usize> = (0..last.len()).collect();
            order.sort_by(|&a, &b| last[b].total_cmp(&last[a]).then(a.cmp(&b)));
            for &id in order.iter().take(beam_width) {
                let mut next = tokens.clone();
                next.push(id);
                cands.push((next, score + last[id], id == vocab::EOS));
            }
        }
        // Stable sort keeps expansion order for equal scores.
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        cands.truncate(beam_width);
        beams = cands;
    }
    let tokens = beams.swap_remove(0).0[1..].to_vec();
    Ok(Generation {
        text: res.vocab.decode(&tokens),
        tokens,
        graph,
    })
}

/// JSON written by `inspect-graph`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphInspection {
    pub graph: GraphDump,
    pub real_nodes: usize,
    pub retrieved: Vec<String>,
    pub entities: Vec<EntityId>,
    pub triplets: Vec<String>,
    pub skipped_triplets: usize,
    pub warnings: Vec<String>,
}

pub fn inspect_graph(
    state: &ModelState,
    res: &Resources,
    settings: &GraphSettings,
    queues: &Queues,
    views: &[&GrayImage],
) -> Result<GraphInspection> {
    let mut t = Tape::new(&state.params);
    let visual = state.model.encode_views(&mut t, views)?;
    let emb = state.model.image_embedding(&mut t, visual);
    let query = t.value(emb).data().to_vec();
    let dg = construct_graph(res, settings, &queues.report, &query, None)?;
    let mut warnings = Vec::new();
    if dg.cold {
        warnings.push("report queue is empty; graph is the base graph only".to_string());
    }
    if dg.skipped > 0 {
        warnings.push(format!(
            "{} triplets skipped: graph reached the pad target",
            dg.skipped
        ));
    }
    Ok(GraphInspection {
        real_nodes: dg.graph.real_len(),
        graph: dg.graph.dump(),
        retrieved: dg.retrieved.iter().map(|r| r.report_id.clone()).collect(),
        entities: dg.entities,
        triplets: dg.triplets.iter().map(Triplet::to_string).collect(),
        skipped_triplets: dg.skipped,
        warnings,
    })
}
