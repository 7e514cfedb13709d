#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use kgreport::autodiff::{Tape, Var};
use kgreport::config::RunConfig;
use kgreport::embedding::NodeEmbeddingTable;
use kgreport::graph::{build_base_graph, BaseGraphSpec, EntityId, FindingEntry, Relation, Triplet};
use kgreport::image::GrayImage;
use kgreport::metrics::LabelLexicon;
use kgreport::nn::{ModelConfig, ModelState};
use kgreport::params::ParamStore;
use kgreport::pipeline::{GraphSettings, Queues, Resources};
use kgreport::tensor::Mat;
use kgreport::train::Sample;
use kgreport::triplets::{EntityLexicon, TripletStore};
use kgreport::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn id(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
}

pub fn unit(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_image(r: &mut ChaCha8Rng, size: usize) -> GrayImage {
    GrayImage::new(
        size,
        size,
        (0..size * size).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Resources sized for [`ModelConfig::micro`]: twelve tokens, two organs and
/// two base findings, one triplet that adds a node.
pub fn micro_resources() -> Resources {
    let vocab = Vocab::build(["there is effusion lung heart ."]);
    assert_eq!(vocab.len(), ModelConfig::micro().vocab_size);
    let spec = BaseGraphSpec {
        organs: vec![id("lung"), id("heart")],
        findings: vec![
            FindingEntry {
                name: id("effusion"),
                organ: id("lung"),
            },
            FindingEntry {
                name: id("cardiomegaly"),
                organ: id("heart"),
            },
        ],
    };
    let triplets = vec![
        Triplet::new("effusion", Relation::SuggestiveOf, "edema").unwrap(),
        Triplet::new("effusion", Relation::LocatedAt, "lung").unwrap(),
    ];
    let (store, _) = TripletStore::from_triplets(triplets);
    let mut reports = HashMap::new();
    reports.insert("r0".to_string(), "there is effusion lung .".to_string());
    reports.insert("r1".to_string(), "heart lung .".to_string());
    Resources {
        vocab,
        store,
        lexicon: EntityLexicon::new([id("effusion"), id("lung"), id("heart")]),
        base_graph: build_base_graph(&spec).unwrap(),
        embeddings: NodeEmbeddingTable::hashed(8, 0),
        embedding_tag: "hashed:0".into(),
        labels: LabelLexicon::chexpert_like(),
        reports,
    }
}

pub const MICRO_SETTINGS: GraphSettings = GraphSettings {
    top_k: 1,
    triplet_cap: 4,
    pad_target: 8,
};

/// Warm queues for the micro model, holding reports `r0` and `r1`.
pub fn micro_queues(r: &mut ChaCha8Rng) -> Queues {
    let mut q = Queues::new(4, 8).unwrap();
    for name in ["r0", "r1"] {
        q.image.enqueue(vec![(unit(r, 8), name.to_string())]).unwrap();
        q.report.enqueue(vec![(unit(r, 8), name.to_string())]).unwrap();
    }
    q
}

pub fn micro_sample(res: &Resources, r: &mut ChaCha8Rng) -> Sample {
    let report = "there is effusion lung .".to_string();
    Sample {
        id: "s".into(),
        image: random_image(r, 8),
        tokens: res.vocab.encode(&report),
        report,
    }
}

pub fn micro_state(seed: u64) -> ModelState {
    ModelState::new(&ModelConfig::micro(), seed).unwrap()
}

/// Largest entrywise relative error between the tape gradient and central
/// differences of `f` over every scalar of the parameters whose name starts
/// with one of `prefixes` (all parameters when empty). Entries where both
/// magnitudes are below `1e-6 * max(1, |f|)` sit at the roundoff level of the
/// differences and count as exact.
pub fn grad_check(params: &mut ParamStore, prefixes: &[&str], f: impl Fn(&mut Tape) -> Var) -> (f64, usize) {
    const H: f64 = 1e-5;
    let (grads, f0) = {
        let mut t = Tape::new(params);
        let root = f(&mut t);
        (t.backward(root), t.value(root).scalar_value())
    };
    let floor = 1e-6 * f0.abs().max(1.0);
    let eval = |p: &ParamStore| {
        let mut t = Tape::new(p);
        let root = f(&mut t);
        t.value(root).scalar_value()
    };
    let ids: Vec<_> = params
        .ids()
        .filter(|&i| {
            let name = &params.entry(i).name;
            prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p))
        })
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pid in ids {
        let n = params.get(pid).len();
        for k in 0..n {
            let x = params.get(pid).data()[k];
            params.get_mut(pid).data_mut()[k] = x + H;
            let up = eval(params);
            params.get_mut(pid).data_mut()[k] = x - H;
            let down = eval(params);
            params.get_mut(pid).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.get(pid).map_or(0.0, |g| g.data()[k]);
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < floor {
                0.0
            } else {
                (analytic - numeric).abs() / scale
            };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Random projection to a scalar: `sum(x · w)` for a fixed `[cols, 1]` `w`.
pub fn project(t: &mut Tape, x: Var, seed: u64) -> Var {
    let cols = t.shape(x).1;
    let w = random_mat(&mut rng(seed), cols, 1);
    let w = t.constant(w);
    let y = t.matmul(x, w);
    t.sum(y)
}

/// Writes a synthetic dataset and returns a desk config over it.
pub fn desk_run(dir: &Path, n: usize, data_seed: u64) -> RunConfig {
    let data = dir.join("data");
    kgreport::synth::write_dataset(&kgreport::synth::CorpusSpec::chest_default(), n, data_seed, &data)
        .unwrap();
    RunConfig::desk(data, dir.join("out"))
}

/// One finite-difference check per differentiable component of the micro
/// model: `(name, worst relative error, scalars checked)`.
pub fn gradient_suite() -> Vec<(&'static str, f64, usize)> {
    use kgreport::embedding::init_node_features;
    use kgreport::graph::{pad_graph, update_graph};
    use kgreport::objectives::{irc_loss, irm_loss, rg_loss};
    use kgreport::train::sample_loss;
    use kgreport::vocab::{DECODE, ENCODE, EOS};

    let res = micro_resources();
    let mut r = rng(11);
    let queues = micro_queues(&mut r);
    let sample = micro_sample(&res, &mut r);
    let negative = res.vocab.encode("heart lung .");
    let x = random_mat(&mut r, 5, 8);
    let memory = random_mat(&mut r, 5, 8);
    let graph = pad_graph(
        &update_graph(&res.base_graph, res.store.triplets(), 4).unwrap(),
        MICRO_SETTINGS.pad_target,
    )
    .unwrap();
    let node_feats = init_node_features(&graph, &res.embeddings).unwrap();
    let graph_feats = random_mat(&mut r, graph.len(), 8);
    let mut decode_in = vec![DECODE];
    decode_in.extend(&sample.tokens);
    let mut targets = sample.tokens.clone();
    targets.push(EOS);
    let mut encode_in = vec![ENCODE];
    encode_in.extend(&sample.tokens);

    let mut state = micro_state(5);
    let model = state.model.clone();
    let probe = state.clone();
    let mut out = Vec::new();
    let mut run = |name: &'static str, prefixes: &[&str], f: &dyn Fn(&mut Tape) -> Var| {
        let (worst, n) = grad_check(&mut state.params, prefixes, f);
        out.push((name, worst, n));
    };

    run("encoder layer", &["graph.layers.0"], &|t| {
        let x = t.constant(x.clone());
        let y = model.graph_layers()[0].forward(t, x, None);
        project(t, y, 1)
    });
    run("relational self-attention", &["graph.layers"], &|t| {
        let f = t.constant(node_feats.clone());
        let y = model.relational_self_attention(t, f, &graph).unwrap();
        project(t, y, 2)
    });
    run("graph attention", &["graph_attn"], &|t| {
        let v = t.constant(x.clone());
        let g = t.constant(graph_feats.clone());
        let y = model.graph_attention(t, v, g, &graph.real_mask()).unwrap();
        project(t, y, 3)
    });
    run("decoder", &["decoder."], &|t| {
        let m = t.constant(memory.clone());
        let lp = model.decode(t, &decode_in, m).unwrap();
        project(t, lp, 4)
    });
    run("report generation loss", &["decoder."], &|t| {
        let m = t.constant(memory.clone());
        let lp = model.decode(t, &decode_in, m).unwrap();
        rg_loss(t, lp, &targets).unwrap()
    });
    run(
        "contrastive loss",
        &["image.", "report.", "proj.", "log_tau"],
        &|t| {
            let v = model.encode_image(t, &sample.image).unwrap();
            let ie = model.image_embedding(t, v);
            let rep = model.encode_report(t, &sample.tokens).unwrap();
            let re = model.report_embedding(t, rep);
            let inv = model.inverse_temperature(t);
            irc_loss(t, ie, re, &queues.image, &queues.report, inv).unwrap()
        },
    );
    run("matching loss", &["multimodal.", "itm."], &|t| {
        let v = t.constant(memory.clone());
        let fused = model.multimodal_encode(t, &encode_in, v).unwrap();
        let logits = model.itm_logits(t, fused);
        let pos = irm_loss(t, logits, true).unwrap();
        let mut neg_in = vec![ENCODE];
        neg_in.extend(&negative);
        let fused = model.multimodal_encode(t, &neg_in, v).unwrap();
        let logits = model.itm_logits(t, fused);
        let neg = irm_loss(t, logits, false).unwrap();
        t.add(pos, neg)
    });
    run("total loss", &[], &|t| {
        // The tape reads parameter values from the perturbed store.
        sample_loss(
            t,
            &probe,
            &res,
            &MICRO_SETTINGS,
            &queues,
            &sample,
            Some(&negative),
        )
        .unwrap()
        .total
    });
    out
}

pub mod oracle {
    use std::collections::BTreeSet;

    use kgreport::graph::{
        BaseGraphSpec, EntityId, FindingEntry, KnowledgeGraph, NodeLevel, Relation, Triplet,
    };
    use kgreport::queue::RepresentationQueue;
    use rand::seq::IndexedRandom;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::id;

    /// Graph as plain sets: nodes in insertion order plus undirected edges.
    #[derive(Debug, PartialEq, Eq)]
    pub struct SetGraph {
        pub nodes: Vec<(EntityId, NodeLevel)>,
        pub edges: BTreeSet<(EntityId, EntityId)>,
    }

    fn pair(a: &EntityId, b: &EntityId) -> (EntityId, EntityId) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    pub fn of_graph(g: &KnowledgeGraph) -> SetGraph {
        SetGraph {
            nodes: g.nodes().iter().map(|n| (n.entity.clone(), n.level)).collect(),
            edges: g.edge_set(),
        }
    }

    /// Applies the three update rules with set operations only.
    pub fn update(base: &KnowledgeGraph, triplets: &[Triplet]) -> SetGraph {
        let mut g = of_graph(base);
        let global = g.nodes[0].0.clone();
        for t in triplets {
            let has = |e: &EntityId, g: &SetGraph| g.nodes.iter().any(|(n, _)| n == e);
            match (has(&t.subject, &g), has(&t.object, &g)) {
                (true, true) => {
                    if t.subject != t.object {
                        g.edges.insert(pair(&t.subject, &t.object));
                    }
                }
                (true, false) | (false, true) => {
                    let object_absent = has(&t.subject, &g);
                    let (present, absent) = if object_absent {
                        (&t.subject, &t.object)
                    } else {
                        (&t.object, &t.subject)
                    };
                    let level = if t.relation == Relation::LocatedAt && object_absent {
                        NodeLevel::Organ
                    } else {
                        NodeLevel::Finding
                    };
                    g.nodes.push((absent.clone(), level));
                    g.edges.insert(pair(present, absent));
                    g.edges.insert(pair(&global, absent));
                }
                (false, false) => {}
            }
        }
        g
    }

    /// Random base spec and a random triplet list drawing on base names and
    /// a pool of new names.
    pub fn instance(r: &mut ChaCha8Rng) -> (BaseGraphSpec, Vec<Triplet>) {
        let organs: Vec<EntityId> = (0..r.random_range(1..=4))
            .map(|i| id(&format!("organ {i}")))
            .collect();
        let findings: Vec<FindingEntry> = (0..r.random_range(0..=8))
            .map(|i| FindingEntry {
                name: id(&format!("finding {i}")),
                organ: organs.choose(r).unwrap().clone(),
            })
            .collect();
        let mut pool: Vec<String> = organs.iter().map(|o| o.as_str().to_string()).collect();
        pool.extend(findings.iter().map(|f| f.name.as_str().to_string()));
        pool.extend((0..6).map(|i| format!("new {i}")));
        let relations = [Relation::SuggestiveOf, Relation::Modify, Relation::LocatedAt];
        let triplets = (0..r.random_range(0..=20))
            .map(|_| {
                Triplet::new(
                    pool.choose(r).unwrap(),
                    *relations.choose(r).unwrap(),
                    pool.choose(r).unwrap(),
                )
                .unwrap()
            })
            .collect();
        (BaseGraphSpec { organs, findings }, triplets)
    }

    /// Brute-force top-k: score every entry, sort by score then recency.
    pub fn top_k(q: &RepresentationQueue, query: &[f64], k: usize) -> Vec<String> {
        let entries: Vec<_> = q.entries().collect();
        let mut idx: Vec<usize> = (0..entries.len()).collect();
        let score = |i: usize| -> f64 { entries[i].embedding.iter().zip(query).map(|(a, b)| a * b).sum() };
        idx.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(b.cmp(&a)));
        idx.into_iter()
            .take(k)
            .map(|i| entries[i].report_id.clone())
            .collect()
    }
}

/// Random graph for locality checks: a random base plus random triplets,
/// padded by up to four nodes.
pub fn random_graph(r: &mut ChaCha8Rng) -> kgreport::graph::KnowledgeGraph {
    use kgreport::graph::{pad_graph, update_graph};
    let (spec, triplets) = oracle::instance(r);
    let g = update_graph(&build_base_graph(&spec).unwrap(), &triplets, 90).unwrap();
    let target = g.len() + r.random_range(0..=4);
    pad_graph(&g, target).unwrap()
}

/// Runs one relational self-attention layer of the micro model on `graphs`
/// random graphs. For every node and every node outside its neighbourhood,
/// perturbs the outsider's features and compares the node's output row bit
/// for bit. Returns the number of (node, outsider) pairs checked and the
/// first violation.
pub fn rsa_locality(graphs: usize, seed: u64) -> (usize, Option<String>) {
    use kgreport::graph::adjacency_to_mask;
    let state = micro_state(seed);
    let layer = &state.model.graph_layers()[0];
    let mut r = rng(seed);
    let mut checked = 0;
    for case in 0..graphs {
        let g = random_graph(&mut r);
        let mask = adjacency_to_mask(&g);
        let x = random_mat(&mut r, g.len(), 8);
        let run = |x: &Mat| {
            let mut t = Tape::new(&state.params);
            let v = t.constant(x.clone());
            let y = layer.forward(&mut t, v, Some(&mask));
            t.value(y).clone()
        };
        let base = run(&x);
        for j in 0..g.len() {
            let mut xp = x.clone();
            for c in 0..8 {
                xp.set(j, c, xp.get(j, c) + r.random_range(-3.0..3.0));
            }
            let out = run(&xp);
            for i in 0..g.len() {
                if i == j || g.edge(i, j) {
                    continue;
                }
                checked += 1;
                let same = base
                    .row(i)
                    .iter()
                    .zip(out.row(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return (
                        checked,
                        Some(format!("graph {case}: node {i} changed when {j} moved")),
                    );
                }
            }
        }
    }
    (checked, None)
}

/// Compares `top_k_retrieve` with the brute-force ranking on `queues`
/// random queues for k in {1, 3, 10}. Some queues overflow so eviction is
/// exercised, and some hold duplicated embeddings so ties occur.
pub fn retrieval_agreement(queues: usize, seed: u64) -> (usize, Option<String>) {
    use kgreport::queue::{top_k_retrieve, RepresentationQueue};
    let mut r = rng(seed);
    let mut checked = 0;
    for case in 0..queues {
        let dim = r.random_range(2..=16);
        let capacity = r.random_range(1..=40);
        let mut q = RepresentationQueue::new(capacity, dim).unwrap();
        let n = r.random_range(1..=60);
        let mut last: Option<Vec<f64>> = None;
        for i in 0..n {
            let e = match &last {
                Some(prev) if r.random_bool(0.2) => prev.clone(),
                _ => unit(&mut r, dim),
            };
            q.enqueue(vec![(e.clone(), format!("r{i}"))]).unwrap();
            last = Some(e);
        }
        let query = unit(&mut r, dim);
        for k in [1, 3, 10] {
            checked += 1;
            let got = top_k_retrieve(&q, &query, k).unwrap();
            let want = oracle::top_k(&q, &query, k);
            if got != want {
                return (checked, Some(format!("queue {case}, k={k}: {got:?} != {want:?}")));
            }
        }
    }
    (checked, None)
}

/// RG of a freshly initialized desk-sized decoder on a synthetic report,
/// together with `n̂ · ln V`.
pub fn rg_at_init(init_std: f64) -> (f64, f64) {
    use kgreport::objectives::rg_loss;
    use kgreport::synth::CorpusSpec;
    use kgreport::vocab::{DECODE, EOS};
    let spec = CorpusSpec::chest_default();
    let sentences = spec.sentences();
    let vocab = Vocab::build(sentences.iter().copied());
    let mut cfg = ModelConfig::desk();
    cfg.init_std = init_std;
    cfg.vocab_size = vocab.len();
    let state = ModelState::new(&cfg, 0).unwrap();
    let report = "cardiac silhouette is within normal limits . there is focal consolidation . there is an effusion . osseous structures are intact .";
    let tokens = vocab.encode(report);
    let mut r = rng(1);
    let mut t = Tape::new(&state.params);
    let visual = state
        .model
        .encode_image(&mut t, &random_image(&mut r, 32))
        .unwrap();
    let mut input = vec![DECODE];
    input.extend(&tokens);
    let lp = state.model.decode(&mut t, &input, visual).unwrap();
    let mut targets = tokens.clone();
    targets.push(EOS);
    let rg = rg_loss(&mut t, lp, &targets).unwrap();
    let value = t.value(rg).scalar_value();
    (value, targets.len() as f64 * (vocab.len() as f64).ln())
}

/// Fixed toy cases with values worked out by hand: `(case, got, want, tol)`.
pub fn metric_cases() -> Vec<(&'static str, f64, f64, f64)> {
    use kgreport::metrics::{bleu4, ce_metrics, cider, rouge_l};
    let mut out = Vec::new();

    // One substitution in six tokens: clipped precisions 5/6, 4/5, 3/4, 2/3,
    // product 1/3, equal lengths.
    let got = bleu4(&["a b c d e g"], &["a b c d e f"], false).unwrap();
    out.push(("bleu4 substitution", got, 3f64.powf(-0.25), 1e-6));

    // Exact prefix: all precisions 1, brevity penalty exp(1 - 6/4).
    let got = bleu4(&["a b c d"], &["a b c d e f"], false).unwrap();
    out.push(("bleu4 brevity", got, (-0.5f64).exp(), 1e-6));

    // Corpus pooling of the two: precisions 9/10, 7/8, 5/6, 3/4; lengths 10 vs 12.
    let got = bleu4(
        &["a b c d e g", "a b c d"],
        &["a b c d e f", "a b c d e f"],
        false,
    )
    .unwrap();
    let want = (-0.2f64).exp() * (0.9f64 * 0.875 * (5.0 / 6.0) * 0.75).powf(0.25);
    out.push(("bleu4 corpus", got, want, 1e-6));

    // No 4-gram match: 0 without smoothing; with add-one for n > 1 the
    // precisions are 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1) over
    // "a b c x" vs "a b c d".
    out.push((
        "bleu4 zero 4-gram",
        bleu4(&["a b c x"], &["a b c d"], false).unwrap(),
        0.0,
        1e-6,
    ));
    let want = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    out.push((
        "bleu4 smoothed",
        bleu4(&["a b c x"], &["a b c d"], true).unwrap(),
        want,
        1e-6,
    ));

    // LCS 5 of 6 both ways gives 5/6; the exact prefix has P = 1, R = 2/3.
    let b2 = 1.44;
    let prefix = (1.0 + b2) * (2.0 / 3.0) / (2.0 / 3.0 + b2);
    let got = rouge_l(&["a b c d e g", "a b c d"], &["a b c d e f", "a b c d e f"]).unwrap();
    out.push(("rouge-l", got, (5.0 / 6.0 + prefix) / 2.0, 1e-6));
    let got = rouge_l(&["b a"], &["a x b"]).unwrap();
    let (p, r) = (0.5, 1.0 / 3.0);
    out.push(("rouge-l reordered", got, (1.0 + b2) * p * r / (r + b2 * p), 1e-6));

    // Two references "a b" and "c d": every unigram and bigram has df 1, so
    // all IDFs equal ln 2. Pair 1 matches n = 1, 2 exactly (0.5); pair 2
    // shares one of two unigrams (cosine 1/2) and no bigram (0.125).
    let got = cider(&["a b", "a d"], &["a b", "c d"], &["a b", "c d"]).unwrap();
    out.push(("cider uniform idf", got, (0.5 + 0.125) / 2.0, 1e-4));

    // Three documents: idf(a) = ln 1.5, idf(b) = idf(c) = ln 3. "a c" vs
    // "a b" shares only unigram a; no bigram overlap.
    let (la, lb) = (1.5f64.ln(), 3f64.ln());
    let want = la * la / (la * la + lb * lb) / 4.0;
    let got = cider(&["a c"], &["a b"], &["a b", "a c", "d e"]).unwrap();
    out.push(("cider weighted idf", got, want, 1e-4));

    // Labels: pair 1 has Cardiomegaly in both, Effusion only in the
    // candidate and Pneumothorax only in the reference. Pair 2 misses a
    // Fracture and predicts No Finding. tp 1, fp 2, fn 2.
    let lex = LabelLexicon::chexpert_like();
    let ce = ce_metrics(
        &[
            "there is cardiomegaly . there is an effusion .",
            "no acute abnormality .",
        ],
        &[
            "there is cardiomegaly . a pneumothorax is present .",
            "there is a fracture .",
        ],
        &lex,
    )
    .unwrap();
    out.push(("ce precision", ce.micro.precision, 1.0 / 3.0, 1e-6));
    out.push(("ce recall", ce.micro.recall, 1.0 / 3.0, 1e-6));
    out.push(("ce f1", ce.micro.f1, 1.0 / 3.0, 1e-6));
    out
}

/// Outcome of the reproducibility checks on a small desk run.
pub struct Reproducibility {
    pub steps: usize,
    pub rerun_identical: bool,
    pub resumed_trace_identical: bool,
    pub evaluation_identical: bool,
}

fn bits(trace: &[f64]) -> Vec<u64> {
    trace.iter().map(|x| x.to_bits()).collect()
}

/// Two seeded runs, a run interrupted after one epoch and resumed, and the
/// evaluation of the in-memory model against its reloaded checkpoint.
pub fn reproducibility(dir: &Path) -> Reproducibility {
    use kgreport::synth::Split;
    use kgreport::train::Session;

    let base = desk_run(dir, 30, 2);
    let config = |name: &str, epochs: usize| RunConfig {
        output_dir: dir.join(name),
        epochs,
        seed: 5,
        ..base.clone()
    };

    let mut first = Session::new(&config("a", 2)).unwrap();
    let trace_a = first.run().unwrap().loss_trace();
    let trace_b = Session::new(&config("b", 2)).unwrap().run().unwrap().loss_trace();

    let mut split_trace = Session::new(&config("c", 1)).unwrap().run().unwrap().loss_trace();
    let mut resumed = Session::resume(&config("c", 2), &dir.join("c/last.ckpt")).unwrap();
    split_trace.extend(resumed.run().unwrap().loss_trace());

    let live = first.evaluate(Split::Test).unwrap();
    let reloaded = Session::resume(&config("a", 2), &dir.join("a/last.ckpt"))
        .unwrap()
        .evaluate(Split::Test)
        .unwrap();
    let as_json = |e: &kgreport::train::Evaluation| {
        let texts: Vec<&str> = e.predictions.iter().map(|p| p.text.as_str()).collect();
        serde_json::to_string(&(&e.metrics, texts)).unwrap()
    };

    Reproducibility {
        steps: trace_a.len(),
        rerun_identical: bits(&trace_a) == bits(&trace_b),
        resumed_trace_identical: bits(&trace_a) == bits(&split_trace),
        evaluation_identical: as_json(&live) == as_json(&reloaded),
    }
}

/// Runs `update_graph` against the set oracle on random instances and
/// validates every result. Returns the count checked and the first mismatch.
pub fn graph_rule_agreement(instances: usize, seed: u64) -> (usize, Option<String>) {
    use kgreport::graph::update_graph;
    let mut r = rng(seed);
    for case in 0..instances {
        let (spec, triplets) = oracle::instance(&mut r);
        let base = build_base_graph(&spec).unwrap();
        let got = update_graph(&base, &triplets, 90).unwrap();
        if let Err(e) = got.validate() {
            return (case + 1, Some(format!("instance {case}: {e}")));
        }
        if oracle::of_graph(&got) != oracle::update(&base, &triplets) {
            return (
                case + 1,
                Some(format!("instance {case}: graph differs from oracle")),
            );
        }
    }
    (instances, None)
}

/// IRC with equal similarities against `ln(M + 1)` and IRM at zero logits
/// against `ln 2`: `(case, got, want)`.
pub fn loss_constants() -> Vec<(String, f64, f64)> {
    use kgreport::objectives::{irc_loss_value, irm_loss, irm_loss_value};
    use kgreport::queue::RepresentationQueue;
    let mut out = Vec::new();
    let v = vec![0.5; 4];
    let w = Mat::identity(4);
    for m in [1, 31, 255] {
        let mut iq = RepresentationQueue::new(256, 4).unwrap();
        let mut rq = RepresentationQueue::new(256, 4).unwrap();
        for i in 0..m {
            iq.enqueue(vec![(v.clone(), format!("i{i}"))]).unwrap();
            rq.enqueue(vec![(v.clone(), format!("r{i}"))]).unwrap();
        }
        let l = irc_loss_value(&v, &v, &iq, &rq, &w, &w, 0.07).unwrap();
        out.push((format!("IRC M={m}"), l, ((m + 1) as f64).ln()));
    }
    let store = ParamStore::new();
    for label in [true, false] {
        let mut t = Tape::new(&store);
        let z = t.constant(Mat::zeros(1, 2));
        let l = irm_loss(&mut t, z, label).unwrap();
        out.push((format!("IRM label={label}"), t.value(l).scalar_value(), 2f64.ln()));
        let h = irm_loss_value(&[0.3, -1.0, 2.0], &Mat::zeros(3, 2), &Mat::zeros(1, 2), label).unwrap();
        out.push((format!("IRM head label={label}"), h, 2f64.ln()));
    }
    out
}
