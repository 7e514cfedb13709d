//! Per-image dynamic knowledge graph.
//!
//! A graph starts from a fixed base structure (one global node, organs and
//! findings) and grows with triplets quoted from retrieved reports. The
//! adjacency matrix is symmetric, binary, has a unit diagonal on real nodes
//! and doubles as the visibility mask of the graph encoder.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;

/// Entity name of the global node.
pub const GLOBAL_ENTITY: &str = "[cls]";
/// Entity name carried by padding nodes.
pub const PAD_ENTITY: &str = "[pad]";

/// Normalized entity name: lowercase, single-spaced, trimmed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntityId(pub(crate) String);

impl EntityId {
    pub fn new(raw: &str) -> Result<Self> {
        let text = raw
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        if text.is_empty() {
            return Err(Error::InvalidEntity(raw.to_string()));
        }
        Ok(EntityId(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Words used for embedding lookup; `_` separates words like a space.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split([' ', '_']).filter(|w| !w.is_empty())
    }

    pub(crate) fn global() -> Self {
        EntityId(GLOBAL_ENTITY.to_string())
    }

    pub(crate) fn pad() -> Self {
        EntityId(PAD_ENTITY.to_string())
    }
}

impl TryFrom<String> for EntityId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        EntityId::new(&s)
    }
}

impl From<EntityId> for String {
    fn from(e: EntityId) -> String {
        e.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLevel {
    Global,
    Organ,
    Finding,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SuggestiveOf,
    Modify,
    LocatedAt,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::SuggestiveOf => "suggestive_of",
            Relation::Modify => "modify",
            Relation::LocatedAt => "located_at",
        }
    }
}

impl FromStr for Relation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suggestive_of" => Ok(Relation::SuggestiveOf),
            "modify" => Ok(Relation::Modify),
            "located_at" => Ok(Relation::LocatedAt),
            other => Err(Error::UnknownRelation(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: EntityId,
    pub relation: Relation,
    pub object: EntityId,
}

impl Triplet {
    pub fn new(subject: &str, relation: Relation, object: &str) -> Result<Self> {
        Ok(Triplet {
            subject: EntityId::new(subject)?,
            relation,
            object: EntityId::new(object)?,
        })
    }

    pub fn mentions(&self, e: &EntityId) -> bool {
        &self.subject == e || &self.object == e
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<{}, {}, {}>",
            self.subject,
            self.relation.as_str(),
            self.object
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingEntry {
    pub name: EntityId,
    pub organ: EntityId,
}

/// Base structure description: organs plus findings owned by an organ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseGraphSpec {
    pub organs: Vec<EntityId>,
    pub findings: Vec<FindingEntry>,
}

impl BaseGraphSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// 7 organs and 20 findings, shipped as `configs/base_graph.json`.
    pub fn chest_default() -> Self {
        serde_json::from_str(include_str!("../configs/base_graph.json")).expect("bundled base graph is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub entity: EntityId,
    pub level: NodeLevel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: Vec<GraphNode>,
    adjacency: Vec<Vec<u8>>,
    index: HashMap<EntityId, usize>,
}

/// JSON dump of a graph, as written by `inspect-graph`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<GraphNode>,
    pub adjacency: Vec<Vec<u8>>,
}

impl KnowledgeGraph {
    fn with_global() -> Self {
        let mut g = KnowledgeGraph {
            nodes: Vec::new(),
            adjacency: Vec::new(),
            index: HashMap::new(),
        };
        g.push_node(EntityId::global(), NodeLevel::Global);
        g
    }

    fn push_node(&mut self, entity: EntityId, level: NodeLevel) -> usize {
        let i = self.nodes.len();
        for row in &mut self.adjacency {
            row.push(0);
        }
        let mut row = vec![0u8; i + 1];
        row[i] = u8::from(level != NodeLevel::Pad);
        self.adjacency.push(row);
        if level != NodeLevel::Pad {
            self.index.insert(entity.clone(), i);
        }
        self.nodes.push(GraphNode { entity, level });
        i
    }

    fn link(&mut self, i: usize, j: usize) {
        self.adjacency[i][j] = 1;
        self.adjacency[j][i] = 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] == 1
    }

    pub fn position(&self, e: &EntityId) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn contains(&self, e: &EntityId) -> bool {
        self.index.contains_key(e)
    }

    /// Number of non-pad nodes.
    pub fn real_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.level != NodeLevel::Pad).count()
    }

    pub fn real_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.level != NodeLevel::Pad).collect()
    }

    /// Undirected edge set `{(i, j) : i < j}` keyed by entity names.
    pub fn edge_set(&self) -> BTreeSet<(EntityId, EntityId)> {
        let mut out = BTreeSet::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.edge(i, j) {
                    let (a, b) = (&self.nodes[i].entity, &self.nodes[j].entity);
                    let pair = if a <= b {
                        (a.clone(), b.clone())
                    } else {
                        (b.clone(), a.clone())
                    };
                    out.insert(pair);
                }
            }
        }
        out
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: self.nodes.clone(),
            adjacency: self.adjacency.clone(),
        }
    }

    /// Checks every structural invariant; used by tests and loaders.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.nodes.len();
        if n == 0 || self.nodes[0].level != NodeLevel::Global {
            return Err("node 0 must be the global node".into());
        }
        if self.nodes[1..].iter().any(|x| x.level == NodeLevel::Global) {
            return Err("more than one global node".into());
        }
        for i in 0..n {
            if self.adjacency[i].len() != n {
                return Err(format!("row {i} has wrong length"));
            }
            let pad = self.nodes[i].level == NodeLevel::Pad;
            for j in 0..n {
                let v = self.adjacency[i][j];
                if v > 1 {
                    return Err(format!("A[{i}][{j}] = {v} is not binary"));
                }
                if v != self.adjacency[j][i] {
                    return Err(format!("A is asymmetric at ({i}, {j})"));
                }
                let pad_j = self.nodes[j].level == NodeLevel::Pad;
                if i == j && v != u8::from(!pad) {
                    return Err(format!("bad diagonal at {i}"));
                }
                if i != j && (pad || pad_j) && v != 0 {
                    return Err(format!("pad node linked at ({i}, {j})"));
                }
            }
        }
        Ok(())
    }
}

pub fn build_base_graph(spec: &BaseGraphSpec) -> Result<KnowledgeGraph> {
    let mut seen = HashSet::new();
    seen.insert(EntityId::global());
    for name in spec.organs.iter().chain(spec.findings.iter().map(|f| &f.name)) {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateEntity(name.to_string()));
        }
    }
    let organ_set: HashSet<_> = spec.organs.iter().collect();
    for f in &spec.findings {
        if !organ_set.contains(&f.organ) {
            return Err(Error::Config(format!(
                "finding {} names unknown organ {}",
                f.name, f.organ
            )));
        }
    }

    let mut g = KnowledgeGraph::with_global();
    let organ_idx: Vec<usize> = spec
        .organs
        .iter()
        .map(|o| g.push_node(o.clone(), NodeLevel::Organ))
        .collect();
    for (a, &i) in organ_idx.iter().enumerate() {
        g.link(0, i);
        for &j in &organ_idx[a + 1..] {
            g.link(i, j);
        }
    }
    let mut by_organ: HashMap<&EntityId, Vec<usize>> = HashMap::new();
    for f in &spec.findings {
        let i = g.push_node(f.name.clone(), NodeLevel::Finding);
        let organ = g.index[&f.organ];
        g.link(0, i);
        g.link(organ, i);
        let siblings = by_organ.entry(&f.organ).or_default();
        for &s in siblings.iter() {
            g.link(s, i);
        }
        siblings.push(i);
    }
    Ok(g)
}

/// What [`apply_triplet`] did; used to bound node growth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletEffect {
    Linked,
    AddedNode,
    Skipped,
}

fn plan_triplet(g: &KnowledgeGraph, t: &Triplet) -> TripletEffect {
    match (g.contains(&t.subject), g.contains(&t.object)) {
        (true, true) => TripletEffect::Linked,
        (true, false) | (false, true) => TripletEffect::AddedNode,
        (false, false) => TripletEffect::Skipped,
    }
}

fn apply_in_place(g: &mut KnowledgeGraph, t: &Triplet) -> TripletEffect {
    let effect = plan_triplet(g, t);
    match effect {
        TripletEffect::Linked => {
            let (s, o) = (g.index[&t.subject], g.index[&t.object]);
            if s != o {
                g.link(s, o);
            }
        }
        TripletEffect::AddedNode => {
            let (present, absent, absent_is_object) = if g.contains(&t.subject) {
                (&t.subject, &t.object, true)
            } else {
                (&t.object, &t.subject, false)
            };
            let level = if t.relation == Relation::LocatedAt && absent_is_object {
                NodeLevel::Organ
            } else {
                NodeLevel::Finding
            };
            let p = g.index[present];
            let a = g.push_node(absent.clone(), level);
            g.link(p, a);
            g.link(0, a);
        }
        TripletEffect::Skipped => {}
    }
    effect
}

/// Applies one triplet. Graphs are values; the input is left untouched.
pub fn apply_triplet(g: &KnowledgeGraph, t: &Triplet) -> KnowledgeGraph {
    let mut out = g.clone();
    apply_in_place(&mut out, t);
    out
}

/// Left fold of [`apply_triplet`] over `triplets`, rejecting lists longer
/// than `max_triplets`.
pub fn update_graph(g: &KnowledgeGraph, triplets: &[Triplet], max_triplets: usize) -> Result<KnowledgeGraph> {
    if triplets.len() > max_triplets {
        return Err(Error::TooManyTriplets {
            count: triplets.len(),
            limit: max_triplets,
        });
    }
    let mut out = g.clone();
    for t in triplets {
        apply_in_place(&mut out, t);
    }
    Ok(out)
}

/// Like [`update_graph`], but a triplet that would add a node once the graph
/// already holds `max_nodes` nodes is skipped. Returns the graph and the
/// number of skipped triplets.
pub fn update_graph_bounded(
    g: &KnowledgeGraph,
    triplets: &[Triplet],
    max_triplets: usize,
    max_nodes: usize,
) -> Result<(KnowledgeGraph, usize)> {
    if triplets.len() > max_triplets {
        return Err(Error::TooManyTriplets {
            count: triplets.len(),
            limit: max_triplets,
        });
    }
    let mut out = g.clone();
    let mut skipped = 0;
    for t in triplets {
        if plan_triplet(&out, t) == TripletEffect::AddedNode && out.len() >= max_nodes {
            skipped += 1;
            continue;
        }
        apply_in_place(&mut out, t);
    }
    Ok((out, skipped))
}

/// Appends fully isolated pad nodes (zero rows, zero diagonal) up to `target`.
pub fn pad_graph(g: &KnowledgeGraph, target: usize) -> Result<KnowledgeGraph> {
    if g.len() > target {
        return Err(Error::GraphTooLarge {
            nodes: g.len(),
            target,
        });
    }
    let mut out = g.clone();
    while out.len() < target {
        out.push_node(EntityId::pad(), NodeLevel::Pad);
    }
    Ok(out)
}

/// Node `i` may attend to node `j` iff `A[i][j] = 1`.
pub fn adjacency_to_mask(g: &KnowledgeGraph) -> AttentionMask {
    let n = g.len();
    AttentionMask::from_fn(n, n, |i, j| g.adjacency[i][j] == 1)
}
