//! Triplet knowledge base and lexicon-based entity extraction.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, Relation, Triplet};

#[derive(Serialize, Deserialize)]
struct TripletLine {
    subject: String,
    relation: String,
    object: String,
}

/// Immutable set of triplets with an entity → positions index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletStore {
    triplets: Vec<Triplet>,
    index: HashMap<EntityId, Vec<usize>>,
}

impl TripletStore {
    /// Builds a store, dropping duplicates (first occurrence wins). Returns
    /// the store and the number of dropped duplicates.
    pub fn from_triplets(triplets: impl IntoIterator<Item = Triplet>) -> (Self, usize) {
        let mut seen = HashSet::new();
        let mut store = TripletStore::default();
        let mut dropped = 0;
        for t in triplets {
            if !seen.insert(t.clone()) {
                dropped += 1;
                continue;
            }
            let pos = store.triplets.len();
            store.index.entry(t.subject.clone()).or_default().push(pos);
            if t.object != t.subject {
                store.index.entry(t.object.clone()).or_default().push(pos);
            }
            store.triplets.push(t);
        }
        (store, dropped)
    }

    /// Reads JSONL with one `{subject, relation, object}` per line.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut triplets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: TripletLine =
                serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
            let relation: Relation = raw
                .relation
                .parse()
                .map_err(|e: Error| parse_err(line_no, e.to_string()))?;
            let subject = EntityId::new(&raw.subject).map_err(|e| parse_err(line_no, e.to_string()))?;
            let object = EntityId::new(&raw.object).map_err(|e| parse_err(line_no, e.to_string()))?;
            triplets.push(Triplet {
                subject,
                relation,
                object,
            });
        }
        let (store, dropped) = Self::from_triplets(triplets);
        if dropped > 0 {
            log::info!("{}: dropped {dropped} duplicate triplets", path.display());
        }
        Ok((store, dropped))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.triplets {
            let line = TripletLine {
                subject: t.subject.to_string(),
                relation: t.relation.as_str().to_string(),
                object: t.object.to_string(),
            };
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Store positions of triplets mentioning `e`, in store order.
    pub fn positions(&self, e: &EntityId) -> &[usize] {
        self.index.get(e).map_or(&[], Vec::as_slice)
    }
}

/// Triplets mentioning any of `entities`, grouped by the rank of the first
/// query entity that mentions them (store order within a group), capped.
pub fn query_triplets(store: &TripletStore, entities: &[EntityId], cap: usize) -> Vec<Triplet> {
    let mut out = Vec::new();
    let mut taken = HashSet::new();
    'outer: for e in entities {
        for &pos in store.positions(e) {
            if out.len() >= cap {
                break 'outer;
            }
            if taken.insert(pos) {
                out.push(store.triplets[pos].clone());
            }
        }
    }
    out
}

/// Entity surface forms matched against report text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    entries: Vec<EntityId>,
    /// Entry word sequences, grouped by first word.
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl EntityLexicon {
    pub fn new(entries: impl IntoIterator<Item = EntityId>) -> Self {
        let mut lex = EntityLexicon::default();
        let mut seen = HashSet::new();
        for e in entries {
            if !seen.insert(e.clone()) {
                continue;
            }
            let words: Vec<String> = e.as_str().split(' ').map(str::to_string).collect();
            lex.by_first.entry(words[0].clone()).or_default().push(words);
            lex.entries.push(e);
        }
        for seqs in lex.by_first.values_mut() {
            seqs.sort_by_key(|s| std::cmp::Reverse(s.len()));
        }
        lex
    }

    /// Newline-delimited entries; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(EntityId::new(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(e.as_str());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[EntityId] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lowercased words of `text`; anything other than alphanumerics, `_` and
/// `-` is a boundary.
pub(crate) fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Longest-match, word-boundary, case-insensitive lexicon matching. Entities
/// are returned in order of first occurrence without duplicates.
pub fn extract_entities(text: &str, lexicon: &EntityLexicon) -> Vec<EntityId> {
    let ws = words(text);
    let mut out: Vec<EntityId> = Vec::new();
    let mut seen = HashSet::new();
    let mut i = 0;
    while i < ws.len() {
        let matched = lexicon.by_first.get(&ws[i]).and_then(|cands| {
            cands
                .iter()
                .find(|seq| i + seq.len() <= ws.len() && ws[i..i + seq.len()] == seq[..])
        });
        match matched {
            Some(seq) => {
                let e = EntityId(seq.join(" "));
                if seen.insert(e.clone()) {
                    out.push(e);
                }
                i += seq.len();
            }
            None => i += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn e(s: &str) -> EntityId {
        EntityId::new(s).unwrap()
    }

    fn lex(items: &[&str]) -> EntityLexicon {
        EntityLexicon::new(items.iter().map(|s| e(s)))
    }

    #[test]
    fn extraction_examples() {
        let l = lex(&["effusion", "edema"]);
        assert_eq!(extract_entities("small effusion noted", &l), vec![e("effusion")]);
        assert!(extract_entities("", &l).is_empty());

        // Hand trace: position 0 "pleural" starts "pleural effusion" (2 words,
        // longest) -> consume 2; "and" no match; "effusion" matches the
        // single-word entry -> [pleural effusion, effusion].
        let l = lex(&["pleural effusion", "effusion"]);
        assert_eq!(
            extract_entities("Pleural effusion and effusion.", &l),
            vec![e("pleural effusion"), e("effusion")]
        );
        // Word boundaries: no match inside a longer word.
        assert!(extract_entities("effusions noted", &l).is_empty());
        assert_eq!(extract_entities("EFFUSION. effusion", &l), vec![e("effusion")]);
    }

    fn store_of(ts: &[(&str, Relation, &str)]) -> TripletStore {
        TripletStore::from_triplets(ts.iter().map(|(s, r, o)| Triplet::new(s, *r, o).unwrap())).0
    }

    #[test]
    fn query_examples() {
        use Relation::*;
        let store = store_of(&[
            ("opacity", LocatedAt, "lung"),
            ("consolidation", SuggestiveOf, "effusion"),
            ("effusion", LocatedAt, "pleura"),
            ("small", Modify, "opacity"),
        ]);
        let q = query_triplets(&store, &[e("effusion")], 90);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].to_string(), "<consolidation, suggestive_of, effusion>");
        assert!(query_triplets(&store, &[], 90).is_empty());
        assert!(query_triplets(&store, &[e("effusion")], 0).is_empty());

        // Rank order first, then store order; shared triplets appear once.
        let q = query_triplets(&store, &[e("opacity"), e("effusion")], 90);
        let names: Vec<_> = q.iter().map(|t| t.to_string()).collect();
        assert_eq!(
            names,
            [
                "<opacity, located_at, lung>",
                "<small, modify, opacity>",
                "<consolidation, suggestive_of, effusion>",
                "<effusion, located_at, pleura>"
            ]
        );
        assert_eq!(query_triplets(&store, &[e("opacity"), e("effusion")], 3).len(), 3);
    }

    #[test]
    fn load_errors_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"subject":"a","relation":"modify","object":"b"}}"#).unwrap();
        writeln!(f, r#"{{"subject":"c","relation":"located_at","object":"d"}}"#).unwrap();
        writeln!(f, r#"{{"subject":"a","relation":"modify","object":"b"}}"#).unwrap();
        writeln!(f, r#"{{"subject":"e","relation":"suggestive_of","object":"a"}}"#).unwrap();
        drop(f);
        let (store, dropped) = TripletStore::load(&path).unwrap();
        assert_eq!((store.len(), dropped), (3, 1));
        assert_eq!(store.positions(&e("a")), &[0, 2]);

        std::fs::write(
            &path,
            "{\"subject\":\"a\",\"relation\":\"modify\",\"object\":\"b\"}\n{\"subject\":\"a\",\"relation\":\"causes\",\"object\":\"b\"}\n",
        )
        .unwrap();
        match TripletStore::load(&path).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("causes"));
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            TripletStore::load(&path).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }
}
