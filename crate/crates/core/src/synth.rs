//! Deterministic synthetic corpus: images with one blob per finding, template
//! reports, a triplet knowledge base, an entity lexicon and a base graph that
//! deliberately leaves some findings out.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BaseGraphSpec, EntityId, FindingEntry, Relation, Triplet};
use crate::image::GrayImage;
use crate::triplets::{EntityLexicon, TripletStore};
use crate::vocab::Vocab;

pub const GENERATOR_VERSION: &str = "kgreport-synth/1";

/// Square bright patch; `row`/`col` is its top-left pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub name: EntityId,
    pub organ: EntityId,
    pub signature: Signature,
    /// Sentence used when the finding is present; contains `name` verbatim.
    pub abnormal: String,
    /// Sentence used for the organ when none of its findings is present. Only
    /// the first finding of each organ contributes it.
    pub normal: String,
}

/// A co-occurrence profile: a weighted scenario with per-finding rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub weight: f64,
    pub findings: Vec<(EntityId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub image_size: usize,
    pub findings: Vec<FindingSpec>,
    pub profiles: Vec<Profile>,
    /// Modifier entities used only in the knowledge base.
    pub qualifiers: Vec<EntityId>,
    /// Share of findings left out of the base graph.
    pub absent_fraction: f64,
    /// Sentence appended when a record has no findings.
    pub all_clear: String,
}

fn eid(s: &str) -> EntityId {
    EntityId::new(s).expect("static entity")
}

impl CorpusSpec {
    /// Five organs and ten findings on a 32x32 canvas; each blob sits in its
    /// own 8x8 patch cell.
    pub fn chest_default() -> Self {
        let rows: [(&str, &str, &str, &str); 10] = [
            (
                "cardiomegaly",
                "heart",
                "there is cardiomegaly .",
                "cardiac silhouette is within normal limits .",
            ),
            (
                "edema",
                "lung",
                "there is interstitial edema .",
                "pulmonary parenchyma is clear .",
            ),
            ("consolidation", "lung", "there is focal consolidation .", ""),
            ("nodule", "lung", "a nodule is present .", ""),
            ("atelectasis", "lung", "there is subsegmental atelectasis .", ""),
            (
                "effusion",
                "pleura",
                "there is an effusion .",
                "no pleural abnormality is seen .",
            ),
            ("pneumothorax", "pleura", "a pneumothorax is present .", ""),
            (
                "pleural thickening",
                "pleura",
                "there is pleural thickening .",
                "",
            ),
            (
                "fracture",
                "bone",
                "there is a fracture .",
                "osseous structures are intact .",
            ),
            (
                "foreign object",
                "soft tissue",
                "a foreign object is seen .",
                "no radiopaque material is seen .",
            ),
        ];
        let cells = [0, 2, 5, 7, 8, 10, 13, 15, 3, 12];
        let findings = rows
            .iter()
            .zip(cells)
            .enumerate()
            .map(|(i, (&(name, organ, abnormal, normal), cell))| FindingSpec {
                name: eid(name),
                organ: eid(organ),
                signature: Signature {
                    row: (cell / 4) * 8 + 2,
                    col: (cell % 4) * 8 + 2,
                    size: 4,
                    intensity: 0.45 + 0.05 * (i % 3) as f64,
                },
                abnormal: abnormal.into(),
                normal: normal.into(),
            })
            .collect();
        let profile = |name: &str, weight: f64, fs: &[(&str, f64)]| Profile {
            name: name.into(),
            weight,
            findings: fs.iter().map(|&(f, p)| (eid(f), p)).collect(),
        };
        CorpusSpec {
            image_size: 32,
            findings,
            profiles: vec![
                profile("normal", 0.15, &[]),
                profile(
                    "cardiac",
                    0.2,
                    &[("cardiomegaly", 0.9), ("edema", 0.6), ("effusion", 0.5)],
                ),
                profile(
                    "infection",
                    0.2,
                    &[("consolidation", 0.9), ("effusion", 0.5), ("atelectasis", 0.4)],
                ),
                profile(
                    "trauma",
                    0.15,
                    &[("fracture", 0.9), ("pneumothorax", 0.5), ("foreign object", 0.3)],
                ),
                profile(
                    "mass",
                    0.15,
                    &[("nodule", 0.9), ("pleural thickening", 0.5), ("atelectasis", 0.2)],
                ),
                profile(
                    "device",
                    0.15,
                    &[("foreign object", 0.9), ("edema", 0.3), ("cardiomegaly", 0.3)],
                ),
            ],
            qualifiers: ["left", "right", "bilateral", "mild", "severe", "small", "large"]
                .into_iter()
                .map(eid)
                .collect(),
            absent_fraction: 0.4,
            all_clear: "no acute abnormality .".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.findings.is_empty() {
            return Err(Error::Empty("finding spec"));
        }
        let mut names = BTreeSet::new();
        let mut cells = BTreeSet::new();
        for f in &self.findings {
            if !names.insert(f.name.clone()) {
                return Err(Error::DuplicateEntity(f.name.to_string()));
            }
            let s = &f.signature;
            if s.size == 0 || s.row + s.size > self.image_size || s.col + s.size > self.image_size {
                return Err(Error::Config(format!("signature of {} leaves the image", f.name)));
            }
            if !cells.insert((s.row, s.col)) {
                return Err(Error::Config(format!("signature of {} is not distinct", f.name)));
            }
            if !f.abnormal.to_lowercase().contains(f.name.as_str()) {
                return Err(Error::Config(format!("template for {} must name it", f.name)));
            }
        }
        for p in &self.profiles {
            if let Some((f, _)) = p.findings.iter().find(|(f, _)| !names.contains(f)) {
                return Err(Error::InvalidEntity(format!(
                    "profile {} uses unknown {f}",
                    p.name
                )));
            }
        }
        if !(0.0..1.0).contains(&self.absent_fraction) {
            return Err(Error::Config("absent_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn organs(&self) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = Vec::new();
        for f in &self.findings {
            if !out.contains(&f.organ) {
                out.push(f.organ.clone());
            }
        }
        out
    }

    /// Report text for a finding set, organ by organ in spec order.
    pub fn render_report(&self, active: &BTreeSet<EntityId>) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for organ in self.organs() {
            let own: Vec<&FindingSpec> = self.findings.iter().filter(|f| f.organ == organ).collect();
            let present: Vec<&FindingSpec> =
                own.iter().copied().filter(|f| active.contains(&f.name)).collect();
            if present.is_empty() {
                if let Some(first) = own.first().filter(|f| !f.normal.is_empty()) {
                    parts.push(&first.normal);
                }
            } else {
                parts.extend(present.iter().map(|f| f.abnormal.as_str()));
            }
        }
        if active.is_empty() {
            parts.push(&self.all_clear);
        }
        parts.join(" ")
    }

    /// Every sentence the generator can emit.
    pub fn sentences(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .findings
            .iter()
            .flat_map(|f| [f.abnormal.as_str(), f.normal.as_str()])
            .filter(|s| !s.is_empty())
            .collect();
        out.push(&self.all_clear);
        out
    }

    pub fn render_image(&self, active: &BTreeSet<EntityId>, rng: &mut ChaCha8Rng) -> GrayImage {
        let n = self.image_size;
        let mut img = GrayImage::filled(n, n, 0.0);
        for r in 0..n {
            for c in 0..n {
                let base = 0.15 + 0.2 * r as f64 / n as f64;
                img.set(r, c, base + rng.random_range(-0.04..0.04));
            }
        }
        for f in self.findings.iter().filter(|f| active.contains(&f.name)) {
            let s = &f.signature;
            let gain = s.intensity * rng.random_range(0.8..1.0);
            for r in s.row..s.row + s.size {
                for c in s.col..s.col + s.size {
                    img.set(r, c, img.get(r, c) + gain);
                }
            }
        }
        img
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub image: GrayImage,
    pub report: String,
    pub findings: Vec<EntityId>,
    pub split: Split,
}

/// One line of `reports.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub image: String,
    pub report: String,
    pub findings: Vec<EntityId>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    pub records: usize,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub manifest: Manifest,
}

/// Counts for the 70/10/20 split: `round(0.7 n)` train, `round(0.1 n)` val.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((0.7 * n as f64).round() as usize).min(n);
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

fn sample_findings(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> BTreeSet<EntityId> {
    let total: f64 = spec.profiles.iter().map(|p| p.weight).sum();
    let mut active = BTreeSet::new();
    if spec.profiles.is_empty() || total <= 0.0 {
        for f in &spec.findings {
            if rng.random_bool(0.3) {
                active.insert(f.name.clone());
            }
        }
        return active;
    }
    let mut pick = rng.random_range(0.0..total);
    let mut profile = &spec.profiles[spec.profiles.len() - 1];
    for p in &spec.profiles {
        if pick < p.weight {
            profile = p;
            break;
        }
        pick -= p.weight;
    }
    for (f, rate) in &profile.findings {
        if rng.random_bool(rate.clamp(0.0, 1.0)) {
            active.insert(f.clone());
        }
    }
    if active.is_empty() {
        if let Some((f, _)) = profile.findings.first() {
            active.insert(f.clone());
        }
    }
    active
}

/// `n` records, a pure function of `(spec, n, seed)`.
pub fn generate_corpus(spec: &CorpusSpec, n: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val, test) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let records = (0..n)
        .map(|i| {
            let active = sample_findings(spec, &mut rng);
            let image = spec.render_image(&active, &mut rng);
            let findings = spec
                .findings
                .iter()
                .filter(|f| active.contains(&f.name))
                .map(|f| f.name.clone())
                .collect();
            Record {
                id: format!("s{i:05}"),
                image,
                report: spec.render_report(&active),
                findings,
                split: splits[i],
            }
        })
        .collect();
    Ok(Corpus {
        records,
        manifest: Manifest {
            generator: GENERATOR_VERSION.into(),
            seed,
            records: n,
            image_size: spec.image_size,
            train,
            val,
            test,
        },
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes `images/*.pgm`, `reports.jsonl` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut lines = String::new();
        for r in &self.records {
            let rel = format!("images/{}.pgm", r.id);
            r.image.save_pgm(&dir.join(&rel))?;
            let meta = RecordMeta {
                id: r.id.clone(),
                image: rel,
                report: r.report.clone(),
                findings: r.findings.clone(),
                split: r.split,
            };
            lines.push_str(&serde_json::to_string(&meta)?);
            lines.push('\n');
        }
        let path = dir.join("reports.jsonl");
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let path = dir.join("reports.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let meta: RecordMeta = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(Record {
                image: GrayImage::load_pgm(&dir.join(&meta.image))?,
                id: meta.id,
                report: meta.report,
                findings: meta.findings,
                split: meta.split,
            });
        }
        Ok(Corpus { records, manifest })
    }
}

/// Knowledge-base artifacts generated from a finding spec.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    pub store: TripletStore,
    pub lexicon: EntityLexicon,
    pub base_graph: BaseGraphSpec,
}

/// Located-at triplets for every finding, suggestive-of triplets from each
/// profile's lead finding to its companions, and seeded modify triplets with
/// qualifiers. The base graph keeps every organ and a seeded subset of
/// findings.
pub fn build_kb(spec: &CorpusSpec, seed: u64) -> Result<KnowledgeBase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b_625f_7365_6564);
    let mut triplets = Vec::new();
    let t = |s: &EntityId, r: Relation, o: &EntityId| Triplet {
        subject: s.clone(),
        relation: r,
        object: o.clone(),
    };
    for f in &spec.findings {
        triplets.push(t(&f.name, Relation::LocatedAt, &f.organ));
    }
    for p in &spec.profiles {
        if let Some(((lead, _), rest)) = p.findings.split_first() {
            for (other, _) in rest {
                triplets.push(t(lead, Relation::SuggestiveOf, other));
            }
        }
    }
    if !spec.qualifiers.is_empty() {
        for f in &spec.findings {
            let count = rng.random_range(1..=2.min(spec.qualifiers.len()));
            for q in spec.qualifiers.choose_multiple(&mut rng, count) {
                triplets.push(t(q, Relation::Modify, &f.name));
            }
        }
    }
    let (store, _) = TripletStore::from_triplets(triplets);

    let organs = spec.organs();
    let mut lex_entries: Vec<EntityId> = spec.findings.iter().map(|f| f.name.clone()).collect();
    lex_entries.extend(organs.iter().cloned());
    lex_entries.extend(spec.qualifiers.iter().cloned());
    let lexicon = EntityLexicon::new(lex_entries);

    let n = spec.findings.len();
    let absent = ((spec.absent_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let dropped: BTreeSet<usize> = idx[..absent].iter().copied().collect();
    let base_graph = BaseGraphSpec {
        organs,
        findings: spec
            .findings
            .iter()
            .enumerate()
            .filter(|(i, _)| !dropped.contains(i))
            .map(|(_, f)| FindingEntry {
                name: f.name.clone(),
                organ: f.organ.clone(),
            })
            .collect(),
    };
    Ok(KnowledgeBase {
        store,
        lexicon,
        base_graph,
    })
}

/// Paths of a dataset directory written by [`write_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub kb: PathBuf,
    pub lexicon: PathBuf,
    pub base_graph: PathBuf,
    pub vocab: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(root: &Path) -> Self {
        DatasetPaths {
            root: root.to_path_buf(),
            kb: root.join("kb.jsonl"),
            lexicon: root.join("lexicon.txt"),
            base_graph: root.join("base_graph.json"),
            vocab: root.join("vocab.txt"),
        }
    }
}

/// Corpus, knowledge base and vocabulary written under `dir`.
pub fn write_dataset(spec: &CorpusSpec, n: usize, seed: u64, dir: &Path) -> Result<DatasetPaths> {
    let corpus = generate_corpus(spec, n, seed)?;
    let kb = build_kb(spec, seed)?;
    let paths = DatasetPaths::in_dir(dir);
    corpus.save(dir)?;
    kb.store.save(&paths.kb)?;
    kb.lexicon.save(&paths.lexicon)?;
    kb.base_graph.save(&paths.base_graph)?;
    Vocab::build(spec.sentences()).save(&paths.vocab)?;
    Ok(paths)
}
