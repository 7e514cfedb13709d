//! Text-generation metrics and trigger-phrase clinical labels.
//!
//! All scores tokenize with [`vocab::tokenize`]: lowercase, whitespace split,
//! punctuation marks as separate tokens.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

type Ngrams = BTreeMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> Ngrams {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_pairs(candidates: &[&str], references: &[&str]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    Ok(())
}

/// Corpus BLEU with uniform 1..4-gram weights, clipped counts and the
/// brevity penalty. With `smoothing`, precisions for n > 1 use add-one
/// counts; without it any zero precision gives 0.
pub fn bleu4(candidates: &[&str], references: &[&str], smoothing: bool) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokenize(c), tokenize(r));
        cand_len += ct.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let (cn, rn) = (ngrams(&ct, n), ngrams(&rt, n));
            for (g, &k) in &cn {
                matched[n - 1] += k.min(rn.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if smoothing && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln() / 4.0;
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean sentence-level ROUGE-L F-measure with `beta = 1.2`.
pub fn rouge_l(candidates: &[&str], references: &[&str]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokenize(c), tokenize(r));
        let l = lcs(&ct, &rt);
        if l == 0 {
            continue;
        }
        let p = l as f64 / ct.len() as f64;
        let rc = l as f64 / rt.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        sum += (1.0 + b2) * p * rc / (rc + b2 * p);
    }
    Ok(sum / candidates.len() as f64)
}

/// Document frequencies for CIDEr, computed once per reference corpus.
#[derive(Clone, Debug)]
pub struct CiderIdf {
    docs: usize,
    df: [BTreeMap<Vec<String>, usize>; 4],
}

impl CiderIdf {
    pub fn new(corpus: &[&str]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("CIDEr corpus"));
        }
        let mut df: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
        for doc in corpus {
            let toks = tokenize(doc);
            for n in 1..=4 {
                for g in ngrams(&toks, n).into_keys() {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(CiderIdf {
            docs: corpus.len(),
            df,
        })
    }

    fn idf(&self, n: usize, g: &[String]) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
        (self.docs as f64 / df as f64).ln()
    }

    fn vector(&self, tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
        let grams = ngrams(tokens, n);
        let total: usize = grams.values().sum();
        grams
            .into_iter()
            .map(|(g, k)| {
                let w = k as f64 / total as f64 * self.idf(n, &g);
                (g, w)
            })
            .collect()
    }

    /// Mean over n = 1..4 of the TF-IDF cosine between one pair.
    pub fn pair_score(&self, candidate: &str, reference: &str) -> f64 {
        let (ct, rt) = (tokenize(candidate), tokenize(reference));
        let mut score = 0.0;
        for n in 1..=4 {
            let (vc, vr) = (self.vector(&ct, n), self.vector(&rt, n));
            let dot: f64 = vc
                .iter()
                .map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0))
                .sum();
            let nc = vc.values().map(|w| w * w).sum::<f64>().sqrt();
            let nr = vr.values().map(|w| w * w).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                score += dot / (nc * nr) / 4.0;
            }
        }
        score
    }
}

/// Plain CIDEr (no length penalty, no count clipping, no x10 scaling),
/// averaged over pairs, with IDF from `corpus`.
pub fn cider(candidates: &[&str], references: &[&str], corpus: &[&str]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let idf = CiderIdf::new(corpus)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| idf.pair_score(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Label name to trigger phrases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLexicon {
    pub labels: Vec<(String, Vec<String>)>,
}

pub const LABEL_COUNT: usize = 14;

impl LabelLexicon {
    pub fn chexpert_like() -> Self {
        let table: [(&str, &[&str]); LABEL_COUNT] = [
            ("No Finding", &["no acute abnormality", "no finding"]),
            (
                "Enlarged Cardiomediastinum",
                &["enlarged cardiomediastinum", "widened mediastinum"],
            ),
            ("Cardiomegaly", &["cardiomegaly", "enlarged heart"]),
            ("Lung Lesion", &["nodule", "mass", "lesion"]),
            ("Lung Opacity", &["opacity", "opacities"]),
            ("Edema", &["edema"]),
            ("Consolidation", &["consolidation"]),
            ("Pneumonia", &["pneumonia"]),
            ("Atelectasis", &["atelectasis"]),
            ("Pneumothorax", &["pneumothorax"]),
            ("Pleural Effusion", &["effusion"]),
            ("Pleural Other", &["pleural thickening", "fibrosis"]),
            ("Fracture", &["fracture"]),
            (
                "Support Devices",
                &["foreign object", "tube", "catheter", "pacemaker"],
            ),
        ];
        LabelLexicon {
            labels: table
                .iter()
                .map(|(l, ts)| (l.to_string(), ts.iter().map(|t| t.to_string()).collect()))
                .collect(),
        }
    }

    /// JSON list of `[label, [trigger, ...]]` pairs.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex: LabelLexicon = serde_json::from_str(&text)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != LABEL_COUNT {
            return Err(Error::Config(format!(
                "label lexicon needs {LABEL_COUNT} labels, found {}",
                self.labels.len()
            )));
        }
        Ok(())
    }

    /// Per-label positives for `text`: any trigger phrase occurring as a
    /// whole-token sequence.
    pub fn label(&self, text: &str) -> Vec<bool> {
        let toks = tokenize(text);
        self.labels
            .iter()
            .map(|(_, triggers)| {
                triggers.iter().any(|t| {
                    let phrase = tokenize(t);
                    !phrase.is_empty()
                        && toks.len() >= phrase.len()
                        && toks.windows(phrase.len()).any(|w| w == &phrase[..])
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Zero denominators give zero scores.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub scores: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeReport {
    pub per_label: Vec<LabelScore>,
    pub micro: Prf,
}

pub fn ce_metrics(candidates: &[&str], references: &[&str], lexicon: &LabelLexicon) -> Result<CeReport> {
    lexicon.validate()?;
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    let k = lexicon.labels.len();
    let mut counts = vec![(0usize, 0usize, 0usize); k];
    for (c, r) in candidates.iter().zip(references) {
        let (lc, lr) = (lexicon.label(c), lexicon.label(r));
        for i in 0..k {
            match (lc[i], lr[i]) {
                (true, true) => counts[i].0 += 1,
                (true, false) => counts[i].1 += 1,
                (false, true) => counts[i].2 += 1,
                (false, false) => {}
            }
        }
    }
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(CeReport {
        per_label: lexicon
            .labels
            .iter()
            .zip(&counts)
            .map(|((label, _), &(tp, fp, fn_))| LabelScore {
                label: label.clone(),
                tp,
                fp,
                fn_,
                scores: Prf::from_counts(tp, fp, fn_),
            })
            .collect(),
        micro: Prf::from_counts(tp, fp, fn_),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub ce: CeReport,
}

/// All metrics; CIDEr document frequencies come from the references.
pub fn evaluate_texts(
    candidates: &[&str],
    references: &[&str],
    lexicon: &LabelLexicon,
    smoothing: bool,
) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu4: bleu4(candidates, references, smoothing)?,
        rouge_l: rouge_l(candidates, references)?,
        cider: cider(candidates, references, references)?,
        ce: ce_metrics(candidates, references, lexicon)?,
    })
}
