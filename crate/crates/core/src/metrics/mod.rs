//! Captioning metrics over tokenized candidates and reference sets.
//!
//! BLEU, ROUGE-L and METEOR are scored per item and averaged. CIDEr uses
//! document frequencies over the corpus references (the CIDEr-D form:
//! clipped TF-IDF cosine with a Gaussian length penalty, ×10). SPICE is
//! replaced by an F1 over object, attribute and relation tuples read by
//! the grammar parser.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simworld::grammar::{parse_instruction, Clause};

pub type Tokens = Vec<String>;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub candidate: Tokens,
    pub references: Vec<Tokens>,
}

fn ngrams(s: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-n: clipped precisions of orders `1..=n`, geometric mean,
/// brevity penalty against the closest reference length (shorter on ties).
pub fn bleu(candidate: &[String], references: &[Tokens], n: usize) -> f64 {
    let c = candidate.len();
    if c == 0 || references.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngrams(candidate, k);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, cnt) in ngrams(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        let matched: usize = cand.iter().map(|(g, &cnt)| cnt.min(*max_ref.get(g).unwrap_or(&0))).sum();
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

/// Longest common subsequence length.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure with `β = 1.2`, best over references.
pub fn rouge_l(candidate: &[String], references: &[Tokens]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Greedy in-order exact alignment: each candidate word takes the earliest
/// unused identical reference word. Returns `(matches, chunks)`.
pub fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|(k, &(i, j))| *k == 0 || !(pairs[k - 1].0 + 1 == i && pairs[k - 1].1 + 1 == j))
        .count();
    (pairs.len(), chunks)
}

/// METEOR with exact matching only: `F = PR / (αP + (1−α)R)` and
/// fragmentation penalty `γ (chunks/m)^β`; best over references.
pub fn meteor(candidate: &[String], references: &[Tokens]) -> f64 {
    references
        .iter()
        .map(|r| {
            let (m, chunks) = align(candidate, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
            let pen = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
            f * (1.0 - pen)
        })
        .fold(0.0, f64::max)
}

pub const CIDER_SIGMA: f64 = 6.0;

type Vector = HashMap<Vec<String>, f64>;

/// Per-item CIDEr-D scores.
pub fn cider(items: &[CorpusItem]) -> Vec<f64> {
    let n_docs = items.len();
    if n_docs == 1 {
        log::warn!("CIDEr over a single item: every n-gram has zero IDF");
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for it in items {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in &it.references {
            for n in 1..=4 {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (n_docs.max(1) as f64).ln();
    let vectorize = |s: &[String]| -> [(Vector, f64); 4] {
        std::array::from_fn(|k| {
            let mut v = Vector::new();
            for (g, cnt) in ngrams(s, k + 1) {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                v.insert(g.to_vec(), cnt as f64 * (log_n - d.ln()));
            }
            let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
            (v, norm)
        })
    };
    items
        .iter()
        .map(|it| {
            if it.candidate.is_empty() || it.references.is_empty() {
                return 0.0;
            }
            let cv = vectorize(&it.candidate);
            let mut score = [0.0; 4];
            for r in &it.references {
                let rv = vectorize(r);
                let delta = it.candidate.len() as f64 - r.len() as f64;
                let pen = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                for k in 0..4 {
                    let (c, cn) = &cv[k];
                    let (rr, rn) = &rv[k];
                    if *cn == 0.0 || *rn == 0.0 {
                        continue;
                    }
                    let dot: f64 = c.iter().map(|(g, x)| x.min(*rr.get(g).unwrap_or(&0.0)) * rr.get(g).unwrap_or(&0.0)).sum();
                    score[k] += pen * dot / (cn * rn);
                }
            }
            let m = it.references.len() as f64;
            10.0 * score.iter().map(|s| s / m).sum::<f64>() / 4.0
        })
        .collect()
}

/// Scene-graph tuple of the SPICE substitute.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SceneTuple {
    Object(usize),
    Attribute(usize, usize),
    Relation(&'static str, usize),
}

/// Objects, attributes and relations mentioned in an instruction.
pub fn tuples(tokens: &[String]) -> BTreeSet<SceneTuple> {
    let mut out = BTreeSet::new();
    for c in parse_instruction(tokens).0 {
        let verb = match c {
            Clause::Pass(_) => "pass",
            Clause::StopAt(_) => "stop at",
            Clause::GoToward(_) => "go toward",
            _ => continue,
        };
        let l = c.landmark().expect("landmark clause");
        out.insert(SceneTuple::Object(l.category));
        out.insert(SceneTuple::Attribute(l.category, l.color));
        out.insert(SceneTuple::Relation(verb, l.category));
    }
    out
}

/// Tuple F1 against the union of the references. An empty candidate scores
/// 0; a nonempty candidate with no tuples against tuple-free references
/// scores 1.
pub fn spice_lite(candidate: &[String], references: &[Tokens]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let c = tuples(candidate);
    let r: BTreeSet<SceneTuple> = references.iter().flat_map(|x| tuples(x)).collect();
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let hit = c.intersection(&r).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / c.len() as f64;
    let rec = hit / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub n_items: usize,
    pub spice: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub meteor: f64,
    pub rouge: f64,
}

impl MetricReport {
    /// The four metrics of the ablation comparison.
    pub fn headline(&self) -> [(&'static str, f64); 4] {
        [
            ("spice", self.spice),
            ("bleu4", self.bleu4),
            ("cider", self.cider),
            ("rouge", self.rouge),
        ]
    }

    /// `key value` lines with four decimals.
    pub fn to_record(&self) -> String {
        format!(
            "split {}\nn_items {}\nspice {:.4}\nbleu1 {:.4}\nbleu4 {:.4}\ncider {:.4}\nmeteor {:.4}\nrouge {:.4}\n",
            self.split, self.n_items, self.spice, self.bleu1, self.bleu4, self.cider, self.meteor, self.rouge
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (n={}): SPICE {:.4} BLEU-1 {:.4} BLEU-4 {:.4} CIDEr {:.4} METEOR {:.4} ROUGE-L {:.4}",
            self.split, self.n_items, self.spice, self.bleu1, self.bleu4, self.cider, self.meteor, self.rouge
        )
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// All six metrics, each the mean of per-item scores.
pub fn evaluate_all(items: &[CorpusItem], split: &str) -> MetricReport {
    let per = |f: &dyn Fn(&CorpusItem) -> f64| mean(items.iter().map(f));
    MetricReport {
        split: split.to_string(),
        n_items: items.len(),
        spice: per(&|it| spice_lite(&it.candidate, &it.references)),
        bleu1: per(&|it| bleu(&it.candidate, &it.references, 1)),
        bleu4: per(&|it| bleu(&it.candidate, &it.references, 4)),
        cider: mean(cider(items).into_iter()),
        meteor: per(&|it| meteor(&it.candidate, &it.references)),
        rouge: per(&|it| rouge_l(&it.candidate, &it.references)),
    }
}

/// Field-wise mean of several reports.
pub fn mean_report(reports: &[MetricReport], split: &str) -> MetricReport {
    let m = |f: fn(&MetricReport) -> f64| mean(reports.iter().map(f));
    MetricReport {
        split: split.to_string(),
        n_items: reports.iter().map(|r| r.n_items).sum(),
        spice: m(|r| r.spice),
        bleu1: m(|r| r.bleu1),
        bleu4: m(|r| r.bleu4),
        cider: m(|r| r.cider),
        meteor: m(|r| r.meteor),
        rouge: m(|r| r.rouge),
    }
}
