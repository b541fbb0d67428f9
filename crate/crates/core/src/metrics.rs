//! Text-overlap and ranking metrics. Text is tokenized with
//! [`crate::text::tokenize`]; every score lies in `[0, 1]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset intersection size.
fn clipped_overlap(cand: &[String], reference: &[String]) -> usize {
    let r = counts(reference);
    counts(cand)
        .into_iter()
        .map(|(t, c)| c.min(r.get(t).copied().unwrap_or(0)))
        .sum()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Token-multiset precision, recall and F1.
pub fn token_prf(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let overlap = clipped_overlap(&c, &r);
    let (p, rec) = (ratio(overlap, c.len()), ratio(overlap, r.len()));
    (p, rec, f1(p, rec))
}

/// Unigram F-measure with counts clipped by reference multiplicity.
pub fn rouge_1(candidate: &str, reference: &str) -> f64 {
    token_prf(candidate, reference).2
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// Longest-common-subsequence F-measure.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let lcs = lcs_len(&c, &r);
    f1(ratio(lcs, c.len()), ratio(lcs, r.len()))
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu_1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() {
        return 0.0;
    }
    let p = ratio(clipped_overlap(&c, &r), c.len());
    let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0).exp();
    p * bp
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Search nodes explored before the best alignment found so far is kept.
const ALIGN_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

struct Aligner<'a> {
    cand: &'a [String],
    positions: HashMap<&'a str, Vec<usize>>,
    /// Matches each token must reach for a maximum alignment.
    quota: HashMap<&'a str, usize>,
    /// Candidate occurrences of each token at or after each position.
    remaining: Vec<usize>,
    used: Vec<bool>,
    matched: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
}

impl<'a> Aligner<'a> {
    fn dfs(&mut self, i: usize, last: Option<(usize, usize)>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best {
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        let w = self.cand[i].as_str();
        let need = self.quota.get(w).copied().unwrap_or(0) - self.matched.get(w).copied().unwrap_or(0);
        if need > 0 {
            let mut options: Vec<usize> = self.positions[w].iter().copied().filter(|&j| !self.used[j]).collect();
            // continuing the current chunk first makes the first leaf greedy
            if let Some((li, lj)) = last {
                if li + 1 == i {
                    if let Some(p) = options.iter().position(|&j| j == lj + 1) {
                        options.swap(0, p);
                        options[1..].sort_unstable();
                    }
                }
            }
            for j in options {
                if self.nodes > ALIGN_BUDGET && self.best != usize::MAX {
                    return;
                }
                let extends = last.is_some_and(|(li, lj)| li + 1 == i && lj + 1 == j);
                self.used[j] = true;
                *self.matched.entry(w).or_insert(0) += 1;
                self.dfs(i + 1, Some((i, j)), chunks + usize::from(!extends));
                *self.matched.get_mut(w).unwrap() -= 1;
                self.used[j] = false;
            }
        }
        // skipping is allowed only while the quota stays reachable
        if self.remaining[i] > need {
            self.dfs(i + 1, last, chunks);
        }
    }
}

/// Exact-match alignment with the most matches, then the fewest chunks
/// (runs contiguous in both sequences).
pub fn align(cand: &[String], reference: &[String]) -> Alignment {
    let matches = clipped_overlap(cand, reference);
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        positions.entry(t.as_str()).or_default().push(j);
    }
    let (cc, rc) = (counts(cand), counts(reference));
    let quota = cc
        .iter()
        .map(|(&t, &c)| (t, c.min(rc.get(t).copied().unwrap_or(0))))
        .collect();
    let mut remaining = vec![0; cand.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..cand.len()).rev() {
        let n = seen.entry(cand[i].as_str()).or_insert(0);
        *n += 1;
        remaining[i] = *n;
    }
    let mut a = Aligner {
        cand,
        positions,
        quota,
        remaining,
        used: vec![false; reference.len()],
        matched: HashMap::new(),
        best: usize::MAX,
        nodes: 0,
    };
    a.dfs(0, None, 0);
    Alignment {
        matches,
        chunks: a.best,
    }
}

/// Exact-match METEOR: `F_mean · (1 − γ (chunks / matches)^β)` with
/// `F_mean = P R / (α P + (1 − α) R)`.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let a = align(&c, &r);
    if a.matches == 0 {
        return 0.0;
    }
    let p = ratio(a.matches, c.len());
    let rec = ratio(a.matches, r.len());
    let f_mean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
    let penalty = METEOR_GAMMA * (a.chunks as f64 / a.matches as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub hit: f64,
    pub mrr: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Binary-relevance hit, reciprocal rank, recall and nDCG (log2 discount)
/// over the first `k` ranked ids. Repeated ids count once.
pub fn retrieval_metrics(ranked: &[&str], gold: &BTreeSet<String>, k: usize) -> Result<RetrievalScores> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if gold.is_empty() {
        return Ok(RetrievalScores::default());
    }
    let mut seen = BTreeSet::new();
    let mut found = 0usize;
    let mut first = None;
    let mut dcg = 0.0;
    for (rank, id) in ranked.iter().take(k).enumerate() {
        if gold.contains(*id) && seen.insert(*id) {
            found += 1;
            first.get_or_insert(rank);
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..gold.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(RetrievalScores {
        hit: if found > 0 { 1.0 } else { 0.0 },
        mrr: first.map_or(0.0, |r| 1.0 / (r + 1) as f64),
        recall: ratio(found, gold.len()),
        ndcg: dcg / ideal,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu1: f64,
    pub meteor: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hit_at_k: f64,
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
}

impl MetricReport {
    pub fn compute(answer: &str, reference: &str, ranked: &[&str], gold: &BTreeSet<String>, k: usize) -> Result<Self> {
        let (precision, recall, f1) = token_prf(answer, reference);
        let r = retrieval_metrics(ranked, gold, k)?;
        Ok(MetricReport {
            rouge1: rouge_1(answer, reference),
            rouge_l: rouge_l(answer, reference),
            bleu1: bleu_1(answer, reference),
            meteor: meteor(answer, reference),
            precision,
            recall,
            f1,
            hit_at_k: r.hit,
            mrr_at_k: r.mrr,
            ndcg_at_k: r.ndcg,
            recall_at_k: r.recall,
        })
    }

    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("rouge1", self.rouge1),
            ("rougeL", self.rouge_l),
            ("bleu1", self.bleu1),
            ("meteor", self.meteor),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("hit_at_k", self.hit_at_k),
            ("mrr_at_k", self.mrr_at_k),
            ("ndcg_at_k", self.ndcg_at_k),
            ("recall_at_k", self.recall_at_k),
        ]
    }

    /// Field-wise mean; an empty slice is an error.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::validation("no reports to aggregate"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            rouge1: avg(|r| r.rouge1),
            rouge_l: avg(|r| r.rouge_l),
            bleu1: avg(|r| r.bleu1),
            meteor: avg(|r| r.meteor),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            hit_at_k: avg(|r| r.hit_at_k),
            mrr_at_k: avg(|r| r.mrr_at_k),
            ndcg_at_k: avg(|r| r.ndcg_at_k),
            recall_at_k: avg(|r| r.recall_at_k),
        })
    }
}

/// One `{"query", "reference", "gold_chunks"}` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub query: String,
    pub reference: String,
    #[serde(default)]
    pub gold_chunks: Vec<String>,
}

pub fn parse_eval(text: &str) -> Result<Vec<EvalExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleResult {
    pub query: String,
    pub answer: String,
    pub ranked: Vec<String>,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub k: usize,
    pub examples: Vec<ExampleResult>,
    pub aggregate: MetricReport,
}

impl EvalSummary {
    pub fn new(k: usize, examples: Vec<ExampleResult>) -> Result<Self> {
        let reports: Vec<MetricReport> = examples.iter().map(|e| e.metrics).collect();
        Ok(EvalSummary {
            k,
            aggregate: MetricReport::mean(&reports)?,
            examples,
        })
    }

    /// Aligned plain-text table: one row per example, then the mean.
    pub fn table(&self) -> String {
        let names = self.aggregate.fields().map(|(n, _)| n);
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<8}", "example");
        for n in names {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
        let rows = self
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| ((i + 1).to_string(), &e.metrics))
            .chain(std::iter::once(("mean".to_string(), &self.aggregate)));
        for (label, m) in rows {
            let _ = write!(out, "{label:<8}");
            for (_, v) in m.fields() {
                let _ = write!(out, " {v:>width$.4}");
            }
            out.push('\n');
        }
        out
    }
}
