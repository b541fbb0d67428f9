//! Subgraph fusion: keep the best-scored candidate whole and add triples
//! from the other two.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::{embed_vector, Embedder};
use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::subgraph::{PathKind, Subgraph};
use crate::vector::{cosine, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSubgraph {
    pub subgraph: Subgraph,
    pub score: f64,
}

impl ScoredSubgraph {
    pub fn new(subgraph: Subgraph, score: f64) -> Self {
        ScoredSubgraph { subgraph, score }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Lower-subgraph triples whose query similarity reaches the threshold.
    #[default]
    RmFusion,
    /// Every triple of every candidate.
    AllFusion,
    /// The five most query-similar triples of each lower subgraph.
    Top5Fusion,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::RmFusion => "rm_fusion",
            FusionStrategy::AllFusion => "all_fusion",
            FusionStrategy::Top5Fusion => "top5_fusion",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rm_fusion" => Ok(FusionStrategy::RmFusion),
            "all_fusion" => Ok(FusionStrategy::AllFusion),
            "top5_fusion" => Ok(FusionStrategy::Top5Fusion),
            other => Err(Error::validation(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Cosine between the best subgraph's text embedding and the query.
    DerivedFromMax,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold_policy: ThresholdPolicy,
    pub strategy: FusionStrategy,
    /// Used when the derived threshold is undefined (zero embedding).
    pub fallback_tau: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            threshold_policy: ThresholdPolicy::DerivedFromMax,
            strategy: FusionStrategy::RmFusion,
            fallback_tau: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdPolicy::Fixed(tau) = self.threshold_policy {
            if !(-1.0..=1.0).contains(&tau) {
                return Err(Error::validation(format!("fixed tau {tau} outside [-1, 1]")));
            }
        }
        if !(-1.0..=1.0).contains(&self.fallback_tau) {
            return Err(Error::validation("fallback tau outside [-1, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedTriple {
    pub triple: Triple,
    pub similarity: f64,
    pub source: PathKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionResult {
    pub fused: Subgraph,
    pub base_kind: PathKind,
    pub base_score: f64,
    pub threshold_used: f64,
    /// Whether the derived threshold was undefined and the fallback applied.
    pub threshold_fallback: bool,
    pub selected: Vec<SelectedTriple>,
}

/// Highest score among exactly one one-hop, one multi-hop and one PageRank
/// candidate; ties go to one-hop, then multi-hop.
pub fn select_max(scored: &[ScoredSubgraph]) -> Result<&ScoredSubgraph> {
    let mut by_kind: BTreeMap<PathKind, &ScoredSubgraph> = BTreeMap::new();
    for s in scored {
        if !PathKind::CANDIDATES.contains(&s.subgraph.kind) {
            return Err(Error::validation(format!("unexpected candidate kind {}", s.subgraph.kind)));
        }
        if !s.score.is_finite() {
            return Err(Error::validation(format!("{} score is not finite", s.subgraph.kind)));
        }
        if by_kind.insert(s.subgraph.kind, s).is_some() {
            return Err(Error::validation(format!("duplicate {} candidate", s.subgraph.kind)));
        }
    }
    let mut best: Option<&ScoredSubgraph> = None;
    for kind in PathKind::CANDIDATES {
        let s = by_kind
            .get(&kind)
            .ok_or_else(|| Error::validation(format!("missing {kind} candidate")))?;
        if best.is_none_or(|b| s.score > b.score) {
            best = Some(s);
        }
    }
    Ok(best.expect("three candidates present"))
}

/// `cos(embed(serialize(max_subgraph)), q)`.
pub fn compute_threshold(max_subgraph: &Subgraph, q: &EmbeddingVector<f64>, embedder: &dyn Embedder) -> Result<f64> {
    let s = embed_vector::<f64>(embedder, &max_subgraph.serialize())?;
    cosine(&s, q)
}

/// `cos(embed("head relation tail"), q)`.
pub fn triple_similarity(t: &Triple, q: &EmbeddingVector<f64>, embedder: &dyn Embedder) -> Result<f64> {
    cosine(&embed_vector::<f64>(embedder, &t.text())?, q)
}

pub fn fuse(
    scored: &[ScoredSubgraph],
    q: &EmbeddingVector<f64>,
    cfg: &FusionConfig,
    embedder: &dyn Embedder,
) -> Result<FusionResult> {
    cfg.validate()?;
    let best = select_max(scored)?;
    let base = &best.subgraph;
    let lower: Vec<&Subgraph> = PathKind::CANDIDATES
        .iter()
        .filter(|&&k| k != base.kind)
        .filter_map(|&k| scored.iter().find(|s| s.subgraph.kind == k))
        .map(|s| &s.subgraph)
        .collect();

    // candidate triples not already in the base, first occurrence wins
    let mut seen = std::collections::BTreeSet::new();
    let mut candidates: Vec<(&Triple, PathKind)> = Vec::new();
    for sub in &lower {
        for t in sub.triples() {
            if !base.has_triple(&t.key()) && seen.insert(t.key()) {
                candidates.push((t, sub.kind));
            }
        }
    }

    let mut threshold_fallback = false;
    let (threshold_used, selected) = match cfg.strategy {
        FusionStrategy::AllFusion => {
            let sel = candidates
                .iter()
                .map(|&(t, src)| {
                    triple_similarity(t, q, embedder).map(|s| SelectedTriple {
                        triple: t.clone(),
                        similarity: s,
                        source: src,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (-1.0, sel)
        }
        FusionStrategy::RmFusion => {
            let tau = match cfg.threshold_policy {
                ThresholdPolicy::Fixed(tau) => tau,
                ThresholdPolicy::DerivedFromMax => match compute_threshold(base, q, embedder) {
                    Ok(r) => r,
                    Err(Error::ZeroVector) => {
                        threshold_fallback = true;
                        cfg.fallback_tau
                    }
                    Err(e) => return Err(e),
                },
            };
            let mut sel = Vec::new();
            for &(t, src) in &candidates {
                let s = triple_similarity(t, q, embedder)?;
                if s >= tau {
                    sel.push(SelectedTriple {
                        triple: t.clone(),
                        similarity: s,
                        source: src,
                    });
                }
            }
            (tau, sel)
        }
        FusionStrategy::Top5Fusion => {
            let mut sel = Vec::new();
            for sub in &lower {
                let mut ranked = sub
                    .triples()
                    .iter()
                    .map(|t| triple_similarity(t, q, embedder).map(|s| (t, s)))
                    .collect::<Result<Vec<_>>>()?;
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.key().cmp(&b.0.key())));
                for (t, s) in ranked.into_iter().take(5) {
                    if !base.has_triple(&t.key()) && !sel.iter().any(|x: &SelectedTriple| x.triple.key() == t.key()) {
                        sel.push(SelectedTriple {
                            triple: t.clone(),
                            similarity: s,
                            source: sub.kind,
                        });
                    }
                }
            }
            let floor = sel.iter().map(|s| s.similarity).fold(f64::INFINITY, f64::min);
            (if floor.is_finite() { floor } else { -1.0 }, sel)
        }
    };

    let mut selected = selected;
    selected.sort_by_key(|s| s.triple.key());
    let fused = Subgraph::new(
        base.center.clone(),
        PathKind::Fused,
        base.triples().iter().cloned().chain(selected.iter().map(|s| s.triple.clone())),
        Vec::new(),
    );
    Ok(FusionResult {
        fused,
        base_kind: base.kind,
        base_score: best.score,
        threshold_used,
        threshold_fallback,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::HashEmbedder;

    fn sub(kind: PathKind, triples: &[(&str, &str, &str)]) -> Subgraph {
        Subgraph::new("c", kind, triples.iter().map(|(h, r, t)| Triple::new(*h, *r, *t)), Vec::new())
    }

    fn scored(scores: [f64; 3]) -> Vec<ScoredSubgraph> {
        PathKind::CANDIDATES
            .iter()
            .zip(scores)
            .map(|(&k, s)| ScoredSubgraph::new(Subgraph::singleton("c", k), s))
            .collect()
    }

    #[test]
    fn select_max_cases() {
        assert_eq!(select_max(&scored([0.9, 0.3, 0.5])).unwrap().subgraph.kind, PathKind::OneHop);
        assert_eq!(select_max(&scored([0.2, 0.3, 0.5])).unwrap().subgraph.kind, PathKind::PageRank);
        assert_eq!(select_max(&scored([0.4, 0.4, 0.4])).unwrap().subgraph.kind, PathKind::OneHop);
        assert_eq!(select_max(&scored([0.1, 0.4, 0.4])).unwrap().subgraph.kind, PathKind::MultiHop);
        let mut two = scored([0.1, 0.2, 0.3]);
        two.pop();
        assert!(select_max(&two).is_err());
        let mut dup = scored([0.1, 0.2, 0.3]);
        dup[2] = ScoredSubgraph::new(Subgraph::singleton("c", PathKind::OneHop), 0.3);
        assert!(select_max(&dup).is_err());
    }

    #[test]
    fn threshold_and_similarity_with_stub_embedder() {
        let e = HashEmbedder::new(64).unwrap();
        let q = embed_vector::<f64>(&e, "alpha beta gamma").unwrap();
        let s = sub(PathKind::OneHop, &[("alpha", "beta", "gamma")]);
        assert!((compute_threshold(&s, &q, &e).unwrap() - 1.0).abs() < 1e-12);
        let t = Triple::new("alpha", "beta", "gamma");
        assert!((triple_similarity(&t, &q, &e).unwrap() - 1.0).abs() < 1e-12);
        let empty = Subgraph::singleton("c", PathKind::OneHop);
        assert!(matches!(compute_threshold(&empty, &q, &e), Err(Error::ZeroVector)));
    }

    #[test]
    fn threshold_orthogonal_is_zero() {
        struct Axis;
        impl Embedder for Axis {
            fn embed(&self, text: &str) -> Result<Vec<f64>> {
                Ok(if text.starts_with('q') { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            }
        }
        let q = EmbeddingVector::from_f64(&[1.0, 0.0]).unwrap();
        let s = sub(PathKind::OneHop, &[("a", "r", "b")]);
        assert_eq!(compute_threshold(&s, &q, &Axis).unwrap(), 0.0);
    }

    #[test]
    fn all_fusion_counts_union() {
        let e = HashEmbedder::new(32).unwrap();
        let q = embed_vector::<f64>(&e, "query").unwrap();
        let cands = vec![
            ScoredSubgraph::new(sub(PathKind::OneHop, &[("c", "r", "a"), ("c", "r", "b"), ("c", "r", "d")]), 0.9),
            ScoredSubgraph::new(sub(PathKind::MultiHop, &[("a", "s", "x"), ("a", "s", "y")]), 0.1),
            ScoredSubgraph::new(sub(PathKind::PageRank, &[("b", "t", "z"), ("z", "t", "w")]), 0.2),
        ];
        let cfg = FusionConfig { strategy: FusionStrategy::AllFusion, ..Default::default() };
        let r = fuse(&cands, &q, &cfg, &e).unwrap();
        assert_eq!(r.fused.triples().len(), 7);
        assert_eq!(r.fused.kind, PathKind::Fused);
        assert_eq!(r.base_kind, PathKind::OneHop);
    }

    #[test]
    fn nothing_passes_threshold_returns_base() {
        let e = HashEmbedder::new(64).unwrap();
        let q = embed_vector::<f64>(&e, "c r a").unwrap();
        let base = sub(PathKind::OneHop, &[("c", "r", "a")]);
        let cands = vec![
            ScoredSubgraph::new(base.clone(), 0.9),
            ScoredSubgraph::new(sub(PathKind::MultiHop, &[("x", "y", "z")]), 0.1),
            ScoredSubgraph::new(sub(PathKind::PageRank, &[("u", "v", "w")]), 0.2),
        ];
        let r = fuse(&cands, &q, &FusionConfig::default(), &e).unwrap();
        assert!(r.selected.is_empty());
        assert_eq!(r.fused.triples(), base.triples());
        assert!((r.threshold_used - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_base_falls_back_to_fixed_tau() {
        let e = HashEmbedder::new(64).unwrap();
        let q = embed_vector::<f64>(&e, "x y z").unwrap();
        let cands = vec![
            ScoredSubgraph::new(Subgraph::singleton("c", PathKind::OneHop), 0.9),
            ScoredSubgraph::new(sub(PathKind::MultiHop, &[("x", "y", "z")]), 0.1),
            ScoredSubgraph::new(sub(PathKind::PageRank, &[("u", "v", "w")]), 0.2),
        ];
        let r = fuse(&cands, &q, &FusionConfig::default(), &e).unwrap();
        assert!(r.threshold_fallback);
        assert_eq!(r.threshold_used, 0.5);
        assert_eq!(r.selected.len(), 1);
        assert_eq!(r.selected[0].triple.head, "x");
    }

    #[test]
    fn top5_caps_each_source() {
        let e = HashEmbedder::new(64).unwrap();
        let q = embed_vector::<f64>(&e, "n0 n1 n2").unwrap();
        let names: Vec<String> = (0..8).map(|i| format!("n{i}")).collect();
        let many: Vec<(&str, &str, &str)> = names.iter().map(|n| ("m", "rel", n.as_str())).collect();
        let cands = vec![
            ScoredSubgraph::new(sub(PathKind::OneHop, &[("c", "r", "a")]), 0.9),
            ScoredSubgraph::new(sub(PathKind::MultiHop, &many), 0.1),
            ScoredSubgraph::new(sub(PathKind::PageRank, &[]), 0.2),
        ];
        let cfg = FusionConfig { strategy: FusionStrategy::Top5Fusion, ..Default::default() };
        let r = fuse(&cands, &q, &cfg, &e).unwrap();
        assert_eq!(r.selected.len(), 5);
        assert_eq!(r.fused.triples().len(), 6);
        assert!(r.selected.iter().all(|s| s.similarity >= r.threshold_used));
    }

    #[test]
    fn strategy_names_parse() {
        for s in [FusionStrategy::RmFusion, FusionStrategy::AllFusion, FusionStrategy::Top5Fusion] {
            assert_eq!(s.as_str().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("best".parse::<FusionStrategy>().is_err());
        let bad = FusionConfig { threshold_policy: ThresholdPolicy::Fixed(1.5), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
