//! Candidate subgraphs around a mapped entity: one-hop, two-hop and
//! personalized-PageRank importance.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::{Direction, ExtractionRecord, KnowledgeGraph, Triple, TripleKey};
use crate::scalar::Scalar;
use crate::vector::{cosine, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    OneHop,
    MultiHop,
    PageRank,
    Fused,
}

impl PathKind {
    pub const CANDIDATES: [PathKind; 3] = [PathKind::OneHop, PathKind::MultiHop, PathKind::PageRank];

    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::OneHop => "onehop",
            PathKind::MultiHop => "multihop",
            PathKind::PageRank => "pagerank",
            PathKind::Fused => "fused",
        }
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehop" => Ok(PathKind::OneHop),
            "multihop" => Ok(PathKind::MultiHop),
            "pagerank" => Ok(PathKind::PageRank),
            "fused" => Ok(PathKind::Fused),
            other => Err(Error::validation(format!("unknown subgraph kind '{other}'"))),
        }
    }
}

/// A center entity with a deduplicated, key-sorted triple set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subgraph {
    pub center: String,
    pub kind: PathKind,
    triples: Vec<Triple>,
    members: BTreeSet<String>,
}

impl Subgraph {
    /// Members are the center, every triple endpoint and `extra_members`.
    /// Duplicate keys collapse to the heaviest copy.
    pub fn new(
        center: impl Into<String>,
        kind: PathKind,
        triples: impl IntoIterator<Item = Triple>,
        extra_members: impl IntoIterator<Item = String>,
    ) -> Self {
        let center = center.into();
        let mut by_key: BTreeMap<TripleKey, Triple> = BTreeMap::new();
        for t in triples {
            match by_key.get_mut(&t.key()) {
                Some(existing) if existing.weight >= t.weight => {}
                Some(existing) => *existing = t,
                None => {
                    by_key.insert(t.key(), t);
                }
            }
        }
        let mut members: BTreeSet<String> = extra_members.into_iter().collect();
        members.insert(center.clone());
        for t in by_key.values() {
            members.insert(t.head.clone());
            members.insert(t.tail.clone());
        }
        Subgraph {
            center,
            kind,
            triples: by_key.into_values().collect(),
            members,
        }
    }

    pub fn singleton(center: impl Into<String>, kind: PathKind) -> Self {
        Self::new(center, kind, Vec::new(), Vec::new())
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn members(&self) -> &BTreeSet<String> {
        &self.members
    }

    pub fn has_triple(&self, key: &TripleKey) -> bool {
        self.triples.binary_search_by(|t| t.key().cmp(key)).is_ok()
    }

    pub fn with_kind(mut self, kind: PathKind) -> Self {
        self.kind = kind;
        self
    }

    /// `"head relation tail"` per triple in key order, joined by `"; "`.
    pub fn serialize(&self) -> String {
        self.triples.iter().map(Triple::text).collect::<Vec<_>>().join("; ")
    }

    /// Structural checks: center and endpoints are members, and for
    /// one-hop/multi-hop kinds every member is reachable from the center
    /// through the subgraph's own triples (ignoring direction).
    pub fn check_invariants(&self) -> Result<()> {
        if !self.members.contains(&self.center) {
            return Err(Error::Contract("center is not a member".into()));
        }
        for t in &self.triples {
            if !self.members.contains(&t.head) || !self.members.contains(&t.tail) {
                return Err(Error::Contract(format!("triple '{}' has a non-member endpoint", t.text())));
            }
        }
        if matches!(self.kind, PathKind::OneHop | PathKind::MultiHop) {
            let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
            for t in &self.triples {
                adj.entry(&t.head).or_default().push(&t.tail);
                adj.entry(&t.tail).or_default().push(&t.head);
            }
            let mut seen: BTreeSet<&str> = BTreeSet::from([self.center.as_str()]);
            let mut queue = VecDeque::from([self.center.as_str()]);
            while let Some(u) = queue.pop_front() {
                for &v in adj.get(u).into_iter().flatten() {
                    if seen.insert(v) {
                        queue.push_back(v);
                    }
                }
            }
            if seen.len() != self.members.len() {
                return Err(Error::Contract(format!("{} subgraph has unreachable members", self.kind)));
            }
        }
        Ok(())
    }
}

/// Pairwise entity similarity, typically cosine over entity embeddings.
pub trait EntitySimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

impl<F> EntitySimilarity for F
where
    F: Fn(&str, &str) -> Result<f64>,
{
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        self(a, b)
    }
}

/// Cosine similarity between stored entity vectors.
pub struct IndexSimilarity<'a, T> {
    index: &'a VectorIndex<T>,
}

impl<'a, T: Scalar> IndexSimilarity<'a, T> {
    pub fn new(index: &'a VectorIndex<T>) -> Self {
        IndexSimilarity { index }
    }
}

impl<T: Scalar> EntitySimilarity for IndexSimilarity<'_, T> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let lookup = |id: &str| {
            self.index
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("embedding for entity '{id}'")))
        };
        Ok(cosine(lookup(a)?, lookup(b)?)?.to_f64_lossy())
    }
}

/// Scores `candidates` against `center`; descending similarity, ascending id.
fn rank_by_similarity<'a>(
    center: &str,
    candidates: impl IntoIterator<Item = &'a String>,
    sim: &dyn EntitySimilarity,
) -> Result<Vec<(String, f64)>> {
    let mut scored = candidates
        .into_iter()
        .map(|c| sim.similarity(center, c).map(|s| (c.clone(), s)))
        .collect::<Result<Vec<_>>>()?;
    crate::vector::sort_scored(&mut scored);
    Ok(scored)
}

fn require_entity(g: &KnowledgeGraph, e: &str) -> Result<()> {
    if g.contains(e) {
        Ok(())
    } else {
        Err(Error::NotFound(format!("entity '{e}'")))
    }
}

fn require_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    Ok(())
}

/// Neighbors in both directions, excluding the entity itself.
fn undirected_neighbors(g: &KnowledgeGraph, e: &str) -> Result<BTreeSet<String>> {
    let mut n = g.neighbor_ids(e, Direction::Both)?;
    n.remove(e);
    Ok(n)
}

/// `e_t` plus its `k` most similar neighbors (either direction), with every
/// triple joining `e_t` to a selected neighbor.
pub fn one_hop_subgraph(
    g: &KnowledgeGraph,
    center: &str,
    k: usize,
    sim: &dyn EntitySimilarity,
) -> Result<Subgraph> {
    require_entity(g, center)?;
    require_k(k)?;
    let neighbors = undirected_neighbors(g, center)?;
    let ranked = rank_by_similarity(center, &neighbors, sim)?;
    let triples: Vec<Triple> = ranked
        .iter()
        .take(k)
        .flat_map(|(v, _)| g.edges_between(center, v))
        .cloned()
        .collect();
    Ok(Subgraph::new(center, PathKind::OneHop, triples, Vec::new()))
}

/// Two-hop expansion through the (up to) two most similar one-hop neighbors.
/// Second-hop candidates are scored against the center; the `k` best are
/// kept along with the hop triples that lead to them.
pub fn multi_hop_subgraph(
    g: &KnowledgeGraph,
    center: &str,
    k: usize,
    sim: &dyn EntitySimilarity,
) -> Result<Subgraph> {
    require_entity(g, center)?;
    require_k(k)?;
    let first_hop = rank_by_similarity(center, &undirected_neighbors(g, center)?, sim)?;
    let bridges: Vec<&str> = first_hop.iter().take(2).map(|(v, _)| v.as_str()).collect();
    if bridges.is_empty() {
        return Ok(Subgraph::singleton(center, PathKind::MultiHop));
    }

    let mut second_hop = BTreeSet::new();
    for &b in &bridges {
        second_hop.extend(undirected_neighbors(g, b)?);
    }
    second_hop.remove(center);
    for &b in &bridges {
        second_hop.remove(b);
    }
    let ranked = rank_by_similarity(center, &second_hop, sim)?;
    let chosen: Vec<&str> = ranked.iter().take(k).map(|(v, _)| v.as_str()).collect();

    let mut triples: Vec<Triple> = Vec::new();
    for &b in &bridges {
        triples.extend(g.edges_between(center, b).into_iter().cloned());
        for &x in &chosen {
            triples.extend(g.edges_between(b, x).into_iter().cloned());
        }
    }
    Ok(Subgraph::new(center, PathKind::MultiHop, triples, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankConfig<T> {
    pub damping: T,
    pub max_iters: usize,
    pub tolerance: T,
}

impl<T: Scalar> Default for PageRankConfig<T> {
    fn default() -> Self {
        PageRankConfig {
            damping: T::lit(0.85),
            max_iters: 100,
            tolerance: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> PageRankConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > T::zero() && self.damping < T::one()) {
            return Err(Error::validation(format!("damping must lie in (0, 1), got {}", self.damping)));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be positive"));
        }
        if !(self.tolerance > T::zero()) {
            return Err(Error::validation("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Teleport distribution over entity ids; entries sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationVector<T> {
    weights: BTreeMap<String, T>,
}

impl<T: Scalar> PersonalizationVector<T> {
    pub fn new(weights: BTreeMap<String, T>) -> Result<Self> {
        if weights.values().any(|&w| !(w >= T::zero() && w <= T::one())) {
            return Err(Error::validation("personalization entries must lie in [0, 1]"));
        }
        let total: T = weights.values().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::validation(format!("personalization must sum to 1, got {total}")));
        }
        Ok(PersonalizationVector { weights })
    }

    /// Zero for ids not listed.
    pub fn get(&self, id: &str) -> T {
        self.weights.get(id).copied().unwrap_or_else(T::zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, T)> {
        self.weights.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn total(&self) -> T {
        self.weights.values().copied().sum()
    }
}

/// All teleport mass on `center`.
pub fn personalization_vector<T: Scalar>(center: &str) -> PersonalizationVector<T> {
    PersonalizationVector {
        weights: BTreeMap::from([(center.to_string(), T::one())]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRankResult<T> {
    pub scores: BTreeMap<String, T>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 change of the last iteration.
    pub residual: T,
}

/// Power iteration of `S ← (1−d)·p + d·Pᵀ S` with out-edges normalized by
/// total out-weight. Mass on nodes without out-edges is re-teleported
/// according to `p`. Stops when the L1 change drops below the tolerance or
/// after `max_iters`, reporting which.
pub fn personalized_pagerank<T: Scalar>(
    g: &KnowledgeGraph,
    p: &PersonalizationVector<T>,
    cfg: &PageRankConfig<T>,
) -> Result<PageRankResult<T>> {
    cfg.validate()?;
    if g.is_empty() {
        return Err(Error::validation("pagerank needs a non-empty graph"));
    }
    let ids: Vec<&str> = g.entity_ids().collect();
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for (id, _) in p.iter() {
        if !pos.contains_key(id) {
            return Err(Error::NotFound(format!("personalization entity '{id}'")));
        }
    }
    let n = ids.len();
    let teleport: Vec<T> = ids.iter().map(|id| p.get(id)).collect();

    let edges: Vec<(usize, usize, T)> = g
        .triples()
        .iter()
        .map(|t| (pos[t.head.as_str()], pos[t.tail.as_str()], T::lit(t.weight)))
        .collect();
    let mut out_weight = vec![T::zero(); n];
    for &(u, _, w) in &edges {
        out_weight[u] = out_weight[u] + w;
    }
    let transitions: Vec<(usize, usize, T)> = edges.iter().map(|&(u, v, w)| (u, v, w / out_weight[u])).collect();

    let d = cfg.damping;
    let mut scores = teleport.clone();
    let mut next = vec![T::zero(); n];
    let mut residual = T::infinity();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        let dangling: T = (0..n).filter(|&u| out_weight[u].is_zero()).map(|u| scores[u]).sum();
        for v in 0..n {
            next[v] = (T::one() - d) * teleport[v] + d * dangling * teleport[v];
        }
        for &(u, v, share) in &transitions {
            next[v] = next[v] + d * share * scores[u];
        }
        residual = scores.iter().zip(&next).map(|(&a, &b)| (a - b).abs()).sum();
        std::mem::swap(&mut scores, &mut next);
        if residual < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(PageRankResult {
        scores: ids.iter().map(|id| id.to_string()).zip(scores).collect(),
        iterations,
        converged,
        residual,
    })
}

/// `center` plus the `k` highest-scoring other entities (nonzero score only),
/// with every graph triple whose endpoints are both members.
pub fn pagerank_subgraph<T: Scalar>(
    g: &KnowledgeGraph,
    center: &str,
    k: usize,
    cfg: &PageRankConfig<T>,
) -> Result<(Subgraph, PageRankResult<T>)> {
    require_entity(g, center)?;
    let pr = personalized_pagerank(g, &personalization_vector(center), cfg)?;
    let mut ranked: Vec<(String, T)> = pr
        .scores
        .iter()
        .filter(|(id, s)| id.as_str() != center && **s > T::zero())
        .map(|(id, &s)| (id.clone(), s))
        .collect();
    crate::vector::sort_scored(&mut ranked);
    let mut members: BTreeSet<String> = ranked.into_iter().take(k).map(|(id, _)| id).collect();
    members.insert(center.to_string());
    let triples: Vec<Triple> = g
        .triples()
        .iter()
        .filter(|t| members.contains(&t.head) && members.contains(&t.tail))
        .cloned()
        .collect();
    Ok((Subgraph::new(center, PathKind::PageRank, triples, members), pr))
}

/// Line-delimited debug dump: a header object followed by one extraction
/// record per triple.
pub fn dump_subgraph(sub: &Subgraph, score: Option<f64>, node_scores: Option<&BTreeMap<String, f64>>) -> String {
    let mut header = json!({
        "center": sub.center,
        "path_kind": sub.kind,
        "score": score,
        "members": sub.members,
        "triples": sub.triples.len(),
    });
    if let Some(ns) = node_scores {
        header["pagerank_scores"] = json!(ns);
        header["pagerank_total"] = json!(ns.values().sum::<f64>());
    }
    let mut out = header.to_string();
    out.push('\n');
    for t in &sub.triples {
        out.push_str(&serde_json::to_string(&ExtractionRecord::from(t)).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Similarity table keyed on the non-center entity; unknown pairs score 0.
    fn table(pairs: &[(&str, f64)]) -> impl Fn(&str, &str) -> Result<f64> {
        let m: HashMap<String, f64> = pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        move |_a: &str, b: &str| Ok(*m.get(b).unwrap_or(&0.0))
    }

    fn graph(edges: &[(&str, &str)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (h, t) in edges {
            g.add_triple(Triple::new(*h, "r", *t)).unwrap();
        }
        g
    }

    fn members(s: &Subgraph) -> Vec<&str> {
        s.members().iter().map(String::as_str).collect()
    }

    #[test]
    fn serialize_is_sorted_and_joined() {
        assert_eq!(Subgraph::singleton("A", PathKind::OneHop).serialize(), "");
        let one = Subgraph::new("A", PathKind::OneHop, vec![Triple::new("A", "knows", "B")], vec![]);
        assert_eq!(one.serialize(), "A knows B");
        let t1 = Triple::new("B", "r", "C");
        let t2 = Triple::new("A", "s", "B");
        let a = Subgraph::new("A", PathKind::Fused, vec![t1.clone(), t2.clone()], vec![]);
        let b = Subgraph::new("A", PathKind::Fused, vec![t2, t1], vec![]);
        assert_eq!(a.serialize(), b.serialize());
        assert_eq!(a.serialize(), "A s B; B r C");
    }

    #[test]
    fn one_hop_star_and_top_k() {
        let g = graph(&[("e", "a"), ("e", "b"), ("e", "c")]);
        let s = one_hop_subgraph(&g, "e", 10, &table(&[])).unwrap();
        assert_eq!(members(&s), vec!["a", "b", "c", "e"]);
        s.check_invariants().unwrap();

        let g = graph(&[("e", "a"), ("e", "b"), ("c", "e"), ("e", "d"), ("x", "e")]);
        let sim = table(&[("a", 0.1), ("b", 0.9), ("c", 0.5), ("d", 0.8), ("x", 0.2)]);
        let s = one_hop_subgraph(&g, "e", 2, &sim).unwrap();
        assert_eq!(members(&s), vec!["b", "d", "e"]);
        assert_eq!(s.triples().len(), 2);
    }

    #[test]
    fn one_hop_isolated_and_errors() {
        let mut g = KnowledgeGraph::new();
        g.add_entity("lonely", "lonely").unwrap();
        let s = one_hop_subgraph(&g, "lonely", 10, &table(&[])).unwrap();
        assert_eq!(members(&s), vec!["lonely"]);
        assert!(s.triples().is_empty());
        assert!(matches!(one_hop_subgraph(&g, "ghost", 10, &table(&[])), Err(Error::NotFound(_))));
        assert!(one_hop_subgraph(&g, "lonely", 0, &table(&[])).is_err());
    }

    #[test]
    fn multi_hop_chain_and_single_bridge() {
        let g = graph(&[("e", "a"), ("a", "b")]);
        let s = multi_hop_subgraph(&g, "e", 10, &table(&[])).unwrap();
        assert_eq!(members(&s), vec!["a", "b", "e"]);
        assert_eq!(s.triples().len(), 2);
        s.check_invariants().unwrap();

        let mut g = KnowledgeGraph::new();
        g.add_entity("e", "e").unwrap();
        assert_eq!(members(&multi_hop_subgraph(&g, "e", 10, &table(&[])).unwrap()), vec!["e"]);
    }

    #[test]
    fn multi_hop_uses_two_best_bridges() {
        // fan-out 3 tree, bridges a and b chosen over c
        let g = graph(&[
            ("e", "a"),
            ("e", "b"),
            ("e", "c"),
            ("a", "a1"),
            ("a", "a2"),
            ("b", "b1"),
            ("c", "c1"),
        ]);
        let sim = table(&[("a", 0.9), ("b", 0.8), ("c", 0.1), ("a1", 0.2), ("a2", 0.7), ("b1", 0.6), ("c1", 0.99)]);
        let s = multi_hop_subgraph(&g, "e", 2, &sim).unwrap();
        assert_eq!(members(&s), vec!["a", "a2", "b", "b1", "e"]);
        assert_eq!(s.triples().len(), 4);
        s.check_invariants().unwrap();
    }

    #[test]
    fn personalization_is_one_hot() {
        let p = personalization_vector::<f64>("A");
        assert_eq!(p.get("A"), 1.0);
        assert_eq!(p.get("B"), 0.0);
        assert_eq!(p.total(), 1.0);
    }

    #[test]
    fn pagerank_single_node() {
        let mut g = KnowledgeGraph::new();
        g.add_entity("A", "A").unwrap();
        let pr = personalized_pagerank(&g, &personalization_vector("A"), &PageRankConfig::<f64>::default()).unwrap();
        assert_eq!(pr.scores["A"], 1.0);
        assert!(pr.converged);
    }

    #[test]
    fn pagerank_two_cycle_closed_form() {
        // S_A = (1-d) + d S_B, S_B = d S_A  =>  S_A = 1/(1+d)
        let g = graph(&[("A", "B"), ("B", "A")]);
        let cfg = PageRankConfig::<f64> { damping: 0.85, max_iters: 10_000, tolerance: 1e-14 };
        let pr = personalized_pagerank(&g, &personalization_vector("A"), &cfg).unwrap();
        assert!((pr.scores["A"] - 1.0 / 1.85).abs() < 1e-12);
        assert!((pr.scores["B"] - 0.85 / 1.85).abs() < 1e-12);
    }

    #[test]
    fn pagerank_flags_non_convergence() {
        let g = graph(&[("A", "B"), ("B", "C"), ("C", "A")]);
        let cfg = PageRankConfig { damping: 0.85, max_iters: 2, tolerance: 1e-12 };
        let pr = personalized_pagerank(&g, &personalization_vector("A"), &cfg).unwrap();
        assert!(!pr.converged);
        assert_eq!(pr.iterations, 2);
        assert!((pr.scores.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pagerank_rejects_bad_input() {
        let g = graph(&[("A", "B")]);
        let bad = PageRankConfig { damping: 1.0, max_iters: 10, tolerance: 1e-8 };
        assert!(personalized_pagerank(&g, &personalization_vector("A"), &bad).is_err());
        assert!(personalized_pagerank(&g, &personalization_vector("Q"), &PageRankConfig::<f64>::default()).is_err());
        assert!(personalized_pagerank(&KnowledgeGraph::new(), &personalization_vector("A"), &PageRankConfig::<f64>::default()).is_err());
        assert!(PersonalizationVector::new(BTreeMap::from([("A".to_string(), 0.5)])).is_err());
    }

    #[test]
    fn pagerank_f32() {
        let g = graph(&[("A", "B"), ("B", "C")]);
        let pr = personalized_pagerank(&g, &personalization_vector::<f32>("A"), &PageRankConfig::default()).unwrap();
        assert!((pr.scores.values().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pagerank_subgraph_boundaries() {
        let g = graph(&[("e", "a"), ("e", "b"), ("e", "c"), ("x", "y")]);
        let cfg = PageRankConfig::<f64>::default();
        let (s, _) = pagerank_subgraph(&g, "e", 5, &cfg).unwrap();
        assert_eq!(members(&s), vec!["a", "b", "c", "e"]);
        assert_eq!(s.triples().len(), 3);
        let (s, _) = pagerank_subgraph(&g, "e", 0, &cfg).unwrap();
        assert_eq!(members(&s), vec!["e"]);
        s.check_invariants().unwrap();
    }

    #[test]
    fn dump_has_header_and_rows() {
        let g = graph(&[("e", "a")]);
        let (s, pr) = pagerank_subgraph(&g, "e", 3, &PageRankConfig::<f64>::default()).unwrap();
        let text = dump_subgraph(&s, Some(0.5), Some(&pr.scores));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["path_kind"], "pagerank");
        assert_eq!(header["center"], "e");
        assert!((header["pagerank_total"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn path_kind_round_trips_through_str() {
        for k in [PathKind::OneHop, PathKind::MultiHop, PathKind::PageRank, PathKind::Fused] {
            assert_eq!(k.as_str().parse::<PathKind>().unwrap(), k);
        }
        assert!("twohop".parse::<PathKind>().is_err());
    }
}
