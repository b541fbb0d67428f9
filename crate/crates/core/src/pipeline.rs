//! End-to-end retrieval: entity extraction and mapping, subgraph building,
//! scoring and fusion, query expansion, retrieval, reranking and generation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{dedup_preserving_order, embed_vector, Embedder, ModelServiceClient};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{fuse, ScoredSubgraph};
use crate::kg::KnowledgeGraph;
use crate::reward::{score, AttentionParams};
use crate::subgraph::{multi_hop_subgraph, one_hop_subgraph, pagerank_subgraph, PathKind, Subgraph};
use crate::vector::{cosine, sort_scored, EmbeddingVector, IndexKind, VectorIndex};

pub const SEP: &str = " [SEP] ";
pub const NO_CONTEXT: &str = "(no context available)";

pub const KG_FILE: &str = "kg.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ENTITY_INDEX_FILE: &str = "entities.qvec";
pub const DOCUMENT_INDEX_FILE: &str = "documents.qvec";
pub const RM_FILE: &str = "rm.qrmw";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub text: String,
}

/// One `{"id", "text"}` object per line; ids must be unique and texts non-empty.
pub fn parse_corpus(text: &str) -> Result<Vec<Chunk>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: Chunk = serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if c.id.is_empty() || c.text.trim().is_empty() {
            return Err(Error::parse(i + 1, "chunk id and text must be non-empty"));
        }
        if !seen.insert(c.id.clone()) {
            return Err(Error::parse(i + 1, format!("duplicate chunk id '{}'", c.id)));
        }
        out.push(c);
    }
    Ok(out)
}

/// Entity names embedded under their ids. Names that embed to the zero
/// vector cannot be compared and are left out; their ids are returned.
pub fn build_entity_index(
    kg: &KnowledgeGraph,
    embedder: &dyn Embedder,
    dim: usize,
) -> Result<(VectorIndex<f64>, Vec<String>)> {
    let mut index = VectorIndex::new(dim, IndexKind::Entity)?;
    let mut skipped = Vec::new();
    for e in kg.entities() {
        let v = embed_vector::<f64>(embedder, &e.name)?;
        if v.is_zero() {
            skipped.push(e.id.clone());
        } else {
            index.insert(e.id.clone(), v)?;
        }
    }
    Ok((index, skipped))
}

pub fn build_document_index(chunks: &[Chunk], embedder: &dyn Embedder, dim: usize) -> Result<VectorIndex<f64>> {
    let mut index = VectorIndex::new(dim, IndexKind::Document)?;
    for c in chunks {
        let v = embed_vector::<f64>(embedder, &c.text)?;
        if v.is_zero() {
            return Err(Error::validation(format!("chunk '{}' embeds to the zero vector", c.id)));
        }
        index.insert(c.id.clone(), v)?;
    }
    Ok(index)
}

/// Everything a query needs, loaded once and shared read-only.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub kg: KnowledgeGraph,
    pub entity_index: VectorIndex<f64>,
    pub doc_index: VectorIndex<f64>,
    pub chunks: BTreeMap<String, Chunk>,
}

impl Artifacts {
    pub fn new(
        kg: KnowledgeGraph,
        entity_index: VectorIndex<f64>,
        doc_index: VectorIndex<f64>,
        chunks: Vec<Chunk>,
    ) -> Result<Self> {
        if entity_index.dimension() != doc_index.dimension() {
            return Err(Error::DimensionMismatch {
                expected: entity_index.dimension(),
                actual: doc_index.dimension(),
            });
        }
        let chunks: BTreeMap<String, Chunk> = chunks.into_iter().map(|c| (c.id.clone(), c)).collect();
        if let Some((id, _)) = doc_index.iter().find(|(id, _)| !chunks.contains_key(*id)) {
            return Err(Error::NotFound(format!("text for indexed chunk '{id}'")));
        }
        Ok(Artifacts {
            kg,
            entity_index,
            doc_index,
            chunks,
        })
    }

    /// Reads the KG, corpus and both vector files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            std::fs::read(dir.join(name))
                .map_err(|e| Error::NotFound(format!("{}: {e}", dir.join(name).display())))
        };
        let kg = KnowledgeGraph::load(&read(KG_FILE)?)?;
        let corpus = String::from_utf8(read(CORPUS_FILE)?).map_err(|e| Error::parse(1, e.to_string()))?;
        let entity_index = VectorIndex::from_bytes(&read(ENTITY_INDEX_FILE)?, IndexKind::Entity)?;
        let doc_index = VectorIndex::from_bytes(&read(DOCUMENT_INDEX_FILE)?, IndexKind::Document)?;
        Self::new(kg, entity_index, doc_index, parse_corpus(&corpus)?)
    }

    pub fn dim(&self) -> usize {
        self.doc_index.dimension()
    }
}

/// Potential entities named in `q`, deduplicated in first-seen order.
pub fn extract_query_entities(q: &str, client: &dyn ModelServiceClient) -> Result<Vec<String>> {
    if q.trim().is_empty() {
        return Err(Error::validation("query is empty"));
    }
    let raw = client.extract_entities(q)?;
    Ok(dedup_preserving_order(
        raw.into_iter().map(|e| e.trim().to_string()).filter(|e| !e.is_empty()),
    ))
}

/// The stored entity most similar to `mention`, ties broken by id.
pub fn map_entity(mention: &str, ent_index: &VectorIndex<f64>, embedder: &dyn Embedder) -> Result<(String, f64)> {
    if ent_index.is_empty() {
        return Err(Error::validation("entity index is empty"));
    }
    let v = embed_vector::<f64>(embedder, mention)?;
    ent_index
        .top_k(&v, 1)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::NotFound(format!("entity for '{mention}'")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpandedQuery {
    pub base: String,
    /// `"q [SEP] item"` strings: entities, then relations, then triples.
    pub items: Vec<String>,
}

impl ExpandedQuery {
    pub fn base_only(q: &str) -> Self {
        ExpandedQuery {
            base: q.to_string(),
            items: Vec::new(),
        }
    }
}

pub fn expand_query(q: &str, fused: &Subgraph) -> ExpandedQuery {
    let triples = fused.triples();
    if triples.is_empty() {
        return ExpandedQuery::base_only(q);
    }
    let entities = fused.members().iter().cloned();
    let relations = triples.iter().map(|t| t.relation.clone());
    let texts = triples.iter().map(|t| t.text());
    let items = dedup_preserving_order(entities.chain(relations).chain(texts).map(|item| format!("{q}{SEP}{item}")));
    ExpandedQuery {
        base: q.to_string(),
        items,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemHits {
    pub item: String,
    pub hits: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieval {
    /// Base query first, then each expansion item.
    pub per_item: Vec<ItemHits>,
    /// Union of every item's hits, sorted by id.
    pub doc: Vec<String>,
}

/// Top `per_item_k` chunks for the base query and for every item, unioned.
pub fn retrieve(
    eq: &ExpandedQuery,
    doc_index: &VectorIndex<f64>,
    embedder: &dyn Embedder,
    per_item_k: usize,
) -> Result<Retrieval> {
    if doc_index.is_empty() {
        return Err(Error::validation("document index is empty"));
    }
    let mut per_item = Vec::with_capacity(eq.items.len() + 1);
    let mut doc = BTreeSet::new();
    for item in std::iter::once(&eq.base).chain(&eq.items) {
        let hits = doc_index.top_k(&embed_vector(embedder, item)?, per_item_k)?;
        doc.extend(hits.iter().map(|(id, _)| id.clone()));
        per_item.push(ItemHits {
            item: item.clone(),
            hits,
        });
    }
    Ok(Retrieval {
        per_item,
        doc: doc.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedChunks {
    /// Descending score, ties by ascending id.
    pub items: Vec<(Chunk, f64)>,
    pub k: usize,
    /// Set when the reranker failed and stored-embedding cosine was used.
    pub fallback_used: bool,
}

impl RankedChunks {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|(c, _)| c.id.as_str()).collect()
    }
}

/// Client rerank scores, or cosine against the stored chunk vectors when
/// the client fails or returns unusable scores.
pub fn rerank_chunks(
    q: &str,
    doc: &[Chunk],
    client: &dyn ModelServiceClient,
    doc_index: &VectorIndex<f64>,
    k: usize,
) -> Result<RankedChunks> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let texts: Vec<String> = doc.iter().map(|c| c.text.clone()).collect();
    let from_client = match client.rerank(q, &texts) {
        Ok(s) if s.len() == doc.len() && s.iter().all(|x| x.is_finite()) => Some(s),
        _ => None,
    };
    let fallback_used = from_client.is_none();
    let scores = match from_client {
        Some(s) => s,
        None => {
            let qv = embed_vector::<f64>(client, q)?;
            doc.iter()
                .map(|c| {
                    let v = doc_index
                        .get(&c.id)
                        .ok_or_else(|| Error::NotFound(format!("vector for chunk '{}'", c.id)))?;
                    Ok(if qv.is_zero() { 0.0 } else { cosine(&qv, v)? })
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    let mut order: Vec<(String, f64)> = doc.iter().map(|c| c.id.clone()).zip(scores).collect();
    sort_scored(&mut order);
    order.dedup_by(|a, b| a.0 == b.0);
    order.truncate(k);
    let by_id: BTreeMap<&str, &Chunk> = doc.iter().map(|c| (c.id.as_str(), c)).collect();
    Ok(RankedChunks {
        items: order.into_iter().map(|(id, s)| (by_id[id.as_str()].clone(), s)).collect(),
        k,
        fallback_used,
    })
}

/// The fixed generation prompt: question line, blank line, numbered contexts.
pub fn build_prompt(q: &str, ranked: &RankedChunks) -> String {
    let mut p = format!("Question: {q}\n\nContexts:\n");
    if ranked.items.is_empty() {
        p.push_str(NO_CONTEXT);
        p.push('\n');
    }
    for (i, (c, _)) in ranked.items.iter().enumerate() {
        p.push_str(&format!("[{}] {}\n", i + 1, c.text));
    }
    p.push_str("\nAnswer the question using the contexts above.");
    p
}

/// The question line of a prompt built by [`build_prompt`].
pub fn prompt_question(prompt: &str) -> Option<&str> {
    prompt.lines().next()?.strip_prefix("Question: ").map(str::trim)
}

pub fn generate_answer(
    q: &str,
    ranked: &RankedChunks,
    client: &dyn ModelServiceClient,
    temperature: f64,
) -> Result<String> {
    let prompt = build_prompt(q, ranked);
    client.generate(&prompt, temperature).map_err(|e| Error::Generation {
        message: e.to_string(),
        prompt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityMapping {
    pub mention: String,
    pub entity: Option<String>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateTrace {
    pub kind: PathKind,
    pub score: f64,
    pub triples: Vec<String>,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedTrace {
    pub triple: String,
    pub similarity: f64,
    pub source: PathKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterTrace {
    pub center: String,
    pub candidates: Vec<CandidateTrace>,
    pub pagerank_iterations: usize,
    pub pagerank_converged: bool,
    pub base_kind: PathKind,
    pub threshold_used: f64,
    pub threshold_fallback: bool,
    pub selected: Vec<SelectedTrace>,
    pub fused: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedTrace {
    pub id: String,
    pub score: f64,
}

/// Every intermediate artifact of one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryTrace {
    pub query: String,
    pub strategy: String,
    pub entities: Vec<String>,
    pub mappings: Vec<EntityMapping>,
    /// No entity mapped, so the base query was retrieved and reranked alone.
    pub plain_fallback: bool,
    pub subgraphs: Vec<CenterTrace>,
    pub fused: Vec<String>,
    pub expansion: Vec<String>,
    pub retrieval: Vec<ItemHits>,
    pub doc: Vec<String>,
    pub ranked: Vec<RankedTrace>,
    pub rerank_fallback: bool,
    pub prompt: String,
    pub answer: String,
}

impl QueryTrace {
    pub fn ranked_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.id.as_str()).collect()
    }
}

/// One center's three candidate subgraphs, their rewards and the fusion.
pub fn center_pipeline(
    q: &str,
    q_vec: &EmbeddingVector<f64>,
    center: &str,
    artifacts: &Artifacts,
    params: &AttentionParams<f64>,
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<(Subgraph, CenterTrace)> {
    let index = &artifacts.entity_index;
    // entities whose names could not be embedded rank last
    let sim = |a: &str, b: &str| -> Result<f64> {
        match (index.get(a), index.get(b)) {
            (Some(x), Some(y)) => cosine(x, y),
            _ => Ok(-1.0),
        }
    };
    let g = &artifacts.kg;
    let one = one_hop_subgraph(g, center, cfg.subgraph_k, &sim)?;
    let multi = multi_hop_subgraph(g, center, cfg.subgraph_k, &sim)?;
    let (pr, pr_result) = pagerank_subgraph::<f64>(g, center, cfg.subgraph_k, &cfg.pagerank())?;

    let mut scored = Vec::with_capacity(3);
    for sub in [one, multi, pr] {
        let s = score(q, &sub, params, embedder, cfg.attention_mode)?;
        scored.push(ScoredSubgraph::new(sub, s));
    }
    let result = fuse(&scored, q_vec, &cfg.fusion(), embedder)?;
    let trace = CenterTrace {
        center: center.to_string(),
        candidates: scored
            .iter()
            .map(|s| CandidateTrace {
                kind: s.subgraph.kind,
                score: s.score,
                triples: s.subgraph.triples().iter().map(|t| t.text()).collect(),
                members: s.subgraph.members().iter().cloned().collect(),
            })
            .collect(),
        pagerank_iterations: pr_result.iterations,
        pagerank_converged: pr_result.converged,
        base_kind: result.base_kind,
        threshold_used: result.threshold_used,
        threshold_fallback: result.threshold_fallback,
        selected: result
            .selected
            .iter()
            .map(|s| SelectedTrace {
                triple: s.triple.text(),
                similarity: s.similarity,
                source: s.source,
            })
            .collect(),
        fused: result.fused.triples().iter().map(|t| t.text()).collect(),
    };
    Ok((result.fused, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub answer: String,
    pub trace: QueryTrace,
}

fn finish(
    mut trace: QueryTrace,
    eq: &ExpandedQuery,
    artifacts: &Artifacts,
    cfg: &PipelineConfig,
    client: &dyn ModelServiceClient,
) -> Result<QueryOutcome> {
    let retrieval = retrieve(eq, &artifacts.doc_index, client, cfg.per_item_k)?;
    let doc: Vec<Chunk> = retrieval
        .doc
        .iter()
        .map(|id| {
            artifacts
                .chunks
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("chunk '{id}'")))
        })
        .collect::<Result<_>>()?;
    let ranked = rerank_chunks(&eq.base, &doc, client, &artifacts.doc_index, cfg.k)?;
    let prompt = build_prompt(&eq.base, &ranked);
    let answer = generate_answer(&eq.base, &ranked, client, cfg.temperature)?;
    trace.expansion = eq.items.clone();
    trace.doc = retrieval.doc;
    trace.retrieval = retrieval.per_item;
    trace.ranked = ranked
        .items
        .iter()
        .map(|(c, s)| RankedTrace {
            id: c.id.clone(),
            score: *s,
        })
        .collect();
    trace.rerank_fallback = ranked.fallback_used;
    trace.prompt = prompt;
    trace.answer = answer.clone();
    Ok(QueryOutcome { answer, trace })
}

fn empty_trace(q: &str, cfg: &PipelineConfig) -> QueryTrace {
    QueryTrace {
        query: q.to_string(),
        strategy: cfg.strategy.to_string(),
        entities: Vec::new(),
        mappings: Vec::new(),
        plain_fallback: true,
        subgraphs: Vec::new(),
        fused: Vec::new(),
        expansion: Vec::new(),
        retrieval: Vec::new(),
        doc: Vec::new(),
        ranked: Vec::new(),
        rerank_fallback: false,
        prompt: String::new(),
        answer: String::new(),
    }
}

/// Retrieve, rerank and generate from the base query alone.
pub fn run_plain_rag(
    q: &str,
    artifacts: &Artifacts,
    cfg: &PipelineConfig,
    client: &dyn ModelServiceClient,
) -> Result<QueryOutcome> {
    finish(empty_trace(q, cfg), &ExpandedQuery::base_only(q), artifacts, cfg, client)
}

/// The full query-aware pipeline. Each mapped entity gets its own candidate
/// subgraphs and fusion; the fused subgraphs are unioned before expansion.
/// With no mapped entity the run degrades to [`run_plain_rag`].
pub fn run_qmkgf(
    q: &str,
    artifacts: &Artifacts,
    params: &AttentionParams<f64>,
    cfg: &PipelineConfig,
    client: &dyn ModelServiceClient,
) -> Result<QueryOutcome> {
    cfg.validate()?;
    params.validate()?;
    if params.dim() != artifacts.dim() {
        return Err(Error::DimensionMismatch {
            expected: artifacts.dim(),
            actual: params.dim(),
        });
    }
    let mut trace = empty_trace(q, cfg);
    trace.entities = extract_query_entities(q, client)?;

    let mut centers: Vec<String> = Vec::new();
    for mention in &trace.entities {
        let mapped = match map_entity(mention, &artifacts.entity_index, client) {
            Ok((id, s)) if s > cfg.min_mapping_score => Some((id, s)),
            Ok(_) | Err(Error::ZeroVector) => None,
            Err(Error::Validation(_)) if artifacts.entity_index.is_empty() => None,
            Err(e) => return Err(e),
        };
        if let Some((id, _)) = &mapped {
            if !centers.contains(id) {
                centers.push(id.clone());
            }
        }
        trace.mappings.push(EntityMapping {
            mention: mention.clone(),
            score: mapped.as_ref().map(|m| m.1),
            entity: mapped.map(|m| m.0),
        });
    }
    if centers.is_empty() {
        return finish(trace, &ExpandedQuery::base_only(q), artifacts, cfg, client);
    }
    trace.plain_fallback = false;

    let q_vec = embed_vector::<f64>(client, q)?;
    let mut union = Vec::new();
    for center in &centers {
        let (fused, ct) = center_pipeline(q, &q_vec, center, artifacts, params, cfg, client)?;
        union.extend(fused.triples().iter().cloned());
        trace.subgraphs.push(ct);
    }
    let fused = Subgraph::new(centers[0].clone(), PathKind::Fused, union, centers.iter().skip(1).cloned());
    trace.fused = fused.triples().iter().map(|t| t.text()).collect();
    let eq = expand_query(q, &fused);
    finish(trace, &eq, artifacts, cfg, client)
}
