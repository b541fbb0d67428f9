//! Knowledge-graph triple store.
//!
//! Entities and weighted directed triples, with out/in adjacency indices kept
//! in lock-step with the triple list. Duplicate `(head, relation, tail)`
//! triples merge into one, keeping the larger weight.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const KG_FORMAT: &str = "qmkgf-kg";
pub const KG_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_chunk: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TripleKey {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            weight: 1.0,
            source_chunk: None,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_source(mut self, chunk: impl Into<String>) -> Self {
        self.source_chunk = Some(chunk.into());
        self
    }

    pub fn key(&self) -> TripleKey {
        TripleKey {
            head: self.head.clone(),
            relation: self.relation.clone(),
            tail: self.tail.clone(),
        }
    }

    /// Plain-text rendering `"head relation tail"` used for embedding.
    pub fn text(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }

    /// The endpoint opposite to `entity`, if the triple touches it.
    pub fn other_end(&self, entity: &str) -> Option<&str> {
        if self.head == entity {
            Some(&self.tail)
        } else if self.tail == entity {
            Some(&self.head)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        if self.head.trim().is_empty() {
            return Err(Error::validation("triple head is empty"));
        }
        if self.relation.trim().is_empty() {
            return Err(Error::validation("triple relation is empty"));
        }
        if self.tail.trim().is_empty() {
            return Err(Error::validation("triple tail is empty"));
        }
        if !self.weight.is_finite() || self.weight <= 0.0 {
            return Err(Error::validation(format!(
                "triple weight must be finite and > 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added(usize),
    Merged(usize),
}

/// One row of LLM extraction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_chunk: Option<String>,
}

impl ExtractionRecord {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        ExtractionRecord {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            weight: None,
            source_chunk: None,
        }
    }

    pub fn to_triple(&self) -> Triple {
        Triple {
            head: self.head.trim().to_string(),
            relation: self.relation.trim().to_string(),
            tail: self.tail.trim().to_string(),
            weight: self.weight.unwrap_or(1.0),
            source_chunk: self.source_chunk.clone(),
        }
    }
}

impl From<&Triple> for ExtractionRecord {
    fn from(t: &Triple) -> Self {
        ExtractionRecord {
            head: t.head.clone(),
            relation: t.relation.clone(),
            tail: t.tail.clone(),
            weight: Some(t.weight),
            source_chunk: t.source_chunk.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub merged: usize,
    pub rejected: usize,
}

impl IngestReport {
    pub fn absorb(&mut self, other: IngestReport) {
        self.added += other.added;
        self.merged += other.merged;
        self.rejected += other.rejected;
    }
}

/// Parses extraction-record lines. Blank lines are skipped; malformed lines
/// come back as `Err` with their 1-based line number.
pub fn parse_extraction_records(text: &str) -> Vec<Result<ExtractionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<ExtractionRecord>(line).map_err(|e| Error::parse(i + 1, e.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    triples: Vec<Triple>,
    by_key: HashMap<TripleKey, usize>,
    out_adj: BTreeMap<String, Vec<usize>>,
    in_adj: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities && self.triples == other.triples
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, index: usize) -> &Triple {
        &self.triples[index]
    }

    /// Triple indices leaving `id`, in insertion order.
    pub fn out_edges(&self, id: &str) -> &[usize] {
        self.out_adj.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Triple indices entering `id`, in insertion order.
    pub fn in_edges(&self, id: &str) -> &[usize] {
        self.in_adj.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Registers an entity, or renames it if it already exists.
    pub fn add_entity(&mut self, id: impl Into<String>, name: impl Into<String>) -> Result<()> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::validation("entity id is empty"));
        }
        let name = name.into();
        self.entities
            .entry(id.clone())
            .and_modify(|e| e.name = name.clone())
            .or_insert(Entity { id, name });
        Ok(())
    }

    fn ensure_entity(&mut self, id: &str) {
        if !self.entities.contains_key(id) {
            self.entities.insert(
                id.to_string(),
                Entity {
                    id: id.to_string(),
                    name: id.to_string(),
                },
            );
        }
    }

    pub fn add_triple(&mut self, triple: Triple) -> Result<AddOutcome> {
        let mut triple = triple;
        triple.head = triple.head.trim().to_string();
        triple.relation = triple.relation.trim().to_string();
        triple.tail = triple.tail.trim().to_string();
        triple.validate()?;

        let key = triple.key();
        if let Some(&idx) = self.by_key.get(&key) {
            let stored = &mut self.triples[idx];
            if triple.weight > stored.weight {
                stored.weight = triple.weight;
            }
            if stored.source_chunk.is_none() {
                stored.source_chunk = triple.source_chunk;
            }
            return Ok(AddOutcome::Merged(idx));
        }

        self.ensure_entity(&triple.head);
        self.ensure_entity(&triple.tail);
        let idx = self.triples.len();
        self.out_adj.entry(triple.head.clone()).or_default().push(idx);
        self.in_adj.entry(triple.tail.clone()).or_default().push(idx);
        self.by_key.insert(key, idx);
        self.triples.push(triple);
        Ok(AddOutcome::Added(idx))
    }

    /// Adjacent entities with their connecting triples, sorted by
    /// `(entity id, triple key)`. A triple appears at most once even for
    /// `Direction::Both` on a self-loop.
    pub fn neighbors(&self, id: &str, direction: Direction) -> Result<Vec<(&str, &Triple)>> {
        if !self.contains(id) {
            return Err(Error::NotFound(format!("entity '{id}'")));
        }
        let mut indices: Vec<usize> = match direction {
            Direction::Out => self.out_edges(id).to_vec(),
            Direction::In => self.in_edges(id).to_vec(),
            Direction::Both => {
                let mut v = self.out_edges(id).to_vec();
                v.extend_from_slice(self.in_edges(id));
                v
            }
        };
        indices.sort_unstable();
        indices.dedup();
        let mut out: Vec<(&str, &Triple)> = indices
            .into_iter()
            .map(|i| {
                let t = &self.triples[i];
                let other = match direction {
                    Direction::Out => t.tail.as_str(),
                    Direction::In => t.head.as_str(),
                    Direction::Both => t.other_end(id).expect("adjacency points at incident triple"),
                };
                (other, t)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0).then_with(|| a.1.key().cmp(&b.1.key())));
        Ok(out)
    }

    pub fn neighbor_ids(&self, id: &str, direction: Direction) -> Result<BTreeSet<String>> {
        Ok(self
            .neighbors(id, direction)?
            .into_iter()
            .map(|(v, _)| v.to_string())
            .collect())
    }

    /// Triples joining `a` and `b` in either direction.
    pub fn edges_between(&self, a: &str, b: &str) -> Vec<&Triple> {
        let mut out: Vec<&Triple> = self
            .out_edges(a)
            .iter()
            .map(|&i| &self.triples[i])
            .filter(|t| t.tail == b)
            .collect();
        if a != b {
            out.extend(self.out_edges(b).iter().map(|&i| &self.triples[i]).filter(|t| t.tail == a));
        }
        out
    }

    pub fn ingest_extraction(&mut self, records: &[ExtractionRecord]) -> IngestReport {
        let mut report = IngestReport::default();
        for rec in records {
            match self.add_triple(rec.to_triple()) {
                Ok(AddOutcome::Added(_)) => report.added += 1,
                Ok(AddOutcome::Merged(_)) => report.merged += 1,
                Err(_) => report.rejected += 1,
            }
        }
        report
    }

    /// Ingests extraction-record JSON lines; unparseable lines count as rejected.
    pub fn ingest_jsonl(&mut self, text: &str) -> IngestReport {
        let mut report = IngestReport::default();
        let mut valid = Vec::new();
        for rec in parse_extraction_records(text) {
            match rec {
                Ok(r) => valid.push(r),
                Err(_) => report.rejected += 1,
            }
        }
        report.absorb(self.ingest_extraction(&valid));
        report
    }

    /// Rebuilds both adjacency indices from the triple list and checks they
    /// match the maintained ones.
    pub fn verify_indices(&self) -> Result<()> {
        let mut out_adj: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut in_adj: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.triples.iter().enumerate() {
            if !self.contains(&t.head) || !self.contains(&t.tail) {
                return Err(Error::Contract(format!("triple {i} references a missing entity")));
            }
            out_adj.entry(t.head.clone()).or_default().push(i);
            in_adj.entry(t.tail.clone()).or_default().push(i);
        }
        if out_adj != self.out_adj || in_adj != self.in_adj {
            return Err(Error::Contract("adjacency index out of sync with triples".into()));
        }
        if self.by_key.len() != self.triples.len() {
            return Err(Error::Contract("duplicate triple keys stored".into()));
        }
        Ok(())
    }

    /// Serializes as line-delimited JSON: a format header, one
    /// `{"entity","name"}` line per entity, then one extraction record per triple.
    pub fn save(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(&serde_json::json!({"format": KG_FORMAT, "version": KG_VERSION}).to_string());
        out.push('\n');
        for e in self.entities.values() {
            out.push_str(&serde_json::json!({"entity": e.id, "name": e.name}).to_string());
            out.push('\n');
        }
        for t in &self.triples {
            out.push_str(&serde_json::to_string(&ExtractionRecord::from(t)).expect("record serializes"));
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(1, format!("not utf-8: {e}")))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let header: Value = serde_json::from_str(header).map_err(|e| Error::parse(1, e.to_string()))?;
        if header.get("format").and_then(Value::as_str) != Some(KG_FORMAT) {
            return Err(Error::parse(1, format!("expected format \"{KG_FORMAT}\"")));
        }
        match header.get("version").and_then(Value::as_u64) {
            Some(KG_VERSION) => {}
            other => return Err(Error::parse(1, format!("unsupported version {other:?}"))),
        }

        let mut g = KnowledgeGraph::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| Error::parse(lineno, e.to_string()))?;
            if let Some(id) = value.get("entity") {
                let id = id.as_str().ok_or_else(|| Error::parse(lineno, "entity id must be a string"))?;
                let name = value.get("name").and_then(Value::as_str).unwrap_or(id);
                g.add_entity(id, name).map_err(|e| Error::parse(lineno, e.to_string()))?;
            } else {
                let rec: ExtractionRecord =
                    serde_json::from_value(value).map_err(|e| Error::parse(lineno, e.to_string()))?;
                g.add_triple(rec.to_triple()).map_err(|e| Error::parse(lineno, e.to_string()))?;
            }
        }
        Ok(g)
    }
}
