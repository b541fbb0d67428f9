//! Model-service boundary: embedding, generation, reranking and extraction.
//!
//! [`HttpClient`] speaks the JSON-over-HTTP protocol of a hosted model
//! service. [`StubClient`] is a deterministic in-process stand-in: a feature
//! hashing embedder plus table-driven extraction, generation and reranking.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::kg::ExtractionRecord;
use crate::scalar::Scalar;
use crate::text::tokenize;
use crate::vector::EmbeddingVector;

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

pub trait ModelServiceClient: Embedder {
    fn generate(&self, prompt: &str, temperature: f64) -> Result<String>;
    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>>;
    fn extract_entities(&self, text: &str) -> Result<Vec<String>>;
    fn extract_triples(&self, text: &str) -> Result<Vec<ExtractionRecord>>;
}

/// Embeds `text` and converts it into the requested scalar type.
pub fn embed_vector<T: Scalar>(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector<T>> {
    EmbeddingVector::from_f64(&embedder.embed(text)?)
}

/// Signed feature hashing over [`tokenize`] tokens, L2-normalized.
/// Text with no tokens embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(HashEmbedder { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let mut h = FnvHasher::default();
            h.write(token.as_bytes());
            let hash = h.finish();
            let bucket = (hash % self.dim as u64) as usize;
            let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_text(text))
    }
}

/// Lookup tables consulted by [`StubClient`] before its fallbacks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubTables {
    /// Query text → extracted entity strings.
    pub entities: BTreeMap<String, Vec<String>>,
    /// Document text → extraction records.
    pub triples: BTreeMap<String, Vec<ExtractionRecord>>,
    /// Exact prompt, or the question embedded in a generation prompt → answer.
    pub answers: BTreeMap<String, String>,
    /// Chunk text → fixed rerank score.
    pub rerank: BTreeMap<String, f64>,
}

impl StubTables {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }
}

/// Deterministic offline client.
///
/// Fallbacks when a table has no entry: entities are capitalized phrases;
/// triples link consecutive capitalized phrases within a sentence through
/// the lowercase words between them; generation echoes the prompt;
/// reranking is hashed-embedding cosine against the query.
#[derive(Debug, Clone)]
pub struct StubClient {
    embedder: HashEmbedder,
    tables: StubTables,
}

const NON_ENTITY_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "by", "can", "did", "do", "does", "for", "from", "how", "i", "if", "in",
    "is", "it", "of", "on", "or", "the", "their", "this", "to", "was", "we", "were", "what", "when", "where",
    "which", "who", "whom", "whose", "why", "with",
];

impl StubClient {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(StubClient {
            embedder: HashEmbedder::new(dim)?,
            tables: StubTables::default(),
        })
    }

    pub fn with_tables(mut self, tables: StubTables) -> Self {
        self.tables = tables;
        self
    }

    pub fn tables(&self) -> &StubTables {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut StubTables {
        &mut self.tables
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    /// Capitalized word runs, with each phrase's word offset in `sentence`.
    fn capitalized_phrases(sentence: &str) -> Vec<(usize, usize, String)> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let mut phrases = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let clean = |w: &str| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
            let is_cap = |w: &str| {
                let c = clean(w);
                c.chars().next().is_some_and(char::is_uppercase)
                    && !NON_ENTITY_WORDS.contains(&c.to_lowercase().as_str())
            };
            if is_cap(words[i]) {
                let start = i;
                let mut parts = vec![clean(words[i])];
                // a phrase stops at trailing punctuation such as "Paris,"
                while i + 1 < words.len()
                    && is_cap(words[i + 1])
                    && !words[i].ends_with([',', ';', ':'])
                {
                    i += 1;
                    parts.push(clean(words[i]));
                }
                phrases.push((start, i + 1, parts.join(" ")));
            }
            i += 1;
        }
        phrases
    }

    fn sentences(text: &str) -> impl Iterator<Item = &str> {
        text.split(['.', '!', '?', ';', '\n']).filter(|s| !s.trim().is_empty())
    }
}

impl Embedder for StubClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embedder.embed_text(text))
    }
}

impl ModelServiceClient for StubClient {
    fn generate(&self, prompt: &str, _temperature: f64) -> Result<String> {
        if let Some(a) = self.tables.answers.get(prompt) {
            return Ok(a.clone());
        }
        if let Some(q) = crate::pipeline::prompt_question(prompt) {
            if let Some(a) = self.tables.answers.get(q) {
                return Ok(a.clone());
            }
        }
        Ok(prompt.to_string())
    }

    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>> {
        let q = self.embedder.embed_text(query);
        Ok(texts
            .iter()
            .map(|t| {
                self.tables.rerank.get(t).copied().unwrap_or_else(|| {
                    let d = self.embedder.embed_text(t);
                    q.iter().zip(&d).map(|(a, b)| a * b).sum()
                })
            })
            .collect())
    }

    fn extract_entities(&self, text: &str) -> Result<Vec<String>> {
        if let Some(e) = self.tables.entities.get(text) {
            return Ok(e.clone());
        }
        Ok(Self::sentences(text)
            .flat_map(|s| Self::capitalized_phrases(s).into_iter().map(|(_, _, p)| p))
            .collect())
    }

    fn extract_triples(&self, text: &str) -> Result<Vec<ExtractionRecord>> {
        if let Some(t) = self.tables.triples.get(text) {
            return Ok(t.clone());
        }
        let mut out = Vec::new();
        for sentence in Self::sentences(text) {
            let words: Vec<&str> = sentence.split_whitespace().collect();
            let phrases = Self::capitalized_phrases(sentence);
            for pair in phrases.windows(2) {
                let (_, end, ref head) = pair[0];
                let (start, _, ref tail) = pair[1];
                let relation = tokenize(&words[end..start].join(" ")).join(" ");
                if !relation.is_empty() {
                    out.push(ExtractionRecord::new(head.clone(), relation, tail.clone()));
                }
            }
        }
        Ok(out)
    }
}

/// Client for a model service exposing `/embed`, `/generate`, `/rerank` and
/// `/extract` as JSON POST endpoints.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{}", self.base_url, path);
        let mut resp = self
            .agent
            .post(&url)
            .content_type("application/json")
            .send(body.to_string())
            .map_err(|e| Error::Client(format!("POST {url}: {e}")))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Client(format!("POST {url}: reading body: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::Client(format!("POST {url}: invalid JSON: {e}")))
    }

    fn field<T: serde::de::DeserializeOwned>(value: Value, key: &str, path: &str) -> Result<T> {
        let inner = match value {
            Value::Object(mut m) => m
                .remove(key)
                .ok_or_else(|| Error::Client(format!("{path}: response lacks \"{key}\"")))?,
            other => other,
        };
        serde_json::from_value(inner).map_err(|e| Error::Client(format!("{path}: {e}")))
    }
}

impl Embedder for HttpClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop().ok_or_else(|| Error::Client("/embed returned no vectors".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp = self.post("/embed", &json!({ "texts": texts }))?;
        let vectors: Vec<Vec<f64>> = Self::field(resp, "vectors", "/embed")?;
        if vectors.len() != texts.len() {
            return Err(Error::Client(format!(
                "/embed returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }
}

impl ModelServiceClient for HttpClient {
    fn generate(&self, prompt: &str, temperature: f64) -> Result<String> {
        let resp = self.post("/generate", &json!({ "prompt": prompt, "temperature": temperature }))?;
        Self::field(resp, "text", "/generate")
    }

    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>> {
        let resp = self.post("/rerank", &json!({ "query": query, "texts": texts }))?;
        let scores: Vec<f64> = Self::field(resp, "scores", "/rerank")?;
        if scores.len() != texts.len() {
            return Err(Error::Client(format!(
                "/rerank returned {} scores for {} texts",
                scores.len(),
                texts.len()
            )));
        }
        Ok(scores)
    }

    fn extract_entities(&self, text: &str) -> Result<Vec<String>> {
        let resp = self.post("/extract", &json!({ "text": text, "mode": "entities" }))?;
        Self::field(resp, "entities", "/extract")
    }

    fn extract_triples(&self, text: &str) -> Result<Vec<ExtractionRecord>> {
        let resp = self.post("/extract", &json!({ "text": text, "mode": "triples" }))?;
        Self::field(resp, "records", "/extract")
    }
}

/// Order-preserving dedup.
pub(crate) fn dedup_preserving_order(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}
