//! Dense vectors, flat cosine search, the InfoNCE loss and a trainable
//! linear adapter over frozen embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Differentiable;
use crate::scalar::Scalar;

pub const QVEC_MAGIC: &[u8; 4] = b"QVEC";
pub const QVEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T>(Vec<T>);

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding contains a non-finite entry"));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| v.is_zero())
    }

    pub fn scaled(&self, factor: T) -> Self {
        EmbeddingVector(self.0.iter().map(|&v| v * factor).collect())
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na.is_zero() || nb.is_zero() {
        return Err(Error::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T> {
    cosine_slices(&a.0, &b.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Entity,
    Document,
}

/// Flat (exhaustive) cosine index keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T> {
    dimension: usize,
    kind: IndexKind,
    entries: BTreeMap<String, EmbeddingVector<T>>,
}

impl<T: Scalar> VectorIndex<T> {
    pub fn new(dimension: usize, kind: IndexKind) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::validation("index dimension must be positive"));
        }
        Ok(VectorIndex {
            dimension,
            kind,
            entries: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector<T>> {
        self.entries.get(id)
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector<T>) -> Result<()> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::validation("vector id is empty"));
        }
        if vector.dim() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: vector.dim(),
            });
        }
        if vector.is_zero() {
            return Err(Error::ZeroVector);
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate vector id '{id}'")));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    /// The `min(k, len)` most similar entries, by descending cosine with ties
    /// broken by ascending id.
    pub fn top_k(&self, query: &EmbeddingVector<T>, k: usize) -> Result<Vec<(String, T)>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored = self
            .entries
            .iter()
            .map(|(id, v)| cosine(query, v).map(|s| (id.clone(), s)))
            .collect::<Result<Vec<_>>>()?;
        sort_scored(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (8 + 4 * self.dimension));
        out.extend_from_slice(QVEC_MAGIC);
        out.extend_from_slice(&QVEC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v.as_slice() {
                out.extend_from_slice(&(x.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], kind: IndexKind) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != QVEC_MAGIC {
            return Err(Error::Format("missing QVEC magic".into()));
        }
        let version = r.u32()?;
        if version != QVEC_VERSION {
            return Err(Error::Format(format!("unsupported QVEC version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut index = VectorIndex::new(dim, kind)?;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("id is not utf-8: {e}")))?
                .to_string();
            let values = (0..dim)
                .map(|_| r.f32().map(|x| T::from_f32(x).unwrap_or_else(T::nan)))
                .collect::<Result<Vec<T>>>()?;
            index.insert(id, EmbeddingVector::new(values)?)?;
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(index)
    }
}

/// Descending score, ascending id.
pub(crate) fn sort_scored<T: Scalar>(scored: &mut [(String, T)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

fn validate_temperature<T: Scalar>(m: T) -> Result<()> {
    if !(m > T::zero()) || !m.is_finite() {
        return Err(Error::validation(format!("temperature must be positive, got {m}")));
    }
    Ok(())
}

/// Contrastive loss `−log softmax(sim(q, ·)/m)[pos]` over `docs`, with cosine
/// similarity. `pos` must be one of `docs`.
pub fn infonce_loss<T: Scalar>(
    query: &EmbeddingVector<T>,
    pos: &EmbeddingVector<T>,
    docs: &[EmbeddingVector<T>],
    m: T,
) -> Result<T> {
    validate_temperature(m)?;
    let pos_idx = docs
        .iter()
        .position(|d| d == pos)
        .ok_or_else(|| Error::Contract("positive passage is not among the candidates".into()))?;
    let logits = docs
        .iter()
        .map(|d| cosine(query, d).map(|c| c / m))
        .collect::<Result<Vec<T>>>()?;
    let loss = log_sum_exp(&logits) - logits[pos_idx];
    Ok(loss.max(T::zero()))
}

/// One `{"query", "pos", "neg"}` training line, as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub query: String,
    pub pos: Vec<String>,
    pub neg: Vec<String>,
}

pub fn parse_training_records(text: &str) -> Result<Vec<TrainingRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

/// A training record after embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedRecord<T> {
    pub query: EmbeddingVector<T>,
    pub pos: Vec<EmbeddingVector<T>>,
    pub neg: Vec<EmbeddingVector<T>>,
}

impl<T: Scalar> EmbeddedRecord<T> {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.pos.is_empty() || self.neg.is_empty() {
            return Err(Error::validation("training record needs at least one pos and one neg"));
        }
        for v in std::iter::once(&self.query).chain(&self.pos).chain(&self.neg) {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Square matrix applied to every embedding before similarity (`v ↦ M·v`),
/// plus the contrastive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    dim: usize,
    matrix: Vec<T>,
    temperature: T,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn identity(dim: usize, temperature: T) -> Result<Self> {
        validate_temperature(temperature)?;
        let mut matrix = vec![T::zero(); dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = T::one();
        }
        Ok(AdapterParams { dim, matrix, temperature })
    }

    pub fn from_matrix(dim: usize, matrix: Vec<T>, temperature: T) -> Result<Self> {
        validate_temperature(temperature)?;
        if matrix.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: matrix.len(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("adapter matrix contains a non-finite entry"));
        }
        Ok(AdapterParams { dim, matrix, temperature })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    /// Row-major `dim × dim` entries.
    pub fn matrix(&self) -> &[T] {
        &self.matrix
    }

    pub fn apply(&self, v: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        let x = v.as_slice();
        Ok(EmbeddingVector(
            self.matrix.chunks(self.dim.max(1)).take(self.dim).map(|row| dot(row, x)).collect(),
        ))
    }

    /// Mean InfoNCE over the record's positives, all candidates adapter-transformed.
    pub fn record_loss(&self, rec: &EmbeddedRecord<T>) -> Result<T> {
        Ok(self.record_loss_and_grad(rec, false)?.0)
    }

    /// Loss and `∂loss/∂M` (row-major). The per-positive losses share one
    /// softmax, so the mean is `lse(s) − mean_pos(s)`.
    fn record_loss_and_grad(&self, rec: &EmbeddedRecord<T>, want_grad: bool) -> Result<(T, Vec<T>)> {
        rec.validate(self.dim)?;
        let m = self.temperature;
        let q = self.apply(&rec.query)?;
        let raw_docs: Vec<&EmbeddingVector<T>> = rec.pos.iter().chain(&rec.neg).collect();
        let docs = raw_docs.iter().map(|d| self.apply(d)).collect::<Result<Vec<_>>>()?;
        let cos = docs.iter().map(|d| cosine(&q, d)).collect::<Result<Vec<T>>>()?;
        let logits: Vec<T> = cos.iter().map(|&c| c / m).collect();
        let lse = log_sum_exp(&logits);
        let n_pos = T::from_usize(rec.pos.len()).expect("count fits scalar");
        let mean_pos = logits[..rec.pos.len()].iter().copied().sum::<T>() / n_pos;
        let loss = lse - mean_pos;
        if !want_grad {
            return Ok((loss, Vec::new()));
        }

        let d = self.dim;
        let mut grad = vec![T::zero(); d * d];
        let q_norm = q.norm();
        let mut grad_q = vec![T::zero(); d];
        for (j, doc) in docs.iter().enumerate() {
            let softmax = (logits[j] - lse).exp();
            let target = if j < rec.pos.len() { T::one() / n_pos } else { T::zero() };
            let g = (softmax - target) / m;
            let d_norm = doc.norm();
            let inv = T::one() / (q_norm * d_norm);
            // ∂cos/∂q and ∂cos/∂doc for transformed vectors
            for k in 0..d {
                grad_q[k] = grad_q[k]
                    + g * (doc.0[k] * inv - cos[j] * q.0[k] / (q_norm * q_norm));
            }
            let raw = raw_docs[j].as_slice();
            for r in 0..d {
                let gd = g * (q.0[r] * inv - cos[j] * doc.0[r] / (d_norm * d_norm));
                for c in 0..d {
                    grad[r * d + c] = grad[r * d + c] + gd * raw[c];
                }
            }
        }
        let raw_q = rec.query.as_slice();
        for r in 0..d {
            for c in 0..d {
                grad[r * d + c] = grad[r * d + c] + grad_q[r] * raw_q[c];
            }
        }
        Ok((loss, grad))
    }

    pub fn mean_loss(&self, records: &[EmbeddedRecord<T>]) -> Result<T> {
        Ok(self.mean_loss_and_grad(records, false)?.0)
    }

    fn mean_loss_and_grad(&self, records: &[EmbeddedRecord<T>], want_grad: bool) -> Result<(T, Vec<T>)> {
        if records.is_empty() {
            return Err(Error::validation("empty training set"));
        }
        let n = T::from_usize(records.len()).expect("count fits scalar");
        let mut total = T::zero();
        let mut grad = if want_grad { vec![T::zero(); self.dim * self.dim] } else { Vec::new() };
        for rec in records {
            let (l, g) = self.record_loss_and_grad(rec, want_grad)?;
            total = total + l;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc = *acc + x;
            }
        }
        for g in &mut grad {
            *g = *g / n;
        }
        Ok((total / n, grad))
    }
}

#[derive(Debug, Clone)]
pub struct AdapterTraining<T> {
    pub params: AdapterParams<T>,
    pub initial_loss: T,
    pub final_loss: T,
    /// Mean loss before each epoch, then after the last.
    pub losses: Vec<T>,
}

/// Full-batch gradient descent on the mean InfoNCE loss, starting from the
/// identity adapter. Returns the lowest-loss iterate seen.
pub fn train_adapter<T: Scalar>(
    records: &[EmbeddedRecord<T>],
    epochs: usize,
    lr: T,
    temperature: T,
) -> Result<AdapterTraining<T>> {
    let first = records.first().ok_or_else(|| Error::validation("empty training set"))?;
    let dim = first.query.dim();
    for rec in records {
        rec.validate(dim)?;
    }
    let mut params = AdapterParams::identity(dim, temperature)?;
    let initial_loss = params.mean_loss(records)?;
    let mut losses = vec![initial_loss];
    let mut best = (initial_loss, params.clone());
    for _ in 0..epochs {
        let (_, grad) = params.mean_loss_and_grad(records, true)?;
        for (w, g) in params.matrix.iter_mut().zip(grad) {
            *w = *w - lr * g;
        }
        let loss = params.mean_loss(records)?;
        losses.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
    }
    let (final_loss, params) = best;
    Ok(AdapterTraining {
        params,
        initial_loss,
        final_loss,
        losses,
    })
}

/// Pairs adapter parameters with a fixed record set for gradient checking.
#[derive(Debug, Clone)]
pub struct AdapterObjective<T> {
    pub params: AdapterParams<T>,
    pub records: Vec<EmbeddedRecord<T>>,
}

impl<T: Scalar> Differentiable<T> for AdapterObjective<T> {
    fn param_count(&self) -> usize {
        self.params.matrix.len()
    }

    fn param(&self, index: usize) -> T {
        self.params.matrix[index]
    }

    fn set_param(&mut self, index: usize, value: T) {
        self.params.matrix[index] = value;
    }

    fn loss(&self) -> Result<T> {
        self.params.mean_loss(&self.records)
    }

    fn gradient(&self) -> Result<Vec<T>> {
        Ok(self.params.mean_loss_and_grad(&self.records, true)?.1)
    }
}
