//! Query-aware attention reward model.
//!
//! The query vector is projected to `Q`, each key/value row of the subgraph
//! representation to `K` and `V`. Every head attends over the rows with
//! `softmax(Q_h·K_hᵀ / √(d/h))`, heads are concatenated and mixed by `W_O`,
//! and a linear head followed by a sigmoid yields the reward in `(0, 1)`.
//!
//! By default the subgraph is a single row (the embedding of its serialized
//! text), so each head's softmax is over one logit. [`AttentionMode::PerTriple`]
//! instead uses one row per triple.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{embed_vector, Embedder};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, Differentiable};
use crate::scalar::Scalar;
use crate::subgraph::Subgraph;
use crate::vector::ByteReader;

pub const QRMW_MAGIC: &[u8; 4] = b"QRMW";
pub const QRMW_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    SinglePosition,
    PerTriple,
}

/// Projection matrices (row-major `d × d`, applied as `x · W`), the linear
/// scoring head and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    dim: usize,
    heads: usize,
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    pub head: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        validate_shape(dim, heads)?;
        let m = vec![T::zero(); dim * dim];
        Ok(AttentionParams {
            dim,
            heads,
            w_q: m.clone(),
            w_k: m.clone(),
            w_v: m.clone(),
            w_o: m,
            head: vec![T::zero(); dim],
            bias: T::zero(),
        })
    }

    /// Identity projections, zero scoring head.
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        for i in 0..dim {
            for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
                m[i * dim + i] = T::one();
            }
        }
        Ok(p)
    }

    /// Every matrix and the scoring head drawn from `U(−1/√d, 1/√d)`; bias 0.
    pub fn seeded(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o, &mut p.head] {
            for w in m.iter_mut() {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim + self.dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(self.dim, self.heads)?;
        let dd = self.dim * self.dim;
        for (name, m, len) in [
            ("W_Q", &self.w_q, dd),
            ("W_K", &self.w_k, dd),
            ("W_V", &self.w_v, dd),
            ("W_O", &self.w_o, dd),
            ("head", &self.head, self.dim),
        ] {
            if m.len() != len {
                return Err(Error::validation(format!("{name} has {} entries, expected {len}", m.len())));
            }
        }
        if self.flat().any(|v| !v.is_finite()) {
            return Err(Error::validation("attention parameters contain a non-finite value"));
        }
        Ok(())
    }

    /// All parameters in persistence order.
    pub fn flat(&self) -> impl Iterator<Item = T> + '_ {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(&self.w_o)
            .chain(&self.head)
            .copied()
            .chain(std::iter::once(self.bias))
    }

    fn slot(&mut self, index: usize) -> &mut T {
        let dd = self.dim * self.dim;
        let (group, i) = (index / dd.max(1), index % dd.max(1));
        match index {
            _ if index < 4 * dd => match group {
                0 => &mut self.w_q[i],
                1 => &mut self.w_k[i],
                2 => &mut self.w_v[i],
                _ => &mut self.w_o[i],
            },
            _ if index < 4 * dd + self.dim => &mut self.head[index - 4 * dd],
            _ => &mut self.bias,
        }
    }

    pub fn get(&self, index: usize) -> T {
        self.flat().nth(index).expect("parameter index in range")
    }

    pub fn set(&mut self, index: usize, value: T) {
        *self.slot(index) = value;
    }

    /// Header (magic, version, d, h as u32 LE) followed by every parameter
    /// as f32 LE in `W_Q, W_K, W_V, W_O, head, bias` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.param_count());
        out.extend_from_slice(QRMW_MAGIC);
        out.extend_from_slice(&QRMW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.heads as u32).to_le_bytes());
        for v in self.flat() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != QRMW_MAGIC {
            return Err(Error::Format("missing QRMW magic".into()));
        }
        let version = r.u32()?;
        if version != QRMW_VERSION {
            return Err(Error::Format(format!("unsupported QRMW version {version}")));
        }
        let dim = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let mut p = Self::zeros(dim, heads).map_err(|e| Error::Format(e.to_string()))?;
        for i in 0..p.param_count() {
            let v = r.f32()?;
            p.set(i, T::from_f32(v).unwrap_or_else(T::nan));
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(p)
    }
}

fn validate_shape(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 {
        return Err(Error::validation("head count must be positive"));
    }
    if !dim.is_multiple_of(heads) {
        return Err(Error::validation(format!("dimension {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `x · W` for a row-major square `W`.
fn vec_mat<T: Scalar>(x: &[T], w: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); dim];
    for (i, &xi) in x.iter().enumerate() {
        if xi.is_zero() {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(&w[i * dim..(i + 1) * dim]) {
            *o = *o + xi * wij;
        }
    }
    out
}

/// `Q = q·W_Q`, `K = kgs·W_K`, `V = kgs·W_V`.
pub fn project_qkv<T: Scalar>(q: &[T], kgs: &[T], params: &AttentionParams<T>) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let d = params.dim;
    check_dim(d, q.len())?;
    check_dim(d, kgs.len())?;
    Ok((vec_mat(q, &params.w_q, d), vec_mat(kgs, &params.w_k, d), vec_mat(kgs, &params.w_v, d)))
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Forward<T> {
    q_proj: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    /// `weights[h][r]`: attention of head `h` on row `r`.
    weights: Vec<Vec<T>>,
    concat: Vec<T>,
    output: Vec<T>,
    logit: T,
}

fn forward<T: Scalar>(q: &[T], rows: &[Vec<T>], p: &AttentionParams<T>) -> Result<Forward<T>> {
    let d = p.dim;
    check_dim(d, q.len())?;
    if rows.is_empty() {
        return Err(Error::validation("attention needs at least one key/value row"));
    }
    for r in rows {
        check_dim(d, r.len())?;
    }
    let q_proj = vec_mat(q, &p.w_q, d);
    let keys: Vec<Vec<T>> = rows.iter().map(|r| vec_mat(r, &p.w_k, d)).collect();
    let values: Vec<Vec<T>> = rows.iter().map(|r| vec_mat(r, &p.w_v, d)).collect();
    let dh = p.head_dim();
    let scale = T::one() / T::from_usize(dh.max(1)).expect("head dim fits scalar").sqrt();

    let mut weights = Vec::with_capacity(p.heads);
    let mut concat = vec![T::zero(); d];
    for h in 0..p.heads {
        let seg = h * dh..(h + 1) * dh;
        let logits: Vec<T> = keys
            .iter()
            .map(|k| crate::vector::dot(&q_proj[seg.clone()], &k[seg.clone()]) * scale)
            .collect();
        let a = softmax(&logits);
        for (r, &w) in a.iter().enumerate() {
            for j in seg.clone() {
                concat[j] = concat[j] + w * values[r][j];
            }
        }
        weights.push(a);
    }
    let output = vec_mat(&concat, &p.w_o, d);
    let logit = crate::vector::dot(&p.head, &output) + p.bias;
    Ok(Forward {
        q_proj,
        keys,
        values,
        weights,
        concat,
        output,
        logit,
    })
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid kept strictly inside `(0, 1)`.
fn reward_from_logit<T: Scalar>(z: T) -> T {
    let eps = T::epsilon();
    sigmoid(z).max(eps).min(T::one() - eps)
}

/// `Concat(head_1..head_h)·W_O` for one query against `rows` key/value inputs.
pub fn attention_forward<T: Scalar>(q: &[T], rows: &[Vec<T>], params: &AttentionParams<T>) -> Result<Vec<T>> {
    Ok(forward(q, rows, params)?.output)
}

/// Per-head attention distributions over `rows`.
pub fn attention_weights<T: Scalar>(q: &[T], rows: &[Vec<T>], params: &AttentionParams<T>) -> Result<Vec<Vec<T>>> {
    Ok(forward(q, rows, params)?.weights)
}

/// Reward in `(0, 1)` for embedded inputs.
pub fn score_vectors<T: Scalar>(q: &[T], rows: &[Vec<T>], params: &AttentionParams<T>) -> Result<T> {
    Ok(reward_from_logit(forward(q, rows, params)?.logit))
}

/// Key/value rows for a subgraph under `mode`.
pub fn subgraph_rows<T: Scalar>(sub: &Subgraph, mode: AttentionMode, embedder: &dyn Embedder) -> Result<Vec<Vec<T>>> {
    match mode {
        AttentionMode::PerTriple if !sub.triples().is_empty() => sub
            .triples()
            .iter()
            .map(|t| embed_vector::<T>(embedder, &t.text()).map(|v| v.into_inner()))
            .collect(),
        _ => Ok(vec![embed_vector::<T>(embedder, &sub.serialize())?.into_inner()]),
    }
}

/// Reward for a `(query, subgraph)` pair.
pub fn score<T: Scalar>(
    query: &str,
    sub: &Subgraph,
    params: &AttentionParams<T>,
    embedder: &dyn Embedder,
    mode: AttentionMode,
) -> Result<T> {
    let q = embed_vector::<T>(embedder, query)?.into_inner();
    let rows = subgraph_rows(sub, mode, embedder)?;
    score_vectors(&q, &rows, params)
}

/// One labeled `(query, subgraph text, score)` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmTrainingExample {
    pub query: String,
    pub subgraph: String,
    pub score: f64,
}

impl RmTrainingExample {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::validation(format!("target score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

pub fn parse_rm_examples(text: &str) -> Result<Vec<RmTrainingExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let ex: RmTrainingExample = serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            ex.validate().map_err(|e| Error::parse(i + 1, e.to_string()))?;
            Ok(ex)
        })
        .collect()
}

/// An embedded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct RmExample<T> {
    pub query: Vec<T>,
    pub rows: Vec<Vec<T>>,
    pub target: T,
}

impl<T: Scalar> RmExample<T> {
    /// Embeds the query and the subgraph text as a single row.
    pub fn embed(ex: &RmTrainingExample, embedder: &dyn Embedder) -> Result<Self> {
        ex.validate()?;
        Ok(RmExample {
            query: embed_vector::<T>(embedder, &ex.query)?.into_inner(),
            rows: vec![embed_vector::<T>(embedder, &ex.subgraph)?.into_inner()],
            target: T::lit(ex.score),
        })
    }
}

/// Mean squared error and, optionally, its gradient in [`AttentionParams::flat`] order.
fn mse_and_grad<T: Scalar>(p: &AttentionParams<T>, examples: &[RmExample<T>], want_grad: bool) -> Result<(T, Vec<T>)> {
    if examples.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let d = p.dim;
    let dd = d * d;
    let n = T::from_usize(examples.len()).expect("count fits scalar");
    let mut grad = if want_grad { vec![T::zero(); p.param_count()] } else { Vec::new() };
    let mut total = T::zero();
    for ex in examples {
        let f = forward(&ex.query, &ex.rows, p)?;
        let s = reward_from_logit(f.logit);
        let err = s - ex.target;
        total = total + err * err;
        if !want_grad {
            continue;
        }
        // d(err²)/dz with σ' = σ(z)σ(−z)
        let dz = T::lit(2.0) * err * sigmoid(f.logit) * sigmoid(-f.logit) / n;
        let (gq, rest) = grad.split_at_mut(dd);
        let (gk, rest) = rest.split_at_mut(dd);
        let (gv, rest) = rest.split_at_mut(dd);
        let (go, rest) = rest.split_at_mut(dd);
        let (gh, gb) = rest.split_at_mut(d);
        gb[0] = gb[0] + dz;
        let mut d_out = vec![T::zero(); d];
        for k in 0..d {
            gh[k] = gh[k] + dz * f.output[k];
            d_out[k] = dz * p.head[k];
        }
        let mut d_concat = vec![T::zero(); d];
        for j in 0..d {
            let row = &p.w_o[j * d..(j + 1) * d];
            for k in 0..d {
                go[j * d + k] = go[j * d + k] + f.concat[j] * d_out[k];
            }
            d_concat[j] = crate::vector::dot(row, &d_out);
        }

        let dh = p.head_dim();
        let scale = T::one() / T::from_usize(dh.max(1)).expect("head dim fits scalar").sqrt();
        let mut d_q = vec![T::zero(); d];
        let mut d_keys = vec![vec![T::zero(); d]; ex.rows.len()];
        let mut d_values = vec![vec![T::zero(); d]; ex.rows.len()];
        for h in 0..p.heads {
            let seg = h * dh..(h + 1) * dh;
            let a = &f.weights[h];
            let d_a: Vec<T> = f
                .values
                .iter()
                .map(|v| crate::vector::dot(&d_concat[seg.clone()], &v[seg.clone()]))
                .collect();
            let mean: T = a.iter().zip(&d_a).map(|(&w, &g)| w * g).sum();
            for r in 0..ex.rows.len() {
                let d_logit = a[r] * (d_a[r] - mean) * scale;
                for j in seg.clone() {
                    d_values[r][j] = a[r] * d_concat[j];
                    d_q[j] = d_q[j] + d_logit * f.keys[r][j];
                    d_keys[r][j] = d_logit * f.q_proj[j];
                }
            }
        }
        outer_accumulate(gq, &ex.query, &d_q);
        for (r, row) in ex.rows.iter().enumerate() {
            outer_accumulate(gk, row, &d_keys[r]);
            outer_accumulate(gv, row, &d_values[r]);
        }
    }
    Ok((total / n, grad))
}

/// `g += x ⊗ y`.
fn outer_accumulate<T: Scalar>(g: &mut [T], x: &[T], y: &[T]) {
    let d = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi.is_zero() {
            continue;
        }
        for (gij, &yj) in g[i * d..(i + 1) * d].iter_mut().zip(y) {
            *gij = *gij + xi * yj;
        }
    }
}

pub fn mse<T: Scalar>(params: &AttentionParams<T>, examples: &[RmExample<T>]) -> Result<T> {
    Ok(mse_and_grad(params, examples, false)?.0)
}

/// Parameters and a fixed example set, as a differentiable objective.
#[derive(Debug, Clone)]
pub struct RmObjective<T> {
    pub params: AttentionParams<T>,
    pub examples: Vec<RmExample<T>>,
}

impl<T: Scalar> Differentiable<T> for RmObjective<T> {
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn param(&self, index: usize) -> T {
        self.params.get(index)
    }

    fn set_param(&mut self, index: usize, value: T) {
        self.params.set(index, value);
    }

    fn loss(&self) -> Result<T> {
        mse(&self.params, &self.examples)
    }

    fn gradient(&self) -> Result<Vec<T>> {
        Ok(mse_and_grad(&self.params, &self.examples, true)?.1)
    }
}

/// Largest relative error of the analytic gradient on one example.
pub fn grad_check_rm<T: Scalar>(params: &AttentionParams<T>, example: &RmExample<T>, epsilon: T) -> Result<T> {
    let obj = RmObjective {
        params: params.clone(),
        examples: vec![example.clone()],
    };
    grad_check(&obj, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct RmTraining<T> {
    pub params: AttentionParams<T>,
    pub initial_mse: T,
    pub final_mse: T,
    /// MSE before each epoch, then after the last.
    pub curve: Vec<T>,
}

/// Full-batch gradient descent on MSE from the seeded initialization.
pub fn train_rm_embedded<T: Scalar>(examples: &[RmExample<T>], cfg: &RmTrainConfig) -> Result<RmTraining<T>> {
    let first = examples.first().ok_or_else(|| Error::validation("empty training set"))?;
    let mut params = AttentionParams::seeded(first.query.len(), cfg.heads, cfg.seed)?;
    let lr = T::lit(cfg.lr);
    let initial_mse = mse(&params, examples)?;
    let mut curve = vec![initial_mse];
    for _ in 0..cfg.epochs {
        let (_, grad) = mse_and_grad(&params, examples, true)?;
        for (i, g) in grad.into_iter().enumerate() {
            let w = params.slot(i);
            *w = *w - lr * g;
        }
        curve.push(mse(&params, examples)?);
    }
    Ok(RmTraining {
        final_mse: *curve.last().expect("curve holds the initial value"),
        params,
        initial_mse,
        curve,
    })
}

/// Embeds text examples and trains on them.
pub fn train_rm<T: Scalar>(
    examples: &[RmTrainingExample],
    embedder: &dyn Embedder,
    cfg: &RmTrainConfig,
) -> Result<RmTraining<T>> {
    let embedded = examples
        .iter()
        .map(|e| RmExample::embed(e, embedder))
        .collect::<Result<Vec<_>>>()?;
    train_rm_embedded(&embedded, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::HashEmbedder;
    use crate::kg::Triple;
    use crate::subgraph::PathKind;
    use proptest::prelude::*;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Textbook matrix multiply oracle: `out_j = Σ_i x_i W_ij`.
    fn naive_vec_mat(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
        (0..d).map(|j| (0..d).map(|i| x[i] * w[i * d + j]).sum()).collect()
    }

    #[test]
    fn projections() {
        let p = AttentionParams::<f64>::identity(4, 2).unwrap();
        let q = vec![1.0, 2.0, 3.0, 4.0];
        let k = vec![0.5, -1.0, 0.0, 2.0];
        let (qq, kk, vv) = project_qkv(&q, &k, &p).unwrap();
        assert_eq!((qq, kk.clone(), vv), (q.clone(), k.clone(), k.clone()));

        let mut z = p.clone();
        z.w_v = vec![0.0; 16];
        assert!(project_qkv(&q, &k, &z).unwrap().2.iter().all(|&v| v == 0.0));

        let r = AttentionParams::<f64>::seeded(4, 2, 3).unwrap();
        let (qq, kk, vv) = project_qkv(&q, &k, &r).unwrap();
        assert_eq!(qq, naive_vec_mat(&q, &r.w_q, 4));
        assert_eq!(kk, naive_vec_mat(&k, &r.w_k, 4));
        assert_eq!(vv, naive_vec_mat(&k, &r.w_v, 4));

        assert!(matches!(project_qkv(&q[..3], &k, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_position_output_is_value_through_w_o() {
        let p = AttentionParams::<f64>::seeded(8, 2, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_vec(&mut rng, 8);
        let kv = random_vec(&mut rng, 8);
        let out = attention_forward(&q, std::slice::from_ref(&kv), &p).unwrap();
        let expected = naive_vec_mat(&naive_vec_mat(&kv, &p.w_v, 8), &p.w_o, 8);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = AttentionParams::<f64>::identity(4, 1).unwrap();
        let out = attention_forward(&[1.0, 0.0, 0.0, 0.0], &[vec![0.0; 4]], &p).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    /// Independent forward pass written head by head with explicit slices.
    fn reference_forward(q: &[f64], rows: &[Vec<f64>], p: &AttentionParams<f64>) -> Vec<f64> {
        let d = p.dim();
        let dh = d / p.heads();
        let qp = naive_vec_mat(q, &p.w_q, d);
        let ks: Vec<Vec<f64>> = rows.iter().map(|r| naive_vec_mat(r, &p.w_k, d)).collect();
        let vs: Vec<Vec<f64>> = rows.iter().map(|r| naive_vec_mat(r, &p.w_v, d)).collect();
        let mut concat = Vec::new();
        for h in 0..p.heads() {
            let lo = h * dh;
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| (lo..lo + dh).map(|j| qp[j] * k[j]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in lo..lo + dh {
                concat.push(scores.iter().zip(&vs).map(|(s, v)| s.exp() / z * v[j]).sum());
            }
        }
        naive_vec_mat(&concat, &p.w_o, d)
    }

    #[test]
    fn forward_matches_reference() {
        let p = AttentionParams::<f64>::seeded(4, 2, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_vec(&mut rng, 4);
        for n_rows in [1, 3] {
            let rows: Vec<Vec<f64>> = (0..n_rows).map(|_| random_vec(&mut rng, 4)).collect();
            let got = attention_forward(&q, &rows, &p).unwrap();
            let want = reference_forward(&q, &rows, &p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = AttentionParams::<f64>::seeded(8, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_vec(&mut rng, 8);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 8)).collect();
        for w in attention_weights(&q, &rows, &p).unwrap() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_validation() {
        assert!(AttentionParams::<f64>::zeros(8, 3).is_err());
        assert!(AttentionParams::<f64>::zeros(8, 0).is_err());
        let p = AttentionParams::<f64>::zeros(4, 2).unwrap();
        assert!(attention_forward(&[0.0; 4], &[], &p).is_err());
        assert!(attention_forward(&[0.0; 4], &[vec![0.0; 3]], &p).is_err());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let mut p = AttentionParams::<f64>::seeded(8, 2, 4).unwrap();
        p.head = vec![0.0; 8];
        let e = HashEmbedder::new(8).unwrap();
        let sub = Subgraph::new("A", PathKind::OneHop, vec![Triple::new("A", "knows", "B")], vec![]);
        let s = score("who does A know", &sub, &p, &e, AttentionMode::SinglePosition).unwrap();
        assert_eq!(s, 0.5);
        let again = score("who does A know", &sub, &p, &e, AttentionMode::SinglePosition).unwrap();
        assert_eq!(s.to_bits(), again.to_bits());
    }

    #[test]
    fn per_triple_mode_uses_one_row_per_triple() {
        let e = HashEmbedder::new(8).unwrap();
        let sub = Subgraph::new(
            "A",
            PathKind::OneHop,
            vec![Triple::new("A", "r", "B"), Triple::new("A", "s", "C")],
            vec![],
        );
        assert_eq!(subgraph_rows::<f64>(&sub, AttentionMode::PerTriple, &e).unwrap().len(), 2);
        assert_eq!(subgraph_rows::<f64>(&sub, AttentionMode::SinglePosition, &e).unwrap().len(), 1);
        let empty = Subgraph::singleton("A", PathKind::OneHop);
        assert_eq!(subgraph_rows::<f64>(&empty, AttentionMode::PerTriple, &e).unwrap().len(), 1);
    }

    fn random_example(rng: &mut ChaCha8Rng, d: usize, rows: usize) -> RmExample<f64> {
        RmExample {
            query: random_vec(rng, d),
            rows: (0..rows).map(|_| random_vec(rng, d)).collect(),
            target: rng.random_range(0.0..1.0),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = AttentionParams::<f64>::seeded(8, 2, seed).unwrap();
            // full-range weights keep multi-row attention gradients well above
            // finite-difference rounding noise
            for i in 0..p.param_count() {
                p.set(i, rng.random_range(-1.0..1.0));
            }
            for rows in [1, 3] {
                let ex = random_example(&mut rng, 8, rows);
                let err = grad_check_rm(&p, &ex, 1e-5).unwrap();
                assert!(err < 1e-4, "seed {seed}, rows {rows}: {err}");
            }
        }
    }

    #[derive(Clone)]
    struct Skewed(RmObjective<f64>);

    impl Differentiable<f64> for Skewed {
        fn param_count(&self) -> usize {
            self.0.param_count()
        }
        fn param(&self, i: usize) -> f64 {
            self.0.param(i)
        }
        fn set_param(&mut self, i: usize, v: f64) {
            self.0.set_param(i, v)
        }
        fn loss(&self) -> Result<f64> {
            self.0.loss()
        }
        fn gradient(&self) -> Result<Vec<f64>> {
            let mut g = self.0.gradient()?;
            let last = g.len() - 1;
            g[last] *= 1.1;
            Ok(g)
        }
    }

    #[test]
    fn perturbed_gradient_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obj = RmObjective {
            params: AttentionParams::<f64>::seeded(8, 2, 7).unwrap(),
            examples: vec![random_example(&mut rng, 8, 1)],
        };
        assert!(grad_check(&Skewed(obj), 1e-5).unwrap() > 1e-2);
    }

    #[test]
    fn flat_indexing_round_trips() {
        let mut p = AttentionParams::<f64>::seeded(4, 2, 1).unwrap();
        let flat: Vec<f64> = p.flat().collect();
        assert_eq!(flat.len(), p.param_count());
        for (i, &v) in flat.iter().enumerate() {
            assert_eq!(p.get(i), v);
        }
        p.set(p.param_count() - 1, 0.25);
        assert_eq!(p.bias, 0.25);
        p.set(16, 3.0);
        assert_eq!(p.w_k[0], 3.0);
    }

    #[test]
    fn qrmw_round_trip() {
        let p = AttentionParams::<f32>::seeded(8, 2, 5).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"QRMW");
        assert_eq!(bytes.len(), 16 + 4 * p.param_count());
        assert_eq!(AttentionParams::<f32>::from_bytes(&bytes).unwrap(), p);
        assert!(AttentionParams::<f32>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[12] = 3; // heads = 3 does not divide 8
        assert!(AttentionParams::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn zero_epochs_keeps_seeded_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = vec![random_example(&mut rng, 8, 1)];
        let cfg = RmTrainConfig { epochs: 0, lr: 0.1, seed: 42, heads: 2 };
        let t = train_rm_embedded(&ex, &cfg).unwrap();
        assert_eq!(t.params, AttentionParams::seeded(8, 2, 42).unwrap());
        assert_eq!(t.initial_mse, t.final_mse);
        assert!(train_rm_embedded::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn parse_examples_validates_targets() {
        let ok = "{\"query\":\"q\",\"subgraph\":\"A r B\",\"score\":0.7}\n";
        assert_eq!(parse_rm_examples(ok).unwrap()[0].score, 0.7);
        let bad = "{\"query\":\"q\",\"subgraph\":\"A r B\",\"score\":0.7}\n{\"query\":\"q\",\"subgraph\":\"\",\"score\":1.5}\n";
        assert!(matches!(parse_rm_examples(bad), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn score_strictly_inside_unit_interval(
            q in prop::collection::vec(-1e3f64..1e3, 4),
            kv in prop::collection::vec(-1e3f64..1e3, 4),
            seed in 0u64..1000,
            scale in 0.1f64..1e3,
        ) {
            let mut p = AttentionParams::<f64>::seeded(4, 2, seed).unwrap();
            p.head.iter_mut().for_each(|h| *h *= scale);
            let s = score_vectors(&q, &[kv], &p).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
