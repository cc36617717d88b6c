//! Frozen text embeddings for arms and dialogue context.
//!
//! The synthetic provider hashes whitespace/punctuation-delimited lowercase
//! tokens and adjacent-token bigrams (FNV-1a 64) into a bag of features and projects the counts through
//! a seeded ±1 sign matrix, then L2-normalizes. The matrix is never
//! materialized: the sign row of a feature is regenerated from
//! `splitmix64(seed, feature)` on demand.
//!
//! The remote provider speaks JSON over HTTP:
//!
//! ```text
//! POST <endpoint>   {"model": "optional-name", "input": ["text", ...]}
//! 200 OK            {"vectors": [[0.1, ...], ...]}
//! ```
//!
//! Responses are rejected unless they carry one finite vector of the
//! configured dimension per input.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::TurnRecord;
use crate::scalar::{all_finite, Scalar};
use crate::strategy_space::{augment_persona, Persona, Strategy, StrategyPool};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid embedding provider: {0}")]
    InvalidProvider(String),
    #[error("embedding request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("non-conforming embedding response: {0}")]
    BadResponse(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in feature vector")]
    NonFinite,
    #[error("embedding arm {arm}: {source}")]
    Arm {
        arm: usize,
        #[source]
        source: Box<FeatureError>,
    },
}

/// Which frozen embedding model `g(.)` to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProvider {
    Synthetic {
        dim: usize,
        seed: u64,
    },
    Remote {
        dim: usize,
        endpoint: String,
        #[serde(default)]
        model: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl EmbeddingProvider {
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        Self::Synthetic { dim, seed }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Synthetic { dim, .. } | Self::Remote { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.dim() == 0 {
            return Err(FeatureError::InvalidProvider("dim must be >= 1".into()));
        }
        if let Self::Remote { endpoint, .. } = self {
            if endpoint.trim().is_empty() {
                return Err(FeatureError::InvalidProvider("remote provider needs an endpoint".into()));
            }
        }
        Ok(())
    }

    fn descriptor(&self) -> String {
        match self {
            Self::Synthetic { dim, seed } => format!("synthetic:{dim}:{seed}"),
            Self::Remote { dim, endpoint, model, .. } => {
                format!("remote:{dim}:{endpoint}:{}", model.as_deref().unwrap_or(""))
            }
        }
    }
}

/// Finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, FeatureError> {
        if values.is_empty() {
            return Err(FeatureError::DimensionMismatch { expected: 1, got: 0 });
        }
        if !all_finite(&values) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// `[self; other]`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut values = Vec::with_capacity(self.dim() + other.dim());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        Self { values }
    }

    fn from_f64(values: &[f64]) -> Result<Self, FeatureError> {
        Self::new(values.iter().map(|&v| T::of(v)).collect())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Hashing-trick embedding; empty (token-free) text maps to the zero vector.
pub fn synthetic_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut counts: HashMap<u64, f64> = HashMap::new();
    let mut prev: Option<String> = None;
    for tok in tokens(text) {
        *counts.entry(fnv1a64(tok.as_bytes())).or_insert(0.0) += 1.0;
        if let Some(p) = prev {
            let bigram = format!("{p}\u{1f}{tok}");
            *counts.entry(fnv1a64(bigram.as_bytes())).or_insert(0.0) += 1.0;
        }
        prev = Some(tok);
    }
    let mut features: Vec<(u64, f64)> = counts.into_iter().collect();
    // fixed summation order keeps the output bit-stable
    features.sort_unstable_by_key(|&(f, _)| f);

    let mut out = vec![0.0; dim];
    for (feature, count) in features {
        let mut state = seed ^ feature.rotate_left(17);
        let mut bits = 0u64;
        for (j, slot) in out.iter_mut().enumerate() {
            if j % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            if bits >> (j % 64) & 1 == 1 {
                *slot += count;
            } else {
                *slot -= count;
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct RemoteResponse {
    vectors: Vec<Vec<f64>>,
}

fn remote_embed(
    endpoint: &str,
    model: Option<&str>,
    timeout_ms: u64,
    retries: u32,
    texts: &[&str],
    dim: usize,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .build()
        .into();
    let body = RemoteRequest { model, input: texts };
    let mut attempts = 0;
    let response = loop {
        attempts += 1;
        match agent.post(endpoint).send_json(&body) {
            Ok(mut resp) => {
                break resp
                    .body_mut()
                    .read_json::<RemoteResponse>()
                    .map_err(|e| FeatureError::BadResponse(e.to_string()))?
            }
            Err(e) if attempts > retries => {
                return Err(FeatureError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
            Err(_) => continue,
        }
    };
    if response.vectors.len() != texts.len() {
        return Err(FeatureError::BadResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            response.vectors.len()
        )));
    }
    for v in &response.vectors {
        if v.len() != dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if !all_finite(v) {
            return Err(FeatureError::NonFinite);
        }
    }
    Ok(response.vectors)
}

/// Embeds a batch of texts. Empty strings always map to zero vectors and are
/// never sent to a remote provider.
pub fn embed_batch<T: Scalar>(
    provider: &EmbeddingProvider,
    texts: &[&str],
) -> Result<Vec<FeatureVector<T>>, FeatureError> {
    provider.validate()?;
    let dim = provider.dim();
    let raw: Vec<Vec<f64>> = match provider {
        EmbeddingProvider::Synthetic { seed, .. } => texts
            .iter()
            .map(|t| synthetic_embedding(t, dim, *seed))
            .collect(),
        EmbeddingProvider::Remote {
            endpoint,
            model,
            timeout_ms,
            retries,
            ..
        } => {
            let live: Vec<&str> = texts.iter().copied().filter(|t| !t.is_empty()).collect();
            let mut fetched = if live.is_empty() {
                Vec::new()
            } else {
                remote_embed(endpoint, model.as_deref(), *timeout_ms, *retries, &live, dim)?
            }
            .into_iter();
            texts
                .iter()
                .map(|t| {
                    if t.is_empty() {
                        vec![0.0; dim]
                    } else {
                        fetched.next().expect("one vector per live text")
                    }
                })
                .collect()
        }
    };
    raw.iter()
        .map(|v| {
            if v.iter().all(|x| *x == 0.0) {
                Ok(FeatureVector::zeros(dim))
            } else {
                FeatureVector::from_f64(v)
            }
        })
        .collect()
}

pub fn embed_text<T: Scalar>(
    provider: &EmbeddingProvider,
    text: &str,
) -> Result<FeatureVector<T>, FeatureError> {
    Ok(embed_batch(provider, &[text])?.remove(0))
}

/// Wraps a provider with an in-memory cache and a call counter.
#[derive(Debug)]
pub struct Embedder {
    provider: EmbeddingProvider,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    calls: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: EmbeddingProvider) -> Result<Self, FeatureError> {
        provider.validate()?;
        Ok(Self {
            provider,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    /// Number of provider invocations (cache misses on non-empty text).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn embed<T: Scalar>(&self, text: &str) -> Result<FeatureVector<T>, FeatureError> {
        if text.is_empty() {
            return Ok(FeatureVector::zeros(self.provider.dim()));
        }
        if let Some(v) = self.cache.lock().expect("cache lock").get(text) {
            return FeatureVector::from_f64(v);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v: FeatureVector<f64> = embed_text(&self.provider, text)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(text.to_string(), v.values().to_vec());
        FeatureVector::from_f64(v.values())
    }
}

/// Precomputed `g(b0 ⊕ σ_k)` for every arm, bound to its inputs by a digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmEmbeddingTable<T> {
    embeddings: Vec<FeatureVector<T>>,
    pool_hash: String,
}

impl<T: Scalar> ArmEmbeddingTable<T> {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.dim())
    }

    pub fn embeddings(&self) -> &[FeatureVector<T>] {
        &self.embeddings
    }

    pub fn pool_hash(&self) -> &str {
        &self.pool_hash
    }

    /// Table for `pool` extended with one appended arm; existing rows are kept as-is.
    pub fn with_appended(
        &self,
        provider: &EmbeddingProvider,
        base: &Persona,
        pool: &StrategyPool,
        strategy: &Strategy,
    ) -> Result<Self, FeatureError> {
        let text = augment_persona(base, strategy).text;
        let e = embed_text(provider, &text).map_err(|e| FeatureError::Arm {
            arm: self.len(),
            source: Box::new(e),
        })?;
        let mut embeddings = self.embeddings.clone();
        embeddings.push(e);
        Ok(Self {
            embeddings,
            pool_hash: table_digest(provider, base, pool, strategy),
        })
    }
}

fn table_digest(
    provider: &EmbeddingProvider,
    base: &Persona,
    pool: &StrategyPool,
    appended: &Strategy,
) -> String {
    let mut h = Sha256::new();
    h.update(provider.descriptor().as_bytes());
    h.update([0]);
    h.update(base.text.as_bytes());
    h.update([0]);
    h.update(pool.digest().as_bytes());
    h.update([0]);
    h.update(serde_json::to_string(appended).unwrap_or_default().as_bytes());
    hex::encode(h.finalize())
}

pub fn precompute_arm_embeddings<T: Scalar>(
    provider: &EmbeddingProvider,
    base: &Persona,
    pool: &StrategyPool,
) -> Result<ArmEmbeddingTable<T>, FeatureError> {
    let texts: Vec<String> = pool
        .strategies()
        .iter()
        .map(|s| augment_persona(base, s).text)
        .collect();
    let mut embeddings = Vec::with_capacity(texts.len());
    for (arm, text) in texts.iter().enumerate() {
        let e = embed_text(provider, text).map_err(|e| FeatureError::Arm {
            arm,
            source: Box::new(e),
        })?;
        embeddings.push(e);
    }
    let mut h = Sha256::new();
    h.update(provider.descriptor().as_bytes());
    h.update([0]);
    h.update(base.text.as_bytes());
    h.update([0]);
    h.update(pool.digest().as_bytes());
    Ok(ArmEmbeddingTable {
        embeddings,
        pool_hash: hex::encode(h.finalize()),
    })
}

/// One `speaker: utterance` line per utterance, turns in order, newline-joined.
/// With `window = Some(n)` only the last `n` turns are kept.
pub fn serialize_history(history: &[TurnRecord], window: Option<usize>) -> String {
    let start = window.map_or(0, |w| history.len().saturating_sub(w));
    let mut lines = Vec::with_capacity(2 * (history.len() - start));
    for rec in &history[start..] {
        lines.push(format!("agent: {}", rec.agent_utterance));
        lines.push(format!("opponent: {}", rec.opponent_utterance));
    }
    lines.join("\n")
}

/// `c = g(H)`; the empty history encodes to the zero vector.
pub fn encode_context<T: Scalar>(
    provider: &EmbeddingProvider,
    history: &[TurnRecord],
    window: Option<usize>,
) -> Result<FeatureVector<T>, FeatureError> {
    if history.is_empty() || window == Some(0) {
        provider.validate()?;
        return Ok(FeatureVector::zeros(provider.dim()));
    }
    embed_text(provider, &serialize_history(history, window))
}

/// `x_k = [b_k; c]` for every arm, in arm order.
pub fn build_features<T: Scalar>(
    table: &ArmEmbeddingTable<T>,
    context: &FeatureVector<T>,
) -> Result<Vec<FeatureVector<T>>, FeatureError> {
    if context.dim() != table.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: table.dim(),
            got: context.dim(),
        });
    }
    Ok(table.embeddings.iter().map(|b| b.concat(context)).collect())
}
