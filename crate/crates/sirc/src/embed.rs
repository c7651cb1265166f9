//! Pluggable text embedding with a deterministic, offline default.
//!
//! Production deployments embed with an external model; experiments here use
//! [`FeatureHashEmbedder`], which hashes token unigrams and bigrams into `d`
//! signed buckets and L2-normalizes. It is a pure function of `(text, spec)`,
//! so every run is reproducible without a network. [`LookupTableEmbedder`]
//! returns pre-registered vectors and exists to craft exact similarity
//! scenarios (for example a 0.96-cosine pair that must still be rejected on
//! entity evidence).

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexical::{tokenize, TokenizerSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text {0:?} produced no tokens to hash")]
    NoTokens(String),
    #[error("embedding dimension must be at least {min}, got {got}")]
    DimensionTooSmall { min: usize, got: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding vector has zero norm")]
    ZeroNorm,
    #[error("embedding vector contains a non-finite value")]
    NonFinite,
    #[error("no vector registered for text {0:?}")]
    MissingVector(String),
    #[error("cosine target {0} is outside [-1, 1]")]
    BadCosineTarget(f64),
    #[error("lookup table is full: dimension {dim} fits {max} crafted pairs")]
    TableFull { dim: usize, max: usize },
    #[error("the external_stub embedder defines the interface seam only and cannot run offline")]
    ExternalStubUnavailable,
}

/// Fixed-length real vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)` in `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values()) .map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    FeatureHash,
    LookupTable,
    ExternalStub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub seed: u64,
}

pub const MIN_DIMENSION: usize = 8;

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::FeatureHash,
            dimension: 256,
            seed: 0,
        }
    }
}

/// The embedding seam. Implementations are immutable after construction and
/// safe to call from multiple threads.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
    fn dimension(&self) -> usize;
}

/// Builds the embedder described by the spec. `ExternalStub` is an interface
/// placeholder and always fails; `LookupTable` starts empty (register vectors
/// through [`LookupTableEmbedder`] directly when crafting scenarios).
pub fn build_embedder(spec: &EmbedderSpec) -> Result<Arc<dyn TextEmbedder>, EmbedError> {
    match spec.kind {
        EmbedderKind::FeatureHash => Ok(Arc::new(FeatureHashEmbedder::new(spec.dimension, spec.seed)?)),
        EmbedderKind::LookupTable => Ok(Arc::new(LookupTableEmbedder::new(spec.dimension)?)),
        EmbedderKind::ExternalStub => Err(EmbedError::ExternalStubUnavailable),
    }
}

fn check_dimension(dimension: usize) -> Result<(), EmbedError> {
    if dimension < MIN_DIMENSION {
        return Err(EmbedError::DimensionTooSmall {
            min: MIN_DIMENSION,
            got: dimension,
        });
    }
    Ok(())
}

/// Signed feature hashing over token unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct FeatureHashEmbedder {
    dimension: usize,
    seed: u64,
    tokenizer: TokenizerSpec,
}

impl FeatureHashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, EmbedError> {
        check_dimension(dimension)?;
        Ok(Self {
            dimension,
            seed,
            tokenizer: TokenizerSpec::default(),
        })
    }
}

impl TextEmbedder for FeatureHashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let tokens = tokenize(text, &self.tokenizer);
        if tokens.is_empty() {
            return Err(EmbedError::NoTokens(text.to_string()));
        }

        let mut values = vec![0.0f64; self.dimension];
        let mut add_feature = |feature: &str| {
            let h = fnv1a64_seeded(self.seed, feature.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            // The top bit decides the sign, independent of the bucket bits.
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        };
        for token in &tokens {
            add_feature(token);
        }
        for pair in tokens.windows(2) {
            add_feature(&format!("{}\u{1f}{}", pair[0], pair[1]));
        }

        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Fully cancelled buckets; possible in principle, never useful.
            return Err(EmbedError::ZeroNorm);
        }
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector::new(values)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

fn fnv1a64_seeded(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Returns pre-registered vectors; unregistered text is an explicit error.
#[derive(Debug, Clone)]
pub struct LookupTableEmbedder {
    dimension: usize,
    table: HashMap<String, EmbeddingVector>,
    pairs_registered: usize,
}

impl LookupTableEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        check_dimension(dimension)?;
        Ok(Self {
            dimension,
            table: HashMap::new(),
            pairs_registered: 0,
        })
    }

    pub fn register(&mut self, text: impl Into<String>, vector: EmbeddingVector) -> Result<(), EmbedError> {
        if vector.dim() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                left: self.dimension,
                right: vector.dim(),
            });
        }
        if vector.l2_norm() == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        self.table.insert(text.into(), vector);
        Ok(())
    }

    /// Registers two texts whose cosine similarity is exactly `target` (up to
    /// floating-point rounding). Each call consumes a fresh pair of axes, so
    /// vectors from different calls are mutually orthogonal.
    pub fn register_pair(
        &mut self,
        a: impl Into<String>,
        b: impl Into<String>,
        target: f64,
    ) -> Result<(), EmbedError> {
        if !(-1.0..=1.0).contains(&target) {
            return Err(EmbedError::BadCosineTarget(target));
        }
        let max = self.dimension / 2;
        if self.pairs_registered >= max {
            return Err(EmbedError::TableFull {
                dim: self.dimension,
                max,
            });
        }
        let axis = 2 * self.pairs_registered;
        self.pairs_registered += 1;

        let mut va = vec![0.0; self.dimension];
        va[axis] = 1.0;
        let mut vb = vec![0.0; self.dimension];
        vb[axis] = target;
        vb[axis + 1] = (1.0 - target * target).sqrt();
        self.register(a, EmbeddingVector::new(va)?)?;
        self.register(b, EmbeddingVector::new(vb)?)
    }
}

impl TextEmbedder for LookupTableEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::MissingVector(text.to_string()))
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}
