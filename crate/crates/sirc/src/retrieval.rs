//! Hybrid retrieval: Tier 0 exact lookup, parallel dense and lexical legs,
//! reciprocal rank fusion, and entity-gated threshold acceptance.
//!
//! A lookup proceeds in tiers. The exact tier short-circuits on a SHA-256
//! match. Otherwise both retrieval legs run with the configured `top_k`, the
//! candidate union is fused by RRF (`score = 1/(k_rrf + r_dense) + 1/(k_rrf +
//! r_lex)`, an absent leg contributing nothing), and the walker accepts the
//! first fused candidate whose raw cosine clears `tau` *and* whose stored
//! tokens contain every mandatory entity group. Acceptance uses the cosine,
//! never the fused score: fusion only orders the walk. Lexical-only
//! candidates without dense evidence above `tau` are never accepted, no
//! matter how well their entities overlap.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::SchemaContext;
use crate::embed::{cosine, EmbedError, EmbeddingVector, TextEmbedder};
use crate::lexical::{
    missing_groups, required_entity_groups, tokenize, Bm25Params, EntityGroup, LexicalIndex,
    TokenizerSpec,
};
use crate::store::{
    AdmitResult, CacheEntry, CacheStore, Digest, Stage, StoreConfig, StoreError,
};
use crate::vector_index::{HnswConfig, HnswIndex, IndexError, RankedCandidate};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// How the entity guard treats a candidate that clears `tau` but omits a
/// mandatory entity group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardMode {
    /// Reject outright (default). No wrong-entity artifact is ever served.
    HardReject,
    /// Rely on the lexical leg's influence on fused order only.
    DownrankOnly,
}

/// Per-stage retrieval knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Cosine acceptance threshold in (0, 1].
    pub tau: f64,
    /// RRF constant.
    pub k_rrf: u32,
    /// Candidate count per leg.
    pub top_k: usize,
    pub entity_guard: GuardMode,
    /// Whether the semantic tiers run at all for this stage.
    pub semantic_enabled: bool,
    /// Treat chart-type names as mandatory entity groups (used by the
    /// synthesis stage so a line chart can never hit a bar-chart artifact).
    pub guard_chart_types: bool,
    /// Suffix the embedded text with the namespace token.
    pub embed_namespace_suffix: bool,
}

impl RetrievalConfig {
    /// Stage defaults: tau 0.90 for intent resolution and the monolithic
    /// baseline, 0.95 plus chart-type guarding for visualization synthesis.
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Air => Self {
                tau: 0.90,
                k_rrf: 60,
                top_k: 10,
                entity_guard: GuardMode::HardReject,
                semantic_enabled: true,
                guard_chart_types: false,
                embed_namespace_suffix: true,
            },
            Stage::Vs => Self {
                tau: 0.95,
                k_rrf: 60,
                top_k: 10,
                entity_guard: GuardMode::HardReject,
                semantic_enabled: true,
                guard_chart_types: true,
                // Canonical intent text already contains the namespace line.
                embed_namespace_suffix: false,
            },
            Stage::Monolithic => Self {
                tau: 0.90,
                k_rrf: 60,
                top_k: 10,
                entity_guard: GuardMode::HardReject,
                semantic_enabled: true,
                guard_chart_types: false,
                embed_namespace_suffix: true,
            },
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(RetrievalError::BadConfig(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.k_rrf < 1 {
            return Err(RetrievalError::BadConfig("k_rrf must be >= 1".into()));
        }
        if self.top_k < 1 {
            return Err(RetrievalError::BadConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why a fused candidate was passed over.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    BelowThreshold { similarity: f64 },
    EntityMismatch { missing: Vec<String> },
    /// Candidate entry carries no embedding, so it cannot clear a dense
    /// threshold.
    NoDenseEvidence,
    /// The index still referenced a digest the store no longer serves.
    StaleEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    ExactHit,
    SemanticHit,
    Miss,
}

/// Per-lookup record.
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub kind: OutcomeKind,
    pub entry: Option<CacheEntry>,
    /// Raw cosine of the accepted candidate; absent on exact hits and misses.
    pub similarity: Option<f64>,
    pub fused_score: Option<f64>,
    pub rejected: Vec<(Digest, RejectReason)>,
    /// The entity groups the query committed to, as enforced on acceptance.
    pub mandatory_groups: Vec<EntityGroup>,
    /// Measured wall-clock for this lookup (distinct from any simulated
    /// latency the replay harness assigns).
    pub latency: Duration,
}

impl RetrievalOutcome {
    pub fn is_hit(&self) -> bool {
        self.kind != OutcomeKind::Miss
    }
}

/// One fused candidate: RRF score plus per-leg evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCandidate {
    pub digest: Digest,
    pub score: f64,
    pub dense_rank: Option<usize>,
    pub lexical_rank: Option<usize>,
    pub dense_score: Option<f64>,
}

/// Reciprocal rank fusion over the union of both legs. A candidate absent
/// from one leg has rank infinity there and contributes nothing from it.
/// Output is sorted by fused score descending, ties by ascending digest hex.
pub fn rrf_fuse(
    dense: &[RankedCandidate],
    lexical: &[RankedCandidate],
    k_rrf: u32,
) -> Vec<FusedCandidate> {
    let mut by_digest: HashMap<Digest, FusedCandidate> = HashMap::new();
    for c in dense {
        by_digest
            .entry(c.digest)
            .or_insert_with(|| FusedCandidate {
                digest: c.digest,
                score: 0.0,
                dense_rank: None,
                lexical_rank: None,
                dense_score: None,
            })
            .dense_rank = Some(c.rank);
        by_digest.get_mut(&c.digest).unwrap().dense_score = Some(c.score);
    }
    for c in lexical {
        by_digest
            .entry(c.digest)
            .or_insert_with(|| FusedCandidate {
                digest: c.digest,
                score: 0.0,
                dense_rank: None,
                lexical_rank: None,
                dense_score: None,
            })
            .lexical_rank = Some(c.rank);
    }
    let k = f64::from(k_rrf);
    let mut fused: Vec<FusedCandidate> = by_digest
        .into_values()
        .map(|mut c| {
            let mut score = 0.0;
            if let Some(r) = c.dense_rank {
                score += 1.0 / (k + r as f64);
            }
            if let Some(r) = c.lexical_rank {
                score += 1.0 / (k + r as f64);
            }
            c.score = score;
            c
        })
        .collect();
    fused.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.digest.cmp(&b.digest)));
    fused
}

/// Counters proving which legs actually ran (the exact tier must
/// short-circuit both).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub exact_lookups: u64,
    pub dense_searches: u64,
    pub lexical_searches: u64,
}

/// Everything the engine needs beyond the store: per-stage configs and the
/// shared analyzers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub air: RetrievalConfig,
    pub vs: RetrievalConfig,
    pub mono: RetrievalConfig,
    pub tokenizer: TokenizerSpec,
    pub bm25: Bm25Params,
    pub hnsw: HnswConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            air: RetrievalConfig::for_stage(Stage::Air),
            vs: RetrievalConfig::for_stage(Stage::Vs),
            mono: RetrievalConfig::for_stage(Stage::Monolithic),
            tokenizer: TokenizerSpec::default(),
            bm25: Bm25Params::default(),
            hnsw: HnswConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn stage(&self, stage: Stage) -> &RetrievalConfig {
        match stage {
            Stage::Air => &self.air,
            Stage::Vs => &self.vs,
            Stage::Monolithic => &self.mono,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut RetrievalConfig {
        match stage {
            Stage::Air => &mut self.air,
            Stage::Vs => &mut self.vs,
            Stage::Monolithic => &mut self.mono,
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        self.air.validate()?;
        self.vs.validate()?;
        self.mono.validate()?;
        if !self.bm25.is_valid() {
            return Err(RetrievalError::BadConfig(
                "bm25 requires k1 > 0 and b in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A keyed lookup: which stage and namespace to search, and the text whose
/// SHA-256 is the exact-tier key (raw prompt for intent resolution and the
/// monolithic baseline; canonical intent text for synthesis).
#[derive(Debug, Clone, Copy)]
pub struct LookupKey<'a> {
    pub stage: Stage,
    pub namespace: &'a str,
    pub key_text: &'a str,
    pub schema: Option<&'a SchemaContext>,
}

/// The cache engine: entry store plus per-`(stage, namespace)` dense and
/// lexical indices, sharing one embedder.
#[derive(Clone)]
pub struct HybridEngine {
    store: CacheStore,
    embedder: Arc<dyn TextEmbedder>,
    config: EngineConfig,
    dense: HashMap<(Stage, String), HnswIndex>,
    lexical: HashMap<(Stage, String), LexicalIndex>,
    stats: SearchStats,
}

impl HybridEngine {
    pub fn new(
        store_config: StoreConfig,
        embedder: Arc<dyn TextEmbedder>,
        config: EngineConfig,
    ) -> Result<Self, RetrievalError> {
        config.validate()?;
        Ok(Self {
            store: CacheStore::new(store_config)?,
            embedder,
            config,
            dense: HashMap::new(),
            lexical: HashMap::new(),
            stats: SearchStats::default(),
        })
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut CacheStore {
        &mut self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn set_tau(&mut self, stage: Stage, tau: f64) -> Result<(), RetrievalError> {
        self.config.stage_mut(stage).tau = tau;
        self.config.stage(stage).validate()
    }

    pub fn search_stats(&self) -> SearchStats {
        self.stats
    }

    pub fn embedder(&self) -> &Arc<dyn TextEmbedder> {
        &self.embedder
    }

    fn embed_text(&self, cfg: &RetrievalConfig, key_text: &str, namespace: &str) -> String {
        if cfg.embed_namespace_suffix {
            format!("{key_text} {namespace}")
        } else {
            key_text.to_string()
        }
    }

    fn guard_groups(&self, cfg: &RetrievalConfig, key: &LookupKey, query_tokens: &[String]) -> Vec<EntityGroup> {
        let mut groups = key
            .schema
            .map(|s| required_entity_groups(query_tokens, s))
            .unwrap_or_default();
        if cfg.guard_chart_types {
            let present: std::collections::BTreeSet<&String> = query_tokens.iter().collect();
            for chart in crate::domain::ChartType::ALL {
                let group = EntityGroup::from_token(chart.as_str());
                if !group.tokens.is_empty() && group.tokens.iter().all(|t| present.contains(t)) {
                    groups.push(group);
                }
            }
        }
        groups
    }

    /// Runs the full tiered lookup for one key.
    pub fn retrieve(&mut self, key: &LookupKey) -> Result<RetrievalOutcome, RetrievalError> {
        let started = Instant::now();
        let cfg = *self.config.stage(key.stage);
        let digest = Digest::sha256(key.key_text.as_bytes());

        self.stats.exact_lookups += 1;
        if let Some(entry) = self.store.exact_lookup(key.stage, key.namespace, &digest) {
            return Ok(RetrievalOutcome {
                kind: OutcomeKind::ExactHit,
                entry: Some(entry),
                similarity: None,
                fused_score: None,
                rejected: Vec::new(),
                mandatory_groups: Vec::new(),
                latency: started.elapsed(),
            });
        }

        let query_tokens = tokenize(key.key_text, &self.config.tokenizer);
        let mandatory_groups = self.guard_groups(&cfg, key, &query_tokens);
        let mut rejected: Vec<(Digest, RejectReason)> = Vec::new();

        if !cfg.semantic_enabled {
            return Ok(self.miss(rejected, mandatory_groups, started));
        }

        let query_vector = self
            .embedder
            .embed(&self.embed_text(&cfg, key.key_text, key.namespace))?;

        let shard = (key.stage, key.namespace.to_string());
        let dense_hits = match self.dense.get(&shard) {
            Some(index) => index.search(&query_vector, cfg.top_k)?,
            None => Vec::new(),
        };
        self.stats.dense_searches += 1;
        let lexical_hits = match self.lexical.get(&shard) {
            Some(index) => index.search(&query_tokens, cfg.top_k),
            None => Vec::new(),
        };
        self.stats.lexical_searches += 1;

        let fused = rrf_fuse(&dense_hits, &lexical_hits, cfg.k_rrf);
        for candidate in fused {
            let Some(entry) = self.store.peek(key.stage, key.namespace, &candidate.digest) else {
                rejected.push((candidate.digest, RejectReason::StaleEntry));
                continue;
            };
            let similarity = match candidate.dense_score {
                Some(s) => s,
                None => match &entry.embedding {
                    Some(v) => cosine(&query_vector, v)?,
                    None => {
                        rejected.push((candidate.digest, RejectReason::NoDenseEvidence));
                        continue;
                    }
                },
            };
            if similarity < cfg.tau {
                rejected.push((candidate.digest, RejectReason::BelowThreshold { similarity }));
                continue;
            }
            if cfg.entity_guard == GuardMode::HardReject {
                let missing = missing_groups(&mandatory_groups, &entry.lexical_tokens);
                if !missing.is_empty() {
                    rejected.push((
                        candidate.digest,
                        RejectReason::EntityMismatch {
                            missing: missing.into_iter().map(|g| g.name.clone()).collect(),
                        },
                    ));
                    continue;
                }
            }
            let entry = self
                .store
                .record_hit(key.stage, key.namespace, &candidate.digest)
                .expect("peeked entry is live");
            return Ok(RetrievalOutcome {
                kind: OutcomeKind::SemanticHit,
                entry: Some(entry),
                similarity: Some(similarity),
                fused_score: Some(candidate.score),
                rejected,
                mandatory_groups,
                latency: started.elapsed(),
            });
        }

        Ok(self.miss(rejected, mandatory_groups, started))
    }

    fn miss(
        &self,
        rejected: Vec<(Digest, RejectReason)>,
        mandatory_groups: Vec<EntityGroup>,
        started: Instant,
    ) -> RetrievalOutcome {
        RetrievalOutcome {
            kind: OutcomeKind::Miss,
            entry: None,
            similarity: None,
            fused_score: None,
            rejected,
            mandatory_groups,
            latency: started.elapsed(),
        }
    }

    /// Builds and admits the entry for a freshly generated artifact, keeping
    /// the dense and lexical indices in step with the store.
    pub fn admit_after_miss(
        &mut self,
        key: &LookupKey,
        payload: Vec<u8>,
        arrival_index: u64,
    ) -> Result<AdmitResult, RetrievalError> {
        let cfg = *self.config.stage(key.stage);
        let digest = Digest::sha256(key.key_text.as_bytes());
        let tokens = tokenize(key.key_text, &self.config.tokenizer);
        let embedding = if cfg.semantic_enabled {
            Some(
                self.embedder
                    .embed(&self.embed_text(&cfg, key.key_text, key.namespace))?,
            )
        } else {
            None
        };

        let entry = CacheEntry::new(
            digest,
            key.stage,
            payload,
            embedding.clone(),
            tokens.clone(),
            arrival_index,
        );
        let result = self.store.admit(key.stage, key.namespace, entry)?;

        if result.is_admitted() {
            let shard = (key.stage, key.namespace.to_string());
            if let AdmitResult::Evicted(old) = result {
                if let Some(index) = self.dense.get_mut(&shard) {
                    index.remove(&old);
                }
                if let Some(index) = self.lexical.get_mut(&shard) {
                    index.remove(&old);
                }
            }
            if let Some(vector) = embedding {
                let dim = self.embedder.dimension();
                let hnsw = self.config.hnsw;
                let index = match self.dense.entry(shard.clone()) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(HnswIndex::new(dim, hnsw)?)
                    }
                };
                index.insert(digest, &vector)?;
            }
            self.lexical
                .entry(shard)
                .or_insert_with(|| LexicalIndex::new(self.config.bm25))
                .insert(digest, &tokens);
        }
        Ok(result)
    }

    /// Bumps the namespace epoch and drops its per-stage indices; entries
    /// become unretrievable immediately.
    pub fn bump_epoch(&mut self, namespace: &str) -> u64 {
        let next = self.store.bump_epoch(namespace);
        self.dense.retain(|(_, ns), _| ns != namespace);
        self.lexical.retain(|(_, ns), _| ns != namespace);
        next
    }

    /// Rebuilds every index from the store's live entries (for example after
    /// loading a snapshot).
    pub fn rebuild_indices(&mut self) -> Result<(), RetrievalError> {
        self.dense.clear();
        self.lexical.clear();
        let entries: Vec<(Stage, String, Digest, Option<EmbeddingVector>, Vec<String>)> = self
            .store
            .iter_live_keyed()
            .map(|(stage, ns, e)| {
                (
                    stage,
                    ns.to_string(),
                    e.digest,
                    e.embedding.clone(),
                    e.lexical_tokens.clone(),
                )
            })
            .collect();
        for (stage, ns, digest, embedding, tokens) in entries {
            let shard = (stage, ns);
            if let Some(vector) = embedding {
                let dim = self.embedder.dimension();
                let hnsw = self.config.hnsw;
                let index = match self.dense.entry(shard.clone()) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(HnswIndex::new(dim, hnsw)?)
                    }
                };
                index.insert(digest, &vector)?;
            }
            self.lexical
                .entry(shard)
                .or_insert_with(|| LexicalIndex::new(self.config.bm25))
                .insert(digest, &tokens);
        }
        Ok(())
    }
}
