//! Pipeline-aware semantic caching for two-stage agentic analytics
//! pipelines.
//!
//! `sirc` caches the *intermediate* artifacts of an analytics agent — the
//! resolved analytic intent and each synthesized visualization directive —
//! instead of only the final response. Lookups run through a tiered hybrid
//! engine: an exact SHA-256 tier, then dense (HNSW) and lexical (BM25) legs
//! fused by reciprocal rank fusion, with acceptance gated by a cosine
//! threshold and an entity guard that refuses candidates missing any
//! schema-token group the query committed to. A replay harness pits the
//! pipeline-aware cache against a monolithic prompt-to-output baseline on
//! synthetic workloads and accounts for hits, tokens, and latency per stage.
//!
//! The narrative guide lives in `book/`; its code snippets compile and run as
//! doctests of this crate.
//!
//! ```
//! use sirc::prelude::*;
//! use std::sync::Arc;
//!
//! let schema = SchemaContext::new("acme_media", ["spend", "clicks"], ["channel"])?;
//! let embedder = build_embedder(&EmbedderSpec::default())?;
//! let mut engine = HybridEngine::new(StoreConfig::default(), embedder, EngineConfig::default())?;
//!
//! let key = LookupKey {
//!     stage: Stage::Air,
//!     namespace: "acme_media",
//!     key_text: "Show spend and clicks by channel",
//!     schema: Some(&schema),
//! };
//! assert_eq!(engine.retrieve(&key)?.kind, OutcomeKind::Miss);
//! engine.admit_after_miss(&key, b"resolved-intent".to_vec(), 0)?;
//! assert_eq!(engine.retrieve(&key)?.kind, OutcomeKind::ExactHit);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod domain;
pub mod embed;
pub mod latency;
pub mod lexical;
pub mod pipeline;
pub mod report;
pub mod retrieval;
pub mod store;
pub mod vector_index;
pub mod workload;

/// The common imports for working with the engine and replay harness.
pub mod prelude {
    pub use crate::domain::{
        canonicalize_intent, intent_digest, parse_canonical_text, AnalyticIntent, CanonicalText,
        ChartPrimitive, ChartType, Filter, FilterOp, Layout, Prompt, SchemaContext, TemporalGrain,
        TokenUsage, VisualizationDirective,
    };
    pub use crate::embed::{
        build_embedder, cosine, EmbedderKind, EmbedderSpec, EmbeddingVector, FeatureHashEmbedder,
        LookupTableEmbedder, TextEmbedder,
    };
    pub use crate::latency::{HitLatencyModel, LatencyDist, TokenDist};
    pub use crate::lexical::{
        entity_tokens, required_entity_groups, tokenize, Bm25Params, EntityGroup, LexicalIndex,
        TokenizerSpec,
    };
    pub use crate::pipeline::{
        run_experiment, run_monolithic, run_request, ExperimentConfig, ExperimentOutcome,
        GeneratorBackend, GenerationOutput, HitLatencies, MockBackend, MockLlmSpec, MonoTrace,
        RequestTrace, TraceStatus, TracedOutcome,
    };
    pub use crate::report::{
        aggregate, latency_percentiles, project_cost, project_tokens, CostProjection, EventKind,
        LatencySummary, ProjectionInputs, RunReport, StageEvent, StageStats, TokenProjection,
    };
    pub use crate::retrieval::{
        rrf_fuse, EngineConfig, FusedCandidate, GuardMode, HybridEngine, LookupKey, OutcomeKind,
        RejectReason, RetrievalConfig, RetrievalOutcome,
    };
    pub use crate::store::{
        AdmissionPolicy, AdmitResult, CacheEntry, CacheStore, Digest, Stage, StoreConfig,
    };
    pub use crate::vector_index::{brute_force_search, HnswConfig, HnswIndex, RankedCandidate};
    pub use crate::workload::{
        generate, read_workload, split_temporal, write_workload, LabeledPrompt, SchemaSpec,
        Workload, WorkloadSpec,
    };
}
