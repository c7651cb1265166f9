//! Tier 0 exact-match store and the entry store shared by every retrieval
//! tier.
//!
//! Entries are addressed by `(stage, namespace, digest)` and guarded by a
//! per-namespace version epoch: bumping the epoch makes every older entry in
//! that namespace unretrievable. Stale entries are purged lazily on lookup and
//! eagerly on admission; [`CacheStore::compact`] sweeps everything at once.
//! Capacity is enforced per `(stage, namespace)` shard by evicting the
//! least-recently-hit entry.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::embed::EmbeddingVector;

pub const SNAPSHOT_HEADER: &str = "sirc-snapshot v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store capacity must be at least 1")]
    ZeroCapacity,
    #[error("entry stage {entry:?} does not match admit stage {argument:?}")]
    StageMismatch { entry: Stage, argument: Stage },
    #[error("AIR entries must carry at least one lexical token")]
    MissingLexicalTokens,
    #[error("{0:?} is not a valid digest: expected 64 lowercase hex characters")]
    BadDigest(String),
    #[error("namespace {0:?} cannot be written to a snapshot (contains whitespace)")]
    UnserializableNamespace(String),
    #[error("snapshot parse error on line {line}: {message}")]
    SnapshotParse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// SHA-256 output used as the exact-match cache key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn sha256(bytes: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        Digest(hasher.finalize().into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Lowercase 64-character hex rendering.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<Self, StoreError> {
        let err = || StoreError::BadDigest(s.to_string());
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(err());
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16).ok_or_else(err)? as u8;
            let lo = (chunk[1] as char).to_digit(16).ok_or_else(err)? as u8;
            out[i] = hi << 4 | lo;
        }
        Ok(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

/// Which pipeline checkpoint an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Air,
    Vs,
    Monolithic,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Air, Stage::Vs, Stage::Monolithic];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Air => "air",
            Stage::Vs => "vs",
            Stage::Monolithic => "monolithic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionPolicy {
    Always,
    Never,
    /// Admit on the second miss of the same digest.
    Probation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Maximum entry count per `(stage, namespace)` shard.
    pub capacity: usize,
    pub admission_policy: AdmissionPolicy,
    pub initial_epoch: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            admission_policy: AdmissionPolicy::Always,
            initial_epoch: 0,
        }
    }
}

/// A stored artifact plus the metadata the retrieval tiers need.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub digest: Digest,
    pub stage: Stage,
    pub payload: Vec<u8>,
    pub embedding: Option<EmbeddingVector>,
    pub lexical_tokens: Vec<String>,
    pub version_epoch: u64,
    pub admitted_at: u64,
    pub hit_count: u64,
}

impl CacheEntry {
    pub fn new(
        digest: Digest,
        stage: Stage,
        payload: Vec<u8>,
        embedding: Option<EmbeddingVector>,
        lexical_tokens: Vec<String>,
        admitted_at: u64,
    ) -> Self {
        Self {
            digest,
            stage,
            payload,
            embedding,
            lexical_tokens,
            version_epoch: 0,
            admitted_at,
            hit_count: 0,
        }
    }

    pub fn payload_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitReject {
    PolicyNever,
    ProbationFirstMiss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitResult {
    Admitted,
    /// Admitted after evicting the least-recently-hit entry.
    Evicted(Digest),
    Rejected(AdmitReject),
}

impl AdmitResult {
    pub fn is_admitted(&self) -> bool {
        !matches!(self, AdmitResult::Rejected(_))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StoreStats {
    pub lookups: u64,
    pub hits: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub lookup_nanos_total: u128,
}

impl StoreStats {
    pub fn mean_lookup_nanos(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.lookup_nanos_total as f64 / self.lookups as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Shard {
    entries: HashMap<Digest, Slot>,
    probation: HashSet<Digest>,
}

#[derive(Debug, Clone)]
struct Slot {
    entry: CacheEntry,
    last_touch: u64,
}

/// The entry store shared by every tier.
#[derive(Debug, Clone)]
pub struct CacheStore {
    config: StoreConfig,
    shards: HashMap<(Stage, String), Shard>,
    epochs: HashMap<String, u64>,
    touch_counter: u64,
    stats: StoreStats,
}

impl CacheStore {
    pub fn new(config: StoreConfig) -> Result<Self, StoreError> {
        if config.capacity == 0 {
            return Err(StoreError::ZeroCapacity);
        }
        Ok(Self {
            config,
            shards: HashMap::new(),
            epochs: HashMap::new(),
            touch_counter: 0,
            stats: StoreStats::default(),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn set_admission_policy(&mut self, policy: AdmissionPolicy) {
        self.config.admission_policy = policy;
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn current_epoch(&self, namespace: &str) -> u64 {
        self.epochs
            .get(namespace)
            .copied()
            .unwrap_or(self.config.initial_epoch)
    }

    /// Tier 0 lookup. A hit bumps the entry's hit count and recency; a stale
    /// entry found under the digest is purged and reported as a miss.
    pub fn exact_lookup(&mut self, stage: Stage, namespace: &str, digest: &Digest) -> Option<CacheEntry> {
        let started = Instant::now();
        let epoch = self.current_epoch(namespace);
        let result = match self.shards.get_mut(&(stage, namespace.to_string())) {
            None => None,
            Some(shard) => match shard.entries.get_mut(digest) {
                None => None,
                Some(slot) if slot.entry.version_epoch < epoch => {
                    shard.entries.remove(digest);
                    None
                }
                Some(slot) => {
                    slot.entry.hit_count += 1;
                    self.touch_counter += 1;
                    slot.last_touch = self.touch_counter;
                    Some(slot.entry.clone())
                }
            },
        };
        self.stats.lookups += 1;
        if result.is_some() {
            self.stats.hits += 1;
        }
        self.stats.lookup_nanos_total += started.elapsed().as_nanos();
        result
    }

    /// Non-mutating view of a live entry; used to resolve semantic candidates
    /// without charging them a hit.
    pub fn peek(&self, stage: Stage, namespace: &str, digest: &Digest) -> Option<&CacheEntry> {
        let epoch = self.current_epoch(namespace);
        self.shards
            .get(&(stage, namespace.to_string()))
            .and_then(|shard| shard.entries.get(digest))
            .filter(|slot| slot.entry.version_epoch >= epoch)
            .map(|slot| &slot.entry)
    }

    /// Charges a hit to a live entry (semantic-tier acceptance path).
    pub fn record_hit(&mut self, stage: Stage, namespace: &str, digest: &Digest) -> Option<CacheEntry> {
        let epoch = self.current_epoch(namespace);
        let shard = self.shards.get_mut(&(stage, namespace.to_string()))?;
        let slot = shard.entries.get_mut(digest)?;
        if slot.entry.version_epoch < epoch {
            return None;
        }
        slot.entry.hit_count += 1;
        self.touch_counter += 1;
        slot.last_touch = self.touch_counter;
        Some(slot.entry.clone())
    }

    /// Admits an entry under the configured policy. Admitting the same digest
    /// at the same epoch twice is an idempotent success.
    pub fn admit(&mut self, stage: Stage, namespace: &str, mut entry: CacheEntry) -> Result<AdmitResult, StoreError> {
        if entry.stage != stage {
            return Err(StoreError::StageMismatch {
                entry: entry.stage,
                argument: stage,
            });
        }
        if stage == Stage::Air && entry.lexical_tokens.is_empty() {
            return Err(StoreError::MissingLexicalTokens);
        }
        let epoch = self.current_epoch(namespace);
        let capacity = self.config.capacity;
        let policy = self.config.admission_policy;
        let shard = self
            .shards
            .entry((stage, namespace.to_string()))
            .or_default();

        match policy {
            AdmissionPolicy::Never => return Ok(AdmitResult::Rejected(AdmitReject::PolicyNever)),
            AdmissionPolicy::Probation => {
                if !shard.probation.remove(&entry.digest) {
                    shard.probation.insert(entry.digest);
                    return Ok(AdmitResult::Rejected(AdmitReject::ProbationFirstMiss));
                }
            }
            AdmissionPolicy::Always => {}
        }

        shard.entries.retain(|_, slot| slot.entry.version_epoch >= epoch);

        if shard.entries.contains_key(&entry.digest) {
            return Ok(AdmitResult::Admitted);
        }

        entry.version_epoch = epoch;
        let mut evicted = None;
        if shard.entries.len() >= capacity {
            // Least-recently-hit first; digest hex breaks ties deterministically.
            let victim = shard
                .entries
                .iter()
                .min_by_key(|(digest, slot)| (slot.last_touch, **digest))
                .map(|(digest, _)| *digest)
                .expect("non-empty shard at capacity");
            shard.entries.remove(&victim);
            evicted = Some(victim);
            self.stats.evictions += 1;
        }

        self.touch_counter += 1;
        let digest = entry.digest;
        shard.entries.insert(
            digest,
            Slot {
                entry,
                last_touch: self.touch_counter,
            },
        );
        self.stats.admissions += 1;
        Ok(match evicted {
            Some(d) => AdmitResult::Evicted(d),
            None => AdmitResult::Admitted,
        })
    }

    /// Invalidates every entry in the namespace admitted under an older epoch
    /// and returns the new epoch value. Purging is lazy.
    pub fn bump_epoch(&mut self, namespace: &str) -> u64 {
        let next = self.current_epoch(namespace) + 1;
        self.epochs.insert(namespace.to_string(), next);
        for ((_, ns), shard) in self.shards.iter_mut() {
            if ns == namespace {
                shard.probation.clear();
            }
        }
        next
    }

    /// Eagerly removes every stale-epoch entry.
    pub fn compact(&mut self) {
        let epochs: HashMap<String, u64> = self
            .shards
            .keys()
            .map(|(_, ns)| (ns.clone(), self.current_epoch(ns)))
            .collect();
        for ((_, ns), shard) in self.shards.iter_mut() {
            let epoch = epochs[ns];
            shard.entries.retain(|_, slot| slot.entry.version_epoch >= epoch);
        }
        self.shards.retain(|_, shard| !shard.entries.is_empty() || !shard.probation.is_empty());
    }

    /// Live entry count for one shard.
    pub fn len(&self, stage: Stage, namespace: &str) -> usize {
        let epoch = self.current_epoch(namespace);
        self.shards
            .get(&(stage, namespace.to_string()))
            .map(|shard| {
                shard
                    .entries
                    .values()
                    .filter(|slot| slot.entry.version_epoch >= epoch)
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.iter_live().next().is_none()
    }

    /// Iterates every live entry across all shards.
    pub fn iter_live(&self) -> impl Iterator<Item = &CacheEntry> {
        self.iter_live_keyed().map(|(_, _, entry)| entry)
    }

    /// Live entries together with their shard keys.
    pub fn iter_live_keyed(&self) -> impl Iterator<Item = (Stage, &str, &CacheEntry)> {
        self.shards.iter().flat_map(move |((stage, ns), shard)| {
            let epoch = self.current_epoch(ns);
            shard
                .entries
                .values()
                .filter(move |slot| slot.entry.version_epoch >= epoch)
                .map(move |slot| (*stage, ns.as_str(), &slot.entry))
        })
    }

    /// Writes the live contents as a `sirc-snapshot v1` stream: one
    /// tab-separated record per entry with fields stage, namespace, hex
    /// digest, epoch, base64 payload, comma-joined lexical tokens, and an
    /// optional base64 embedding.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        writeln!(w, "{SNAPSHOT_HEADER}")?;
        let mut records: Vec<String> = Vec::new();
        for ((stage, ns), shard) in &self.shards {
            if ns.chars().any(char::is_whitespace) {
                return Err(StoreError::UnserializableNamespace(ns.clone()));
            }
            let epoch = self.current_epoch(ns);
            for slot in shard.entries.values() {
                let entry = &slot.entry;
                if entry.version_epoch < epoch {
                    continue;
                }
                let embedding = entry
                    .embedding
                    .as_ref()
                    .map(|v| B64.encode(vector_bytes(v)))
                    .unwrap_or_default();
                records.push(format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    stage.as_str(),
                    ns,
                    entry.digest.to_hex(),
                    entry.version_epoch,
                    B64.encode(&entry.payload),
                    entry.lexical_tokens.join(","),
                    embedding,
                ));
            }
        }
        records.sort();
        for record in records {
            writeln!(w, "{record}")?;
        }
        Ok(())
    }

    /// Rebuilds a store from a snapshot stream. Hit counters and admission
    /// indices are not part of the format and restart at zero; each
    /// namespace's epoch is taken as the maximum epoch seen in its records.
    pub fn read_snapshot<R: BufRead>(r: R, config: StoreConfig) -> Result<Self, StoreError> {
        let mut store = CacheStore::new(config)?;
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| StoreError::SnapshotParse {
                line: 1,
                message: "empty snapshot".into(),
            })?;
        if header != SNAPSHOT_HEADER {
            return Err(StoreError::SnapshotParse {
                line: 1,
                message: format!("expected header {SNAPSHOT_HEADER:?}, got {header:?}"),
            });
        }
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let line_no = idx + 2;
            if line.is_empty() {
                continue;
            }
            let parse = |message: String| StoreError::SnapshotParse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(parse(format!("expected 7 fields, got {}", fields.len())));
            }
            let stage = Stage::parse(fields[0])
                .ok_or_else(|| parse(format!("unknown stage {:?}", fields[0])))?;
            let namespace = fields[1].to_string();
            let digest = Digest::from_hex(fields[2])
                .map_err(|e| parse(e.to_string()))?;
            let epoch: u64 = fields[3]
                .parse()
                .map_err(|_| parse(format!("bad epoch {:?}", fields[3])))?;
            let payload = B64
                .decode(fields[4])
                .map_err(|e| parse(format!("bad payload base64: {e}")))?;
            let lexical_tokens: Vec<String> = if fields[5].is_empty() {
                Vec::new()
            } else {
                fields[5].split(',').map(str::to_string).collect()
            };
            let embedding = if fields[6].is_empty() {
                None
            } else {
                let bytes = B64
                    .decode(fields[6])
                    .map_err(|e| parse(format!("bad embedding base64: {e}")))?;
                Some(vector_from_bytes(&bytes).map_err(|m| parse(m))?)
            };

            let mut entry = CacheEntry::new(digest, stage, payload, embedding, lexical_tokens, 0);
            entry.version_epoch = epoch;
            let shard = store.shards.entry((stage, namespace.clone())).or_default();
            store.touch_counter += 1;
            shard.entries.insert(
                digest,
                Slot {
                    entry,
                    last_touch: store.touch_counter,
                },
            );
            let known = store.epochs.entry(namespace).or_insert(epoch);
            *known = (*known).max(epoch);
        }
        Ok(store)
    }
}

fn vector_bytes(v: &EmbeddingVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.dim() * 8);
    for x in v.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn vector_from_bytes(bytes: &[u8]) -> Result<EmbeddingVector, String> {
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return Err(format!("embedding byte length {} is not a multiple of 8", bytes.len()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    EmbeddingVector::new(values).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHA256_EMPTY: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    fn entry(stage: Stage, text: &str) -> CacheEntry {
        CacheEntry::new(
            Digest::sha256(text.as_bytes()),
            stage,
            text.as_bytes().to_vec(),
            None,
            vec![text.to_string()],
            0,
        )
    }

    fn store(capacity: usize) -> CacheStore {
        CacheStore::new(StoreConfig {
            capacity,
            ..StoreConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sha256_empty_string_matches_the_standard_vector() {
        assert_eq!(Digest::sha256(b"").to_hex(), SHA256_EMPTY);
    }

    #[test]
    fn digest_hex_round_trips() {
        let d = Digest::sha256(b"abc");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex("zz").is_err());
        assert!(Digest::from_hex(&d.to_hex().to_uppercase()).is_err());
    }

    #[test]
    fn lookup_of_unknown_digest_misses() {
        let mut s = store(4);
        assert!(s
            .exact_lookup(Stage::Air, "ns", &Digest::sha256(b"nope"))
            .is_none());
    }

    #[test]
    fn admit_then_lookup_round_trips() {
        let mut s = store(4);
        let e = entry(Stage::Air, "show spend");
        assert_eq!(s.admit(Stage::Air, "ns", e.clone()).unwrap(), AdmitResult::Admitted);
        let got = s.exact_lookup(Stage::Air, "ns", &e.digest).unwrap();
        assert_eq!(got.payload, e.payload);
        assert_eq!(got.hit_count, 1);
    }

    #[test]
    fn epoch_bump_invalidates_prior_entries() {
        let mut s = store(4);
        let e = entry(Stage::Air, "a");
        s.admit(Stage::Air, "ns", e.clone()).unwrap();
        assert_eq!(s.bump_epoch("ns"), 1);
        assert!(s.exact_lookup(Stage::Air, "ns", &e.digest).is_none());
    }

    #[test]
    fn epoch_bump_spares_other_namespaces() {
        let mut s = store(16);
        let mut digests = Vec::new();
        for i in 0..10 {
            let e = entry(Stage::Vs, &format!("artifact {i}"));
            digests.push(e.digest);
            s.admit(Stage::Vs, "a", e.clone()).unwrap();
            let mut other = e;
            other.admitted_at = 1;
            s.admit(Stage::Vs, "b", other).unwrap();
        }
        s.bump_epoch("a");
        for d in &digests {
            assert!(s.exact_lookup(Stage::Vs, "a", d).is_none());
            assert!(s.exact_lookup(Stage::Vs, "b", d).is_some());
        }
    }

    #[test]
    fn capacity_one_evicts_and_reports_the_victim() {
        let mut s = store(1);
        let a = entry(Stage::Vs, "a");
        let b = entry(Stage::Vs, "b");
        assert_eq!(s.admit(Stage::Vs, "ns", a.clone()).unwrap(), AdmitResult::Admitted);
        assert_eq!(
            s.admit(Stage::Vs, "ns", b.clone()).unwrap(),
            AdmitResult::Evicted(a.digest)
        );
        assert!(s.exact_lookup(Stage::Vs, "ns", &a.digest).is_none());
        assert!(s.exact_lookup(Stage::Vs, "ns", &b.digest).is_some());
    }

    #[test]
    fn eviction_prefers_the_least_recently_hit_entry() {
        let mut s = store(2);
        let a = entry(Stage::Vs, "a");
        let b = entry(Stage::Vs, "b");
        let c = entry(Stage::Vs, "c");
        s.admit(Stage::Vs, "ns", a.clone()).unwrap();
        s.admit(Stage::Vs, "ns", b.clone()).unwrap();
        s.exact_lookup(Stage::Vs, "ns", &a.digest).unwrap(); // a is now fresher than b
        assert_eq!(
            s.admit(Stage::Vs, "ns", c).unwrap(),
            AdmitResult::Evicted(b.digest)
        );
        assert!(s.exact_lookup(Stage::Vs, "ns", &a.digest).is_some());
    }

    #[test]
    fn policy_never_rejects_and_subsequent_lookup_misses() {
        let mut s = CacheStore::new(StoreConfig {
            capacity: 4,
            admission_policy: AdmissionPolicy::Never,
            initial_epoch: 0,
        })
        .unwrap();
        let e = entry(Stage::Air, "a");
        assert_eq!(
            s.admit(Stage::Air, "ns", e.clone()).unwrap(),
            AdmitResult::Rejected(AdmitReject::PolicyNever)
        );
        assert!(s.exact_lookup(Stage::Air, "ns", &e.digest).is_none());
    }

    #[test]
    fn probation_admits_on_second_attempt() {
        let mut s = CacheStore::new(StoreConfig {
            capacity: 4,
            admission_policy: AdmissionPolicy::Probation,
            initial_epoch: 0,
        })
        .unwrap();
        let e = entry(Stage::Air, "a");
        assert_eq!(
            s.admit(Stage::Air, "ns", e.clone()).unwrap(),
            AdmitResult::Rejected(AdmitReject::ProbationFirstMiss)
        );
        assert_eq!(s.admit(Stage::Air, "ns", e.clone()).unwrap(), AdmitResult::Admitted);
        assert!(s.exact_lookup(Stage::Air, "ns", &e.digest).is_some());
    }

    #[test]
    fn duplicate_admission_is_idempotent() {
        let mut s = store(4);
        let e = entry(Stage::Air, "a");
        s.admit(Stage::Air, "ns", e.clone()).unwrap();
        assert_eq!(s.admit(Stage::Air, "ns", e.clone()).unwrap(), AdmitResult::Admitted);
        assert_eq!(s.len(Stage::Air, "ns"), 1);
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let mut s = store(4);
        let e = entry(Stage::Air, "a");
        assert!(matches!(
            s.admit(Stage::Vs, "ns", e),
            Err(StoreError::StageMismatch { .. })
        ));
    }

    #[test]
    fn air_entry_without_tokens_is_invalid() {
        let mut s = store(4);
        let mut e = entry(Stage::Air, "a");
        e.lexical_tokens.clear();
        assert!(matches!(
            s.admit(Stage::Air, "ns", e),
            Err(StoreError::MissingLexicalTokens)
        ));
    }

    #[test]
    fn bump_on_empty_store_increments_from_zero() {
        let mut s = store(4);
        assert_eq!(s.current_epoch("ns"), 0);
        assert_eq!(s.bump_epoch("ns"), 1);
        assert_eq!(s.current_epoch("ns"), 1);
    }

    #[test]
    fn compact_drops_stale_entries() {
        let mut s = store(8);
        for i in 0..5 {
            s.admit(Stage::Vs, "ns", entry(Stage::Vs, &format!("x{i}"))).unwrap();
        }
        s.bump_epoch("ns");
        s.compact();
        assert!(s.is_empty());
    }

    #[test]
    fn snapshot_round_trips_live_entries() {
        let mut s = store(8);
        let mut with_embedding = entry(Stage::Air, "show spend by channel");
        with_embedding.embedding =
            Some(EmbeddingVector::new(vec![0.25, -1.5, 3.0]).unwrap());
        s.admit(Stage::Air, "acme", with_embedding.clone()).unwrap();
        s.admit(Stage::Vs, "acme", entry(Stage::Vs, "charts: bar(spend|channel)"))
            .unwrap();

        let mut buf = Vec::new();
        s.write_snapshot(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(SNAPSHOT_HEADER));

        let restored = CacheStore::read_snapshot(buf.as_slice(), StoreConfig::default()).unwrap();
        assert_eq!(restored.len(Stage::Air, "acme"), 1);
        assert_eq!(restored.len(Stage::Vs, "acme"), 1);
        let got = restored
            .peek(Stage::Air, "acme", &with_embedding.digest)
            .unwrap();
        assert_eq!(got.embedding, with_embedding.embedding);
        assert_eq!(got.lexical_tokens, with_embedding.lexical_tokens);
    }

    #[test]
    fn snapshot_rejects_bad_header() {
        let err = CacheStore::read_snapshot("bogus v9\n".as_bytes(), StoreConfig::default());
        assert!(matches!(err, Err(StoreError::SnapshotParse { line: 1, .. })));
    }

    #[test]
    fn exact_lookup_is_pure_given_fixed_state() {
        let mut s = store(4);
        let e = entry(Stage::Air, "a");
        s.admit(Stage::Air, "ns", e.clone()).unwrap();
        let first = s.peek(Stage::Air, "ns", &e.digest).cloned();
        let second = s.peek(Stage::Air, "ns", &e.digest).cloned();
        assert_eq!(first, second);
    }
}
