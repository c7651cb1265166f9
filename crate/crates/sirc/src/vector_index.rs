//! Approximate nearest-neighbor index (HNSW) over entry embeddings, plus an
//! exact brute-force twin that defines ground truth for recall measurements.
//!
//! Distances are computed internally as `1 - cosine`; results expose the
//! cosine itself. Level assignment is derived from a seeded hash of the entry
//! digest rather than a shared RNG, so graph construction is reproducible
//! run-to-run and independent of call interleaving. Replacing a digest
//! tombstones the old node: dead nodes stay traversable for connectivity but
//! never appear in results.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingVector;
use crate::store::Digest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IndexError {
    #[error("hnsw m must be at least 2, got {0}")]
    BadM(usize),
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot index a zero-norm vector")]
    ZeroNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswConfig {
    /// Maximum neighbors per node on layers above 0; layer 0 allows `2 * m`.
    pub m: usize,
    /// Build-time beam width.
    pub ef_construction: usize,
    /// Query-time beam width; widened to `k` when `k` is larger.
    pub ef_search: usize,
    /// Cap on the assigned level.
    pub max_level: usize,
    /// Seed mixed into the digest-keyed level assignment.
    pub level_seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            max_level: 16,
            level_seed: 0,
        }
    }
}

/// One search result. Within a result list scores are non-increasing and
/// ranks run 1, 2, 3, ... without gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub digest: Digest,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone)]
struct Node {
    digest: Digest,
    /// L2-normalized; cosine against a normalized query is a dot product.
    vector: Vec<f64>,
    neighbors: Vec<Vec<u32>>,
    alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    config: HnswConfig,
    dimension: usize,
    nodes: Vec<Node>,
    by_digest: HashMap<Digest, u32>,
    entry_point: Option<u32>,
    top_level: usize,
    level_norm: f64,
}

impl HnswIndex {
    pub fn new(dimension: usize, config: HnswConfig) -> Result<Self, IndexError> {
        if config.m < 2 {
            return Err(IndexError::BadM(config.m));
        }
        Ok(Self {
            level_norm: 1.0 / (config.m as f64).ln(),
            config,
            dimension,
            nodes: Vec::new(),
            by_digest: HashMap::new(),
            entry_point: None,
            top_level: 0,
        })
    }

    pub fn config(&self) -> &HnswConfig {
        &self.config
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Count of live (searchable) entries.
    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }

    fn normalized(&self, v: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        if v.dim() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: v.dim(),
            });
        }
        let norm = v.l2_norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        Ok(v.values().iter().map(|x| x / norm).collect())
    }

    fn dot(&self, a: u32, q: &[f64]) -> f64 {
        self.nodes[a as usize]
            .vector
            .iter()
            .zip(q)
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Level drawn from an exponential distribution keyed by (seed, digest).
    fn assign_level(&self, digest: &Digest) -> usize {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self
            .config
            .level_seed
            .to_le_bytes()
            .iter()
            .chain(digest.as_bytes())
        {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let unit = (h as f64 + 0.5) / (u64::MAX as f64 + 1.0); // in (0, 1)
        let level = (-unit.ln() * self.level_norm).floor() as usize;
        level.min(self.config.max_level)
    }

    /// Inserts or replaces. Search correctness is independent of insertion
    /// order; the graph shape is not.
    pub fn insert(&mut self, digest: Digest, vector: &EmbeddingVector) -> Result<(), IndexError> {
        let normalized = self.normalized(vector)?;
        if let Some(&old) = self.by_digest.get(&digest) {
            self.nodes[old as usize].alive = false;
        }

        let level = self.assign_level(&digest);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            digest,
            vector: normalized,
            neighbors: vec![Vec::new(); level + 1],
            alive: true,
        });
        self.by_digest.insert(digest, id);

        let Some(mut ep) = self.entry_point else {
            self.entry_point = Some(id);
            self.top_level = level;
            return Ok(());
        };

        let query = self.nodes[id as usize].vector.clone();
        // Greedy descent through layers above the new node's level.
        for layer in ((level + 1)..=self.top_level).rev() {
            ep = self.greedy_closest(&query, ep, layer);
        }

        let ef = self.config.ef_construction.max(1);
        let mut entry = vec![ep];
        for layer in (0..=level.min(self.top_level)).rev() {
            let found = self.search_layer(&query, &entry, ef, layer);
            let cap = self.max_neighbors(layer);
            let chosen: Vec<u32> = found.iter().take(cap).map(|s| s.node).collect();
            for &n in &chosen {
                self.nodes[id as usize].neighbors[layer].push(n);
                self.nodes[n as usize].neighbors[layer].push(id);
                self.prune(n, layer);
            }
            entry = if chosen.is_empty() { entry } else { chosen };
        }

        if level > self.top_level {
            self.top_level = level;
            self.entry_point = Some(id);
        }
        Ok(())
    }

    /// Tombstones a digest; returns whether it was present.
    pub fn remove(&mut self, digest: &Digest) -> bool {
        match self.by_digest.remove(digest) {
            Some(id) => {
                self.nodes[id as usize].alive = false;
                true
            }
            None => false,
        }
    }

    fn max_neighbors(&self, layer: usize) -> usize {
        if layer == 0 {
            self.config.m * 2
        } else {
            self.config.m
        }
    }

    fn prune(&mut self, node: u32, layer: usize) {
        let cap = self.max_neighbors(layer);
        if self.nodes[node as usize].neighbors[layer].len() <= cap {
            return;
        }
        let anchor = self.nodes[node as usize].vector.clone();
        let mut scored: Vec<Scored> = self.nodes[node as usize].neighbors[layer]
            .iter()
            .map(|&n| Scored {
                sim: self.dot(n, &anchor),
                node: n,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        scored.truncate(cap);
        scored.dedup_by_key(|s| s.node);
        self.nodes[node as usize].neighbors[layer] = scored.into_iter().map(|s| s.node).collect();
    }

    fn greedy_closest(&self, query: &[f64], start: u32, layer: usize) -> u32 {
        let mut best = start;
        let mut best_sim = self.dot(best, query);
        loop {
            let mut improved = false;
            for &n in &self.nodes[best as usize].neighbors[layer] {
                let sim = self.dot(n, query);
                if sim > best_sim {
                    best = n;
                    best_sim = sim;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Best-first beam search within one layer. Returns up to `ef` nodes
    /// sorted by descending similarity; dead nodes are traversed but not
    /// returned.
    fn search_layer(&self, query: &[f64], entry: &[u32], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<u32> = HashSet::new();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        // Min-heap of the best `ef` seen so far.
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();

        for &e in entry {
            if visited.insert(e) {
                let s = Scored {
                    sim: self.dot(e, query),
                    node: e,
                };
                candidates.push(s);
                results.push(std::cmp::Reverse(s));
            }
        }

        while let Some(current) = candidates.pop() {
            let worst = results.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
            if current.sim < worst && results.len() >= ef {
                break;
            }
            for &n in &self.nodes[current.node as usize].neighbors[layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    sim: self.dot(n, query),
                    node: n,
                };
                let worst = results.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
                if results.len() < ef || s.sim > worst {
                    candidates.push(s);
                    results.push(std::cmp::Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }

        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Top-k live candidates by cosine, using the configured `ef_search`.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RankedCandidate>, IndexError> {
        self.search_with_ef(query, k, self.config.ef_search)
    }

    /// Same as [`HnswIndex::search`] with an explicit beam width. The beam is
    /// widened to `k` when `k > ef`.
    pub fn search_with_ef(
        &self,
        query: &EmbeddingVector,
        k: usize,
        ef: usize,
    ) -> Result<Vec<RankedCandidate>, IndexError> {
        if self.by_digest.is_empty() || k == 0 {
            // An empty index is a miss, not an error.
            if query.dim() != self.dimension && !self.nodes.is_empty() {
                return Err(IndexError::DimensionMismatch {
                    expected: self.dimension,
                    got: query.dim(),
                });
            }
            return Ok(Vec::new());
        }
        let normalized = self.normalized(query)?;
        let mut ep = self.entry_point.expect("non-empty index has an entry point");
        for layer in (1..=self.top_level).rev() {
            ep = self.greedy_closest(&normalized, ep, layer);
        }
        let beam = ef.max(k).max(1);
        let found = self.search_layer(&normalized, &[ep], beam, 0);

        // Tombstoned nodes participate in traversal but never in results.
        let mut with_digest: Vec<(Digest, f64)> = found
            .into_iter()
            .filter(|s| self.nodes[s.node as usize].alive)
            .map(|s| (self.nodes[s.node as usize].digest, s.sim))
            .collect();
        with_digest.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        with_digest.truncate(k);
        Ok(with_digest
            .into_iter()
            .enumerate()
            .map(|(i, (digest, score))| RankedCandidate {
                digest,
                score: score.clamp(-1.0, 1.0),
                rank: i + 1,
            })
            .collect())
    }
}

/// Exact top-k by cosine with ties broken by ascending digest hex. This is
/// the correctness oracle for [`HnswIndex`]: its top-1 score can never be
/// exceeded by the approximate search.
pub fn brute_force_search(
    entries: &[(Digest, EmbeddingVector)],
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<RankedCandidate>, IndexError> {
    let mut scored = Vec::with_capacity(entries.len());
    for (digest, vector) in entries {
        if vector.dim() != query.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: query.dim(),
                got: vector.dim(),
            });
        }
        let score = crate::embed::cosine(query, vector).map_err(|_| IndexError::ZeroNorm)?;
        scored.push((*digest, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (digest, score))| RankedCandidate {
            digest,
            score,
            rank: i + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn digest(i: u64) -> Digest {
        Digest::sha256(&i.to_le_bytes())
    }

    fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingVector::new(values).unwrap()
    }

    fn random_corpus(seed: u64, n: usize, dim: usize) -> Vec<(Digest, EmbeddingVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| (digest(i as u64), random_vector(&mut rng, dim))).collect()
    }

    #[test]
    fn self_retrieval_scores_one() {
        let mut index = HnswIndex::new(16, HnswConfig::default()).unwrap();
        let v = EmbeddingVector::new(vec![1.0; 16]).unwrap();
        index.insert(digest(1), &v).unwrap();
        let hits = index.search(&v, 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].digest, digest(1));
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_inserted_vector_retrieves_itself() {
        let corpus = random_corpus(11, 100, 32);
        let mut index = HnswIndex::new(32, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        for (d, v) in &corpus {
            let hits = index.search(v, 1).unwrap();
            assert_eq!(hits[0].digest, *d);
        }
    }

    #[test]
    fn duplicate_insert_replaces_the_vector() {
        let mut index = HnswIndex::new(8, HnswConfig::default()).unwrap();
        let old = EmbeddingVector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let new = EmbeddingVector::new(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        index.insert(digest(1), &old).unwrap();
        index.insert(digest(1), &new).unwrap();
        assert_eq!(index.len(), 1);
        let hits = index.search(&new, 1).unwrap();
        assert_eq!(hits[0].digest, digest(1));
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        // The old vector no longer matches perfectly.
        let via_old = index.search(&old, 1).unwrap();
        assert!(via_old[0].score < 0.5);
    }

    #[test]
    fn singleton_index_returns_its_entry_for_any_k() {
        let mut index = HnswIndex::new(8, HnswConfig::default()).unwrap();
        let v = EmbeddingVector::new(vec![0.5; 8]).unwrap();
        index.insert(digest(9), &v).unwrap();
        for k in [1, 5, 100] {
            let hits = index.search(&v, k).unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].digest, digest(9));
        }
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let corpus = random_corpus(5, 20, 16);
        let mut index = HnswIndex::new(16, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        let q = corpus[0].1.clone();
        let hits = index.search_with_ef(&q, 50, 200).unwrap();
        assert_eq!(hits.len(), 20);
    }

    #[test]
    fn empty_index_returns_empty_not_error() {
        let index = HnswIndex::new(8, HnswConfig::default()).unwrap();
        let q = EmbeddingVector::new(vec![1.0; 8]).unwrap();
        assert!(index.search(&q, 3).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut index = HnswIndex::new(8, HnswConfig::default()).unwrap();
        let wrong = EmbeddingVector::new(vec![1.0; 4]).unwrap();
        assert!(matches!(
            index.insert(digest(0), &wrong),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn result_ordering_is_non_increasing_with_dense_ranks() {
        let corpus = random_corpus(3, 64, 16);
        let mut index = HnswIndex::new(16, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = random_vector(&mut rng, 16);
        let hits = index.search(&q, 10).unwrap();
        for (i, h) in hits.iter().enumerate() {
            assert_eq!(h.rank, i + 1);
            if i > 0 {
                assert!(hits[i - 1].score >= h.score);
            }
        }
    }

    #[test]
    fn brute_force_on_empty_and_tied_inputs() {
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(brute_force_search(&[], &q, 5).unwrap().is_empty());

        // Identical vectors tie; order falls back to ascending digest hex.
        let v = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let (a, b) = (digest(1), digest(2));
        let hits = brute_force_search(&[(a, v.clone()), (b, v.clone())], &q, 2).unwrap();
        let mut expect = [a, b];
        expect.sort();
        assert_eq!([hits[0].digest, hits[1].digest], expect);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].rank, 2);
    }

    #[test]
    fn wide_beam_agrees_with_the_oracle_on_top_one() {
        let corpus = random_corpus(7, 50, 24);
        let mut index = HnswIndex::new(24, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let q = random_vector(&mut rng, 24);
            let ann = index.search_with_ef(&q, 1, 500).unwrap();
            let exact = brute_force_search(&corpus, &q, 1).unwrap();
            assert_eq!(ann[0].digest, exact[0].digest);
        }
    }

    #[test]
    fn oracle_top_score_dominates_ann_top_score() {
        let corpus = random_corpus(13, 200, 32);
        let mut index = HnswIndex::new(32, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let q = random_vector(&mut rng, 32);
            let ann = index.search(&q, 1).unwrap();
            let exact = brute_force_search(&corpus, &q, 1).unwrap();
            assert!(exact[0].score >= ann[0].score - 1e-12);
        }
    }

    #[test]
    fn recall_at_ten_beats_095_on_a_small_corpus() {
        let corpus = random_corpus(21, 300, 32);
        let mut index = HnswIndex::new(32, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..50 {
            let q = random_vector(&mut rng, 32);
            let ann: HashSet<Digest> = index.search(&q, 10).unwrap().into_iter().map(|c| c.digest).collect();
            for t in brute_force_search(&corpus, &q, 10).unwrap() {
                total += 1;
                if ann.contains(&t.digest) {
                    hits += 1;
                }
            }
        }
        let recall = hits as f64 / total as f64;
        assert!(recall >= 0.95, "recall {recall}");
    }

    #[test]
    fn removed_digests_never_surface() {
        let corpus = random_corpus(17, 30, 16);
        let mut index = HnswIndex::new(16, HnswConfig::default()).unwrap();
        for (d, v) in &corpus {
            index.insert(*d, v).unwrap();
        }
        assert!(index.remove(&corpus[0].0));
        assert!(!index.remove(&corpus[0].0));
        let hits = index.search_with_ef(&corpus[0].1, 30, 200).unwrap();
        assert!(hits.iter().all(|h| h.digest != corpus[0].0));
        assert_eq!(index.len(), 29);
    }
}
