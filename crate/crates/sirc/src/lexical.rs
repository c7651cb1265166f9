//! BM25 inverted index over entry tokens and the tokenizer shared by the
//! lexical leg, the feature-hash embedder, and the entity guard.
//!
//! The tokenizer splits on non-alphanumeric boundaries plus snake_case and
//! camelCase seams, lowercases, and drops a small stopword list, so
//! `"DDA Revenue"`, `"dda_revenue"`, and `"ddaRevenue"` all land on the same
//! `[dda, revenue]` token group. That shared vocabulary is what lets the guard
//! compare schema tokens against free-text prompts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::SchemaContext;
use crate::store::Digest;
use crate::vector_index::RankedCandidate;

/// Tokenization settings. The split pattern itself is fixed for v1; only
/// lowercasing and the stopword list are configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub lowercase: bool,
    pub stopwords: BTreeSet<String>,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            lowercase: true,
            stopwords: default_stopwords(),
        }
    }
}

/// English function words (~50 entries) dropped by the default tokenizer.
pub fn default_stopwords() -> BTreeSet<String> {
    [
        "a", "an", "and", "any", "are", "as", "at", "be", "but", "by", "can", "could", "did",
        "do", "does", "for", "from", "had", "has", "have", "how", "if", "in", "is", "it", "its",
        "me", "my", "of", "on", "or", "our", "out", "over", "per", "please", "s", "so", "t",
        "that", "the", "their", "this", "to", "up", "us", "was", "we", "what", "which", "will",
        "with", "would",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// Deterministic tokenization preserving multiplicity.
pub fn tokenize(text: &str, spec: &TokenizerSpec) -> Vec<String> {
    let mut tokens = Vec::new();
    for run in text.split(|c: char| !c.is_alphanumeric()) {
        if run.is_empty() {
            continue;
        }
        for piece in split_camel(run) {
            let token = if spec.lowercase {
                piece
                    .chars()
                    .flat_map(char::to_lowercase)
                    .filter(|c| c.is_alphanumeric())
                    .collect::<String>()
            } else {
                piece
            };
            if token.is_empty() || spec.stopwords.contains(&token) {
                continue;
            }
            tokens.push(token);
        }
    }
    tokens
}

/// Splits camelCase seams: a lower-to-upper transition starts a new piece,
/// and an acronym run ends before a capital that starts a real word
/// ("HTTPServer" -> ["HTTP", "Server"]). A single trailing lowercase letter
/// does not end an acronym, so "KPIs" stays one piece, and letter-digit
/// boundaries never split, so "GA4" stays one piece.
fn split_camel(run: &str) -> Vec<String> {
    let chars: Vec<char> = run.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let prev = chars[i - 1];
        let cur = chars[i];
        let lower_to_upper = prev.is_lowercase() && cur.is_uppercase();
        let acronym_end = prev.is_uppercase()
            && cur.is_uppercase()
            && chars.get(i + 1).is_some_and(|n| n.is_lowercase())
            && chars.get(i + 2).is_some_and(|n| n.is_lowercase());
        if lower_to_upper || acronym_end {
            pieces.push(chars[start..i].iter().collect());
            start = i;
        }
    }
    pieces.push(chars[start..].iter().collect());
    pieces
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn is_valid(&self) -> bool {
        self.k1 > 0.0 && (0.0..=1.0).contains(&self.b)
    }
}

#[derive(Debug, Clone, Default)]
struct DocStats {
    len: u64,
}

/// Okapi BM25 inverted index with the `+1`-inside-`ln` IDF, which never goes
/// negative on tiny corpora.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    params: Bm25Params,
    docs: HashMap<Digest, DocStats>,
    postings: HashMap<String, HashMap<Digest, u32>>,
    total_len: u64,
}

impl LexicalIndex {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            docs: HashMap::new(),
            postings: HashMap::new(),
            total_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Average document length, recomputed from running totals on every
    /// mutation.
    pub fn avgdl(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    /// Indexes a document. Inserting an existing digest replaces it.
    pub fn insert(&mut self, digest: Digest, tokens: &[String]) {
        self.remove(&digest);
        self.docs.insert(
            digest,
            DocStats {
                len: tokens.len() as u64,
            },
        );
        self.total_len += tokens.len() as u64;
        for token in tokens {
            *self
                .postings
                .entry(token.clone())
                .or_default()
                .entry(digest)
                .or_insert(0) += 1;
        }
    }

    pub fn remove(&mut self, digest: &Digest) -> bool {
        let Some(stats) = self.docs.remove(digest) else {
            return false;
        };
        self.total_len -= stats.len;
        self.postings.retain(|_, docs| {
            docs.remove(digest);
            !docs.is_empty()
        });
        true
    }

    /// Top-k documents by BM25 score, descending, ties broken by ascending
    /// digest hex. Documents sharing no query token never appear.
    pub fn search(&self, query_tokens: &[String], k: usize) -> Vec<RankedCandidate> {
        if query_tokens.is_empty() || self.docs.is_empty() || k == 0 {
            return Vec::new();
        }
        let n = self.docs.len() as f64;
        let avgdl = self.avgdl();
        let Bm25Params { k1, b } = self.params;

        let mut scores: HashMap<Digest, f64> = HashMap::new();
        for token in query_tokens {
            let Some(postings) = self.postings.get(token) else {
                continue;
            };
            let n_t = postings.len() as f64;
            let idf = ((n - n_t + 0.5) / (n_t + 0.5) + 1.0).ln();
            for (digest, &tf) in postings {
                let dl = self.docs[digest].len as f64;
                let tf = tf as f64;
                let norm = (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
                *scores.entry(*digest).or_insert(0.0) += idf * norm;
            }
        }

        let mut ranked: Vec<(Digest, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .enumerate()
            .map(|(i, (digest, score))| RankedCandidate {
                digest,
                score,
                rank: i + 1,
            })
            .collect()
    }
}

/// The subset of query tokens that match any metric or dimension token of the
/// schema (after tokenizing the schema tokens themselves). These are the
/// non-negotiable entities for acceptance.
pub fn entity_tokens(query_tokens: &[String], schema: &SchemaContext) -> BTreeSet<String> {
    let mut vocabulary: BTreeSet<String> = BTreeSet::new();
    let spec = TokenizerSpec::default();
    for token in schema.metrics().iter().chain(schema.dimensions()) {
        vocabulary.extend(tokenize(token, &spec));
    }
    query_tokens
        .iter()
        .filter(|t| vocabulary.contains(*t))
        .cloned()
        .collect()
}

/// A mandatory entity: one schema token (or chart-type name) expanded into its
/// sub-tokens. A candidate satisfies the group only when every sub-token is
/// present — sharing `revenue` alone never satisfies `dda_revenue`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityGroup {
    pub name: String,
    pub tokens: BTreeSet<String>,
}

impl EntityGroup {
    pub fn from_token(name: &str) -> Self {
        let tokens = tokenize(name, &TokenizerSpec::default()).into_iter().collect();
        Self {
            name: name.to_string(),
            tokens,
        }
    }

    pub fn fully_present(&self, tokens: &BTreeSet<String>) -> bool {
        !self.tokens.is_empty() && self.tokens.iter().all(|t| tokens.contains(t))
    }
}

/// Schema token groups whose sub-tokens all appear in the query. These are the
/// entities the query committed to; candidates must contain each one in full.
pub fn required_entity_groups(query_tokens: &[String], schema: &SchemaContext) -> Vec<EntityGroup> {
    let query: BTreeSet<String> = query_tokens.iter().cloned().collect();
    schema
        .metrics()
        .iter()
        .chain(schema.dimensions())
        .map(|tok| EntityGroup::from_token(tok))
        .filter(|g| g.fully_present(&query))
        .collect()
}

/// Groups from `required` whose sub-tokens are *not* all present in the
/// candidate's token list.
pub fn missing_groups<'a>(required: &'a [EntityGroup], candidate_tokens: &[String]) -> Vec<&'a EntityGroup> {
    let candidate: BTreeSet<String> = candidate_tokens.iter().cloned().collect();
    required
        .iter()
        .filter(|g| !g.fully_present(&candidate))
        .collect()
}
