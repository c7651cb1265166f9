//! Synthetic latency and token-count distributions for the replay harness.
//!
//! Real deployments measure wall-clock; the replay harness additionally
//! assigns each outcome a simulated latency drawn from a configured
//! distribution so reports carry realistic millisecond figures. Draws are
//! keyed by `(seed, label, input digest)`: identical inputs always draw
//! identical values, which keeps whole experiment runs byte-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::store::Digest;

/// Latency distribution in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant { ms: f64 },
    /// Parameterized by the median (`exp(mu)`) and log-space sigma; the mean
    /// is `median * exp(sigma^2 / 2)`.
    LogNormal { median_ms: f64, sigma: f64 },
}

impl LatencyDist {
    pub fn mean_ms(&self) -> f64 {
        match *self {
            LatencyDist::Constant { ms } => ms,
            LatencyDist::LogNormal { median_ms, sigma } => median_ms * (sigma * sigma / 2.0).exp(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatencyDist::Constant { ms } => ms,
            LatencyDist::LogNormal { median_ms, sigma } => {
                let dist = LogNormal::new(median_ms.ln(), sigma).expect("finite lognormal params");
                dist.sample(rng)
            }
        }
    }
}

/// Non-negative integer draw around a mean, for per-call token counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDist {
    pub mean: f64,
    /// Standard deviation as a fraction of the mean.
    pub rel_spread: f64,
}

impl TokenDist {
    pub fn new(mean: f64, rel_spread: f64) -> Self {
        Self { mean, rel_spread }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.mean <= 0.0 {
            return 0;
        }
        let sd = self.mean * self.rel_spread;
        if sd <= 0.0 {
            return self.mean.round().max(0.0) as u64;
        }
        let dist = Normal::new(self.mean, sd).expect("finite normal params");
        dist.sample(rng).round().max(0.0) as u64
    }
}

/// Derives an independent, reproducible RNG stream for one simulated event.
pub fn event_rng(seed: u64, label: &str, digest: &Digest) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mix = Digest::sha256(
        &[
            &seed.to_le_bytes()[..],
            label.as_bytes(),
            digest.as_bytes(),
        ]
        .concat(),
    );
    key.copy_from_slice(mix.as_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Simulated latencies for cache hits at one stage, calibrated so that the
/// defaults land near the reference trace (exact hits: mean ~2.94 ms with
/// median 2.66 ms; semantic hits: mean ~440 ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitLatencyModel {
    pub exact_hit: LatencyDist,
    pub semantic_hit: LatencyDist,
}

impl Default for HitLatencyModel {
    fn default() -> Self {
        Self {
            exact_hit: LatencyDist::LogNormal {
                median_ms: 2.66,
                sigma: 0.4474,
            },
            semantic_hit: LatencyDist::LogNormal {
                median_ms: 398.45,
                sigma: 0.4474,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_distribution_is_constant() {
        let d = LatencyDist::Constant { ms: 5.0 };
        let mut rng = event_rng(0, "x", &Digest::sha256(b"q"));
        assert_eq!(d.sample(&mut rng), 5.0);
        assert_eq!(d.mean_ms(), 5.0);
    }

    #[test]
    fn lognormal_mean_matches_closed_form() {
        // median 2.66, sigma 0.4474 -> mean ~2.94 (the calibration target).
        let d = LatencyDist::LogNormal {
            median_ms: 2.66,
            sigma: 0.4474,
        };
        assert!((d.mean_ms() - 2.94).abs() < 0.01, "{}", d.mean_ms());
    }

    #[test]
    fn draws_are_keyed_by_input() {
        let d = LatencyDist::LogNormal {
            median_ms: 100.0,
            sigma: 0.5,
        };
        let q = Digest::sha256(b"same");
        let a = d.sample(&mut event_rng(1, "air", &q));
        let b = d.sample(&mut event_rng(1, "air", &q));
        let c = d.sample(&mut event_rng(1, "air", &Digest::sha256(b"other")));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn token_draws_are_non_negative_and_centered() {
        let d = TokenDist::new(1000.0, 0.1);
        let mut rng = event_rng(7, "tok", &Digest::sha256(b"q"));
        let samples: Vec<u64> = (0..2000).map(|_| d.sample(&mut rng)).collect();
        let mean = samples.iter().sum::<u64>() as f64 / samples.len() as f64;
        assert!((mean - 1000.0).abs() < 20.0, "mean {mean}");
    }
}
