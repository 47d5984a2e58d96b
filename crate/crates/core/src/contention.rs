//! Random-state contention model for asynchronous peer pulls.
//!
//! A tagged rank pulls from one of its `N − 1` peers. Each of the remaining
//! `N − 2` ranks independently targets the same source with probability
//! `1/(N − 1)`, so the contention degree is `C = 1 + Binomial(N − 2, 1/(N − 1))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_range, Exec};

/// Rounds simulated per independent generator stream.
const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionPmf {
    pub group_size: u32,
    /// `probs[c - 1] = Pr[C = c]` for `c` in `1..=max(1, N - 1)`.
    pub probs: Vec<f64>,
    /// Set when `N < 3` and the distribution collapses to `C = 1`.
    pub degenerate: bool,
}

impl ContentionPmf {
    pub fn prob(&self, c: u32) -> f64 {
        if c == 0 {
            return 0.0;
        }
        self.probs.get(c as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn max_degree(&self) -> u32 {
        self.probs.len() as u32
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }

    /// `Pr[C >= c]`.
    pub fn tail(&self, c: u32) -> f64 {
        self.probs.iter().skip(c.saturating_sub(1) as usize).sum()
    }

    /// Pessimistic latency of one pull if contending pulls were fully
    /// serialized at equal size: `Σ c·τ·Pr[C = c]`. An upper-bound style
    /// estimate only, not a prediction.
    pub fn serialized_latency_bound(&self, ideal_pull: f64) -> f64 {
        self.mean() * ideal_pull
    }
}

/// Service time of one pull when the rank's total pull time `total` is split
/// evenly over its `N − 1` sources.
pub fn ideal_pull_time(total: f64, group_size: u32) -> Result<f64> {
    if group_size < 2 {
        return Err(Error::invalid("ideal_pull_time needs group_size >= 2"));
    }
    if !(total > 0.0) {
        return Err(Error::invalid("ideal_pull_time needs a positive total time"));
    }
    Ok(total / (group_size - 1) as f64)
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn binom_pmf(n: u32, p: f64, k: u32) -> f64 {
    let ln_choose = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
    (ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

fn degenerate(group_size: u32) -> ContentionPmf {
    ContentionPmf { group_size, probs: vec![1.0], degenerate: true }
}

/// Closed-form distribution of the contention degree.
pub fn contention_pmf(group_size: u32) -> ContentionPmf {
    if group_size < 3 {
        return degenerate(group_size);
    }
    let n = group_size - 2;
    let p = 1.0 / (group_size - 1) as f64;
    let probs = (0..=n).map(|k| binom_pmf(n, p, k)).collect();
    ContentionPmf { group_size, probs, degenerate: false }
}

/// Monte Carlo estimate of the contention distribution. Rounds are split in
/// fixed chunks, each drawn from its own ChaCha stream, so the result depends
/// only on `(group_size, rounds, seed)` and not on `exec`.
pub fn contention_mc(group_size: u32, rounds: u64, seed: u64, exec: Exec) -> Result<ContentionPmf> {
    if rounds == 0 {
        return Err(Error::invalid("contention_mc needs rounds >= 1"));
    }
    if group_size < 3 {
        return Ok(degenerate(group_size));
    }
    let n = group_size as usize;
    let chunks = rounds.div_ceil(MC_CHUNK);
    let partial = map_range(exec, chunks as usize, |chunk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        let todo = MC_CHUNK.min(rounds - chunk as u64 * MC_CHUNK);
        let mut counts = vec![0u64; n - 1];
        for _ in 0..todo {
            // Rank 0 is tagged; every rank draws uniformly among its peers.
            let source = rng.random_range(1..n);
            let mut c = 1;
            for r in 1..n {
                if r == source {
                    continue;
                }
                let mut pick = rng.random_range(0..n - 1);
                if pick >= r {
                    pick += 1;
                }
                if pick == source {
                    c += 1;
                }
            }
            counts[c - 1] += 1;
        }
        counts
    });
    let mut counts = vec![0u64; n - 1];
    for part in partial {
        for (acc, v) in counts.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let probs = counts.into_iter().map(|k| k as f64 / rounds as f64).collect();
    Ok(ContentionPmf { group_size, probs, degenerate: false })
}

/// One line of the closed-form vs. Monte Carlo comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionRow {
    pub group_size: u32,
    pub degree: u32,
    pub closed_form_pct: f64,
    pub monte_carlo_pct: f64,
    pub abs_err_pct: f64,
}

pub fn contention_table(group_sizes: &[u32], rounds: u64, seed: u64, exec: Exec) -> Result<Vec<ContentionRow>> {
    let mut rows = Vec::new();
    for &n in group_sizes {
        if n < 3 {
            return Err(Error::config("group_sizes", format!("group size {n} is below 3")));
        }
        let closed = contention_pmf(n);
        let mc = contention_mc(n, rounds, seed, exec)?;
        for c in 1..=closed.max_degree() {
            let (a, b) = (100.0 * closed.prob(c), 100.0 * mc.prob(c));
            rows.push(ContentionRow {
                group_size: n,
                degree: c,
                closed_form_pct: a,
                monte_carlo_pct: b,
                abs_err_pct: (a - b).abs(),
            });
        }
    }
    Ok(rows)
}
