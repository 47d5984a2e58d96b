//! Request batches with controllable sequence-length spread and expert
//! routing skew.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelspec::MoeModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IslDist {
    Fixed {
        len: u32,
    },
    /// Lengths uniform on the integers in `[ceil(ratio·max), max]`.
    UniformRatio {
        max: u32,
        ratio: f64,
    },
    /// Rounded normal, truncated to `[1, max_num_tokens]` by rejection.
    Normal {
        mean: f64,
        std: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Multinomial draw over Zipf expert popularity.
    #[default]
    Sampled,
    /// Deterministic largest-remainder apportionment of the same popularity.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub isl: IslDist,
    pub max_num_tokens: u32,
    pub batch_per_rank: u32,
    #[serde(default)]
    pub routing_skew: f64,
    #[serde(default)]
    pub routing: RoutingMode,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let mnt = self.max_num_tokens;
        if mnt == 0 {
            return Err(Error::config("workload.max_num_tokens", "must be positive"));
        }
        if self.batch_per_rank == 0 {
            return Err(Error::config("workload.batch_per_rank", "must be positive"));
        }
        if !(self.routing_skew.is_finite() && self.routing_skew >= 0.0) {
            return Err(Error::config("workload.routing_skew", "must be finite and >= 0"));
        }
        match self.isl {
            IslDist::Fixed { len } => {
                if len == 0 {
                    return Err(Error::config("workload.isl.len", "must be positive"));
                }
                if len > mnt {
                    return Err(Error::config("workload.max_num_tokens", "smaller than the input length"));
                }
            }
            IslDist::UniformRatio { max, ratio } => {
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(Error::config("workload.isl.ratio", "must lie in (0, 1]"));
                }
                if max == 0 {
                    return Err(Error::config("workload.isl.max", "must be positive"));
                }
                if max > mnt {
                    return Err(Error::config("workload.max_num_tokens", "smaller than the largest input length"));
                }
            }
            IslDist::Normal { mean, std } => {
                if !(mean.is_finite() && mean >= 1.0) {
                    return Err(Error::config("workload.isl.mean", "must be >= 1"));
                }
                if !(std.is_finite() && std >= 0.0) {
                    return Err(Error::config("workload.isl.std", "must be >= 0"));
                }
                if mean > mnt as f64 {
                    return Err(Error::config("workload.max_num_tokens", "smaller than the mean input length"));
                }
            }
        }
        Ok(())
    }

    fn draw_len(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self.isl {
            IslDist::Fixed { len } => len,
            IslDist::UniformRatio { max, ratio } => {
                let lo = ((ratio * max as f64).ceil() as u32).clamp(1, max);
                rng.random_range(lo..=max)
            }
            IslDist::Normal { mean, std } => {
                if std == 0.0 {
                    return mean.round() as u32;
                }
                let normal = Normal::new(mean, std).expect("validated normal parameters");
                let hi = self.max_num_tokens as f64;
                loop {
                    let x = normal.sample(rng).round();
                    if (1.0..=hi).contains(&x) {
                        return x as u32;
                    }
                }
            }
        }
    }
}

/// One iteration's work for every rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBatch {
    /// Request lengths scheduled on each rank.
    pub requests: Vec<Vec<u32>>,
    /// Per rank, routed (token, expert) assignments per expert.
    pub routed: Vec<Vec<u32>>,
}

impl RankBatch {
    pub fn num_ranks(&self) -> usize {
        self.requests.len()
    }

    pub fn tokens(&self, rank: usize) -> u64 {
        self.requests[rank].iter().map(|&l| l as u64).sum()
    }

    pub fn token_counts(&self) -> Vec<u64> {
        (0..self.num_ranks()).map(|r| self.tokens(r)).collect()
    }

    /// Token-weighted mean context length, `Σ L² / Σ L`.
    pub fn mean_seq_len(&self, rank: usize) -> f64 {
        let t = self.tokens(rank);
        if t == 0 {
            return 0.0;
        }
        let sq: f64 = self.requests[rank].iter().map(|&l| (l as f64) * (l as f64)).sum();
        sq / t as f64
    }

    pub fn cv(&self) -> Result<f64> {
        let counts: Vec<f64> = self.token_counts().into_iter().map(|t| t as f64).collect();
        imbalance_cv(&counts)
    }

    /// Checks shape, token budget and routing conservation.
    pub fn validate(&self, model: &MoeModelSpec, max_num_tokens: u32) -> Result<()> {
        if self.routed.len() != self.requests.len() {
            return Err(Error::invalid("batch has mismatched rank counts"));
        }
        for r in 0..self.num_ranks() {
            let t = self.tokens(r);
            if t > max_num_tokens as u64 {
                return Err(Error::invalid(format!("rank {r} holds {t} tokens, above max_num_tokens")));
            }
            if self.routed[r].len() != model.num_experts as usize {
                return Err(Error::invalid(format!("rank {r} routing has wrong expert count")));
            }
            let sum: u64 = self.routed[r].iter().map(|&x| x as u64).sum();
            if sum != t * model.top_k as u64 {
                return Err(Error::invalid(format!(
                    "rank {r} routes {sum} assignments, expected {}",
                    t * model.top_k as u64
                )));
            }
        }
        Ok(())
    }
}

/// Zipf popularity over experts, hottest first.
pub fn zipf_weights(num_experts: u32, skew: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=num_experts).map(|i| (i as f64).powf(-skew)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Multinomial draw of `tokens · top_k` assignments over Zipf popularity,
/// by conditional binomials.
pub fn route_tokens(tokens: u64, model: &MoeModelSpec, skew: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let weights = zipf_weights(model.num_experts, skew);
    let mut left = tokens * model.top_k as u64;
    let mut mass = 1.0;
    let mut out = vec![0u32; weights.len()];
    for (i, &w) in weights.iter().enumerate() {
        if left == 0 {
            break;
        }
        let x = if i + 1 == weights.len() || w >= mass {
            left
        } else {
            let p = (w / mass).clamp(0.0, 1.0);
            Binomial::new(left, p).expect("probability in [0, 1]").sample(rng)
        };
        out[i] = x as u32;
        left -= x;
        mass -= w;
    }
    out
}

/// Largest-remainder apportionment of `tokens · top_k` assignments. Ties in
/// the remainder go to experts in index order starting at `phase`.
pub fn route_expected(tokens: u64, model: &MoeModelSpec, skew: f64, phase: u32) -> Vec<u32> {
    let e = model.num_experts as usize;
    let weights = zipf_weights(model.num_experts, skew);
    let total = tokens * model.top_k as u64;
    let mut out: Vec<u32> = weights.iter().map(|w| (w * total as f64).floor() as u32).collect();
    let given: u64 = out.iter().map(|&x| x as u64).sum();
    let mut order: Vec<usize> = (0..e).collect();
    let rema = |i: usize| weights[i] * total as f64 - out[i] as f64;
    let rem: Vec<f64> = (0..e).map(rema).collect();
    order.sort_by(|&a, &b| {
        rem[b]
            .partial_cmp(&rem[a])
            .unwrap()
            .then(((a + e - phase as usize % e) % e).cmp(&((b + e - phase as usize % e) % e)))
    });
    for &i in order.iter().take(total.saturating_sub(given) as usize) {
        out[i] += 1;
    }
    out
}

/// Generates `iterations` batches. Each rank has its own generator stream
/// and a FIFO of pending requests; every iteration it draws
/// `batch_per_rank` new requests and schedules pending ones in order while
/// they fit within `max_num_tokens`. The rest wait for later iterations.
pub fn sample_batches(
    spec: &WorkloadSpec,
    model: &MoeModelSpec,
    num_ranks: u32,
    iterations: u32,
) -> Result<Vec<RankBatch>> {
    spec.validate()?;
    model.validate()?;
    if num_ranks == 0 {
        return Err(Error::config("strategy.group_size", "must be >= 1"));
    }
    let n = num_ranks as usize;
    let e = model.num_experts;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(r as u64);
            rng
        })
        .collect();
    let mut pending: Vec<std::collections::VecDeque<u32>> = vec![Default::default(); n];
    let mut out = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let mut requests = Vec::with_capacity(n);
        let mut routed = Vec::with_capacity(n);
        for r in 0..n {
            let rng = &mut rngs[r];
            for _ in 0..spec.batch_per_rank {
                let len = spec.draw_len(rng);
                pending[r].push_back(len);
            }
            let mut budget = spec.max_num_tokens as u64;
            let mut taken = Vec::new();
            while let Some(&len) = pending[r].front() {
                if len as u64 > budget {
                    break;
                }
                budget -= len as u64;
                taken.push(len);
                pending[r].pop_front();
            }
            let tokens: u64 = taken.iter().map(|&l| l as u64).sum();
            let counts = match spec.routing {
                RoutingMode::Sampled => route_tokens(tokens, model, spec.routing_skew, rng),
                RoutingMode::Expected => {
                    route_expected(tokens, model, spec.routing_skew, (r as u64 * e as u64 / n as u64) as u32)
                }
            };
            requests.push(taken);
            routed.push(counts);
        }
        out.push(RankBatch { requests, routed });
    }
    Ok(out)
}

/// Population standard deviation over mean.
pub fn imbalance_cv(counts: &[f64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::invalid("imbalance_cv needs at least 2 ranks"));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::invalid("imbalance_cv of an all-zero batch"));
    }
    let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// CV of a single uniform `[ratio·L, L]` draw.
pub fn uniform_ratio_cv(ratio: f64) -> f64 {
    (1.0 - ratio) / ((1.0 + ratio) * 3f64.sqrt())
}

/// Inverse of [`uniform_ratio_cv`].
pub fn uniform_ratio_for_cv(cv: f64) -> Result<f64> {
    let k = 3f64.sqrt() * cv;
    if !(0.0..1.0).contains(&k) {
        return Err(Error::invalid(format!("no uniform ratio gives cv {cv}")));
    }
    Ok((1.0 - k) / (1.0 + k))
}

pub fn normal_std_for_cv(mean: f64, cv: f64) -> Result<f64> {
    if !(cv >= 0.0 && mean > 0.0) {
        return Err(Error::invalid("normal_std_for_cv needs cv >= 0 and mean > 0"));
    }
    Ok(cv * mean)
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchRow {
    iteration: u32,
    rank: u32,
    field: String,
    index: u32,
    value: u32,
}

/// Writes batches as long-format CSV: one `len` row per request and one
/// `routed` row per non-zero expert count.
pub fn write_batches_csv<W: Write>(batches: &[RankBatch], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "rank", "field", "index", "value"])?;
    for (it, b) in batches.iter().enumerate() {
        for r in 0..b.num_ranks() {
            for (i, &len) in b.requests[r].iter().enumerate() {
                out.write_record(&[it.to_string(), r.to_string(), "len".into(), i.to_string(), len.to_string()])?;
            }
            for (x, &count) in b.routed[r].iter().enumerate() {
                if count > 0 {
                    out.write_record(&[
                        it.to_string(),
                        r.to_string(),
                        "routed".into(),
                        x.to_string(),
                        count.to_string(),
                    ])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads batches written by [`write_batches_csv`].
pub fn read_batches_csv<R: Read>(r: R, num_ranks: u32, num_experts: u32) -> Result<Vec<RankBatch>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<RankBatch> = Vec::new();
    let n = num_ranks as usize;
    for row in rdr.deserialize() {
        let row: BatchRow = row?;
        if row.rank >= num_ranks {
            return Err(Error::config("simulation.replay", format!("rank {} outside the group", row.rank)));
        }
        while out.len() <= row.iteration as usize {
            out.push(RankBatch { requests: vec![Vec::new(); n], routed: vec![vec![0; num_experts as usize]; n] });
        }
        let b = &mut out[row.iteration as usize];
        match row.field.as_str() {
            "len" => {
                let reqs = &mut b.requests[row.rank as usize];
                if row.index as usize != reqs.len() {
                    return Err(Error::config("simulation.replay", "request rows out of order"));
                }
                reqs.push(row.value);
            }
            "routed" => {
                if row.index >= num_experts {
                    return Err(Error::config("simulation.replay", format!("expert {} out of range", row.index)));
                }
                b.routed[row.rank as usize][row.index as usize] = row.value;
            }
            other => return Err(Error::config("simulation.replay", format!("unknown field `{other}`"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(isl: IslDist) -> WorkloadSpec {
        WorkloadSpec {
            isl,
            max_num_tokens: 32768,
            batch_per_rank: 1,
            routing_skew: 0.0,
            routing: RoutingMode::Sampled,
            seed: 11,
        }
    }

    #[test]
    fn fixed_lengths_have_zero_cv() {
        let m = MoeModelSpec::deepseek_r1_like();
        let b = sample_batches(&spec(IslDist::Fixed { len: 8192 }), &m, 4, 3).unwrap();
        for it in &b {
            assert_eq!(it.token_counts(), vec![8192; 4]);
            assert_eq!(it.cv().unwrap(), 0.0);
            it.validate(&m, 32768).unwrap();
        }
    }

    #[test]
    fn uniform_ratio_range() {
        let m = MoeModelSpec::deepseek_r1_like();
        let b = sample_batches(&spec(IslDist::UniformRatio { max: 8192, ratio: 0.8 }), &m, 4, 200).unwrap();
        let all: Vec<u64> = b.iter().flat_map(|x| x.token_counts()).collect();
        assert!(all.iter().all(|&t| (6554..=8192).contains(&t)));
        assert!(all.contains(&6554) || all.iter().min().unwrap() < &6700);
    }

    #[test]
    fn normal_std_matches() {
        let mut m = MoeModelSpec::deepseek_r1_like();
        m.num_experts = 8;
        let mut s = spec(IslDist::Normal { mean: 16384.0, std: 4096.0 });
        s.max_num_tokens = 65536;
        let b = sample_batches(&s, &m, 2, 5000).unwrap();
        for r in 0..2 {
            let xs: Vec<f64> = b.iter().map(|x| x.tokens(r) as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((sd - 4096.0).abs() / 4096.0 < 0.05, "rank {r} sd {sd}");
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let m = MoeModelSpec::deepseek_r1_like();
        let s = spec(IslDist::UniformRatio { max: 8192, ratio: 0.5 });
        assert_eq!(sample_batches(&s, &m, 4, 5).unwrap(), sample_batches(&s, &m, 4, 5).unwrap());
        let mut t = s.clone();
        t.seed += 1;
        assert_ne!(sample_batches(&s, &m, 4, 5).unwrap(), sample_batches(&t, &m, 4, 5).unwrap());
    }

    #[test]
    fn overflow_is_deferred() {
        let m = MoeModelSpec::deepseek_r1_like();
        let mut s = spec(IslDist::Fixed { len: 3000 });
        s.max_num_tokens = 8000;
        s.batch_per_rank = 3;
        let b = sample_batches(&s, &m, 2, 3).unwrap();
        assert_eq!(b[0].requests[0], vec![3000, 3000]);
        assert_eq!(b[1].requests[0].len(), 2);
        assert!(b.iter().all(|x| x.tokens(0) <= 8000));
    }

    #[test]
    fn mnt_below_isl_is_config_error() {
        let mut s = spec(IslDist::Fixed { len: 8192 });
        s.max_num_tokens = 4096;
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn routing_uniform_and_skewed() {
        let m = MoeModelSpec::deepseek_r1_like();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts = route_tokens(100_000, &m, 0.0, &mut rng);
        let total: f64 = 100_000.0 * 8.0;
        let mean = total / 256.0;
        let sigma = (total * (1.0 / 256.0) * (255.0 / 256.0)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - mean).abs() <= 5.0 * sigma));
        assert_eq!(counts.iter().map(|&c| c as u64).sum::<u64>(), 800_000);

        let hot = route_tokens(10_000, &m, 10.0, &mut rng);
        assert!(hot[0] as f64 >= 0.9 * 80_000.0);
        assert!(route_tokens(0, &m, 1.0, &mut rng).iter().all(|&c| c == 0));
    }

    #[test]
    fn expected_routing_is_even() {
        let m = MoeModelSpec::deepseek_r1_like();
        let c = route_expected(8192, &m, 0.0, 0);
        assert!(c.iter().all(|&x| x == 256));
        let c = route_expected(7000, &m, 0.0, 64);
        assert_eq!(c.iter().map(|&x| x as u64).sum::<u64>(), 56_000);
        assert_eq!(c[64], 219);
        assert_eq!(c[0], 218);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(imbalance_cv(&[100.0; 4]).unwrap(), 0.0);
        assert!((imbalance_cv(&[80.0, 120.0]).unwrap() - 0.2).abs() < 1e-12);
        let v = imbalance_cv(&[60.0, 100.0, 100.0, 140.0]).unwrap();
        assert!((v - 800f64.sqrt() / 100.0).abs() < 1e-12);
        assert!((v - 0.283).abs() < 1e-3);
        assert!(imbalance_cv(&[1.0]).is_err());
        assert!(imbalance_cv(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn cv_inversion_roundtrip() {
        for cv in [0.0, 0.05, 0.1, 0.2, 0.5] {
            let r = uniform_ratio_for_cv(cv).unwrap();
            assert!((uniform_ratio_cv(r) - cv).abs() < 1e-12);
        }
        assert!(uniform_ratio_for_cv(0.6).is_err());
        assert_eq!(normal_std_for_cv(16384.0, 0.25).unwrap(), 4096.0);
    }

    #[test]
    fn uniform_cv_converges() {
        let m = MoeModelSpec::deepseek_r1_like();
        let mut s = spec(IslDist::UniformRatio { max: 8192, ratio: 0.5 });
        s.routing = RoutingMode::Expected;
        let b = sample_batches(&s, &m, 64, 200).unwrap();
        let xs: Vec<f64> = b.iter().flat_map(|x| x.token_counts()).map(|t| t as f64).collect();
        let cv = imbalance_cv(&xs).unwrap();
        assert!((cv - uniform_ratio_cv(0.5)).abs() < 0.01, "{cv}");
    }

    #[test]
    fn csv_roundtrip() {
        let m = MoeModelSpec::deepseek_r1_like();
        let b = sample_batches(&spec(IslDist::UniformRatio { max: 4096, ratio: 0.3 }), &m, 3, 4).unwrap();
        let mut buf = Vec::new();
        write_batches_csv(&b, &mut buf).unwrap();
        let back = read_batches_csv(buf.as_slice(), 3, 256).unwrap();
        assert_eq!(back, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn routing_conserves_assignments(tokens in 0u64..50_000, skew in 0.0f64..4.0, seed in any::<u64>()) {
                let m = MoeModelSpec::deepseek_r1_like();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sampled = route_tokens(tokens, &m, skew, &mut rng);
                prop_assert_eq!(sampled.iter().map(|&c| c as u64).sum::<u64>(), tokens * 8);
                let expected = route_expected(tokens, &m, skew, (seed % 256) as u32);
                prop_assert_eq!(expected.iter().map(|&c| c as u64).sum::<u64>(), tokens * 8);
            }
        }
    }
}
