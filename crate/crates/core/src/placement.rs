//! Per-rank expert placement with equal local counts and redundant
//! replicas when the expert count does not divide evenly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelspec::{expert_shard_bytes, MoeModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub num_experts: u32,
    pub group_size: u32,
    pub local_count: u32,
    /// Sorted expert indices held by each rank.
    pub local_sets: Vec<Vec<u32>>,
    /// `(expert, source_rank)` for every expert a rank must pull, sorted by expert.
    pub fetch_lists: Vec<Vec<(u32, u32)>>,
    pub redundancy: u32,
}

/// Contiguous blocks of `ceil(E/N) + extra` experts. Block `r` starts at
/// `floor(r·E/N)` and wraps modulo `E`.
pub fn build_placement(num_experts: u32, group_size: u32, extra_redundancy: u32) -> Result<PlacementPlan> {
    if group_size < 2 {
        return Err(Error::config("strategy.group_size", "placement needs group_size >= 2"));
    }
    if num_experts < group_size {
        return Err(Error::config("model.num_experts", "must be >= group_size"));
    }
    let e = num_experts as u64;
    let n = group_size as u64;
    let c = (e.div_ceil(n) + extra_redundancy as u64).min(e) as u32;
    let local_sets = (0..n)
        .map(|r| {
            let start = r * e / n;
            let mut set: Vec<u32> = (0..c as u64).map(|j| ((start + j) % e) as u32).collect();
            set.sort_unstable();
            set
        })
        .collect::<Vec<_>>();
    let fetch_lists = assign_fetch_sources(num_experts, &local_sets)?;
    let plan = PlacementPlan {
        num_experts,
        group_size,
        local_count: c,
        local_sets,
        fetch_lists,
        redundancy: group_size * c - num_experts,
    };
    plan.validate()?;
    Ok(plan)
}

/// Picks a holder for every non-local expert of every rank. Experts with a
/// single holder are fixed first; the rest go, in ascending expert order, to
/// the holder with the fewest experts already assigned to this destination
/// (ties to the lowest rank).
pub fn assign_fetch_sources(num_experts: u32, local_sets: &[Vec<u32>]) -> Result<Vec<Vec<(u32, u32)>>> {
    let n = local_sets.len();
    let mut holders: Vec<Vec<u32>> = vec![Vec::new(); num_experts as usize];
    for (r, set) in local_sets.iter().enumerate() {
        for &x in set {
            holders
                .get_mut(x as usize)
                .ok_or_else(|| Error::invariant(format!("expert {x} out of range")))?
                .push(r as u32);
        }
    }
    let mut out = Vec::with_capacity(n);
    for (dst, set) in local_sets.iter().enumerate() {
        let missing: Vec<u32> = (0..num_experts).filter(|x| set.binary_search(x).is_err()).collect();
        let mut load = vec![0u32; n];
        let mut list = Vec::with_capacity(missing.len());
        let mut multi = Vec::new();
        for &x in &missing {
            match holders[x as usize].as_slice() {
                [] => return Err(Error::invariant(format!("expert {x} has no holder"))),
                [only] => {
                    load[*only as usize] += 1;
                    list.push((x, *only));
                }
                _ => multi.push(x),
            }
        }
        for x in multi {
            let src = *holders[x as usize]
                .iter()
                .filter(|&&h| h as usize != dst)
                .min_by_key(|&&h| (load[h as usize], h))
                .expect("expert with several holders, none of them the destination");
            load[src as usize] += 1;
            list.push((x, src));
        }
        list.sort_unstable();
        out.push(list);
    }
    Ok(out)
}

impl PlacementPlan {
    /// Every rank holds every expert; nothing is prefetched. Valid for any
    /// group size including 1.
    pub fn replicated(num_experts: u32, group_size: u32) -> Result<PlacementPlan> {
        if num_experts == 0 || group_size == 0 {
            return Err(Error::config("strategy.group_size", "must be >= 1"));
        }
        let all: Vec<u32> = (0..num_experts).collect();
        Ok(PlacementPlan {
            num_experts,
            group_size,
            local_count: num_experts,
            local_sets: vec![all; group_size as usize],
            fetch_lists: vec![Vec::new(); group_size as usize],
            redundancy: (group_size - 1) * num_experts,
        })
    }

    pub fn holds(&self, rank: usize, expert: u32) -> bool {
        self.local_sets[rank].binary_search(&expert).is_ok()
    }

    /// Checks coverage, equal counts and fetch-list consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.group_size as usize;
        if self.local_sets.len() != n || self.fetch_lists.len() != n {
            return Err(Error::invariant("placement has wrong number of ranks"));
        }
        let mut covered = vec![false; self.num_experts as usize];
        for (r, set) in self.local_sets.iter().enumerate() {
            if set.len() != self.local_count as usize {
                return Err(Error::invariant(format!(
                    "rank {r} holds {} experts, expected {}",
                    set.len(),
                    self.local_count
                )));
            }
            for &x in set {
                covered[x as usize] = true;
            }
            let mut seen = set.clone();
            for &(x, src) in &self.fetch_lists[r] {
                if self.holds(r, x) {
                    return Err(Error::invariant(format!("rank {r} fetches local expert {x}")));
                }
                if src as usize >= n || !self.holds(src as usize, x) {
                    return Err(Error::invariant(format!("rank {r} fetches expert {x} from non-holder {src}")));
                }
                seen.push(x);
            }
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != self.num_experts as usize {
                return Err(Error::invariant(format!("rank {r} does not see every expert exactly once")));
            }
        }
        if let Some(x) = covered.iter().position(|c| !c) {
            return Err(Error::invariant(format!("expert {x} is not placed")));
        }
        if self.redundancy as usize != n * self.local_count as usize - self.num_experts as usize {
            return Err(Error::invariant("redundancy does not match N·c − E"));
        }
        Ok(())
    }

    /// Number of experts rank `dst` pulls from each source.
    pub fn source_loads(&self, dst: usize) -> Vec<u32> {
        let mut load = vec![0; self.group_size as usize];
        for &(_, src) in &self.fetch_lists[dst] {
            load[src as usize] += 1;
        }
        load
    }

    /// Human-readable rank → expert ranges listing.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "experts {} group_size {} local_count {} redundancy {}\n",
            self.num_experts, self.group_size, self.local_count, self.redundancy
        );
        for (r, set) in self.local_sets.iter().enumerate() {
            let _ = write!(s, "rank {r}: local {}", ranges(set));
            let loads = self.source_loads(r);
            let pulls: Vec<String> = loads
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0)
                .map(|(src, l)| format!("{l} from rank {src}"))
                .collect();
            if pulls.is_empty() {
                s.push_str("; fetch none\n");
            } else {
                let _ = writeln!(s, "; fetch {}", pulls.join(", "));
            }
        }
        s
    }
}

fn ranges(sorted: &[u32]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[j] + 1 {
            j += 1;
        }
        parts.push(format!("[{}..{})", sorted[i], sorted[j] + 1));
        i = j + 1;
    }
    parts.join(" ")
}

/// Bytes one rank pulls to assemble one layer's experts.
pub fn prefetch_bytes(plan: &PlacementPlan, model: &MoeModelSpec, rank: usize) -> f64 {
    plan.fetch_lists[rank].len() as f64 * expert_shard_bytes(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_division() {
        let p = build_placement(256, 4, 0).unwrap();
        assert_eq!(p.local_count, 64);
        assert_eq!(p.redundancy, 0);
        for r in 0..4 {
            let loads = p.source_loads(r);
            for (src, l) in loads.iter().enumerate() {
                assert_eq!(*l, if src == r { 0 } else { 64 });
            }
        }
    }

    #[test]
    fn three_ranks() {
        let p = build_placement(256, 3, 0).unwrap();
        assert_eq!(p.local_count, 86);
        assert_eq!(p.redundancy, 2);
        assert!(p.fetch_lists.iter().all(|l| l.len() == 170));
    }

    #[test]
    fn four_experts_two_ranks() {
        let p = build_placement(4, 2, 1).unwrap();
        assert_eq!(p.local_count, 3);
        assert_eq!(p.redundancy, 2);
        for r in 0..2 {
            assert_eq!(p.fetch_lists[r].len(), 1);
            assert_eq!(p.fetch_lists[r][0].1 as usize, 1 - r);
        }
    }

    #[test]
    fn six_experts_three_ranks_balanced() {
        let p = build_placement(6, 3, 1).unwrap();
        assert_eq!(p.local_count, 3);
        for r in 0..3 {
            let loads: Vec<u32> =
                p.source_loads(r).into_iter().enumerate().filter(|(s, _)| *s != r).map(|(_, l)| l).collect();
            let (lo, hi) = (loads.iter().min().unwrap(), loads.iter().max().unwrap());
            assert!(hi - lo <= 1, "rank {r}: {loads:?}");
        }
    }

    #[test]
    fn non_divisible_blocks_cover_tail() {
        // Starting blocks at r·floor(E/N) would leave expert 7 unplaced here.
        let p = build_placement(8, 3, 0).unwrap();
        assert!(p.local_sets.iter().any(|s| s.contains(&7)));
    }

    #[test]
    fn rejects_small_groups() {
        assert!(build_placement(256, 1, 0).is_err());
        assert!(build_placement(2, 3, 0).is_err());
    }

    #[test]
    fn prefetch_bytes_examples() {
        let mut m = MoeModelSpec::deepseek_r1_like();
        m.hidden_dim = 8;
        m.expert_ffn_dim = 2;
        m.weight_bytes_per_param = 1.0;
        assert_eq!(expert_shard_bytes(&m), 48.0);
        let p = build_placement(256, 4, 0).unwrap();
        assert_eq!(prefetch_bytes(&p, &m, 0), 9216.0);
        let full = build_placement(256, 4, 192).unwrap();
        assert_eq!(full.local_count, 256);
        assert_eq!(prefetch_bytes(&full, &m, 2), 0.0);
        let p3 = build_placement(256, 3, 0).unwrap();
        assert_eq!(prefetch_bytes(&p3, &m, 1), 170.0 * 48.0);
    }

    #[test]
    fn text_dump_lists_ranges() {
        let p = build_placement(256, 3, 0).unwrap();
        let t = p.to_text();
        assert!(t.contains("rank 0: local [0..86)"));
        assert!(t.contains("rank 2: local [170..256)"), "{t}");
        let wrapped = build_placement(6, 3, 1).unwrap().to_text();
        assert!(wrapped.contains("rank 2: local [0..1) [4..6)"), "{wrapped}");
    }

    #[test]
    fn replicated_plan_is_valid() {
        let p = PlacementPlan::replicated(16, 1).unwrap();
        p.validate().unwrap();
        assert!(p.fetch_lists[0].is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold(n in 2u32..24, e_extra in 0u32..200, extra in 0u32..8) {
                let e = n + e_extra;
                let p = build_placement(e, n, extra).unwrap();
                prop_assert!(p.validate().is_ok());
            }

            #[test]
            fn more_redundancy_never_more_bytes(n in 2u32..16, e_extra in 0u32..100, extra in 0u32..8) {
                let e = n + e_extra;
                let m = MoeModelSpec::deepseek_r1_like();
                let a = build_placement(e, n, extra).unwrap();
                let b = build_placement(e, n, extra + 1).unwrap();
                prop_assert!(prefetch_bytes(&b, &m, 0) <= prefetch_bytes(&a, &m, 0));
            }

            #[test]
            fn deterministic(n in 2u32..12, e_extra in 0u32..60, extra in 0u32..4) {
                let e = n + e_extra;
                prop_assert_eq!(build_placement(e, n, extra).unwrap(), build_placement(e, n, extra).unwrap());
            }
        }
    }
}
