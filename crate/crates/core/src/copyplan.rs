//! Batched prefetch-copy plans: fixed-size slicing with round-robin
//! interleave across source peers, and the per-destination queue view a
//! source's copy engine serves.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelspec::MoeModelSpec;
use crate::placement::PlacementPlan;

/// Default slice size, 1 MiB.
pub const DEFAULT_SLICE_SIZE: u64 = 1 << 20;

/// Weight tensors per expert that are pulled as separate parameters
/// (gate, up and down projections).
pub const PARAMS_PER_EXPERT: u32 = 3;

/// One remote region to pull: `size` bytes of parameter `param_id` starting
/// at `src_offset` in `peer`'s memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub peer: u32,
    pub param_id: u32,
    pub size: u64,
    pub src_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slice {
    pub param_id: u32,
    pub src_rank: u32,
    pub src_offset: u64,
    pub dst_offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyPlan {
    pub dst_rank: u32,
    pub slice_size: u64,
    pub slices: Vec<Slice>,
}

/// Builds the slice list for destination `dst_rank`.
///
/// Parameters are visited in order of first appearance. For each one the
/// offset advances in steps of `slice_size` and, at every offset, peers
/// holding that parameter are visited round-robin starting at index
/// `dst_rank mod peers`. A peer whose shard is shorter than the longest one
/// drops out of the rotation once exhausted. The destination buffer holds
/// parameters in order and, within a parameter, peers in input order.
pub fn build_copy_plan(dst_rank: u32, shards: &[Shard], slice_size: u64) -> Result<CopyPlan> {
    if slice_size == 0 {
        return Err(Error::config("slice_size", "must be > 0"));
    }
    if let Some(s) = shards.iter().find(|s| s.size == 0) {
        return Err(Error::invalid(format!("shard of param {} on peer {} is empty", s.param_id, s.peer)));
    }
    let mut params: Vec<u32> = Vec::new();
    for s in shards {
        if !params.contains(&s.param_id) {
            params.push(s.param_id);
        }
    }
    let mut slices = Vec::new();
    let mut base = 0u64;
    for p in params {
        let mut peers: Vec<(&Shard, u64)> = Vec::new();
        for s in shards.iter().filter(|s| s.param_id == p) {
            if peers.iter().any(|(q, _)| q.peer == s.peer) {
                return Err(Error::invalid(format!("peer {} listed twice for param {p}", s.peer)));
            }
            peers.push((s, base));
            base += s.size;
        }
        let phase = dst_rank as usize % peers.len();
        peers.rotate_left(phase);
        let longest = peers.iter().map(|(s, _)| s.size).max().unwrap_or(0);
        let mut offset = 0u64;
        while offset < longest {
            for &(s, dst_base) in &peers {
                if offset >= s.size {
                    continue;
                }
                slices.push(Slice {
                    param_id: p,
                    src_rank: s.peer,
                    src_offset: s.src_offset + offset,
                    dst_offset: dst_base + offset,
                    length: slice_size.min(s.size - offset),
                });
            }
            offset = offset.saturating_add(slice_size);
        }
    }
    Ok(CopyPlan { dst_rank, slice_size, slices })
}

/// Number of slices a shard of `size` bytes is cut into.
pub fn slice_count(size: u64, slice_size: u64) -> u64 {
    size.div_ceil(slice_size)
}

impl CopyPlan {
    pub fn total_bytes(&self) -> u64 {
        self.slices.iter().map(|s| s.length).sum()
    }

    /// Checks that the slices of every shard tile `[0, size)` exactly.
    pub fn validate(&self, shards: &[Shard]) -> Result<()> {
        for sh in shards {
            let mut parts: Vec<&Slice> =
                self.slices.iter().filter(|s| s.param_id == sh.param_id && s.src_rank == sh.peer).collect();
            parts.sort_by_key(|s| s.src_offset);
            let mut next = sh.src_offset;
            for s in &parts {
                if s.src_offset != next || s.length == 0 || s.length > self.slice_size {
                    return Err(Error::invariant(format!(
                        "slices of param {} on peer {} do not tile the shard",
                        sh.param_id, sh.peer
                    )));
                }
                next += s.length;
            }
            if next != sh.src_offset + sh.size {
                return Err(Error::invariant(format!(
                    "param {} on peer {} is not fully covered",
                    sh.param_id, sh.peer
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.slices {
            out.serialize(s)?;
        }
        if self.slices.is_empty() {
            out.write_record(["param_id", "src_rank", "src_offset", "dst_offset", "length"])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-destination queues of the slices `source` must serve, each in plan
/// order.
pub fn source_queues(plans: &[CopyPlan], source: u32) -> BTreeMap<u32, VecDeque<Slice>> {
    let mut out: BTreeMap<u32, VecDeque<Slice>> = BTreeMap::new();
    for plan in plans {
        for s in plan.slices.iter().filter(|s| s.src_rank == source) {
            out.entry(plan.dst_rank).or_default().push_back(*s);
        }
    }
    out
}

/// Service order of a round-robin scheduler that issues at most one slice
/// per non-empty queue per round, destinations in ascending order.
pub fn round_robin_order(mut queues: BTreeMap<u32, VecDeque<Slice>>) -> Vec<(u32, Slice)> {
    let mut out = Vec::new();
    loop {
        let mut any = false;
        for (&dst, q) in queues.iter_mut() {
            if let Some(s) = q.pop_front() {
                out.push((dst, s));
                any = true;
            }
        }
        if !any {
            return out;
        }
    }
}

/// Remote shards rank `dst` pulls for one layer: per parameter, one shard
/// per source peer covering all experts fetched from it.
pub fn layer_shards(plan: &PlacementPlan, model: &MoeModelSpec, dst: usize) -> Vec<Shard> {
    let per_expert = (model.hidden_dim * model.expert_ffn_dim) as f64 * model.weight_bytes_per_param;
    let loads = plan.source_loads(dst);
    let mut out = Vec::new();
    for p in 0..PARAMS_PER_EXPERT {
        for (peer, &count) in loads.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let size = (count as f64 * per_expert).round().max(1.0) as u64;
            out.push(Shard { peer: peer as u32, param_id: p, size, src_offset: 0 });
        }
    }
    out
}
