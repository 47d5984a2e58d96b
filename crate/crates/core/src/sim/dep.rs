//! Synchronized data + expert parallel execution: every layer ends its
//! attention block and its MoE block at an all-to-all barrier.

use crate::error::{Error, Result};
use crate::hwmodel::GpuSpec;
use crate::modelspec::{dep_layer_costs, MoeModelSpec};
use crate::workload::RankBatch;

use super::report::{IterationRecord, RunReport};
use super::{to_ns, EventCategory, SimEvent, Stream, WaitKind};

/// Durations of one layer on every rank, in nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DepLayerTiming {
    /// Per rank, the ops before the dispatch all-to-all.
    pub pre: Vec<Vec<(EventCategory, u64)>>,
    pub dispatch_ns: u64,
    /// Per rank, the ops between dispatch and combine.
    pub moe: Vec<Vec<(EventCategory, u64)>>,
    pub combine_ns: u64,
}

#[allow(clippy::too_many_arguments)]
fn push(
    events: &mut Vec<SimEvent>,
    rank: usize,
    cat: EventCategory,
    start: u64,
    end: u64,
    layer: u32,
    it: u32,
    wait: Option<WaitKind>,
) {
    if end > start {
        events.push(SimEvent {
            rank: rank as u32,
            stream: Stream::Compute,
            category: cat,
            start_ns: start,
            end_ns: end,
            layer,
            iteration: it,
            wait,
        });
    }
}

fn segment(events: &mut Vec<SimEvent>, ops: &[Vec<(EventCategory, u64)>], t: u64, layer: u32, it: u32) -> u64 {
    let finish: Vec<u64> = ops
        .iter()
        .enumerate()
        .map(|(r, list)| {
            let mut c = t;
            for &(cat, d) in list {
                push(events, r, cat, c, c + d, layer, it, None);
                c += d;
            }
            c
        })
        .collect();
    let barrier = finish.iter().copied().max().unwrap_or(t);
    for (r, &f) in finish.iter().enumerate() {
        push(events, r, EventCategory::SyncWait, f, barrier, layer, it, Some(WaitKind::Barrier));
    }
    barrier
}

fn collective(events: &mut Vec<SimEvent>, ranks: usize, t: u64, d: u64, layer: u32, it: u32) -> u64 {
    for r in 0..ranks {
        push(events, r, EventCategory::Communication, t, t + d, layer, it, None);
    }
    t + d
}

/// Executes one iteration's layers starting at `start_ns`. Returns the
/// iteration end time, identical on every rank.
pub fn run_dep_schedule(events: &mut Vec<SimEvent>, start_ns: u64, layers: &[DepLayerTiming], iteration: u32) -> u64 {
    let mut t = start_ns;
    for (l, lt) in layers.iter().enumerate() {
        let ranks = lt.pre.len();
        let l = l as u32;
        t = segment(events, &lt.pre, t, l, iteration);
        t = collective(events, ranks, t, lt.dispatch_ns, l, iteration);
        t = segment(events, &lt.moe, t, l, iteration);
        t = collective(events, ranks, t, lt.combine_ns, l, iteration);
    }
    t
}

/// Expert-parallel owner of every expert: contiguous blocks starting at
/// `floor(r·E/N)`.
pub fn ep_owner(num_experts: u32, group_size: u32) -> Vec<u32> {
    let (e, n) = (num_experts as u64, group_size as u64);
    let mut owner = vec![0u32; num_experts as usize];
    for r in 0..n {
        for x in r * e / n..(r + 1) * e / n {
            owner[x as usize] = r as u32;
        }
    }
    owner
}

fn iteration_timing(model: &MoeModelSpec, gpu: &GpuSpec, batch: &RankBatch, owner: &[u32]) -> Result<DepLayerTiming> {
    let n = batch.num_ranks();
    let mut recv = vec![0u64; n];
    let mut touched = vec![0u32; n];
    for x in 0..model.num_experts as usize {
        let total: u64 = batch.routed.iter().map(|r| r[x] as u64).sum();
        recv[owner[x] as usize] += total;
        if total > 0 {
            touched[owner[x] as usize] += 1;
        }
    }
    let width = model.hidden_dim as f64 * model.activation_bytes;
    let mut worst = 0u64;
    let mut pre = Vec::with_capacity(n);
    let mut moe = Vec::with_capacity(n);
    for r in 0..n {
        let tokens = batch.tokens(r);
        worst = worst.max(recv[r]).max(tokens * model.top_k as u64);
        let work = dep_layer_costs(model, tokens, batch.mean_seq_len(r), recv[r], touched[r])?;
        let times = |list: &[crate::modelspec::CostEntry]| -> Result<Vec<(EventCategory, u64)>> {
            list.iter().map(|e| Ok((e.category.into(), to_ns(e.time(gpu)?)))).collect()
        };
        pre.push(times(&work.attn)?);
        moe.push(times(&work.moe)?);
    }
    let a2a = if n > 1 { to_ns(worst as f64 * width / gpu.link_bw) } else { 0 };
    Ok(DepLayerTiming { pre, dispatch_ns: a2a, moe, combine_ns: a2a })
}

/// Simulates DEP over `batches`. Each all-to-all lasts as long as the
/// busiest rank needs to send or receive `tokens·top_k` activations at
/// `link_bw`. Collectives do not overlap compute, so interference does not
/// apply.
pub fn simulate_dep(model: &MoeModelSpec, gpu: &GpuSpec, batches: &[RankBatch], group_size: u32) -> Result<RunReport> {
    model.validate()?;
    gpu.validate()?;
    if group_size == 0 || group_size > model.num_experts {
        return Err(Error::config("strategy.group_size", "must lie in [1, num_experts]"));
    }
    let owner = ep_owner(model.num_experts, group_size);
    let mut events = Vec::new();
    let mut records = Vec::new();
    let mut t = 0;
    for (it, batch) in batches.iter().enumerate() {
        if batch.num_ranks() != group_size as usize {
            return Err(Error::config(
                "workload",
                format!("iteration {it} has {} ranks, expected {group_size}", batch.num_ranks()),
            ));
        }
        let timing = iteration_timing(model, gpu, batch, &owner)?;
        let layers = vec![timing; model.num_layers as usize];
        let end = run_dep_schedule(&mut events, t, &layers, it as u32);
        for r in 0..group_size as usize {
            records.push(IterationRecord {
                rank: r as u32,
                iteration: it as u32,
                start_ns: t,
                end_ns: end,
                tokens: batch.tokens(r),
                p2p_bytes: 0,
            });
        }
        t = end;
    }
    Ok(RunReport::new("dep", group_size, model.num_layers, records, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    const US: u64 = 1000;

    #[test]
    fn two_rank_hand_trace() {
        let layer = DepLayerTiming {
            pre: vec![vec![(EventCategory::Attention, 10 * US)], vec![(EventCategory::Attention, 14 * US)]],
            dispatch_ns: US,
            moe: vec![vec![(EventCategory::GroupedGemm, 5 * US)]; 2],
            combine_ns: US,
        };
        let mut ev = Vec::new();
        let end = run_dep_schedule(&mut ev, 0, &[layer], 0);
        assert_eq!(end, 21 * US);
        let waits: Vec<&SimEvent> = ev.iter().filter(|e| e.category == EventCategory::SyncWait).collect();
        assert_eq!(waits.len(), 1);
        assert_eq!((waits[0].rank, waits[0].start_ns, waits[0].end_ns), (0, 10 * US, 14 * US));
    }

    #[test]
    fn owner_blocks_cover_experts() {
        let o = ep_owner(256, 3);
        assert_eq!(o.iter().filter(|&&r| r == 0).count(), 85);
        assert_eq!(o[255], 2);
        assert!(o.windows(2).all(|w| w[0] <= w[1]));
    }
}
