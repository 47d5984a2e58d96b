//! Asynchronous DWDP execution. Every rank runs its own batch; the missing
//! experts of layer `g + 1` are pulled from peers while MoE(`g`) and
//! Attention(`g + 1`) run, into a second weight buffer.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::copyplan::{build_copy_plan, layer_shards};
use crate::error::{Error, Result};
use crate::hwmodel::{mem_slowdown_factor, overlap_power, power_throttle_factor, GpuSpec, InterferenceParams};
use crate::modelspec::{dep_layer_costs, CostEntry, MoeModelSpec};
use crate::placement::PlacementPlan;
use crate::workload::RankBatch;

use super::network::{Network, Pipelines};
use super::report::{IterationRecord, RunReport};
use super::{to_ns, DwdpOptions, EventCategory, SimEvent, Stream, WaitKind};

#[derive(Debug, Clone, Copy)]
enum Step {
    Op(CostEntry),
    WaitWeights,
    IssuePrefetch,
    Merge,
}

fn steps_for(model: &MoeModelSpec, batch: &RankBatch, rank: usize) -> Result<Vec<Step>> {
    let tokens = batch.tokens(rank);
    let routed = &batch.routed[rank];
    let assignments: u64 = routed.iter().map(|&c| c as u64).sum();
    let touched = routed.iter().filter(|&&c| c > 0).count() as u32;
    let work = dep_layer_costs(model, tokens, batch.mean_seq_len(rank), assignments, touched)?;
    let mut steps: Vec<Step> = work.attn.iter().map(|e| Step::Op(*e)).collect();
    steps.extend([Step::WaitWeights, Step::IssuePrefetch, Step::Merge]);
    steps.extend(work.moe.iter().map(|e| Step::Op(*e)));
    Ok(steps)
}

/// Heap key: time, then rank (network ticks sort after every rank), then
/// stream, then insertion order. `gen` tags network ticks.
type Key = Reverse<(u64, u32, u8, u64, u64)>;
const NET: u32 = u32::MAX;

#[derive(Debug, Default)]
struct RankState {
    iteration: u32,
    layer: u32,
    step: usize,
    /// Global layers `0..ready` have their weights resident.
    ready: u64,
    pending: Option<(u64, u64)>,
    waiting_since: Option<u64>,
    iter_start: u64,
    done: bool,
}

struct Engine<'a> {
    model: &'a MoeModelSpec,
    gpu: &'a GpuSpec,
    interference: &'a InterferenceParams,
    batches: &'a [RankBatch],
    opts: DwdpOptions,
    requests: Vec<Vec<(u32, u64)>>,
    layer_bytes: Vec<u64>,
    steps: Vec<Vec<Vec<Step>>>,
    ranks: Vec<RankState>,
    net: Network,
    pipes: Pipelines,
    heap: BinaryHeap<Key>,
    seq: u64,
    net_gen: u64,
    events: Vec<SimEvent>,
    records: Vec<IterationRecord>,
    p2p: Vec<Vec<u64>>,
}

impl Engine<'_> {
    fn total_layers(&self) -> u64 {
        self.batches.len() as u64 * self.model.num_layers as u64
    }

    fn schedule(&mut self, t: u64, rank: u32, stream: u8, gen: u64) {
        self.seq += 1;
        self.heap.push(Reverse((t, rank, stream, self.seq, gen)));
    }

    fn reschedule_network(&mut self, now: u64) {
        self.net.rebalance(now);
        self.net_gen += 1;
        if let Some(t) = self.net.next_finish() {
            self.schedule(t.max(now), NET, 1, self.net_gen);
        }
    }

    fn record(
        &mut self,
        rank: usize,
        stream: Stream,
        cat: EventCategory,
        start: u64,
        end: u64,
        wait: Option<WaitKind>,
    ) {
        let st = &self.ranks[rank];
        self.events.push(SimEvent {
            rank: rank as u32,
            stream,
            category: cat,
            start_ns: start,
            end_ns: end,
            layer: st.layer,
            iteration: st.iteration,
            wait,
        });
    }

    fn op_ns(&self, rank: usize, e: &CostEntry) -> Result<u64> {
        let mut compute = e.flops / self.gpu.peak_flops;
        let mut memory = e.bytes / self.gpu.mem_bw;
        let p = self.interference;
        if p.any_on() {
            let traffic = self.net.ingress_rate(rank as u32) + self.net.egress_rate(rank as u32);
            if traffic > 0.0 {
                if p.mem_interference_on {
                    memory *= mem_slowdown_factor(traffic, self.gpu);
                }
                if p.power_interference_on {
                    let f = power_throttle_factor(overlap_power(e.category, p, self.gpu)?, p);
                    compute /= f;
                    memory /= f;
                }
            }
        }
        Ok(to_ns(compute.max(memory) * self.gpu.efficiency.get(e.category)))
    }

    fn advance(&mut self, r: usize, now: u64) -> Result<()> {
        loop {
            if self.ranks[r].done {
                return Ok(());
            }
            let it = self.ranks[r].iteration as usize;
            let Some(step) = self.steps[r][it].get(self.ranks[r].step).copied() else {
                self.finish_layer(r, now);
                continue;
            };
            let g = it as u64 * self.model.num_layers as u64 + self.ranks[r].layer as u64;
            match step {
                Step::Op(e) => {
                    self.ranks[r].step += 1;
                    let d = self.op_ns(r, &e)?;
                    if d > 0 {
                        self.record(r, Stream::Compute, e.category.into(), now, now + d, None);
                        self.schedule(now + d, r as u32, 0, 0);
                        return Ok(());
                    }
                }
                Step::WaitWeights => {
                    if self.ranks[r].ready <= g {
                        self.ranks[r].waiting_since.get_or_insert(now);
                        return Ok(());
                    }
                    if let Some(t0) = self.ranks[r].waiting_since.take() {
                        if now > t0 {
                            self.record(r, Stream::Compute, EventCategory::SyncWait, t0, now, Some(WaitKind::Weight));
                        }
                    }
                    self.ranks[r].step += 1;
                }
                Step::IssuePrefetch => {
                    self.ranks[r].step += 1;
                    let next = g + 1;
                    if next < self.total_layers() {
                        let st = &self.ranks[r];
                        if st.pending.is_some() || st.ready != next {
                            return Err(Error::invariant(format!(
                                "rank {r}: prefetch of layer {next} would exceed two weight buffers (ready {}, pending {:?})",
                                st.ready, st.pending
                            )));
                        }
                        if self.requests[r].is_empty() {
                            self.ranks[r].ready += 1;
                        } else {
                            self.ranks[r].pending = Some((next, now));
                            let reqs = self.requests[r].clone();
                            self.pipes.start(&mut self.net, now, r as u32, reqs);
                            self.reschedule_network(now);
                        }
                    }
                }
                Step::Merge => {
                    self.ranks[r].step += 1;
                    if !self.opts.merge_elim && self.layer_bytes[r] > 0 {
                        let d = to_ns(self.layer_bytes[r] as f64 / self.gpu.mem_bw);
                        if d > 0 {
                            self.record(r, Stream::Compute, EventCategory::D2dCopy, now, now + d, None);
                            self.schedule(now + d, r as u32, 0, 0);
                            return Ok(());
                        }
                    }
                }
            }
        }
    }

    fn finish_layer(&mut self, r: usize, now: u64) {
        let layers = self.model.num_layers;
        let st = &mut self.ranks[r];
        st.step = 0;
        st.layer += 1;
        if st.layer < layers {
            return;
        }
        let it = st.iteration;
        self.records.push(IterationRecord {
            rank: r as u32,
            iteration: it,
            start_ns: st.iter_start,
            end_ns: now,
            tokens: self.batches[it as usize].tokens(r),
            p2p_bytes: 0,
        });
        st.layer = 0;
        st.iteration += 1;
        st.iter_start = now;
        if st.iteration as usize == self.batches.len() {
            st.done = true;
        }
    }

    fn network_tick(&mut self, now: u64) {
        let drained = self.pipes.settle(&mut self.net, now);
        for d in drained {
            let r = d as usize;
            let Some((g, issued)) = self.ranks[r].pending.take() else { continue };
            self.ranks[r].ready += 1;
            let layers = self.model.num_layers as u64;
            self.p2p[r][(g / layers) as usize] += self.layer_bytes[r];
            self.events.push(SimEvent {
                rank: d,
                stream: Stream::CopyEngine,
                category: EventCategory::P2pCopy,
                start_ns: issued,
                end_ns: now,
                layer: (g % layers) as u32,
                iteration: (g / layers) as u32,
                wait: None,
            });
            if self.ranks[r].waiting_since.is_some() {
                self.schedule(now, d, 0, 0);
            }
        }
        self.reschedule_network(now);
    }
}

/// Simulates DWDP over `batches` with the given expert placement.
pub fn simulate_dwdp(
    model: &MoeModelSpec,
    gpu: &GpuSpec,
    interference: &InterferenceParams,
    batches: &[RankBatch],
    placement: &PlacementPlan,
    opts: &DwdpOptions,
) -> Result<RunReport> {
    model.validate()?;
    gpu.validate()?;
    interference.validate()?;
    opts.validate()?;
    placement.validate()?;
    let n = placement.group_size as usize;
    if placement.num_experts != model.num_experts {
        return Err(Error::config("strategy", "placement expert count differs from the model"));
    }
    for (it, b) in batches.iter().enumerate() {
        if b.num_ranks() != n {
            return Err(Error::config("workload", format!("iteration {it} has {} ranks, expected {n}", b.num_ranks())));
        }
    }
    let slice = if opts.tdm { opts.slice_size } else { u64::MAX };
    let depth = if opts.tdm { gpu.ce_inflight as usize } else { 1 };
    let mut requests = Vec::with_capacity(n);
    let mut layer_bytes = Vec::with_capacity(n);
    for r in 0..n {
        let plan = build_copy_plan(r as u32, &layer_shards(placement, model, r), slice)?;
        layer_bytes.push(plan.total_bytes());
        requests.push(plan.slices.iter().map(|s| (s.src_rank, s.length)).collect::<Vec<_>>());
    }
    let steps = (0..n)
        .map(|r| batches.iter().map(|b| steps_for(model, b, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut p2p = vec![vec![0u64; batches.len()]; n];
    let mut ranks: Vec<RankState> = (0..n).map(|_| RankState { ready: 1, ..Default::default() }).collect();
    for r in 0..n {
        // Layer 0 is loaded during an untimed warmup epoch.
        if let Some(first) = p2p[r].first_mut() {
            *first += layer_bytes[r];
        }
        ranks[r].done = batches.is_empty();
    }
    let mut eng = Engine {
        model,
        gpu,
        interference,
        batches,
        opts: *opts,
        requests,
        layer_bytes,
        steps,
        ranks,
        net: Network::new(n, gpu.link_bw, opts.contention),
        pipes: Pipelines::with_depth(n, depth),
        heap: BinaryHeap::new(),
        seq: 0,
        net_gen: 0,
        events: Vec::new(),
        records: Vec::new(),
        p2p,
    };
    for r in 0..n {
        eng.schedule(0, r as u32, 0, 0);
    }
    while let Some(Reverse((now, rank, _, _, gen))) = eng.heap.pop() {
        if rank == NET {
            if gen == eng.net_gen {
                eng.network_tick(now);
            }
        } else {
            eng.advance(rank as usize, now)?;
        }
    }
    if let Some(r) = eng.ranks.iter().position(|s| !s.done) {
        return Err(Error::invariant(format!("rank {r} stalled before finishing its iterations")));
    }
    let mut records = eng.records;
    records.sort_by_key(|rec| (rec.iteration, rec.rank));
    for rec in &mut records {
        rec.p2p_bytes = eng.p2p[rec.rank as usize][rec.iteration as usize];
    }
    let mut events = eng.events;
    events.sort_by_key(|e| (e.rank, e.stream, e.start_ns, e.end_ns));
    Ok(RunReport::new("dwdp", n as u32, model.num_layers, records, events))
}
