//! Fluid model of peer-to-peer pulls.
//!
//! Each destination's ingress and, when contention is modeled, each
//! source's copy-engine egress is a port of capacity `link_bw`. Active
//! `(source, destination)` pairs share ports max-min fairly (water-filling)
//! and a pair's rate is split evenly over its in-flight slices. A flow keeps an anchor
//! `(bytes left, anchor time, rate)` that only moves when its rate actually
//! changes, so a flow whose share is unaffected by an unrelated event keeps
//! bit-identical timing.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
struct Flow {
    id: u64,
    src: u32,
    dst: u32,
    left: f64,
    anchor: u64,
    rate: f64,
    finish: u64,
}

#[derive(Debug, Clone)]
pub struct Network {
    link_bw: f64,
    contention: bool,
    ranks: usize,
    flows: Vec<Flow>,
    next_id: u64,
    /// Set when the flow set changed since the last rebalance. Rates depend
    /// on nothing else, so a clean network needs no recomputation.
    dirty: bool,
}

impl Network {
    pub fn new(ranks: usize, link_bw: f64, contention: bool) -> Self {
        Network { link_bw, contention, ranks, flows: Vec::new(), next_id: 0, dirty: false }
    }

    /// Adds a flow. Rates are assigned by the next [`Network::rebalance`].
    pub fn admit(&mut self, now: u64, src: u32, dst: u32, bytes: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.flows.push(Flow { id, src, dst, left: bytes as f64, anchor: now, rate: 0.0, finish: u64::MAX });
        self.dirty = true;
        id
    }

    pub fn is_idle(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn next_finish(&self) -> Option<u64> {
        self.flows.iter().map(|f| f.finish).min()
    }

    /// Removes and returns `(flow id, destination)` of every flow done by `now`.
    pub fn take_finished(&mut self, now: u64) -> Vec<(u64, u32)> {
        let mut done = Vec::new();
        self.flows.retain(|f| {
            if f.finish <= now {
                done.push((f.id, f.dst));
                false
            } else {
                true
            }
        });
        self.dirty |= !done.is_empty();
        done
    }

    pub fn ingress_rate(&self, rank: u32) -> f64 {
        self.flows.iter().filter(|f| f.dst == rank).map(|f| f.rate).sum()
    }

    pub fn egress_rate(&self, rank: u32) -> f64 {
        self.flows.iter().filter(|f| f.src == rank).map(|f| f.rate).sum()
    }

    /// Number of distinct destinations pulling from `src`.
    pub fn contention_degree(&self, src: u32) -> usize {
        let mut d: Vec<u32> = self.flows.iter().filter(|f| f.src == src).map(|f| f.dst).collect();
        d.sort_unstable();
        d.dedup();
        d.len()
    }

    /// Recomputes max-min fair rates at time `now`.
    pub fn rebalance(&mut self, now: u64) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let rates = self.fair_rates();
        for (f, rate) in self.flows.iter_mut().zip(rates) {
            if f.rate.to_bits() == rate.to_bits() {
                continue;
            }
            if f.rate > 0.0 {
                let elapsed = (now - f.anchor) as f64 * 1e-9;
                f.left = (f.left - f.rate * elapsed).max(0.0);
            }
            f.anchor = now;
            f.rate = rate;
            f.finish = now + (f.left / rate * 1e9).ceil() as u64;
        }
    }

    /// Water-fills over `(source, destination)` pairs, then splits each
    /// pair's rate evenly over its in-flight slices. A source therefore
    /// serves destinations, not slices, fairly, as round-robin over
    /// per-destination queues does.
    fn fair_rates(&self) -> Vec<f64> {
        let n = self.ranks;
        // Few flows are ever active, so a linear scan beats a map here.
        let mut keys: Vec<(u32, u32)> = Vec::new();
        let mut slices: Vec<usize> = Vec::new();
        let flow_pair: Vec<usize> = self
            .flows
            .iter()
            .map(|f| match keys.iter().position(|&k| k == (f.src, f.dst)) {
                Some(i) => {
                    slices[i] += 1;
                    i
                }
                None => {
                    keys.push((f.src, f.dst));
                    slices.push(1);
                    keys.len() - 1
                }
            })
            .collect();
        // Ports 0..n are ingress, n..2n egress.
        let ports = if self.contention { 2 * n } else { n };
        let mut rem = vec![self.link_bw; ports];
        let mut count = vec![0usize; ports];
        let port_of = |&(src, dst): &(u32, u32)| -> (usize, Option<usize>) {
            (dst as usize, self.contention.then_some(n + src as usize))
        };
        for k in &keys {
            let (a, b) = port_of(k);
            count[a] += 1;
            if let Some(b) = b {
                count[b] += 1;
            }
        }
        let mut pair_rate = vec![0.0; keys.len()];
        let mut frozen = vec![false; keys.len()];
        let mut floor = 0.0f64;
        loop {
            let mut best: Option<(usize, f64)> = None;
            for p in 0..ports {
                if count[p] == 0 {
                    continue;
                }
                let share = rem[p] / count[p] as f64;
                if best.is_none_or(|(_, s)| share < s) {
                    best = Some((p, share));
                }
            }
            let Some((port, share)) = best else { break };
            let share = share.max(floor);
            floor = share;
            for (i, k) in keys.iter().enumerate() {
                if frozen[i] {
                    continue;
                }
                let (a, b) = port_of(k);
                if a != port && b != Some(port) {
                    continue;
                }
                frozen[i] = true;
                pair_rate[i] = share;
                rem[a] -= share;
                count[a] -= 1;
                if let Some(b) = b {
                    rem[b] -= share;
                    count[b] -= 1;
                }
            }
        }
        flow_pair.iter().map(|&i| pair_rate[i] / slices[i] as f64).collect()
    }
}

/// Per-destination slice queues with a bounded number of slices in flight.
#[derive(Debug, Clone)]
pub struct Pipelines {
    depth: usize,
    queues: Vec<VecDeque<(u32, u64)>>,
    inflight: Vec<usize>,
}

impl Pipelines {
    pub fn new(ranks: usize) -> Self {
        Pipelines { depth: 1, queues: vec![VecDeque::new(); ranks], inflight: vec![0; ranks] }
    }

    pub fn with_depth(ranks: usize, depth: usize) -> Self {
        Pipelines { depth: depth.max(1), ..Pipelines::new(ranks) }
    }

    pub fn is_busy(&self, dst: u32) -> bool {
        self.inflight[dst as usize] > 0 || !self.queues[dst as usize].is_empty()
    }

    /// Queues `(source, bytes)` requests for `dst` and admits up to the depth.
    pub fn start(&mut self, net: &mut Network, now: u64, dst: u32, requests: impl IntoIterator<Item = (u32, u64)>) {
        self.queues[dst as usize].extend(requests);
        self.fill(net, now, dst);
    }

    fn fill(&mut self, net: &mut Network, now: u64, dst: u32) {
        let d = dst as usize;
        while self.inflight[d] < self.depth {
            let Some((src, bytes)) = self.queues[d].pop_front() else { break };
            net.admit(now, src, dst, bytes);
            self.inflight[d] += 1;
        }
    }

    /// Retires finished flows, refills pipelines and rebalances until no
    /// flow is due at `now`. Returns destinations whose queues drained.
    pub fn settle(&mut self, net: &mut Network, now: u64) -> Vec<u32> {
        let mut drained = Vec::new();
        loop {
            let done = net.take_finished(now);
            if done.is_empty() {
                break;
            }
            let mut touched: Vec<u32> = done.iter().map(|&(_, d)| d).collect();
            for &(_, d) in &done {
                self.inflight[d as usize] -= 1;
            }
            touched.sort_unstable();
            touched.dedup();
            for d in touched {
                self.fill(net, now, d);
                if !self.is_busy(d) {
                    drained.push(d);
                }
            }
            net.rebalance(now);
        }
        drained
    }
}

/// One destination's pull: requests issued at `start_ns`.
#[derive(Debug, Clone, PartialEq)]
pub struct PullSpec {
    pub dst: u32,
    pub start_ns: u64,
    pub requests: Vec<(u32, u64)>,
}

/// Runs a set of pulls to completion in isolation and returns, per pull,
/// the time its last request retired.
pub fn simulate_pulls(ranks: usize, link_bw: f64, depth: usize, contention: bool, pulls: &[PullSpec]) -> Vec<u64> {
    let mut net = Network::new(ranks, link_bw, contention);
    let mut pipes = Pipelines::with_depth(ranks, depth);
    let mut order: Vec<usize> = (0..pulls.len()).collect();
    order.sort_by_key(|&i| (pulls[i].start_ns, i));
    let mut done = vec![u64::MAX; pulls.len()];
    let mut next = 0;
    let mut now = 0;
    loop {
        for d in pipes.settle(&mut net, now) {
            for (i, p) in pulls.iter().enumerate() {
                if p.dst == d && done[i] == u64::MAX && p.start_ns <= now {
                    done[i] = now;
                }
            }
        }
        while next < order.len() && pulls[order[next]].start_ns <= now {
            let p = &pulls[order[next]];
            if p.requests.is_empty() {
                done[order[next]] = now;
            }
            pipes.start(&mut net, now, p.dst, p.requests.iter().copied());
            next += 1;
        }
        net.rebalance(now);
        let t_net = net.next_finish();
        let t_start = order.get(next).map(|&i| pulls[i].start_ns);
        now = match (t_net, t_start) {
            (None, None) => break,
            (a, b) => a.unwrap_or(u64::MAX).min(b.unwrap_or(u64::MAX)),
        };
    }
    done
}
