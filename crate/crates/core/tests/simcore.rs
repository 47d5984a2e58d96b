use dwdp_core::hwmodel::{GpuSpec, InterferenceParams};
use dwdp_core::modelspec::{dep_layer_costs, MoeModelSpec};
use dwdp_core::placement::{build_placement, PlacementPlan};
use dwdp_core::sim::network::{simulate_pulls, Network, PullSpec};
use dwdp_core::sim::{breakdown, simulate_dep, simulate_dwdp, DwdpOptions, EventCategory, RunReport, Stream};
use dwdp_core::workload::{sample_batches, IslDist, RankBatch, RoutingMode, WorkloadSpec};
use proptest::prelude::*;

fn small_model(layers: u32) -> MoeModelSpec {
    MoeModelSpec {
        num_layers: layers,
        hidden_dim: 1024,
        num_experts: 16,
        top_k: 2,
        expert_ffn_dim: 512,
        shared_ffn_dim: 512,
        attn_proj_params: 4_000_000,
        weight_bytes_per_param: 0.5,
        kv_bytes_per_token_per_layer: 576.0,
        activation_bytes: 1.0,
        others_traffic_mult: 10.0,
    }
}

fn batches(model: &MoeModelSpec, ranks: u32, len: u32, iterations: u32) -> Vec<RankBatch> {
    let w = WorkloadSpec {
        isl: IslDist::Fixed { len },
        max_num_tokens: len,
        batch_per_rank: 1,
        routing_skew: 0.0,
        routing: RoutingMode::Expected,
        seed: 5,
    };
    sample_batches(&w, model, ranks, iterations).unwrap()
}

/// Per-layer compute in ns, summed entry by entry from the roofline.
fn layer_ns(model: &MoeModelSpec, gpu: &GpuSpec, b: &RankBatch, r: usize) -> u64 {
    let assignments: u64 = b.routed[r].iter().map(|&c| c as u64).sum();
    let touched = b.routed[r].iter().filter(|&&c| c > 0).count() as u32;
    let work = dep_layer_costs(model, b.tokens(r), b.mean_seq_len(r), assignments, touched).unwrap();
    work.entries()
        .map(|e| {
            let t = (e.flops / gpu.peak_flops).max(e.bytes / gpu.mem_bw) * gpu.efficiency.get(e.category);
            (t * 1e9).round() as u64
        })
        .sum()
}

fn category_total(r: &RunReport, cat: EventCategory) -> u64 {
    r.events.iter().filter(|e| e.category == cat).map(|e| e.duration_ns()).sum()
}

#[test]
fn single_rank_dwdp_matches_compute_and_dep() {
    let model = small_model(3);
    let gpu = GpuSpec::gb200();
    let b = batches(&model, 1, 2048, 3);
    let plan = PlacementPlan::replicated(model.num_experts, 1).unwrap();
    let dwdp = simulate_dwdp(&model, &gpu, &InterferenceParams::default(), &b, &plan, &DwdpOptions::default()).unwrap();
    let dep = simulate_dep(&model, &gpu, &b, 1).unwrap();
    for cat in [EventCategory::P2pCopy, EventCategory::D2dCopy, EventCategory::Communication, EventCategory::SyncWait] {
        assert_eq!(category_total(&dwdp, cat), 0, "dwdp {cat}");
        assert_eq!(category_total(&dep, cat), 0, "dep {cat}");
    }
    for (i, batch) in b.iter().enumerate() {
        let want = model.num_layers as u64 * layer_ns(&model, &gpu, batch, 0);
        let rec = dwdp.iterations.iter().find(|x| x.iteration == i as u32).unwrap();
        assert_eq!(rec.latency_ns(), want, "iteration {i}");
        let dep_rec = dep.iterations.iter().find(|x| x.iteration == i as u32).unwrap();
        assert_eq!(dep_rec.latency_ns(), want);
    }
}

#[test]
fn hidden_prefetch_never_waits() {
    // 8 remote experts per layer: 6.3 MB, about 3.5 us on the link, far
    // below the compute of 4096 tokens.
    let model = small_model(4);
    let gpu = GpuSpec::gb200();
    let b = batches(&model, 2, 4096, 3);
    let plan = build_placement(16, 2, 0).unwrap();
    let r = simulate_dwdp(&model, &gpu, &InterferenceParams::disabled(), &b, &plan, &DwdpOptions::default()).unwrap();
    assert_eq!(category_total(&r, EventCategory::SyncWait), 0);
    for rec in &r.iterations {
        let want = model.num_layers as u64 * layer_ns(&model, &gpu, &b[rec.iteration as usize], rec.rank as usize);
        assert_eq!(rec.latency_ns(), want + d2d_ns(&r, rec.rank, rec.iteration));
    }
}

fn d2d_ns(r: &RunReport, rank: u32, iteration: u32) -> u64 {
    r.events
        .iter()
        .filter(|e| e.rank == rank && e.iteration == iteration && e.category == EventCategory::D2dCopy)
        .map(|e| e.duration_ns())
        .sum()
}

#[test]
fn exposed_prefetch_bounds_latency() {
    let model = MoeModelSpec { num_layers: 4, ..MoeModelSpec::deepseek_r1_like() };
    let gpu = GpuSpec::gb200();
    let b = batches(&model, 4, 16, 4);
    let plan = build_placement(256, 4, 0).unwrap();
    let opts = DwdpOptions { merge_elim: true, ..Default::default() };
    let r = simulate_dwdp(&model, &gpu, &InterferenceParams::disabled(), &b, &plan, &opts).unwrap();
    // 192 remote experts, 3 matrices of 7168 x 2048 at half a byte each.
    let bytes = 192.0 * 3.0 * 7168.0 * 2048.0 * 0.5;
    let t_pref = bytes / gpu.link_bw * 1e9;
    let layers = model.num_layers as f64;
    let compute = layer_ns(&model, &gpu, &b[1], 0) as f64;
    assert!(compute < t_pref);
    for rec in r.iterations.iter().filter(|x| x.iteration >= 1) {
        let lat = rec.latency_ns() as f64;
        assert!(lat >= (layers - 1.0) * t_pref, "latency {lat} below prefetch bound");
        assert!(lat <= layers * (t_pref + compute) * 1.01, "latency {lat} above serial bound");
    }
    assert!(category_total(&r, EventCategory::SyncWait) > 0);
}

#[test]
fn prefetched_bytes_are_conserved() {
    let model = small_model(5);
    let gpu = GpuSpec::gb200();
    for (n, extra) in [(2u32, 0u32), (3, 0), (4, 1), (4, 0)] {
        let b = batches(&model, n, 1024, 3);
        let plan = build_placement(16, n, extra).unwrap();
        let r =
            simulate_dwdp(&model, &gpu, &InterferenceParams::default(), &b, &plan, &DwdpOptions::default()).unwrap();
        let shard = 3 * 1024 * 512 / 2;
        for rank in 0..n {
            let remote = 16 - plan.local_count as u64;
            let total: u64 = r.iterations.iter().filter(|x| x.rank == rank).map(|x| x.p2p_bytes).sum();
            assert_eq!(total, 3 * model.num_layers as u64 * remote * shard, "N={n} extra={extra} rank {rank}");
            let copies = r.events.iter().filter(|e| e.rank == rank && e.category == EventCategory::P2pCopy).count();
            // Layer 0 of the first iteration is loaded before timing starts.
            assert_eq!(copies as u32, 3 * model.num_layers - 1);
            assert!(r
                .events
                .iter()
                .filter(|e| e.rank == rank && e.category == EventCategory::P2pCopy)
                .all(|e| e.stream == Stream::CopyEngine));
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let model = small_model(3);
    let gpu = GpuSpec::gb200();
    let w = WorkloadSpec {
        isl: IslDist::UniformRatio { max: 2048, ratio: 0.3 },
        max_num_tokens: 4096,
        batch_per_rank: 2,
        routing_skew: 0.8,
        routing: RoutingMode::Sampled,
        seed: 17,
    };
    let b = sample_batches(&w, &model, 4, 4).unwrap();
    let plan = build_placement(16, 4, 1).unwrap();
    let run =
        || simulate_dwdp(&model, &gpu, &InterferenceParams::default(), &b, &plan, &DwdpOptions::default()).unwrap();
    assert_eq!(run(), run());
    assert_eq!(simulate_dep(&model, &gpu, &b, 4).unwrap(), simulate_dep(&model, &gpu, &b, 4).unwrap());
}

#[test]
fn interference_only_slows_dwdp() {
    let model = small_model(4);
    let gpu = GpuSpec::gb200();
    let b = batches(&model, 4, 512, 3);
    let plan = build_placement(16, 4, 0).unwrap();
    let opts = DwdpOptions::default();
    let on = simulate_dwdp(&model, &gpu, &InterferenceParams::default(), &b, &plan, &opts).unwrap();
    let off = simulate_dwdp(&model, &gpu, &InterferenceParams::disabled(), &b, &plan, &opts).unwrap();
    // Compare makespans: a slow early iteration can shift prefetch timing so
    // that one later iteration looks shorter, but the run as a whole is not.
    let end = |r: &RunReport| r.iterations.iter().map(|x| x.end_ns).max().unwrap();
    assert!(end(&on) > end(&off));
    let compute = |r: &RunReport| {
        let bd = breakdown(r, 1);
        bd.get(EventCategory::Attention) + bd.get(EventCategory::Others)
    };
    assert!(compute(&on) > compute(&off));
}

#[test]
fn double_buffer_violation_is_impossible_in_normal_runs() {
    // Every prefetch completes before the next one is issued on a rank.
    let model = small_model(6);
    let gpu = GpuSpec::gb200();
    let b = batches(&model, 3, 256, 3);
    let plan = build_placement(16, 3, 0).unwrap();
    let r = simulate_dwdp(&model, &gpu, &InterferenceParams::default(), &b, &plan, &DwdpOptions::default()).unwrap();
    for rank in 0..3 {
        let mut copies: Vec<_> =
            r.events.iter().filter(|e| e.rank == rank && e.category == EventCategory::P2pCopy).collect();
        copies.sort_by_key(|e| e.start_ns);
        assert!(copies.windows(2).all(|w| w[0].end_ns <= w[1].start_ns));
    }
}

const LINK: f64 = 1e9;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fair_rates_are_feasible_and_bottlenecked(
        flows in prop::collection::vec((0u32..5, 0u32..5, 1u64..10_000), 1..14),
        contention in any::<bool>(),
    ) {
        let mut net = Network::new(5, LINK, contention);
        let mut pairs = Vec::new();
        for &(s, d, bytes) in &flows {
            if s != d {
                net.admit(0, s, d, bytes);
                pairs.push((s, d));
            }
        }
        net.rebalance(0);
        let tol = LINK * 1e-9;
        for r in 0..5 {
            prop_assert!(net.ingress_rate(r) <= LINK + tol);
            if contention {
                prop_assert!(net.egress_rate(r) <= LINK + tol);
            }
        }
        // Max-min: every pair is held back by a saturated port.
        for &(s, d) in &pairs {
            let ingress_full = net.ingress_rate(d) >= LINK - tol;
            let egress_full = contention && net.egress_rate(s) >= LINK - tol;
            prop_assert!(ingress_full || egress_full, "pair {s}->{d} has slack on both ports");
        }
    }

    #[test]
    fn uncontended_pull_runs_at_link_rate(
        slices in prop::collection::vec((1u32..4, 1u64..5_000), 1..30),
        depth in 1usize..4,
        start in 0u64..1_000,
    ) {
        let total: u64 = slices.iter().map(|&(_, b)| b).sum();
        let pull = PullSpec { dst: 0, start_ns: start, requests: slices.clone() };
        let done = simulate_pulls(4, LINK, depth, true, &[pull])[0];
        let ideal = start as f64 + total as f64 / LINK * 1e9;
        prop_assert!(done as f64 >= ideal - 1e-6);
        prop_assert!(done as f64 <= ideal + slices.len() as f64 + 1.0);
    }

    #[test]
    fn extra_pulls_never_speed_up_a_rank(
        bg in prop::collection::vec((1u32..5, 1u32..5, 100u64..5_000), 0..6),
    ) {
        let tagged = PullSpec { dst: 0, start_ns: 0, requests: vec![(1, 4000), (2, 4000), (3, 4000)] };
        let alone = simulate_pulls(5, LINK, 2, true, std::slice::from_ref(&tagged))[0];
        let mut all = vec![tagged];
        all.extend(bg.iter().filter(|(s, d, _)| s != d).map(|&(s, d, b)| PullSpec { dst: d, start_ns: 0, requests: vec![(s, b); 3] }));
        let shared = simulate_pulls(5, LINK, 2, true, &all)[0];
        prop_assert!(shared >= alone);
    }
}
