use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dwdp_core::contention::{contention_mc, contention_table};
use dwdp_core::hwmodel::GpuSpec;
use dwdp_core::modelspec::MoeModelSpec;
use dwdp_core::par::{map_slice, Exec};
use dwdp_core::placement::build_placement;
use dwdp_core::sim::simulate_dep;
use dwdp_core::workload::{sample_batches, uniform_ratio_for_cv, IslDist, RoutingMode, WorkloadSpec};

const PATHS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("contention_mc_n8_1m");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| contention_mc(black_box(8), 1_000_000, 42, exec).unwrap())
        });
    }
    g.finish();
}

fn contention_sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("contention_table_6_sizes");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| contention_table(black_box(&[3, 4, 6, 8, 12, 16]), 200_000, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn cv_sweep(c: &mut Criterion) {
    let model = MoeModelSpec { num_layers: 8, ..MoeModelSpec::deepseek_r1_like() };
    let gpu = GpuSpec::gb200();
    let cvs = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];
    let mut g = c.benchmark_group("dep_cv_sweep");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_slice(exec, &cvs, |&cv| {
                    let w = WorkloadSpec {
                        isl: IslDist::UniformRatio { max: 8192, ratio: uniform_ratio_for_cv(cv).unwrap() },
                        max_num_tokens: 32768,
                        batch_per_rank: 1,
                        routing_skew: 0.0,
                        routing: RoutingMode::Expected,
                        seed: 1,
                    };
                    let batches = sample_batches(&w, &model, 4, 20).unwrap();
                    simulate_dep(&model, &gpu, &batches, 4).unwrap().mean_latency(2)
                })
            })
        });
    }
    g.finish();
}

fn placement_grid(c: &mut Criterion) {
    let grid: Vec<(u32, u32)> = (2..=16).flat_map(|n| (n..=512).step_by(7).map(move |e| (e, n))).collect();
    let mut g = c.benchmark_group("placement_grid");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_slice(exec, &grid, |&(e, n)| build_placement(e, n, 1).unwrap().redundancy))
        });
    }
    g.finish();
}

criterion_group!(benches, monte_carlo, contention_sweep, cv_sweep, placement_grid);
criterion_main!(benches);
