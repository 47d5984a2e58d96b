//! Command implementations behind the `dwdp` binary. Every command writes
//! into a fresh directory `<out>/<command>-<config hash prefix>` and refuses
//! to reuse an existing one.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use dwdp_core::config::{execute, load, placement_for, ExperimentConfig, RunBlock, Strategy, SweepAxis};
use dwdp_core::contention::contention_table;
use dwdp_core::copyplan::{build_copy_plan, layer_shards};
use dwdp_core::par::{map_slice, Exec};
use dwdp_core::sim::trace::write_chrome_trace;
use dwdp_core::sim::{analytic_compare, breakdown, compare_reports, EventCategory, RunReport};
use dwdp_core::workload::{write_batches_csv, IslDist, RankBatch};
use dwdp_core::{Error, PlacementPlan, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Options shared by all commands.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: Format,
}

/// Loads the config named by `--config` and applies `--seed`.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path =
        common.config.as_deref().ok_or_else(|| Error::config("--config", "this command needs a configuration file"))?;
    let mut cfg = load(path)?;
    if let Some(seed) = common.seed {
        cfg.workload.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the write-once output directory for one invocation.
pub fn run_dir(out: &Path, command: &str, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let dir = out.join(format!("{command}-{}", &hash[..12]));
    fs::create_dir(&dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::AlreadyExists => {
            Error::config("--out", format!("{} already exists; outputs are never overwritten", dir.display()))
        }
        _ => Error::Io(e),
    })?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::options().write(true).create_new(true).open(path)?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(path, &rows),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(create(path)?);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn write_manifest(dir: &Path, command: &str, hash: &str, files: &[String]) -> Result<()> {
    write_json(&dir.join("manifest.json"), &json!({ "command": command, "config_hash": hash, "files": files }))
}

fn base_isl(cfg: &ExperimentConfig) -> f64 {
    match cfg.workload.isl {
        IslDist::Fixed { len } => len as f64,
        IslDist::UniformRatio { max, .. } => max as f64,
        IslDist::Normal { mean, .. } => mean,
    }
}

/// First DWDP run block, or DWDP4 without extra redundancy.
fn dwdp_strategy(cfg: &ExperimentConfig) -> Strategy {
    cfg.runs
        .iter()
        .map(|r| &r.strategy)
        .find(|s| matches!(s, Strategy::Dwdp { .. }))
        .cloned()
        .unwrap_or(Strategy::Dwdp { group_size: 4, extra_redundancy: 0, options: Default::default() })
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticRow {
    pub axis: &'static str,
    pub value: f64,
    pub tokens: u64,
    pub t_compute_us: f64,
    pub t_prefetch_us: f64,
    pub t_all2all_us: f64,
    pub ratio: f64,
    pub speedup: f64,
}

/// Evaluates the per-layer roofline comparison at every sweep value.
pub fn analytic_rows(cfg: &ExperimentConfig) -> Result<Vec<AnalyticRow>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::config("sweep", "analytic needs a [sweep] section"))?;
    if !matches!(sweep.axis, SweepAxis::Isl | SweepAxis::GroupSize) {
        return Err(Error::config(
            "sweep.axis",
            format!("analytic cannot sweep {}; valid axes: isl, group_size", sweep.axis.as_str()),
        ));
    }
    sweep
        .values
        .iter()
        .map(|&v| {
            let (isl, strategy) = match sweep.axis {
                SweepAxis::Isl => (v, dwdp_strategy(cfg)),
                _ => {
                    let Strategy::Dwdp { extra_redundancy, options, .. } = dwdp_strategy(cfg) else { unreachable!() };
                    (base_isl(cfg), Strategy::Dwdp { group_size: v as u32, extra_redundancy, options })
                }
            };
            let plan = placement_for(&cfg.model, &strategy)?;
            let tokens = cfg.analytic.batch as u64 * isl.round() as u64;
            let r = analytic_compare(&cfg.model, &cfg.gpu, &plan, tokens, isl)?;
            Ok(AnalyticRow {
                axis: sweep.axis.as_str(),
                value: v,
                tokens,
                t_compute_us: r.t_compute * 1e6,
                t_prefetch_us: r.t_prefetch * 1e6,
                t_all2all_us: r.t_all2all * 1e6,
                ratio: r.ratio,
                speedup: r.speedup,
            })
        })
        .collect()
}

pub fn cmd_analytic(common: &Common, stdout: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let rows = analytic_rows(&cfg)?;
    let hash = cfg.hash();
    let dir = run_dir(&common.out, "analytic", &hash)?;
    let name = format!("analytic.{}", common.format.ext());
    write_rows(&dir.join(&name), &rows, common.format)?;
    write_manifest(&dir, "analytic", &hash, &[name])?;
    writeln!(
        stdout,
        "{:>10} {:>10} {:>12} {:>12} {:>8} {:>8}",
        rows[0].axis, "tokens", "compute_us", "prefetch_us", "ratio", "speedup"
    )?;
    for r in &rows {
        writeln!(
            stdout,
            "{:>10} {:>10} {:>12.1} {:>12.1} {:>8.3} {:>8.3}",
            r.value, r.tokens, r.t_compute_us, r.t_prefetch_us, r.ratio, r.speedup
        )?;
    }
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub point: String,
    pub run: String,
    pub strategy: &'static str,
    pub group_size: u32,
    pub latency_us: f64,
    pub tps_per_gpu: f64,
    pub sync_share: f64,
    pub communication_share: f64,
}

/// Results of every run block at one sweep point.
pub struct PointResult {
    pub label: String,
    pub batches: Vec<(u32, Vec<RankBatch>)>,
    pub reports: Vec<(RunBlock, RunReport)>,
}

/// Runs every run block of `cfg`. Blocks with equal group size share the
/// same batches so paired comparisons see identical work.
pub fn simulate_point(cfg: &ExperimentConfig, label: String) -> Result<PointResult> {
    if cfg.runs.is_empty() {
        return Err(Error::config("run", "simulate needs at least one [[run]] block"));
    }
    let mut batches: Vec<(u32, Vec<RankBatch>)> = Vec::new();
    let mut reports = Vec::new();
    for run in &cfg.runs {
        let g = run.strategy.group_size();
        if !batches.iter().any(|(n, _)| *n == g) {
            batches.push((g, cfg.batches(g)?));
        }
        let b = &batches.iter().find(|(n, _)| *n == g).expect("inserted above").1;
        let mut report = execute(cfg, &run.strategy, b)?;
        report.config = json!({ "hash": cfg.hash(), "point": label, "run": run.name, "strategy": run.strategy });
        reports.push((run.clone(), report));
    }
    Ok(PointResult { label, batches, reports })
}

fn write_point(
    dir: &Path,
    cfg: &ExperimentConfig,
    point: &PointResult,
    format: Format,
    files: &mut Vec<String>,
) -> Result<Vec<SummaryRow>> {
    let warmup = cfg.simulation.warmup;
    let prefix = if point.label.is_empty() { String::new() } else { format!("{}_", point.label) };
    let mut emit = |name: String| {
        let p = dir.join(&name);
        files.push(name);
        p
    };
    if cfg.simulation.replay.is_none() {
        for (g, b) in &point.batches {
            write_batches_csv(b, create(&emit(format!("{prefix}batches_g{g}.csv")))?)?;
        }
    }
    let mut rows = Vec::new();
    for (run, report) in &point.reports {
        let stem = format!("{prefix}{}", run.name);
        report.write_json(create(&emit(format!("{stem}.report.json")))?)?;
        write_chrome_trace(report, create(&emit(format!("{stem}.trace.json")))?)?;
        let bd = breakdown(report, warmup);
        let path = emit(format!("{stem}.breakdown.{}", format.ext()));
        match format {
            Format::Csv => bd.write_csv(create(&path)?)?,
            Format::Json => write_json(&path, &bd)?,
        }
        rows.push(SummaryRow {
            point: point.label.clone(),
            run: run.name.clone(),
            strategy: run.strategy.kind(),
            group_size: report.group_size,
            latency_us: report.mean_latency(warmup) * 1e6,
            tps_per_gpu: report.throughput_per_gpu(warmup),
            sync_share: bd.share(EventCategory::SyncWait),
            communication_share: bd.share(EventCategory::Communication),
        });
    }
    // The first run is the baseline for every other one.
    if let Some(((base_run, base), rest)) = point.reports.split_first() {
        for (run, report) in rest {
            let c = compare_reports(base, report, warmup)?;
            let path = emit(format!("{prefix}compare_{}_vs_{}.{}", base_run.name, run.name, format.ext()));
            match format {
                Format::Csv => c.write_csv(create(&path)?)?,
                Format::Json => write_json(&path, &c)?,
            }
        }
    }
    Ok(rows)
}

pub fn cmd_simulate(common: &Common, stdout: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let points: Vec<(String, ExperimentConfig)> = match &cfg.sweep {
        None => vec![(String::new(), cfg.clone())],
        Some(s) => s
            .values
            .iter()
            .map(|&v| Ok((format!("{}={v}", s.axis.as_str()), cfg.with_axis(s.axis, v)?)))
            .collect::<Result<_>>()?,
    };
    let results = map_slice(Exec::Parallel, &points, |(label, c)| simulate_point(c, label.clone()));
    let results: Vec<PointResult> = results.into_iter().collect::<Result<_>>()?;
    let hash = cfg.hash();
    let dir = run_dir(&common.out, "simulate", &hash)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (r, (_, c)) in results.iter().zip(&points) {
        summary.extend(write_point(&dir, c, r, common.format, &mut files)?);
    }
    let name = format!("summary.{}", common.format.ext());
    write_rows(&dir.join(&name), &summary, common.format)?;
    files.push(name);
    write_manifest(&dir, "simulate", &hash, &files)?;
    writeln!(
        stdout,
        "{:<16} {:<12} {:>14} {:>12} {:>8} {:>8}",
        "point", "run", "latency_us", "tps/gpu", "sync%", "comm%"
    )?;
    for s in &summary {
        writeln!(
            stdout,
            "{:<16} {:<12} {:>14.1} {:>12.0} {:>8.2} {:>8.2}",
            if s.point.is_empty() { "-" } else { &s.point },
            s.run,
            s.latency_us,
            s.tps_per_gpu,
            100.0 * s.sync_share,
            100.0 * s.communication_share
        )?;
    }
    Ok(dir)
}

pub fn cmd_contention(common: &Common, sizes: &[u32], rounds: u64, stdout: &mut dyn Write) -> Result<PathBuf> {
    if sizes.is_empty() {
        return Err(Error::config("--sizes", "give at least one group size"));
    }
    let seed = common.seed.unwrap_or(0);
    let rows = contention_table(sizes, rounds, seed, Exec::Parallel)?;
    let key = format!("contention sizes={sizes:?} rounds={rounds} seed={seed}");
    let hash = stable_hash(&key);
    let dir = run_dir(&common.out, "contention", &hash)?;
    let name = format!("contention.{}", common.format.ext());
    write_rows(&dir.join(&name), &rows, common.format)?;
    write_manifest(&dir, "contention", &hash, &[name])?;
    writeln!(stdout, "{:>4} {:>3} {:>14} {:>14} {:>10}", "N", "C", "closed_form_%", "monte_carlo_%", "abs_err")?;
    for r in &rows {
        writeln!(
            stdout,
            "{:>4} {:>3} {:>14.6e} {:>14.6e} {:>10.2e}",
            r.group_size, r.degree, r.closed_form_pct, r.monte_carlo_pct, r.abs_err_pct
        )?;
    }
    Ok(dir)
}

/// FNV-1a, hex. Names output directories for commands without a config file.
fn stable_hash(s: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Serialize)]
struct PlacementRow {
    rank: u32,
    kind: &'static str,
    expert: u32,
    source: Option<u32>,
}

fn plans(cfg: &ExperimentConfig) -> Result<Vec<(String, PlacementPlan, Strategy)>> {
    let mut out = Vec::new();
    for run in cfg.runs.iter().filter(|r| matches!(r.strategy, Strategy::Dwdp { .. })) {
        out.push((run.name.clone(), placement_for(&cfg.model, &run.strategy)?, run.strategy.clone()));
    }
    if out.is_empty() {
        let s = dwdp_strategy(cfg);
        out.push(("dwdp".into(), placement_for(&cfg.model, &s)?, s));
    }
    Ok(out)
}

pub fn cmd_placement(common: &Common, stdout: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let plans = plans(&cfg)?;
    let hash = cfg.hash();
    let dir = run_dir(&common.out, "placement", &hash)?;
    let mut files = Vec::new();
    for (name, plan, _) in &plans {
        let file = format!("placement_{name}.{}", common.format.ext());
        match common.format {
            Format::Json => write_json(&dir.join(&file), plan)?,
            Format::Csv => {
                let mut rows = Vec::new();
                for r in 0..plan.group_size as usize {
                    rows.extend(plan.local_sets[r].iter().map(|&e| PlacementRow {
                        rank: r as u32,
                        kind: "local",
                        expert: e,
                        source: None,
                    }));
                    rows.extend(plan.fetch_lists[r].iter().map(|&(e, s)| PlacementRow {
                        rank: r as u32,
                        kind: "fetch",
                        expert: e,
                        source: Some(s),
                    }));
                }
                write_rows(&dir.join(&file), &rows, Format::Csv)?;
            }
        }
        files.push(file);
        writeln!(stdout, "# {name}: local_count {} redundancy {}", plan.local_count, plan.redundancy)?;
        write!(stdout, "{}", plan.to_text())?;
    }
    write_manifest(&dir, "placement", &hash, &files)?;
    Ok(dir)
}

pub fn cmd_plan(common: &Common, rank: u32, stdout: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let plans = plans(&cfg)?;
    let hash = cfg.hash();
    let dir = run_dir(&common.out, "plan", &hash)?;
    let mut files = Vec::new();
    for (name, plan, strategy) in &plans {
        if rank >= plan.group_size {
            return Err(Error::config("--rank", format!("rank {rank} outside group of {}", plan.group_size)));
        }
        let Strategy::Dwdp { options, .. } = strategy else { unreachable!("plans only holds DWDP runs") };
        let shards = layer_shards(plan, &cfg.model, rank as usize);
        if shards.is_empty() {
            writeln!(stdout, "# {name}: rank {rank} holds every expert, nothing to copy")?;
            continue;
        }
        let cp = build_copy_plan(rank, &shards, options.slice_size)?;
        cp.validate(&shards)?;
        let file = format!("copy_plan_{name}_rank{rank}.{}", common.format.ext());
        match common.format {
            Format::Csv => cp.write_csv(create(&dir.join(&file))?)?,
            Format::Json => write_json(&dir.join(&file), &cp)?,
        }
        files.push(file);
        writeln!(
            stdout,
            "# {name}: rank {rank} pulls {} bytes in {} slices of at most {} bytes from {} peers",
            cp.total_bytes(),
            cp.slices.len(),
            cp.slice_size,
            shards.iter().map(|s| s.peer).collect::<std::collections::BTreeSet<_>>().len()
        )?;
    }
    write_manifest(&dir, "plan", &hash, &files)?;
    Ok(dir)
}
