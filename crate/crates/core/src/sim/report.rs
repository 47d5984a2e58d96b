//! Run reports, category breakdowns and report comparison.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{EventCategory, SimEvent, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub rank: u32,
    pub iteration: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub tokens: u64,
    /// Bytes pulled from peers for this iteration's layers.
    pub p2p_bytes: u64,
}

impl IterationRecord {
    pub fn latency_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub group_size: u32,
    pub num_layers: u32,
    pub iterations: Vec<IterationRecord>,
    pub events: Vec<SimEvent>,
    /// Echo of the configuration that produced the run, filled by callers.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn new(
        strategy: &str,
        group_size: u32,
        num_layers: u32,
        iterations: Vec<IterationRecord>,
        events: Vec<SimEvent>,
    ) -> Self {
        RunReport {
            strategy: strategy.into(),
            group_size,
            num_layers,
            iterations,
            events,
            config: serde_json::Value::Null,
        }
    }

    pub fn iteration_count(&self) -> u32 {
        self.iterations.iter().map(|r| r.iteration + 1).max().unwrap_or(0)
    }

    /// Records of iterations at or after `warmup`. When every iteration
    /// would be discarded, all of them are kept.
    pub fn steady(&self, warmup: u32) -> impl Iterator<Item = &IterationRecord> {
        let cut = if warmup >= self.iteration_count() { 0 } else { warmup };
        self.iterations.iter().filter(move |r| r.iteration >= cut)
    }

    fn steady_cut(&self, warmup: u32) -> u32 {
        if warmup >= self.iteration_count() {
            0
        } else {
            warmup
        }
    }

    /// Events of one rank in time order.
    pub fn rank_events(&self, rank: u32) -> Vec<&SimEvent> {
        let mut v: Vec<&SimEvent> = self.events.iter().filter(|e| e.rank == rank).collect();
        v.sort_by_key(|e| (e.stream, e.start_ns, e.end_ns));
        v
    }

    /// Mean steady-state iteration latency, seconds.
    pub fn mean_latency(&self, warmup: u32) -> f64 {
        let (sum, n) = self.steady(warmup).fold((0u64, 0u64), |(s, n), r| (s + r.latency_ns(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum as f64 * 1e-9 / n as f64
        }
    }

    /// Tokens per second per GPU over steady iterations, averaged over ranks.
    pub fn throughput_per_gpu(&self, warmup: u32) -> f64 {
        let mut per_rank: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for r in self.steady(warmup) {
            let e = per_rank.entry(r.rank).or_default();
            e.0 += r.tokens;
            e.1 += r.latency_ns();
        }
        if per_rank.is_empty() {
            return 0.0;
        }
        let total: f64 =
            per_rank.values().map(|&(t, ns)| if ns == 0 { 0.0 } else { t as f64 / (ns as f64 * 1e-9) }).sum();
        total / per_rank.len() as f64
    }

    /// Checks event ordering and the iteration accounting invariants.
    pub fn validate(&self) -> Result<()> {
        let mut by_lane: BTreeMap<(u32, Stream), Vec<&SimEvent>> = BTreeMap::new();
        for e in &self.events {
            if e.end_ns < e.start_ns {
                return Err(Error::invariant(format!("event ends before it starts: {e:?}")));
            }
            if e.category.stream() != e.stream {
                return Err(Error::invariant(format!("{} event on the wrong stream", e.category)));
            }
            by_lane.entry((e.rank, e.stream)).or_default().push(e);
        }
        for ((rank, stream), mut list) in by_lane {
            list.sort_by_key(|e| (e.start_ns, e.end_ns));
            for w in list.windows(2) {
                if w[1].start_ns < w[0].end_ns {
                    return Err(Error::invariant(format!(
                        "overlapping events on rank {rank} {stream:?}: {:?} and {:?}",
                        w[0], w[1]
                    )));
                }
            }
        }
        let mut busy: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.stream == Stream::Compute) {
            *busy.entry((e.rank, e.iteration)).or_default() += e.duration_ns();
        }
        let spans: BTreeMap<(u32, u32), &IterationRecord> =
            self.iterations.iter().map(|r| ((r.rank, r.iteration), r)).collect();
        for e in self.events.iter().filter(|e| e.stream == Stream::Compute) {
            let Some(rec) = spans.get(&(e.rank, e.iteration)) else {
                return Err(Error::invariant(format!("event outside any recorded iteration: {e:?}")));
            };
            if e.start_ns < rec.start_ns || e.end_ns > rec.end_ns {
                return Err(Error::invariant(format!("event escapes its iteration span: {e:?}")));
            }
        }
        for (key, ns) in busy {
            if let Some(rec) = spans.get(&key) {
                if ns > rec.latency_ns() {
                    return Err(Error::invariant(format!(
                        "rank {} iteration {} is busier than its latency",
                        key.0, key.1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Per-category time, microseconds per rank-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub categories: BTreeMap<EventCategory, f64>,
    pub latency_us: f64,
}

impl Breakdown {
    pub fn from_values(values: &[(EventCategory, f64)], latency_us: f64) -> Self {
        let mut categories: BTreeMap<EventCategory, f64> = EventCategory::ALL.iter().map(|&c| (c, 0.0)).collect();
        for &(c, v) in values {
            categories.insert(c, v);
        }
        Breakdown { categories, latency_us }
    }

    pub fn get(&self, cat: EventCategory) -> f64 {
        self.categories.get(&cat).copied().unwrap_or(0.0)
    }

    /// Fraction of iteration latency spent in `cat`.
    pub fn share(&self, cat: EventCategory) -> f64 {
        if self.latency_us == 0.0 {
            0.0
        } else {
            self.get(cat) / self.latency_us
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["category", "stream", "micros", "share", "critical_path"])?;
        for (&cat, &v) in &self.categories {
            let stream = match cat.stream() {
                Stream::Compute => "compute",
                Stream::CopyEngine => "copy_engine",
            };
            let critical = if cat == EventCategory::P2pCopy { "no" } else { "yes" };
            out.write_record([cat.as_str(), stream, &format!("{v:.3}"), &format!("{:.5}", self.share(cat)), critical])?;
        }
        out.write_record(["iteration_latency", "", &format!("{:.3}", self.latency_us), "1.00000", ""])?;
        out.flush()?;
        Ok(())
    }
}

/// Averages category time over ranks and steady iterations. Copy-engine
/// time is reported next to compute time but runs off the critical path.
pub fn breakdown(report: &RunReport, warmup: u32) -> Breakdown {
    let cut = report.steady_cut(warmup);
    let samples = report.steady(warmup).count();
    let mut sums: BTreeMap<EventCategory, u64> = EventCategory::ALL.iter().map(|&c| (c, 0)).collect();
    for e in report.events.iter().filter(|e| e.iteration >= cut) {
        *sums.entry(e.category).or_default() += e.duration_ns();
    }
    if samples == 0 {
        return Breakdown::from_values(&[], 0.0);
    }
    let scale = 1e-3 / samples as f64;
    let latency: u64 = report.steady(warmup).map(|r| r.latency_ns()).sum();
    Breakdown {
        categories: sums.into_iter().map(|(c, ns)| (c, ns as f64 * scale)).collect(),
        latency_us: latency as f64 * scale,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `(a − b) / a_latency` per category; `None` for off-critical-path time.
    pub deltas: BTreeMap<EventCategory, Option<f64>>,
    pub overall: f64,
    /// Share of `a`'s latency in synchronization and communication that `b` removes.
    pub gross_sync_comm: f64,
    pub a: Breakdown,
    pub b: Breakdown,
}

impl Comparison {
    pub fn delta(&self, cat: EventCategory) -> Option<f64> {
        self.deltas.get(&cat).copied().flatten()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["category", "a_micros", "b_micros", "delta_pct"])?;
        for (&cat, d) in &self.deltas {
            let pct = d.map(|d| format!("{:.2}", 100.0 * d)).unwrap_or_else(|| "--".into());
            out.write_record([
                cat.as_str(),
                &format!("{:.2}", self.a.get(cat)),
                &format!("{:.2}", self.b.get(cat)),
                &pct,
            ])?;
        }
        out.write_record([
            "iteration_latency",
            &format!("{:.2}", self.a.latency_us),
            &format!("{:.2}", self.b.latency_us),
            &format!("{:.2}", 100.0 * self.overall),
        ])?;
        out.write_record(["gross_sync_comm", "", "", &format!("{:.2}", 100.0 * self.gross_sync_comm)])?;
        out.flush()?;
        Ok(())
    }
}

pub fn compare_breakdowns(a: &Breakdown, b: &Breakdown) -> Result<Comparison> {
    if !(a.latency_us > 0.0) {
        return Err(Error::invalid("baseline latency must be positive"));
    }
    let lat = a.latency_us;
    let deltas = EventCategory::ALL
        .iter()
        .map(|&c| (c, (c != EventCategory::P2pCopy).then(|| (a.get(c) - b.get(c)) / lat)))
        .collect();
    let sc = |x: &Breakdown| x.get(EventCategory::SyncWait) + x.get(EventCategory::Communication);
    Ok(Comparison {
        deltas,
        overall: (a.latency_us - b.latency_us) / lat,
        gross_sync_comm: (sc(a) - sc(b)) / lat,
        a: a.clone(),
        b: b.clone(),
    })
}

pub fn compare_reports(a: &RunReport, b: &RunReport, warmup: u32) -> Result<Comparison> {
    compare_breakdowns(&breakdown(a, warmup), &breakdown(b, warmup))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_gives_zero_table() {
        let r = RunReport::new("dep", 2, 1, Vec::new(), Vec::new());
        let b = breakdown(&r, 2);
        assert_eq!(b.latency_us, 0.0);
        assert!(b.categories.values().all(|&v| v == 0.0));
        r.validate().unwrap();
    }

    #[test]
    fn identity_comparison() {
        let a = Breakdown::from_values(&[(EventCategory::Attention, 50.0)], 100.0);
        let c = compare_breakdowns(&a, &a).unwrap();
        assert_eq!(c.overall, 0.0);
        assert!(c.deltas.values().all(|d| d.is_none_or(|d| d == 0.0)));
    }

    #[test]
    fn d2d_regression_is_negative() {
        let a = Breakdown::from_values(&[], 100.0);
        let b = Breakdown::from_values(&[(EventCategory::D2dCopy, 2.0)], 89.0);
        let c = compare_breakdowns(&a, &b).unwrap();
        assert!((c.overall - 0.11).abs() < 1e-12);
        assert!((c.delta(EventCategory::D2dCopy).unwrap() + 0.02).abs() < 1e-12);
        assert!(compare_breakdowns(&Breakdown::from_values(&[], 0.0), &b).is_err());
    }
}
