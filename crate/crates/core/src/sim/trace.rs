//! Chrome trace-event export (`chrome://tracing`, Perfetto).

use std::io::Write;

use serde::Serialize;
use serde_json::json;

use crate::error::Result;

use super::report::RunReport;
use super::Stream;

#[derive(Debug, Serialize)]
struct TraceEvent<'a> {
    name: &'a str,
    cat: &'a str,
    ph: &'a str,
    ts: f64,
    dur: f64,
    pid: u32,
    tid: u32,
    args: serde_json::Value,
}

fn tid(s: Stream) -> u32 {
    match s {
        Stream::Compute => 0,
        Stream::CopyEngine => 1,
    }
}

/// Complete ("X") events in microseconds plus process/thread names.
pub fn chrome_trace(report: &RunReport) -> serde_json::Value {
    let mut out: Vec<serde_json::Value> = Vec::new();
    for r in 0..report.group_size {
        out.push(json!({"name": "process_name", "ph": "M", "pid": r, "tid": 0, "args": {"name": format!("rank {r}")}}));
        for s in [Stream::Compute, Stream::CopyEngine] {
            let name = if s == Stream::Compute { "compute" } else { "copy_engine" };
            out.push(json!({"name": "thread_name", "ph": "M", "pid": r, "tid": tid(s), "args": {"name": name}}));
        }
    }
    for e in &report.events {
        let ev = TraceEvent {
            name: e.category.as_str(),
            cat: report.strategy.as_str(),
            ph: "X",
            ts: e.start_ns as f64 / 1e3,
            dur: e.duration_ns() as f64 / 1e3,
            pid: e.rank,
            tid: tid(e.stream),
            args: json!({"layer": e.layer, "iteration": e.iteration}),
        };
        out.push(serde_json::to_value(ev).expect("trace event serializes"));
    }
    serde_json::Value::Array(out)
}

pub fn write_chrome_trace<W: Write>(report: &RunReport, w: W) -> Result<()> {
    serde_json::to_writer(w, &chrome_trace(report))?;
    Ok(())
}
