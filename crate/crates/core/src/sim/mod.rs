//! Discrete-event execution of DEP and DWDP over per-rank compute streams
//! and copy engines.
//!
//! Time is kept in integer nanoseconds. Events are ordered by
//! `(time, rank, stream, sequence)`, so a run is fully deterministic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::copyplan::DEFAULT_SLICE_SIZE;
use crate::error::{Error, Result};
use crate::hwmodel::OpCategory;

pub mod analytic;
pub mod dep;
pub mod dwdp;
pub mod network;
pub mod report;
pub mod trace;

pub use analytic::{analytic_compare, AnalyticResult};
pub use dep::{run_dep_schedule, simulate_dep, DepLayerTiming};
pub use dwdp::simulate_dwdp;
pub use report::{breakdown, compare_breakdowns, compare_reports, Breakdown, Comparison, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    CopyEngine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    Attention,
    GroupedGemm,
    DenseGemm,
    Others,
    Communication,
    D2dCopy,
    P2pCopy,
    SyncWait,
}

impl EventCategory {
    pub const ALL: [EventCategory; 8] = [
        EventCategory::Attention,
        EventCategory::GroupedGemm,
        EventCategory::DenseGemm,
        EventCategory::Others,
        EventCategory::Communication,
        EventCategory::D2dCopy,
        EventCategory::P2pCopy,
        EventCategory::SyncWait,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventCategory::Attention => "attention",
            EventCategory::GroupedGemm => "grouped_gemm",
            EventCategory::DenseGemm => "dense_gemm",
            EventCategory::Others => "others",
            EventCategory::Communication => "communication",
            EventCategory::D2dCopy => "d2d_copy",
            EventCategory::P2pCopy => "p2p_copy",
            EventCategory::SyncWait => "sync_wait",
        }
    }

    pub fn stream(self) -> Stream {
        match self {
            EventCategory::P2pCopy => Stream::CopyEngine,
            _ => Stream::Compute,
        }
    }
}

impl From<OpCategory> for EventCategory {
    fn from(c: OpCategory) -> Self {
        match c {
            OpCategory::Attention => EventCategory::Attention,
            OpCategory::GroupedGemm => EventCategory::GroupedGemm,
            OpCategory::DenseGemm => EventCategory::DenseGemm,
            OpCategory::Others => EventCategory::Others,
        }
    }
}

impl fmt::Display for EventCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Distinguishes the two kinds of wait recorded as [`EventCategory::SyncWait`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitKind {
    /// Waiting for slower ranks at a collective.
    Barrier,
    /// Waiting for prefetched weights.
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub rank: u32,
    pub stream: Stream,
    pub category: EventCategory,
    pub start_ns: u64,
    pub end_ns: u64,
    pub layer: u32,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait: Option<WaitKind>,
}

impl SimEvent {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwdpOptions {
    /// Skip the D2D merge of prefetched and local weights.
    #[serde(default)]
    pub merge_elim: bool,
    /// Sliced round-robin pulls instead of one whole shard at a time.
    #[serde(default = "yes")]
    pub tdm: bool,
    #[serde(default = "default_slice")]
    pub slice_size: u64,
    /// Model the source copy engine as a shared egress port. When off,
    /// sources have unlimited egress and ranks never slow each other down.
    #[serde(default = "yes")]
    pub contention: bool,
}

fn yes() -> bool {
    true
}

fn default_slice() -> u64 {
    DEFAULT_SLICE_SIZE
}

impl Default for DwdpOptions {
    fn default() -> Self {
        DwdpOptions { merge_elim: false, tdm: true, slice_size: DEFAULT_SLICE_SIZE, contention: true }
    }
}

impl DwdpOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tdm && self.slice_size == 0 {
            return Err(Error::config("strategy.options.slice_size", "must be > 0 when tdm is on"));
        }
        Ok(())
    }
}

pub(crate) fn to_ns(seconds: f64) -> u64 {
    (seconds * 1e9).round() as u64
}
