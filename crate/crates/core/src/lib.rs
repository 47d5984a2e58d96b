//! Cost models, contention analysis and a discrete-event simulator for
//! comparing synchronized expert-parallel MoE inference (DEP) with
//! asynchronous distributed weight data parallelism (DWDP).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod contention;
pub mod copyplan;
pub mod error;
pub mod hwmodel;
pub mod modelspec;
pub mod par;
pub mod placement;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
pub use hwmodel::{GpuSpec, InterferenceParams, OpCategory};
pub use modelspec::{LayerWork, MoeModelSpec};
pub use par::Exec;
pub use placement::PlacementPlan;
