//! Closed-form per-layer comparison: `T_DWDP = max(T_compute, T_prefetch)`
//! against `T_DEP = T_compute + T_all2all`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::GpuSpec;
use crate::modelspec::{layer_costs, MoeModelSpec};
use crate::placement::{prefetch_bytes, PlacementPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticResult {
    pub t_compute: f64,
    pub t_prefetch: f64,
    pub t_all2all: f64,
    /// `T_compute / T_prefetch`; infinite when nothing is prefetched.
    pub ratio: f64,
    /// `T_DEP / T_DWDP`.
    pub speedup: f64,
    pub saturated: bool,
}

/// Per-layer analytic comparison for one rank holding `tokens` tokens.
pub fn analytic_compare(
    model: &MoeModelSpec,
    gpu: &GpuSpec,
    placement: &PlacementPlan,
    tokens: u64,
    mean_seq_len: f64,
) -> Result<AnalyticResult> {
    gpu.validate()?;
    if placement.num_experts != model.num_experts {
        return Err(Error::config("strategy", "placement expert count differs from the model"));
    }
    let t_compute = layer_costs(model, tokens, mean_seq_len)?.compute_time(gpu)?;
    let t_prefetch = prefetch_bytes(placement, model, 0) / gpu.link_bw;
    let t_all2all = 2.0 * model.all_to_all_bytes(tokens) / gpu.link_bw;
    let saturated = t_prefetch == 0.0;
    let ratio = if saturated { f64::INFINITY } else { t_compute / t_prefetch };
    let speedup = (t_compute + t_all2all) / t_compute.max(t_prefetch);
    Ok(AnalyticResult { t_compute, t_prefetch, t_all2all, ratio, speedup, saturated })
}
