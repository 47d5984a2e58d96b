//! Hardware envelope, roofline operator costs and the two
//! communication/computation interference models (memory bandwidth
//! sharing and power-induced frequency throttling).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel categories that make up a layer's compute time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCategory {
    Attention,
    GroupedGemm,
    DenseGemm,
    Others,
}

impl OpCategory {
    pub const ALL: [OpCategory; 4] =
        [OpCategory::Attention, OpCategory::GroupedGemm, OpCategory::DenseGemm, OpCategory::Others];

    pub fn as_str(self) -> &'static str {
        match self {
            OpCategory::Attention => "attention",
            OpCategory::GroupedGemm => "grouped_gemm",
            OpCategory::DenseGemm => "dense_gemm",
            OpCategory::Others => "others",
        }
    }
}

impl fmt::Display for OpCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-category multiplier on roofline time. This is the single calibration
/// knob per cost category; 1.0 means the kernel runs at its roofline bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryScale {
    pub attention: f64,
    pub grouped_gemm: f64,
    pub dense_gemm: f64,
    pub others: f64,
}

impl CategoryScale {
    pub const UNIT: CategoryScale = CategoryScale { attention: 1.0, grouped_gemm: 1.0, dense_gemm: 1.0, others: 1.0 };

    pub fn get(&self, cat: OpCategory) -> f64 {
        match cat {
            OpCategory::Attention => self.attention,
            OpCategory::GroupedGemm => self.grouped_gemm,
            OpCategory::DenseGemm => self.dense_gemm,
            OpCategory::Others => self.others,
        }
    }
}

impl Default for CategoryScale {
    fn default() -> Self {
        CategoryScale::UNIT
    }
}

/// Hardware envelope of one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    /// FLOP/s at the precision of the model weights.
    pub peak_flops: f64,
    /// HBM bandwidth, bytes/s.
    pub mem_bw: f64,
    /// Peer-to-peer bandwidth usable by one rank's pulls, bytes/s. Also the
    /// egress capacity of a source's copy engine.
    pub link_bw: f64,
    /// Number of slices the copy engine keeps in flight.
    pub ce_inflight: u32,
    /// Power limit in watts (1.0 when working in normalized units).
    pub tdp: f64,
    pub idle_power_frac: f64,
    #[serde(default)]
    pub efficiency: CategoryScale,
}

impl GpuSpec {
    /// GB200-like envelope. Bandwidths are the HBM and NVLink figures used
    /// for the memory-interference bound; compute and efficiency scales are
    /// calibration values fixed once against the roofline crossover curve.
    pub fn gb200() -> Self {
        GpuSpec {
            peak_flops: 1.0e16,
            mem_bw: 8.0e12,
            link_bw: 1.8e12,
            ce_inflight: 2,
            tdp: 1.0,
            idle_power_frac: 0.129,
            efficiency: CategoryScale { attention: 2.04, grouped_gemm: 0.43, dense_gemm: 2.86, others: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpu.peak_flops", self.peak_flops),
            ("gpu.mem_bw", self.mem_bw),
            ("gpu.link_bw", self.link_bw),
            ("gpu.tdp", self.tdp),
            ("gpu.efficiency.attention", self.efficiency.attention),
            ("gpu.efficiency.grouped_gemm", self.efficiency.grouped_gemm),
            ("gpu.efficiency.dense_gemm", self.efficiency.dense_gemm),
            ("gpu.efficiency.others", self.efficiency.others),
        ];
        for (path, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.ce_inflight < 1 {
            return Err(Error::config("gpu.ce_inflight", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.idle_power_frac) {
            return Err(Error::config("gpu.idle_power_frac", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for GpuSpec {
    fn default() -> Self {
        GpuSpec::gb200()
    }
}

/// Normalized GPU frequency measured with short, tightly packed overlap.
pub const SHORT_OVERLAP_FREQUENCY: f64 = 0.798;
/// Estimated power draw (fraction of TDP) of attention overlapped with
/// two-sided communication.
pub const SHORT_OVERLAP_POWER: f64 = 1.144;

/// Exponent of the single power-law throttle curve passing through
/// `(power_frac, frequency)`.
pub fn calibrate_throttle_exponent(power_frac: f64, frequency: f64) -> f64 {
    frequency.ln() / (1.0 / power_frac).ln()
}

/// Parameters of the interference models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceParams {
    pub mem_interference_on: bool,
    pub power_interference_on: bool,
    /// Power draw of each compute category running alone, fraction of TDP.
    pub compute_power_frac: BTreeMap<OpCategory, f64>,
    /// Two-sided communication power draw including the idle baseline.
    pub comm_power_frac: f64,
    pub throttle_exponent: f64,
}

impl InterferenceParams {
    pub fn disabled() -> Self {
        InterferenceParams { mem_interference_on: false, power_interference_on: false, ..Self::default() }
    }

    pub fn any_on(&self) -> bool {
        self.mem_interference_on || self.power_interference_on
    }

    pub fn validate(&self) -> Result<()> {
        for cat in OpCategory::ALL {
            match self.compute_power_frac.get(&cat) {
                None => return Err(Error::config(format!("interference.compute_power_frac.{cat}"), "missing entry")),
                Some(v) if !(0.0..=2.0).contains(v) => {
                    return Err(Error::config(
                        format!("interference.compute_power_frac.{cat}"),
                        format!("must lie in [0, 2], got {v}"),
                    ))
                }
                _ => {}
            }
        }
        if !(0.0..=2.0).contains(&self.comm_power_frac) {
            return Err(Error::config("interference.comm_power_frac", "must lie in [0, 2]"));
        }
        if !(self.throttle_exponent.is_finite() && self.throttle_exponent > 0.0) {
            return Err(Error::config("interference.throttle_exponent", "must be > 0"));
        }
        Ok(())
    }
}

impl Default for InterferenceParams {
    fn default() -> Self {
        let mut compute_power_frac = BTreeMap::new();
        for cat in OpCategory::ALL {
            compute_power_frac.insert(cat, 0.85);
        }
        compute_power_frac.insert(OpCategory::Attention, 0.967);
        InterferenceParams {
            mem_interference_on: true,
            power_interference_on: true,
            compute_power_frac,
            comm_power_frac: 0.305,
            throttle_exponent: calibrate_throttle_exponent(SHORT_OVERLAP_POWER, SHORT_OVERLAP_FREQUENCY),
        }
    }
}

/// Roofline latency of one operator: `max(flops / peak, bytes / mem_bw)`.
pub fn roofline_time(flops: f64, bytes: f64, gpu: &GpuSpec) -> Result<f64> {
    if flops < 0.0 || bytes < 0.0 || flops.is_nan() || bytes.is_nan() {
        return Err(Error::invalid(format!("negative operator cost (flops={flops}, bytes={bytes})")));
    }
    if flops == 0.0 && bytes == 0.0 {
        return Err(Error::invalid("operator with zero flops and zero bytes"));
    }
    Ok((flops / gpu.peak_flops).max(bytes / gpu.mem_bw))
}

/// Multiplicative slowdown of memory-bound work that overlaps `comm_rate`
/// bytes/s of peer traffic through local HBM.
pub fn mem_slowdown_factor(comm_rate: f64, gpu: &GpuSpec) -> f64 {
    debug_assert!(comm_rate >= 0.0);
    1.0 + comm_rate.max(0.0).min(gpu.link_bw) / gpu.mem_bw
}

/// Frequency multiplier in (0, 1] under a power draw of `active_power_frac`
/// of TDP. Compute durations are divided by it.
pub fn power_throttle_factor(active_power_frac: f64, params: &InterferenceParams) -> f64 {
    if active_power_frac <= 1.0 {
        1.0
    } else {
        (1.0 / active_power_frac).powf(params.throttle_exponent)
    }
}

/// Estimated power while `category` runs overlapped with communication; the
/// idle baseline is counted once.
pub fn overlap_power(category: OpCategory, params: &InterferenceParams, gpu: &GpuSpec) -> Result<f64> {
    let compute = params
        .compute_power_frac
        .get(&category)
        .ok_or_else(|| Error::config(format!("interference.compute_power_frac.{category}"), "missing entry"))?;
    Ok(compute + params.comm_power_frac - gpu.idle_power_frac)
}
