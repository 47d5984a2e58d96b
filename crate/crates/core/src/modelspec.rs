//! MoE transformer description and per-layer operator cost derivation.
//!
//! GEMMs are counted as `2·m·k·n` FLOPs. The attention-score term is
//! linearized with the token-weighted mean sequence length, so a batch of
//! requests with lengths `L_i` uses `mean_seq_len = Σ L_i² / Σ L_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{roofline_time, GpuSpec, OpCategory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeModelSpec {
    pub num_layers: u32,
    pub hidden_dim: u64,
    pub num_experts: u32,
    pub top_k: u32,
    pub expert_ffn_dim: u64,
    /// 0 when the model has no shared expert.
    pub shared_ffn_dim: u64,
    /// Parameters of the attention projections, per layer.
    pub attn_proj_params: u64,
    pub weight_bytes_per_param: f64,
    pub kv_bytes_per_token_per_layer: f64,
    /// Bytes per activation element, also the all-to-all payload width.
    pub activation_bytes: f64,
    /// Memory traffic of the elementwise/quantization kernels in units of
    /// one activation tensor (`tokens × hidden × activation_bytes`), split
    /// evenly between the attention and MoE blocks.
    pub others_traffic_mult: f64,
}

impl MoeModelSpec {
    /// DeepSeek-R1-like dimensions (public architecture numbers, 4-bit
    /// expert weights). `others_traffic_mult` is a calibration value.
    pub fn deepseek_r1_like() -> Self {
        MoeModelSpec {
            num_layers: 61,
            hidden_dim: 7168,
            num_experts: 256,
            top_k: 8,
            expert_ffn_dim: 2048,
            shared_ffn_dim: 2048,
            // q_a + q_b + kv_a + kv_b + o projections of MLA
            attn_proj_params: 187_105_280,
            weight_bytes_per_param: 0.5,
            kv_bytes_per_token_per_layer: 576.0,
            activation_bytes: 1.0,
            others_traffic_mult: 37.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.num_layers", self.num_layers as u64),
            ("model.hidden_dim", self.hidden_dim),
            ("model.num_experts", self.num_experts as u64),
            ("model.top_k", self.top_k as u64),
            ("model.expert_ffn_dim", self.expert_ffn_dim),
            ("model.attn_proj_params", self.attn_proj_params),
        ];
        for (path, v) in counts {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config("model.top_k", "must not exceed num_experts"));
        }
        let positive = [
            ("model.weight_bytes_per_param", self.weight_bytes_per_param),
            ("model.activation_bytes", self.activation_bytes),
        ];
        for (path, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, "must be finite and > 0"));
            }
        }
        let non_negative = [
            ("model.kv_bytes_per_token_per_layer", self.kv_bytes_per_token_per_layer),
            ("model.others_traffic_mult", self.others_traffic_mult),
        ];
        for (path, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(path, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Routed-expert weight bytes of one MoE layer.
    pub fn moe_layer_weight_bytes(&self) -> f64 {
        self.num_experts as f64 * expert_shard_bytes(self) + self.shared_expert_bytes()
    }

    pub fn shared_expert_bytes(&self) -> f64 {
        3.0 * (self.hidden_dim * self.shared_ffn_dim) as f64 * self.weight_bytes_per_param
    }

    /// Bytes of one all-to-all direction (dispatch or combine) for `tokens`.
    pub fn all_to_all_bytes(&self, tokens: u64) -> f64 {
        tokens as f64 * self.top_k as f64 * self.hidden_dim as f64 * self.activation_bytes
    }
}

impl Default for MoeModelSpec {
    fn default() -> Self {
        MoeModelSpec::deepseek_r1_like()
    }
}

/// One operator's cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub category: OpCategory,
    pub flops: f64,
    pub bytes: f64,
}

impl CostEntry {
    /// Calibrated roofline time of this operator, seconds.
    pub fn time(&self, gpu: &GpuSpec) -> Result<f64> {
        Ok(roofline_time(self.flops, self.bytes, gpu)? * gpu.efficiency.get(self.category))
    }
}

/// Operator costs of one transformer layer, split at the attention/MoE
/// boundary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerWork {
    pub attn: Vec<CostEntry>,
    pub moe: Vec<CostEntry>,
}

impl LayerWork {
    pub fn entries(&self) -> impl Iterator<Item = &CostEntry> {
        self.attn.iter().chain(self.moe.iter())
    }

    pub fn compute_time(&self, gpu: &GpuSpec) -> Result<f64> {
        self.entries().map(|e| e.time(gpu)).sum()
    }

    pub fn category_total(&self, cat: OpCategory) -> (f64, f64) {
        self.entries().filter(|e| e.category == cat).fold((0.0, 0.0), |(f, b), e| (f + e.flops, b + e.bytes))
    }
}

/// Weight bytes of one expert (gate, up and down projections).
pub fn expert_shard_bytes(model: &MoeModelSpec) -> f64 {
    3.0 * (model.hidden_dim * model.expert_ffn_dim) as f64 * model.weight_bytes_per_param
}

fn attention_entries(model: &MoeModelSpec, tokens: f64, mean_seq_len: f64) -> Vec<CostEntry> {
    let h = model.hidden_dim as f64;
    let act = model.activation_bytes;
    let attn = CostEntry {
        category: OpCategory::Attention,
        flops: 2.0 * tokens * model.attn_proj_params as f64 + 2.0 * tokens * mean_seq_len * h,
        bytes: model.attn_proj_params as f64 * model.weight_bytes_per_param
            + 2.0 * tokens * h * act
            + 2.0 * tokens * model.kv_bytes_per_token_per_layer,
    };
    let mut out = vec![attn];
    if let Some(o) = others_entry(model, tokens) {
        out.push(o);
    }
    out
}

fn others_entry(model: &MoeModelSpec, tokens: f64) -> Option<CostEntry> {
    let bytes = 0.5 * model.others_traffic_mult * tokens * model.hidden_dim as f64 * model.activation_bytes;
    (bytes > 0.0).then_some(CostEntry { category: OpCategory::Others, flops: 0.0, bytes })
}

/// Shared expert plus router GEMMs over locally held tokens.
fn dense_entry(model: &MoeModelSpec, tokens: f64) -> CostEntry {
    let h = model.hidden_dim as f64;
    let e = model.num_experts as f64;
    let fs = model.shared_ffn_dim as f64;
    CostEntry {
        category: OpCategory::DenseGemm,
        flops: 2.0 * tokens * 3.0 * h * fs + 2.0 * tokens * h * e,
        bytes: (3.0 * h * fs + h * e) * model.weight_bytes_per_param + 2.0 * tokens * h * model.activation_bytes,
    }
}

/// Grouped GEMM over `assignments` routed (token, expert) pairs touching
/// `experts_touched` distinct experts.
pub fn grouped_gemm_entry(model: &MoeModelSpec, assignments: f64, experts_touched: f64) -> CostEntry {
    let h = model.hidden_dim as f64;
    let f = model.expert_ffn_dim as f64;
    CostEntry {
        category: OpCategory::GroupedGemm,
        flops: 2.0 * assignments * 3.0 * h * f,
        bytes: experts_touched * expert_shard_bytes(model) + 2.0 * assignments * h * model.activation_bytes,
    }
}

/// Per-layer operator costs for a rank that runs `tokens` tokens through
/// every expert it routes to (data-parallel view).
pub fn layer_costs(model: &MoeModelSpec, tokens: u64, mean_seq_len: f64) -> Result<LayerWork> {
    model.validate()?;
    if tokens == 0 {
        return Err(Error::invalid("layer_costs needs tokens >= 1"));
    }
    if !(mean_seq_len >= 1.0) {
        return Err(Error::invalid("layer_costs needs mean_seq_len >= 1"));
    }
    let t = tokens as f64;
    let assignments = t * model.top_k as f64;
    let touched = assignments.min(model.num_experts as f64);
    let mut moe = vec![grouped_gemm_entry(model, assignments, touched), dense_entry(model, t)];
    moe.extend(others_entry(model, t));
    Ok(LayerWork { attn: attention_entries(model, t, mean_seq_len), moe })
}

/// Per-layer costs of one DEP rank: attention, shared expert and
/// elementwise work on its own `local_tokens`, grouped GEMM on the
/// `routed_assignments` that the all-to-all delivers to its experts.
pub fn dep_layer_costs(
    model: &MoeModelSpec,
    local_tokens: u64,
    mean_seq_len: f64,
    routed_assignments: u64,
    experts_touched: u32,
) -> Result<LayerWork> {
    model.validate()?;
    let t = local_tokens as f64;
    let attn = if local_tokens > 0 { attention_entries(model, t, mean_seq_len.max(1.0)) } else { Vec::new() };
    let mut moe = Vec::new();
    if routed_assignments > 0 {
        moe.push(grouped_gemm_entry(model, routed_assignments as f64, experts_touched as f64));
    }
    if local_tokens > 0 {
        moe.push(dense_entry(model, t));
        moe.extend(others_entry(model, t));
    }
    Ok(LayerWork { attn, moe })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MoeModelSpec {
        MoeModelSpec {
            num_layers: 1,
            hidden_dim: 8,
            num_experts: 1,
            top_k: 1,
            expert_ffn_dim: 4,
            shared_ffn_dim: 0,
            attn_proj_params: 256,
            weight_bytes_per_param: 1.0,
            kv_bytes_per_token_per_layer: 0.0,
            activation_bytes: 1.0,
            others_traffic_mult: 0.0,
        }
    }

    fn grouped_flops(w: &LayerWork) -> f64 {
        w.category_total(OpCategory::GroupedGemm).0
    }

    #[test]
    fn grouped_gemm_flops_toy() {
        let m = toy();
        assert_eq!(grouped_flops(&layer_costs(&m, 1, 1.0).unwrap()), 192.0);
        assert_eq!(grouped_flops(&layer_costs(&m, 10, 1.0).unwrap()), 1920.0);
    }

    #[test]
    fn shard_bytes() {
        let mut m = toy();
        assert_eq!(expert_shard_bytes(&m), 96.0);
        m.weight_bytes_per_param = 0.5;
        assert_eq!(expert_shard_bytes(&m), 48.0);
        // 3 * 7168 * 2048 * 0.5
        assert_eq!(expert_shard_bytes(&MoeModelSpec::deepseek_r1_like()), 22_020_096.0);
    }

    #[test]
    fn attention_flops_formula() {
        let m = toy();
        let w = layer_costs(&m, 3, 5.0).unwrap();
        let (f, _) = w.category_total(OpCategory::Attention);
        assert_eq!(f, 2.0 * 3.0 * 256.0 + 2.0 * 3.0 * 5.0 * 8.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let m = toy();
        assert!(layer_costs(&m, 0, 1.0).is_err());
        assert!(layer_costs(&m, 1, 0.5).is_err());
        let mut bad = toy();
        bad.hidden_dim = 0;
        assert!(matches!(layer_costs(&bad, 1, 1.0), Err(Error::Config { .. })));
        let mut bad = toy();
        bad.top_k = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn costs_linear_in_tokens_except_score() {
        let m = MoeModelSpec::deepseek_r1_like();
        let a = layer_costs(&m, 4096, 2048.0).unwrap();
        let b = layer_costs(&m, 8192, 2048.0).unwrap();
        for cat in [OpCategory::DenseGemm, OpCategory::Others] {
            let (fa, _) = a.category_total(cat);
            let (fb, _) = b.category_total(cat);
            assert!((fb - 2.0 * fa).abs() <= 1e-9 * fb.max(1.0));
        }
        // Grouped GEMM FLOPs are linear once every expert is touched.
        assert_eq!(grouped_flops(&b), 2.0 * grouped_flops(&a));
        // The score term grows with sequence length at fixed tokens.
        let c = layer_costs(&m, 4096, 4096.0).unwrap();
        let (fa, _) = a.category_total(OpCategory::Attention);
        let (fc, _) = c.category_total(OpCategory::Attention);
        assert_eq!(fc - fa, 2.0 * 4096.0 * 2048.0 * 7168.0);
    }

    #[test]
    fn moe_weight_bytes_conserved() {
        let m = MoeModelSpec::deepseek_r1_like();
        let total = m.moe_layer_weight_bytes();
        assert_eq!(total, 256.0 * 22_020_096.0 + 3.0 * 7168.0 * 2048.0 * 0.5);
    }
}
