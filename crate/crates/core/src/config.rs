//! Experiment configuration files (TOML) and the glue that turns a run
//! block into a report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hwmodel::{GpuSpec, InterferenceParams};
use crate::modelspec::MoeModelSpec;
use crate::placement::{build_placement, PlacementPlan};
use crate::sim::{simulate_dep, simulate_dwdp, DwdpOptions, RunReport};
use crate::workload::{
    normal_std_for_cv, read_batches_csv, sample_batches, uniform_ratio_for_cv, IslDist, RankBatch, WorkloadSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub gpu: GpuSpec,
    #[serde(default)]
    pub interference: InterferenceParams,
    #[serde(default)]
    pub model: MoeModelSpec,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub analytic: AnalyticSection,
    #[serde(default, rename = "run")]
    pub runs: Vec<RunBlock>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    /// Leading iterations excluded from averages.
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    /// Batch CSV to replay instead of sampling, relative to the config file.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

fn default_iterations() -> u32 {
    8
}

fn default_warmup() -> u32 {
    2
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection { iterations: default_iterations(), warmup: default_warmup(), replay: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSection {
    /// Requests per rank; tokens = batch · ISL.
    #[serde(default = "one")]
    pub batch: u32,
}

fn one() -> u32 {
    1
}

impl Default for AnalyticSection {
    fn default() -> Self {
        AnalyticSection { batch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub name: String,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Dep {
        group_size: u32,
    },
    Dwdp {
        group_size: u32,
        #[serde(default)]
        extra_redundancy: u32,
        #[serde(default)]
        options: DwdpOptions,
    },
}

impl Strategy {
    pub fn group_size(&self) -> u32 {
        match *self {
            Strategy::Dep { group_size } | Strategy::Dwdp { group_size, .. } => group_size,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Strategy::Dep { .. } => "dep",
            Strategy::Dwdp { .. } => "dwdp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Isl,
    Mnt,
    Cv,
    GroupSize,
    SliceSize,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] =
        [SweepAxis::Isl, SweepAxis::Mnt, SweepAxis::Cv, SweepAxis::GroupSize, SweepAxis::SliceSize];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Isl => "isl",
            SweepAxis::Mnt => "mnt",
            SweepAxis::Cv => "cv",
            SweepAxis::GroupSize => "group_size",
            SweepAxis::SliceSize => "slice_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Sweep {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep.values", "must not be empty"));
        }
        for (i, &v) in self.values.iter().enumerate() {
            let path = format!("sweep.values[{i}]");
            let ok = match self.axis {
                SweepAxis::Cv => (0.0..1.0 / 3f64.sqrt()).contains(&v),
                _ => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::config(path, format!("{v} is not a valid {} value", self.axis.as_str())));
            }
        }
        Ok(())
    }
}

/// Reads and validates a configuration file.
pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let mut cfg = parse(&text)?;
    if let Some(replay) = &cfg.simulation.replay {
        if replay.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.simulation.replay = Some(dir.join(replay));
            }
        }
    }
    Ok(cfg)
}

/// Parses configuration text. Errors name the offending field.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        self.interference.validate()?;
        self.model.validate()?;
        self.workload.validate()?;
        if self.simulation.iterations == 0 {
            return Err(Error::config("simulation.iterations", "must be positive"));
        }
        if self.analytic.batch == 0 {
            return Err(Error::config("analytic.batch", "must be positive"));
        }
        for (i, run) in self.runs.iter().enumerate() {
            let g = run.strategy.group_size();
            if g == 0 || g > self.model.num_experts {
                return Err(Error::config(format!("run[{i}].strategy.group_size"), "must lie in [1, num_experts]"));
            }
            if let Strategy::Dwdp { options, .. } = &run.strategy {
                options
                    .validate()
                    .map_err(|_| Error::config(format!("run[{i}].strategy.options.slice_size"), "must be > 0"))?;
            }
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of this configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Copy with one sweep coordinate applied.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        let int = value as u32;
        match axis {
            SweepAxis::Isl => match &mut c.workload.isl {
                IslDist::Fixed { len } => *len = int,
                IslDist::UniformRatio { max, .. } => *max = int,
                IslDist::Normal { mean, .. } => *mean = value,
            },
            SweepAxis::Mnt => c.workload.max_num_tokens = int,
            SweepAxis::Cv => match &mut c.workload.isl {
                IslDist::Fixed { .. } => {
                    return Err(Error::config("workload.isl", "cv sweeps need a uniform_ratio or normal distribution"))
                }
                IslDist::UniformRatio { ratio, .. } => *ratio = uniform_ratio_for_cv(value)?,
                IslDist::Normal { mean, std } => *std = normal_std_for_cv(*mean, value)?,
            },
            SweepAxis::GroupSize => {
                for run in &mut c.runs {
                    match &mut run.strategy {
                        Strategy::Dep { group_size } | Strategy::Dwdp { group_size, .. } => *group_size = int,
                    }
                }
            }
            SweepAxis::SliceSize => {
                for run in &mut c.runs {
                    if let Strategy::Dwdp { options, .. } = &mut run.strategy {
                        options.slice_size = value as u64;
                    }
                }
            }
        }
        c.sweep = None;
        c.validate()?;
        Ok(c)
    }

    /// Replayed batches when configured, otherwise sampled ones.
    pub fn batches(&self, group_size: u32) -> Result<Vec<RankBatch>> {
        let batches = match &self.simulation.replay {
            Some(path) => {
                let f = std::fs::File::open(path)
                    .map_err(|e| Error::config("simulation.replay", format!("cannot open {}: {e}", path.display())))?;
                let b = read_batches_csv(f, group_size, self.model.num_experts)?;
                if b.is_empty() {
                    return Err(Error::config("simulation.replay", "file holds no batches"));
                }
                b
            }
            None => sample_batches(&self.workload, &self.model, group_size, self.simulation.iterations)?,
        };
        for (i, b) in batches.iter().enumerate() {
            b.validate(&self.model, self.workload.max_num_tokens)
                .map_err(|e| Error::config("simulation.replay", format!("iteration {i}: {e}")))?;
        }
        Ok(batches)
    }
}

pub fn placement_for(model: &MoeModelSpec, strategy: &Strategy) -> Result<PlacementPlan> {
    match *strategy {
        Strategy::Dep { group_size } => PlacementPlan::replicated(model.num_experts, group_size),
        Strategy::Dwdp { group_size: 1, .. } => PlacementPlan::replicated(model.num_experts, 1),
        Strategy::Dwdp { group_size, extra_redundancy, .. } => {
            build_placement(model.num_experts, group_size, extra_redundancy)
        }
    }
}

/// Runs one strategy over the given batches.
pub fn execute(cfg: &ExperimentConfig, strategy: &Strategy, batches: &[RankBatch]) -> Result<RunReport> {
    let report = match strategy {
        Strategy::Dep { group_size } => simulate_dep(&cfg.model, &cfg.gpu, batches, *group_size)?,
        Strategy::Dwdp { options, .. } => {
            let plan = placement_for(&cfg.model, strategy)?;
            simulate_dwdp(&cfg.model, &cfg.gpu, &cfg.interference, batches, &plan, options)?
        }
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[workload]
isl = { kind = "uniform_ratio", max = 8192, ratio = 0.8 }
max_num_tokens = 32768
batch_per_rank = 1

[[run]]
name = "dep4"
strategy = { kind = "dep", group_size = 4 }

[[run]]
name = "dwdp4"
strategy = { kind = "dwdp", group_size = 4, options = { tdm = false } }
"#;

    #[test]
    fn parses_minimal() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.runs.len(), 2);
        assert_eq!(c.simulation.warmup, 2);
        assert_eq!(c.gpu, GpuSpec::gb200());
        match &c.runs[1].strategy {
            Strategy::Dwdp { options, .. } => {
                assert!(!options.tdm);
                assert!(options.contention);
                assert_eq!(options.slice_size, 1 << 20);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("max_num_tokens = 32768", "max_num_tokens = \"lots\"");
        match parse(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "workload.max_num_tokens"),
            other => panic!("{other:?}"),
        }
        let bad = format!("{MINIMAL}\n[gpu]\npeak_flops = 1e16\nmem_bw = -1.0\nlink_bw = 1e12\nce_inflight = 2\ntdp = 1.0\nidle_power_frac = 0.1\n");
        match parse(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "gpu.mem_bw"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_axes_apply() {
        let c = parse(MINIMAL).unwrap();
        let d = c.with_axis(SweepAxis::Cv, 0.2).unwrap();
        match d.workload.isl {
            IslDist::UniformRatio { ratio, .. } => {
                assert!((crate::workload::uniform_ratio_cv(ratio) - 0.2).abs() < 1e-12)
            }
            _ => panic!(),
        }
        let g = c.with_axis(SweepAxis::GroupSize, 3.0).unwrap();
        assert!(g.runs.iter().all(|r| r.strategy.group_size() == 3));
        assert!(c.with_axis(SweepAxis::Mnt, 4096.0).is_err());
        assert_ne!(c.hash(), g.hash());
    }

    #[test]
    fn empty_sweep_rejected() {
        let text = format!("{MINIMAL}\n[sweep]\naxis = \"isl\"\nvalues = []\n");
        assert!(matches!(parse(&text), Err(Error::Config { .. })));
    }
}
