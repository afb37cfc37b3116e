//! Run configuration: workload shape, engine sizing, and policy selection.
//!
//! A [`Scenario`] is pure data, loadable from TOML. Everything has a default
//! so a minimal file only names the application graph and the arrival rate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block_memory::TransferCostModel;
use crate::dist::DistributionSpec;
use crate::space_scheduler::PartitionParams;
use crate::time_scheduler::TimeSchedulerConfig;

/// Which scheduling features are active for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Full system: event-driven offload/upload plus dynamic partitioning.
    Tokencake,
    /// Stalled requests keep their device blocks; no reservations.
    Retain,
    /// Stalled requests are evicted immediately and recompute on return.
    Evict,
    /// Dynamic partitioning only; stalls retain.
    SpaceOnly,
    /// Offload/upload only; no reservations.
    TimeOnly,
}

impl Policy {
    pub fn time_enabled(self) -> bool {
        matches!(self, Policy::Tokencake | Policy::TimeOnly)
    }

    pub fn space_enabled(self) -> bool {
        matches!(self, Policy::Tokencake | Policy::SpaceOnly)
    }

    /// Baseline behaviour that frees a stalled request's blocks at call start.
    pub fn evict_on_stall(self) -> bool {
        self == Policy::Evict
    }

    /// Whether memory pressure may evict stalled caches. The scheduled
    /// policies reclaim stalled memory under contention; the retain baseline
    /// keeps stalled caches device-resident no matter what, and the evict
    /// baseline never has a stalled cache to reclaim.
    pub fn pressure_evicts(self) -> bool {
        matches!(self, Policy::Tokencake | Policy::SpaceOnly | Policy::TimeOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Tokencake => "tokencake",
            Policy::Retain => "retain",
            Policy::Evict => "evict",
            Policy::SpaceOnly => "space-only",
            Policy::TimeOnly => "time-only",
        }
    }

    pub fn all() -> [Policy; 5] {
        [
            Policy::Tokencake,
            Policy::Retain,
            Policy::Evict,
            Policy::SpaceOnly,
            Policy::TimeOnly,
        ]
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tokencake" => Ok(Policy::Tokencake),
            "retain" => Ok(Policy::Retain),
            "evict" => Ok(Policy::Evict),
            "space-only" => Ok(Policy::SpaceOnly),
            "time-only" => Ok(Policy::TimeOnly),
            other => Err(format!(
                "unknown policy '{other}' (expected tokencake, retain, evict, space-only, or time-only)"
            )),
        }
    }
}

/// Serving-engine sizing and step-time model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Device KV pool size in blocks.
    pub total_device_blocks: u64,
    /// Host (CPU DRAM) pool size in blocks.
    pub total_host_blocks: u64,
    /// Tokens per KV block.
    pub block_size_tokens: u64,
    /// Maximum concurrent prefill + decode slots per step.
    pub max_batch_size: usize,
    /// Fixed cost of a decode step in milliseconds.
    pub step_base_ms: f64,
    /// Additional per-sequence cost of a decode step in milliseconds.
    pub step_per_seq_ms: f64,
    /// Prefill speed. The default matches the recompute cost model: refilling
    /// a full 4096-block pool (65536 tokens) takes the same 9000 ms.
    pub prefill_tokens_per_ms: f64,
    /// Shared-pool blocks an admission must leave free, so running decodes
    /// can cross block boundaries without immediately preempting someone.
    /// Zero packs the pool completely.
    pub admission_headroom_blocks: u64,
    /// Keep host blocks warm after upload so repeat offloads skip allocation.
    pub host_buffering: bool,
    /// Claim predictive reservations in spaced chunks instead of all at once.
    pub gradual_reservation: bool,
    /// Emit a utilization trace sample every this many engine steps.
    pub util_sample_period_steps: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            total_device_blocks: 4096,
            total_host_blocks: 25600,
            block_size_tokens: 16,
            max_batch_size: 48,
            step_base_ms: 5.0,
            step_per_seq_ms: 1.0,
            prefill_tokens_per_ms: 65536.0 / 9000.0,
            admission_headroom_blocks: 0,
            host_buffering: true,
            gradual_reservation: true,
            util_sample_period_steps: 10,
        }
    }
}

/// Per-agent-type overrides for sequence lengths.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthOverride {
    pub prompt: Option<DistributionSpec>,
    pub output: Option<DistributionSpec>,
}

/// Token-length distributions, with optional per-agent-type overrides.
/// Node-level distributions in the graph file take precedence over both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthConfig {
    pub prompt: DistributionSpec,
    pub output: DistributionSpec,
    pub per_type: BTreeMap<String, LengthOverride>,
}

impl Default for LengthConfig {
    fn default() -> Self {
        LengthConfig {
            prompt: DistributionSpec::Lognormal {
                median: 512.0,
                sigma: 0.5,
            },
            output: DistributionSpec::Lognormal {
                median: 256.0,
                sigma: 0.5,
            },
            per_type: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario value: {0}")]
    Value(String),
}

/// A complete, reproducible run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Builtin application name (`code_writer`, `deep_research`) or a path
    /// to an application-graph TOML file.
    pub app: String,
    /// Mean application arrival rate (instances per second, Poisson).
    pub qps: f64,
    /// Arrival window in seconds.
    pub duration_s: f64,
    /// Master seed; the only entropy source of the run.
    pub seed: u64,
    /// Hard stop in seconds. Defaults to `duration_s + 600`.
    pub horizon_s: Option<f64>,
    pub engine: EngineConfig,
    pub cost_model: TransferCostModel,
    pub time_scheduler: TimeSchedulerConfig,
    pub space_scheduler: PartitionParams,
    pub lengths: LengthConfig,
    /// Tool-call latency overrides keyed by tool class name
    /// (e.g. `medium_search`, `ai_generation`).
    pub tools: BTreeMap<String, DistributionSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            app: "code_writer".to_string(),
            qps: 0.25,
            duration_s: 120.0,
            seed: 1,
            horizon_s: None,
            engine: EngineConfig::default(),
            cost_model: TransferCostModel::default(),
            time_scheduler: TimeSchedulerConfig::default(),
            space_scheduler: PartitionParams::default(),
            lengths: LengthConfig::default(),
            tools: BTreeMap::new(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text)
            .map_err(|e| ScenarioError::Value(format!("TOML parse error: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let sc: Scenario = toml::from_str(&text).map_err(|e| ScenarioError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        sc.validate().map_err(|e| ScenarioError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(sc)
    }

    pub fn horizon_ms(&self) -> f64 {
        self.horizon_s.unwrap_or(self.duration_s + 600.0) * 1000.0
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Value(m));
        if self.app.is_empty() {
            return bad("app must not be empty".into());
        }
        if !(self.qps > 0.0 && self.qps.is_finite()) {
            return bad(format!("qps must be positive and finite, got {}", self.qps));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if let Some(h) = self.horizon_s {
            if h < self.duration_s {
                return bad(format!(
                    "horizon_s ({h}) must be at least duration_s ({})",
                    self.duration_s
                ));
            }
        }
        let e = &self.engine;
        if e.total_device_blocks == 0 || e.block_size_tokens == 0 {
            return bad("device pool and block size must be nonzero".into());
        }
        if e.max_batch_size == 0 {
            return bad("max_batch_size must be nonzero".into());
        }
        if !(e.prefill_tokens_per_ms > 0.0) {
            return bad("prefill_tokens_per_ms must be positive".into());
        }
        if !(e.step_base_ms >= 0.0 && e.step_per_seq_ms > 0.0) {
            return bad("step time model must be nonnegative with positive per-seq cost".into());
        }
        self.lengths
            .prompt
            .validate()
            .map_err(|e| ScenarioError::Value(format!("lengths.prompt: {e}")))?;
        self.lengths
            .output
            .validate()
            .map_err(|e| ScenarioError::Value(format!("lengths.output: {e}")))?;
        for (ty, ov) in &self.lengths.per_type {
            for (label, d) in [("prompt", &ov.prompt), ("output", &ov.output)] {
                if let Some(d) = d {
                    d.validate().map_err(|e| {
                        ScenarioError::Value(format!("lengths.per_type.{ty}.{label}: {e}"))
                    })?;
                }
            }
        }
        for (class, d) in &self.tools {
            d.validate()
                .map_err(|e| ScenarioError::Value(format!("tools.{class}: {e}")))?;
        }
        Ok(())
    }
}
