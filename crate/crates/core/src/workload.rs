//! Workload construction: builtin graphs, arrivals, and per-request sampling.
//!
//! All sampling is keyed by stable identifiers (instance id, node index), so
//! a request's prompt length or call latency never depends on scheduling
//! order. Two policies given the same scenario see the exact same workload.

use std::path::Path;

use thiserror::Error;

use crate::agent_graph::{AppGraph, GraphError, GraphNode, NodeKind, ValidatedGraph};
use crate::dist::DistributionSpec;
use crate::rng::SeedFactory;
use crate::scenario::Scenario;
use crate::time_scheduler::DEFAULT_COLD_START_MS;

const CODE_WRITER_TOML: &str = include_str!("../graphs/code_writer.toml");
const DEEP_RESEARCH_TOML: &str = include_str!("../graphs/deep_research.toml");

pub const BUILTIN_APPS: [&str; 2] = ["code_writer", "deep_research"];

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("unknown application {0:?}: not a builtin ({builtins}) and not a readable file", builtins = BUILTIN_APPS.join(", "))]
    UnknownApp(String),
    #[error("cannot read graph file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub fn build_code_writer() -> AppGraph {
    AppGraph::from_toml_str(CODE_WRITER_TOML).expect("embedded graph parses")
}

pub fn build_deep_research() -> AppGraph {
    AppGraph::from_toml_str(DEEP_RESEARCH_TOML).expect("embedded graph parses")
}

/// Resolve an `app` field: builtin name first, then a path to a graph file.
pub fn load_app(app: &str) -> Result<AppGraph, WorkloadError> {
    match app {
        "code_writer" => Ok(build_code_writer()),
        "deep_research" => Ok(build_deep_research()),
        other => {
            let path = Path::new(other);
            if !path.is_file() {
                return Err(WorkloadError::UnknownApp(other.to_string()));
            }
            let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(AppGraph::from_toml_str(&text)?)
        }
    }
}

/// A scenario bound to its validated graph and seed streams.
#[derive(Debug, Clone)]
pub struct Workload {
    scenario: Scenario,
    graph: ValidatedGraph,
    seeds: SeedFactory,
}

impl Workload {
    pub fn new(scenario: Scenario) -> Result<Self, WorkloadError> {
        let graph = load_app(&scenario.app)?.validated()?;
        let seeds = SeedFactory::new(scenario.seed);
        Ok(Workload { scenario, graph, seeds })
    }

    /// Binds a scenario to an explicit graph, ignoring `scenario.app`.
    pub fn from_graph(scenario: Scenario, graph: AppGraph) -> Result<Self, WorkloadError> {
        let graph = graph.validated()?;
        let seeds = SeedFactory::new(scenario.seed);
        Ok(Workload { scenario, graph, seeds })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn graph(&self) -> &ValidatedGraph {
        &self.graph
    }

    pub fn seeds(&self) -> &SeedFactory {
        &self.seeds
    }

    /// Poisson arrival times in ms over the scenario's arrival window.
    pub fn arrivals(&self) -> Vec<f64> {
        let mut rng = self.seeds.stream("arrivals", &[]);
        let inter = DistributionSpec::Exponential { mean: 1000.0 / self.scenario.qps };
        let end_ms = self.scenario.duration_s * 1000.0;
        let mut out = Vec::new();
        let mut t = inter.sample(&mut rng);
        while t < end_ms {
            out.push(t);
            t += inter.sample(&mut rng);
        }
        out
    }

    fn length_dists(&self, node: &GraphNode) -> (DistributionSpec, DistributionSpec) {
        let lengths = &self.scenario.lengths;
        let per_type = lengths.per_type.get(&node.agent_type);
        let prompt = node
            .prompt_tokens_dist
            .clone()
            .or_else(|| per_type.and_then(|o| o.prompt.clone()))
            .unwrap_or_else(|| lengths.prompt.clone());
        let output = node
            .output_tokens_dist
            .clone()
            .or_else(|| per_type.and_then(|o| o.output.clone()))
            .unwrap_or_else(|| lengths.output.clone());
        (prompt, output)
    }

    /// Sampled (prompt, output) token counts for one request.
    pub fn sample_lengths(&self, instance: u64, node_idx: usize) -> (u64, u64) {
        let node = self.graph.node(node_idx);
        let (prompt_dist, output_dist) = self.length_dists(node);
        let mut rng = self.seeds.stream("lengths", &[instance, node_idx as u64]);
        let prompt = prompt_dist.sample_tokens(&mut rng);
        let output = output_dist.sample_tokens(&mut rng);
        (prompt, output)
    }

    /// Expected prompt + output tokens; sizes offload beneficiaries.
    pub fn expected_total_tokens(&self, node_idx: usize) -> f64 {
        let node = self.graph.node(node_idx);
        let (prompt_dist, output_dist) = self.length_dists(node);
        prompt_dist.mean() + output_dist.mean()
    }

    /// Effective call-latency distribution for a func node: the node's own
    /// distribution, else the scenario's tool-class override, else an
    /// exponential around the class center.
    pub fn call_latency_dist(&self, node: &GraphNode) -> Option<DistributionSpec> {
        if node.kind != NodeKind::Func {
            return None;
        }
        if let Some(d) = &node.latency_dist {
            return Some(d.clone());
        }
        if let Some(class) = node.tool_class {
            if let Some(d) = self.scenario.tools.get(class.name()) {
                return Some(d.clone());
            }
            return Some(DistributionSpec::Exponential { mean: class.center_ms() });
        }
        None
    }

    /// Sampled external-call duration for one request's function call.
    pub fn sample_call_latency(&self, instance: u64, node_idx: usize) -> f64 {
        let node = self.graph.node(node_idx);
        let dist = self
            .call_latency_dist(node)
            .expect("validated func nodes always have a latency source");
        let mut rng = self.seeds.stream("tool_latency", &[instance, node_idx as u64]);
        dist.sample(&mut rng)
    }

    /// First-call prediction for a func node before any observations exist:
    /// the node's static hint, else the tool class center, else the mean of
    /// its latency distribution, else the global default.
    pub fn cold_start_ms(&self, node_idx: usize) -> f64 {
        let node = self.graph.node(node_idx);
        node.predict_time_ms
            .or_else(|| node.tool_class.map(|c| c.center_ms()))
            .or_else(|| self.call_latency_dist(node).map(|d| d.mean()))
            .unwrap_or(DEFAULT_COLD_START_MS)
    }
}
