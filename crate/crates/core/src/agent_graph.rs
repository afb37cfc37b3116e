//! Agent application graphs.
//!
//! An application is a DAG of agent nodes (pure LLM inference) and function
//! nodes (inference that pauses mid-generation for an external call). Graphs
//! are loaded from structured text files, validated once, and every
//! downstream consumer works with the [`ValidatedGraph`] wrapper so invalid
//! topologies can never reach the schedulers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dist::DistributionSpec;

/// External call families with Table-1-style latency centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolClass {
    ShortFs,
    ShortGit,
    ShortSearch,
    Db,
    MediumSearch,
    AiGeneration,
}

impl ToolClass {
    pub const ALL: [ToolClass; 6] = [
        ToolClass::ShortFs,
        ToolClass::ShortGit,
        ToolClass::ShortSearch,
        ToolClass::Db,
        ToolClass::MediumSearch,
        ToolClass::AiGeneration,
    ];

    /// Central latency in ms; doubles as the cold-start prediction default.
    pub fn center_ms(self) -> f64 {
        match self {
            ToolClass::ShortFs | ToolClass::ShortGit | ToolClass::ShortSearch => 100.0,
            ToolClass::Db => 500.0,
            ToolClass::MediumSearch => 3000.0,
            ToolClass::AiGeneration => 15000.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToolClass::ShortFs => "short_fs",
            ToolClass::ShortGit => "short_git",
            ToolClass::ShortSearch => "short_search",
            ToolClass::Db => "db",
            ToolClass::MediumSearch => "medium_search",
            ToolClass::AiGeneration => "ai_generation",
        }
    }

    pub fn is_short(self) -> bool {
        matches!(self, ToolClass::ShortFs | ToolClass::ShortGit | ToolClass::ShortSearch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Agent,
    Func,
}

/// One node of an application graph as written in a graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub agent_type: String,
    /// Func nodes: ordered labels for the call's internal stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<String>,
    /// Optional static estimate of the call duration, carried on call_start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_class: Option<ToolClass>,
    /// Simulated external call duration; defaults to the tool class center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_dist: Option<DistributionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens_dist: Option<DistributionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens_dist: Option<DistributionSpec>,
    /// Informational model assignment; the simulator runs a single engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hint: Option<String>,
}

/// An application graph exactly as parsed from its file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppGraph {
    pub name: String,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    pub nodes: Vec<GraphNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    DuplicateId { node: String },
    DanglingEdge { from: String, to: String },
    Cycle { members: Vec<String> },
    Unreachable { node: String },
    EmptyStages { node: String },
    NonPositiveHint { node: String, value: f64 },
    MissingCallLatency { node: String },
    BadDistribution { node: String, field: String, reason: String },
}

/// Outcome of validating an [`AppGraph`]; empty means the graph is usable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown node id {0:?}")]
    UnknownNode(String),
    #[error("unknown agent type {0:?}")]
    UnknownAgentType(String),
    #[error("graph failed validation: {0:?}")]
    Invalid(ValidationReport),
    #[error("graph file parse error: {0}")]
    Parse(String),
}

impl AppGraph {
    pub fn from_toml_str(text: &str) -> Result<AppGraph, GraphError> {
        toml::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))
    }

    /// Validates and, on success, returns the analysis-ready wrapper.
    pub fn validated(self) -> Result<ValidatedGraph, GraphError> {
        let report = validate_graph(&self);
        if !report.ok() {
            return Err(GraphError::Invalid(report));
        }
        Ok(ValidatedGraph::build(self))
    }
}

/// Checks structural and parameter rules; never panics on malformed input.
pub fn validate_graph(graph: &AppGraph) -> ValidationReport {
    let mut violations = Vec::new();

    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), i).is_some() {
            violations.push(Violation::DuplicateId { node: node.id.clone() });
        }
    }

    for node in &graph.nodes {
        if node.kind == NodeKind::Func {
            if node.stages.is_empty() {
                violations.push(Violation::EmptyStages { node: node.id.clone() });
            }
            if node.latency_dist.is_none() && node.tool_class.is_none() {
                violations.push(Violation::MissingCallLatency { node: node.id.clone() });
            }
        }
        if let Some(hint) = node.predict_time_ms {
            if hint <= 0.0 || !hint.is_finite() {
                violations.push(Violation::NonPositiveHint { node: node.id.clone(), value: hint });
            }
        }
        for (field, dist) in [
            ("latency_dist", &node.latency_dist),
            ("prompt_tokens_dist", &node.prompt_tokens_dist),
            ("output_tokens_dist", &node.output_tokens_dist),
        ] {
            if let Some(d) = dist {
                if let Err(e) = d.validate() {
                    violations.push(Violation::BadDistribution {
                        node: node.id.clone(),
                        field: field.to_string(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }

    let mut dangling = false;
    for (from, to) in &graph.edges {
        if !index.contains_key(from.as_str()) || !index.contains_key(to.as_str()) {
            violations.push(Violation::DanglingEdge { from: from.clone(), to: to.clone() });
            dangling = true;
        }
    }

    // Cycle and reachability checks only make sense on well-formed edges.
    if !dangling {
        let n = graph.nodes.len();
        let mut in_degree = vec![0usize; n];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &graph.edges {
            let (f, t) = (index[from.as_str()], index[to.as_str()]);
            adj[f].push(t);
            in_degree[t] += 1;
        }

        // Kahn's algorithm; leftovers are the cyclic region (cycles plus
        // anything gated behind them).
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&i| in_degree[i] == 0).collect();
        let mut remaining = in_degree.clone();
        let mut ordered = vec![false; n];
        while let Some(u) = queue.pop_front() {
            ordered[u] = true;
            for &v in &adj[u] {
                remaining[v] -= 1;
                if remaining[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        let cycle_members: Vec<String> = (0..n)
            .filter(|&i| !ordered[i])
            .map(|i| graph.nodes[i].id.clone())
            .collect();
        if !cycle_members.is_empty() {
            violations.push(Violation::Cycle { members: cycle_members });
        }

        // Reachability from entry nodes, independent of acyclicity.
        let mut reached = vec![false; n];
        let mut bfs: VecDeque<usize> = (0..n).filter(|&i| in_degree[i] == 0).collect();
        for &i in &bfs {
            reached[i] = true;
        }
        while let Some(u) = bfs.pop_front() {
            for &v in &adj[u] {
                if !reached[v] {
                    reached[v] = true;
                    bfs.push_back(v);
                }
            }
        }
        for i in 0..n {
            if !reached[i] {
                violations.push(Violation::Unreachable { node: graph.nodes[i].id.clone() });
            }
        }
    }

    ValidationReport { violations }
}

/// A validated graph with precomputed topology used by the schedulers.
#[derive(Debug, Clone)]
pub struct ValidatedGraph {
    graph: AppGraph,
    index: BTreeMap<String, usize>,
    topo_order: Vec<usize>,
    depth: Vec<u64>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
}

impl ValidatedGraph {
    fn build(graph: AppGraph) -> ValidatedGraph {
        let n = graph.nodes.len();
        let mut index = BTreeMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            index.insert(node.id.clone(), i);
        }
        let mut successors: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut predecessors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &graph.edges {
            let (f, t) = (index[from.as_str()], index[to.as_str()]);
            successors[f].push(t);
            predecessors[t].push(f);
        }
        for list in successors.iter_mut().chain(predecessors.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        let mut remaining: Vec<usize> = predecessors.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| remaining[i] == 0).collect();
        let mut topo_order = Vec::with_capacity(n);
        // Entry nodes sit at depth 1; depth is the longest path from any entry.
        let mut depth = vec![1u64; n];
        while let Some(u) = queue.pop_front() {
            topo_order.push(u);
            for &v in &successors[u] {
                depth[v] = depth[v].max(depth[u] + 1);
                remaining[v] -= 1;
                if remaining[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        debug_assert_eq!(topo_order.len(), n, "validated graphs are acyclic");

        ValidatedGraph { graph, index, topo_order, depth, successors, predecessors }
    }

    pub fn name(&self) -> &str {
        &self.graph.name
    }

    pub fn node_count(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn node(&self, idx: usize) -> &GraphNode {
        &self.graph.nodes[idx]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.graph.nodes
    }

    pub fn node_index(&self, id: &str) -> Result<usize, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn successors(&self, idx: usize) -> &[usize] {
        &self.successors[idx]
    }

    pub fn predecessors(&self, idx: usize) -> &[usize] {
        &self.predecessors[idx]
    }

    /// Indices of entry nodes (in-degree zero) in file order.
    pub fn entries(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.predecessors[i].is_empty()).collect()
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Longest-path depth from the entry layer, per node id.
    pub fn depths(&self) -> BTreeMap<String, u64> {
        self.graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| (node.id.clone(), self.depth[i]))
            .collect()
    }

    pub fn depth_of(&self, idx: usize) -> u64 {
        self.depth[idx]
    }

    pub fn out_degree(&self, idx: usize) -> usize {
        self.successors[idx].len()
    }

    /// All agent types present, sorted.
    pub fn agent_types(&self) -> BTreeSet<String> {
        self.graph.nodes.iter().map(|n| n.agent_type.clone()).collect()
    }

    /// Static priority `w * depth * out_degree`. Sinks score zero.
    pub fn static_priority(&self, node_id: &str, w_static: f64) -> Result<f64, GraphError> {
        let idx = self.node_index(node_id)?;
        Ok(w_static * self.depth[idx] as f64 * self.out_degree(idx) as f64)
    }

    /// Max static priority over the type's nodes.
    pub fn agent_type_static_score(
        &self,
        agent_type: &str,
        w_static: f64,
    ) -> Result<f64, GraphError> {
        let mut best: Option<f64> = None;
        for (i, node) in self.graph.nodes.iter().enumerate() {
            if node.agent_type == agent_type {
                let score = w_static * self.depth[i] as f64 * self.out_degree(i) as f64;
                best = Some(best.map_or(score, |b: f64| b.max(score)));
            }
        }
        best.ok_or_else(|| GraphError::UnknownAgentType(agent_type.to_string()))
    }

    /// Static scores for every agent type present.
    pub fn static_scores(&self, w_static: f64) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let score = w_static * self.depth[i] as f64 * self.out_degree(i) as f64;
            let entry = out.entry(node.agent_type.clone()).or_insert(0.0f64);
            *entry = entry.max(score);
        }
        out
    }
}
