//! Deterministic discrete-event simulator for KV-cache-centric serving of
//! agentic LLM workloads.
//!
//! The library models a paged-KV serving engine executing DAGs of agents
//! whose requests stall on external function calls. Two cooperating
//! policies are simulated against retain/evict baselines:
//!
//! * a time scheduler that offloads stalled caches to host memory when the
//!   predicted stall outlasts the transfer and a waiting request can use the
//!   freed blocks, then uploads them back just before the predicted finish;
//! * a space scheduler that partitions device blocks, reserving a share for
//!   critical agent types ranked by hybrid (static graph + dynamic queue)
//!   priority.
//!
//! ```text
//!  scenario ──> workload ──> sim engine ──> trace ──> metrics
//!                 │             │  │
//!             agent_graph   block_memory
//!                            time/space schedulers
//! ```
//!
//! Everything is deterministic: the same scenario, seed, and policy produce
//! a byte-identical event trace.

pub mod agent_graph;
pub mod block_memory;
pub mod dist;
pub mod engine;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod space_scheduler;
pub mod time_scheduler;
pub mod trace;
pub mod workload;

pub use agent_graph::{AppGraph, ValidatedGraph};
pub use block_memory::{BlockPool, TransferCostModel};
pub use engine::{run_scenario, RunCounters, RunResult, SimEngine};
pub use metrics::{aggregate, compare, sweep, MetricsReport, SweepRow};
pub use scenario::{Policy, Scenario};
pub use space_scheduler::{PartitionParams, PartitionPlan};
pub use time_scheduler::{FcPredictionTable, TimeSchedulerConfig};
pub use trace::{TraceEvent, TraceKind};
pub use workload::Workload;
