//! Event-driven offload and predictive upload decisions.
//!
//! When a request stalls on an external call, the scheduler compares the
//! predicted call duration against the roundtrip transfer cost and offloads
//! only if the freed window is long enough for a concrete waiting request to
//! use it. Before the predicted finish it claims device blocks back
//! gradually and starts the upload early enough to complete as the call
//! returns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block_memory::{RequestId, TransferCostModel};

/// Fallback cold-start estimate when a call site has no hint and no class.
pub const DEFAULT_COLD_START_MS: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSchedulerConfig {
    /// Weight of the caller-supplied hint against accumulated history.
    pub alpha: f64,
    /// EWMA weight of the newest observation.
    pub beta: f64,
    /// Gap between gradual reservation completion and upload start.
    pub reservation_lead_ms: f64,
    /// Scheduling cycles a gradual reservation is spread over.
    pub reservation_cycles: u32,
    /// Spacing between gradual reservation ticks.
    pub reservation_tick_spacing_ms: f64,
    /// Engine steps in the decode-throughput estimation window.
    pub throughput_window_steps: usize,
}

impl Default for TimeSchedulerConfig {
    fn default() -> Self {
        TimeSchedulerConfig {
            alpha: 0.5,
            beta: 0.5,
            reservation_lead_ms: 100.0,
            reservation_cycles: 4,
            reservation_tick_spacing_ms: 25.0,
            throughput_window_steps: 10,
        }
    }
}

/// Learned state for one call site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcEntry {
    pub t_hist_ms: f64,
    pub observations: u64,
    pub cold_start_ms: f64,
}

/// Duration predictions per `(agent_type, call label)`.
///
/// `t_final = alpha * t_req + (1 - alpha) * t_hist`; history updates as an
/// EWMA seeded by the first observation.
#[derive(Debug, Clone)]
pub struct FcPredictionTable {
    alpha: f64,
    beta: f64,
    entries: BTreeMap<(String, String), FcEntry>,
}

impl FcPredictionTable {
    pub fn new(alpha: f64, beta: f64) -> Self {
        FcPredictionTable { alpha, beta, entries: BTreeMap::new() }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Registers a call site's cold-start estimate if not already known.
    pub fn register(&mut self, agent_type: &str, label: &str, cold_start_ms: f64) {
        self.entries
            .entry((agent_type.to_string(), label.to_string()))
            .or_insert(FcEntry { t_hist_ms: 0.0, observations: 0, cold_start_ms });
    }

    pub fn entry(&self, agent_type: &str, label: &str) -> Option<&FcEntry> {
        self.entries.get(&(agent_type.to_string(), label.to_string()))
    }

    /// Predicted duration for the next call at this site.
    pub fn predict(&self, agent_type: &str, label: &str, hint_ms: Option<f64>) -> f64 {
        let entry = self.entries.get(&(agent_type.to_string(), label.to_string()));
        match entry {
            Some(e) if e.observations > 0 => match hint_ms {
                Some(hint) => self.alpha * hint + (1.0 - self.alpha) * e.t_hist_ms,
                None => e.t_hist_ms,
            },
            Some(e) => hint_ms.unwrap_or(e.cold_start_ms),
            None => hint_ms.unwrap_or(DEFAULT_COLD_START_MS),
        }
    }

    /// Folds an observed duration into the site history. The first
    /// observation seeds the EWMA directly.
    pub fn record(&mut self, agent_type: &str, label: &str, observed_ms: f64) {
        let entry = self
            .entries
            .entry((agent_type.to_string(), label.to_string()))
            .or_insert(FcEntry { t_hist_ms: 0.0, observations: 0, cold_start_ms: observed_ms });
        if entry.observations == 0 {
            entry.t_hist_ms = observed_ms;
        } else {
            entry.t_hist_ms = self.beta * observed_ms + (1.0 - self.beta) * entry.t_hist_ms;
        }
        entry.observations += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadChoice {
    Offload,
    Retain,
}

/// A waiting request's total token demand (prompt plus expected output).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaitingDemand {
    pub request: RequestId,
    pub total_tokens: f64,
}

/// Everything the offload decision needs about the stalled request.
#[derive(Debug, Clone)]
pub struct OffloadQuery<'a> {
    pub request: RequestId,
    pub agent_type: &'a str,
    pub call_label: &'a str,
    pub hint_ms: Option<f64>,
    pub n_blocks: u64,
    pub waiting: &'a [WaitingDemand],
    pub v_throughput_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadDecision {
    pub request: RequestId,
    pub choice: OffloadChoice,
    pub t_fc_ms: f64,
    pub t_transfer_ms: f64,
    pub t_window_ms: f64,
    pub n_capacity_tokens: f64,
    pub matched_waiting: Option<RequestId>,
    pub reason: &'static str,
}

/// Decides whether offloading a stalled request's cache is worthwhile.
///
/// Retains when the predicted stall cannot cover the roundtrip, and
/// otherwise offloads only if some waiting request's whole demand fits the
/// freed window's token capacity (best fit: the largest that fits).
pub fn should_offload(
    query: &OffloadQuery,
    table: &FcPredictionTable,
    cost: &TransferCostModel,
) -> OffloadDecision {
    let t_fc = table.predict(query.agent_type, query.call_label, query.hint_ms);
    let t_transfer = cost.roundtrip_ms(query.n_blocks);
    let mut decision = OffloadDecision {
        request: query.request,
        choice: OffloadChoice::Retain,
        t_fc_ms: t_fc,
        t_transfer_ms: t_transfer,
        t_window_ms: 0.0,
        n_capacity_tokens: 0.0,
        matched_waiting: None,
        reason: "stall_too_short",
    };
    if t_fc <= t_transfer {
        return decision;
    }
    decision.t_window_ms = t_fc - t_transfer;
    decision.n_capacity_tokens = decision.t_window_ms / 1000.0 * query.v_throughput_tokens_per_s;
    if query.waiting.is_empty() {
        decision.reason = "empty_queue";
        return decision;
    }
    let mut best: Option<&WaitingDemand> = None;
    for cand in query.waiting {
        if cand.total_tokens <= decision.n_capacity_tokens {
            let better = match best {
                None => true,
                Some(b) => match cand.total_tokens.total_cmp(&b.total_tokens) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => cand.request < b.request,
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                best = Some(cand);
            }
        }
    }
    match best {
        Some(b) => {
            decision.choice = OffloadChoice::Offload;
            decision.matched_waiting = Some(b.request);
            decision.reason = "beneficiary_found";
        }
        None => decision.reason = "no_beneficiary",
    }
    decision
}

/// Timetable for returning an offloaded cache ahead of the predicted finish.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPlan {
    pub request: RequestId,
    pub n_blocks: u64,
    pub predicted_finish_ms: f64,
    pub upload_start_ms: f64,
    pub reservation_deadline_ms: f64,
    /// Gradual reservation tick times; empty when the plan is immediate.
    pub tick_times_ms: Vec<f64>,
    /// True when the window is too short to schedule ahead: upload as soon
    /// as the offload completes.
    pub immediate: bool,
}

/// Plans the predictive upload for a just-decided offload.
///
/// The upload is timed to complete at the predicted call finish; the
/// gradual reservation is timed to be fully claimed `reservation_lead_ms`
/// before the upload starts.
pub fn plan_predictive_upload(
    request: RequestId,
    n_blocks: u64,
    call_start_ms: f64,
    t_fc_ms: f64,
    offload_done_ms: f64,
    cost: &TransferCostModel,
    cfg: &TimeSchedulerConfig,
) -> UploadPlan {
    let predicted_finish_ms = call_start_ms + t_fc_ms;
    let upload_ms = cost.upload_ms(n_blocks);
    let ideal_start = predicted_finish_ms - upload_ms;
    if ideal_start <= offload_done_ms {
        return UploadPlan {
            request,
            n_blocks,
            predicted_finish_ms,
            upload_start_ms: offload_done_ms,
            reservation_deadline_ms: offload_done_ms,
            tick_times_ms: Vec::new(),
            immediate: true,
        };
    }
    let upload_start_ms = ideal_start;
    let reservation_deadline_ms =
        (upload_start_ms - cfg.reservation_lead_ms).max(offload_done_ms);
    let cycles = cfg.reservation_cycles.max(1);
    let span = cfg.reservation_tick_spacing_ms.max(0.0) * (cycles - 1) as f64;
    let first_tick = (reservation_deadline_ms - span).max(offload_done_ms);
    let spacing = if cycles > 1 {
        (reservation_deadline_ms - first_tick) / (cycles - 1) as f64
    } else {
        0.0
    };
    let tick_times_ms =
        (0..cycles).map(|i| first_tick + spacing * i as f64).collect();
    UploadPlan {
        request,
        n_blocks,
        predicted_finish_ms,
        upload_start_ms,
        reservation_deadline_ms,
        tick_times_ms,
        immediate: false,
    }
}

/// Where a stalled request's cache is when its call finishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheLocation {
    OnDevice,
    OnHostIdle,
    UploadInFlight,
    OffloadInFlight,
    Evicted,
}

/// What the engine must do with the request at call finish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeAction {
    ResumeNow,
    AwaitUploadCompletion,
    StartImmediateUpload,
    AwaitOffloadThenUpload,
    RequeueWithRecompute,
}

/// Maps cache whereabouts at call finish to the resume path. A request
/// never resumes while its blocks are host-resident or in flight.
pub fn handle_call_finish(location: CacheLocation) -> ResumeAction {
    match location {
        CacheLocation::OnDevice => ResumeAction::ResumeNow,
        CacheLocation::OnHostIdle => ResumeAction::StartImmediateUpload,
        CacheLocation::UploadInFlight => ResumeAction::AwaitUploadCompletion,
        CacheLocation::OffloadInFlight => ResumeAction::AwaitOffloadThenUpload,
        CacheLocation::Evicted => ResumeAction::RequeueWithRecompute,
    }
}
