//! The deterministic serving-loop simulation.
//!
//! One [`SimEngine`] advances a single paged-KV serving engine through
//! discrete events. Engine steps elapse simulated time for prefill and
//! decode; arrivals, external call completions, transfers, and reservation
//! ticks interleave at exact timestamps. Every step boundary runs one
//! scheduling cycle: finish decoded work, update the partition plan, start
//! due uploads, launch decided offloads, resume stalled requests, and admit
//! from the waiting queue in hybrid-priority order.
//!
//! Determinism: the event heap orders ties by kind and insertion sequence,
//! all collections iterate in key order, and randomness is confined to
//! workload streams keyed by stable identifiers. The same scenario, seed,
//! and policy always yield a byte-identical trace.

mod events;
mod request;

pub use events::{EventQueue, InstanceId, SimEvent, TicketId, TimedEvent};
pub use request::{Request, RequestState};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde_json::Value;

use crate::agent_graph::NodeKind;
use crate::block_memory::{tokens_to_blocks, BlockPool, GradualReservation, RequestId};
use crate::scenario::{Policy, Scenario};
use crate::space_scheduler::{
    score_agent_types, select_critical, update_memory_reservations, PartitionPlan, WaitingInfo,
};
use crate::time_scheduler::{
    plan_predictive_upload, should_offload, FcPredictionTable, OffloadChoice, OffloadDecision,
    OffloadQuery, UploadPlan, WaitingDemand,
};
use crate::trace::{TraceEvent, TraceKind};
use crate::workload::{Workload, WorkloadError};

/// How often the run loop reports progress to the `log` facade (debug
/// level); enable a logger and set the level to see it.
const PROGRESS_EVERY_EVENTS: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Offload,
    Upload,
}

#[derive(Debug, Clone)]
struct TransferTicket {
    request: RequestId,
    direction: Direction,
    blocks: u64,
    end_ms: f64,
}

/// The prefill/decode batch committed for the step in flight.
#[derive(Debug, Clone, Default)]
struct StepPlan {
    prefilling: Vec<RequestId>,
    decoding: Vec<RequestId>,
    dt_ms: f64,
}

#[derive(Debug, Clone)]
struct InstanceState {
    arrival_ms: f64,
    /// Unfinished predecessors per node; a node spawns when this hits zero.
    pending_preds: Vec<usize>,
    spawned: Vec<bool>,
    nodes_done: usize,
    finished: bool,
}

/// Aggregate counters exposed alongside the trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCounters {
    /// Pressure and self evictions (policy-driven frees excluded).
    pub preemptions: u64,
    pub critical_inversions: u64,
    pub offloads: u64,
    pub upload_stalls: u64,
    pub host_acquisitions: u64,
    pub completed_instances: u64,
    pub completed_requests: u64,
}

/// Outcome of one simulated run.
#[derive(Debug)]
pub struct RunResult {
    pub trace: Vec<TraceEvent>,
    pub counters: RunCounters,
    pub truncated: bool,
}

/// Convenience wrapper: build the workload, run to completion, return the
/// trace and counters.
pub fn run_scenario(scenario: &Scenario, policy: Policy) -> Result<RunResult, WorkloadError> {
    let workload = Workload::new(scenario.clone())?;
    let mut engine = SimEngine::new(workload, policy);
    Ok(engine.run())
}

pub struct SimEngine {
    workload: Workload,
    policy: Policy,
    pool: BlockPool,
    queue: EventQueue,
    now_ms: f64,
    horizon_ms: f64,

    requests: BTreeMap<RequestId, Request>,
    next_request_id: RequestId,
    instances: BTreeMap<InstanceId, InstanceState>,

    prediction: FcPredictionTable,
    partition: PartitionPlan,

    step_count: u64,
    step_scheduled: bool,
    in_flight: Option<StepPlan>,
    /// (decoded tokens, elapsed ms) per recent step, newest last.
    window: VecDeque<(u64, f64)>,

    pending_offloads: Vec<(RequestId, OffloadDecision)>,
    upload_plans: BTreeMap<RequestId, UploadPlan>,
    reservations: BTreeMap<RequestId, GradualReservation>,
    tickets: BTreeMap<TicketId, TransferTicket>,
    next_ticket_id: TicketId,
    resume_ready: BTreeSet<RequestId>,
    /// Uploads currently blocked on device blocks; dedupes stall reporting
    /// across retry cycles.
    stalled_uploads: BTreeSet<RequestId>,

    trace: Vec<TraceEvent>,
    counters: RunCounters,
    truncated: bool,
    /// Check pool and state invariants after every event (test harnesses).
    paranoid: bool,
}

impl SimEngine {
    pub fn new(workload: Workload, policy: Policy) -> Self {
        let sc = workload.scenario();
        let pool = BlockPool::new(
            sc.engine.total_device_blocks,
            sc.engine.total_host_blocks,
            sc.engine.block_size_tokens,
            sc.engine.host_buffering,
        );
        let prediction = FcPredictionTable::new(sc.time_scheduler.alpha, sc.time_scheduler.beta);
        let horizon_ms = sc.horizon_ms();
        SimEngine {
            workload,
            policy,
            pool,
            queue: EventQueue::new(),
            now_ms: 0.0,
            horizon_ms,
            requests: BTreeMap::new(),
            next_request_id: 1,
            instances: BTreeMap::new(),
            prediction,
            partition: PartitionPlan::empty(),
            step_count: 0,
            step_scheduled: false,
            in_flight: None,
            window: VecDeque::new(),
            pending_offloads: Vec::new(),
            upload_plans: BTreeMap::new(),
            reservations: BTreeMap::new(),
            tickets: BTreeMap::new(),
            next_ticket_id: 1,
            resume_ready: BTreeSet::new(),
            stalled_uploads: BTreeSet::new(),
            trace: Vec::new(),
            counters: RunCounters::default(),
            truncated: false,
            paranoid: false,
        }
    }

    /// Enables per-event invariant checking (expensive; for test suites).
    pub fn set_paranoid(&mut self, on: bool) {
        self.paranoid = on;
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn run(&mut self) -> RunResult {
        let arrivals = self.workload.arrivals();
        self.run_with_arrivals(&arrivals)
    }

    /// Runs with explicit arrival times instead of the scenario's sampled
    /// Poisson process (closed-form tests and calibration checks).
    pub fn run_with_arrivals(&mut self, arrivals: &[f64]) -> RunResult {
        for (i, t) in arrivals.iter().enumerate() {
            self.queue.push(*t, SimEvent::Arrival { instance: i as u64 });
        }
        let mut processed: u64 = 0;
        while let Some(ev) = self.queue.pop() {
            if ev.t_ms > self.horizon_ms {
                self.truncated = true;
                self.now_ms = self.horizon_ms;
                break;
            }
            self.now_ms = ev.t_ms;
            self.dispatch(ev.event);
            processed += 1;
            if processed % PROGRESS_EVERY_EVENTS == 0 {
                log::debug!(
                    "t={:.0}ms events={} apps_done={} requests_live={}",
                    self.now_ms,
                    processed,
                    self.counters.completed_instances,
                    self.requests.values().filter(|r| r.state.is_live()).count(),
                );
            }
            if self.paranoid {
                if let Err(e) = self.check_invariants() {
                    panic!("invariant violated at t={} after {:?}: {e}", self.now_ms, ev.event);
                }
            }
        }
        let live = self.requests.values().filter(|r| r.state.is_live()).count();
        if live > 0 {
            self.truncated = true;
        }
        if self.truncated {
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::Truncated).with("live", live as u64),
            );
        }
        self.counters.host_acquisitions = self.pool.host_acquisitions();
        RunResult {
            trace: std::mem::take(&mut self.trace),
            counters: self.counters,
            truncated: self.truncated,
        }
    }

    fn dispatch(&mut self, event: SimEvent) {
        match event {
            SimEvent::Arrival { instance } => self.on_arrival(instance),
            SimEvent::CallStart { request } => self.on_call_start(request),
            SimEvent::CallFinish { request } => self.on_call_finish(request),
            SimEvent::TransferDone { ticket } => self.on_transfer_done(ticket),
            SimEvent::ReservationTick { request, tick } => self.on_reservation_tick(request, tick),
            SimEvent::StepComplete => self.on_step_complete(),
        }
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    // ---- arrivals and spawning ----------------------------------------

    fn on_arrival(&mut self, instance: InstanceId) {
        let graph = self.workload.graph();
        let n = graph.node_count();
        let pending_preds: Vec<usize> = (0..n).map(|i| graph.predecessors(i).len()).collect();
        let entries = graph.entries();
        self.instances.insert(
            instance,
            InstanceState {
                arrival_ms: self.now_ms,
                pending_preds,
                spawned: vec![false; n],
                nodes_done: 0,
                finished: false,
            },
        );
        self.emit(TraceEvent::new(self.now_ms, TraceKind::AppArrival).inst(instance));
        for e in entries {
            self.spawn_request(instance, e);
        }
        self.ensure_stepping();
    }

    fn spawn_request(&mut self, instance: InstanceId, node_idx: usize) {
        let inst = self.instances.get_mut(&instance).expect("spawn for known instance");
        debug_assert!(!inst.spawned[node_idx], "node spawns once per instance");
        inst.spawned[node_idx] = true;

        let (prompt, output) = self.workload.sample_lengths(instance, node_idx);
        let node = self.workload.graph().node(node_idx);
        let call_boundary = (node.kind == NodeKind::Func).then(|| output.div_ceil(2));
        let expected = self.workload.expected_total_tokens(node_idx);
        let id = self.next_request_id;
        self.next_request_id += 1;
        let agent_type = node.agent_type.clone();
        let req = Request::new(
            id,
            instance,
            node_idx,
            agent_type.clone(),
            prompt,
            output,
            expected,
            call_boundary,
            self.now_ms,
        );
        self.requests.insert(id, req);
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::RequestSpawn)
                .req(id)
                .inst(instance)
                .agent(&agent_type)
                .with("node", self.workload.graph().node(node_idx).id.as_str())
                .with("prompt", prompt)
                .with("output", output),
        );
    }

    // ---- function calls -------------------------------------------------

    fn on_call_start(&mut self, rid: RequestId) {
        // The request usually sits in StalledFc, but a growth eviction in
        // the same step boundary may already have displaced it; the external
        // call runs regardless of where its cache is.
        let (agent_type, node_idx, instance, stalled) = {
            let r = &self.requests[&rid];
            (r.agent_type.clone(), r.node_idx, r.instance, r.state == RequestState::StalledFc)
        };
        let held = self.pool.device_held(rid);
        let node = self.workload.graph().node(node_idx);
        let label = node.id.clone();
        let hint = node.predict_time_ms;
        let cold = self.workload.cold_start_ms(node_idx);
        self.prediction.register(&agent_type, &label, cold);
        let t_pred = self.prediction.predict(&agent_type, &label, hint);
        let latency = self.workload.sample_call_latency(instance, node_idx);
        {
            let r = self.requests.get_mut(&rid).expect("known request");
            r.call_started_ms = Some(self.now_ms);
            r.call_latency_ms = Some(latency);
            r.predicted_finish_ms = Some(self.now_ms + t_pred);
        }
        self.queue.push(self.now_ms + latency, SimEvent::CallFinish { request: rid });
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::CallStart)
                .req(rid)
                .inst(instance)
                .agent(&agent_type)
                .blocks(held)
                .with("label", label.as_str())
                .with("predicted_ms", t_pred),
        );
        if !stalled {
            return;
        }

        if self.policy.evict_on_stall() {
            // Baseline behaviour: drop the cache now, recompute on return.
            let blocks = self.pool.device_held(rid);
            if blocks > 0 {
                self.pool.release_all(rid, &agent_type);
                let r = self.requests.get_mut(&rid).expect("known request");
                r.recompute_blocks = blocks;
                r.set_state(RequestState::Evicted);
                self.emit(
                    TraceEvent::new(self.now_ms, TraceKind::Evicted)
                        .req(rid)
                        .agent(&agent_type)
                        .blocks(blocks)
                        .with("cause", "policy"),
                );
                self.ensure_stepping();
            }
        } else if self.policy.time_enabled() {
            let waiting: Vec<WaitingDemand> = self
                .requests
                .values()
                .filter(|r| r.state == RequestState::Waiting)
                .map(|r| WaitingDemand { request: r.id, total_tokens: r.expected_total_tokens })
                .collect();
            let query = OffloadQuery {
                request: rid,
                agent_type: &agent_type,
                call_label: &label,
                hint_ms: hint,
                n_blocks: held,
                waiting: &waiting,
                v_throughput_tokens_per_s: self.v_throughput(),
            };
            let decision =
                should_offload(&query, &self.prediction, &self.workload.scenario().cost_model);
            let mut ev = TraceEvent::new(self.now_ms, TraceKind::OffloadDecided)
                .req(rid)
                .agent(&agent_type)
                .blocks(held)
                .with("choice", match decision.choice {
                    OffloadChoice::Offload => "offload",
                    OffloadChoice::Retain => "retain",
                })
                .with("reason", decision.reason)
                .with("t_fc_ms", decision.t_fc_ms)
                .with("t_transfer_ms", decision.t_transfer_ms);
            if let Some(m) = decision.matched_waiting {
                ev = ev.with("beneficiary", m);
            }
            self.emit(ev);
            if decision.choice == OffloadChoice::Offload {
                self.pending_offloads.push((rid, decision));
                self.ensure_stepping();
            }
        }
    }

    fn on_call_finish(&mut self, rid: RequestId) {
        let (agent_type, observed, node_idx, predicted) = {
            let r = self.requests.get_mut(&rid).expect("known request");
            r.call_done = true;
            let started = r.call_started_ms.expect("call finished implies started");
            (r.agent_type.clone(), self.now_ms - started, r.node_idx, r.predicted_finish_ms)
        };
        let label = self.workload.graph().node(node_idx).id.clone();
        self.prediction.record(&agent_type, &label, observed);
        if let Some(p) = predicted {
            let delta = self.now_ms - p;
            let kind =
                if delta <= 0.0 { TraceKind::CallFinishEarly } else { TraceKind::CallFinishLate };
            self.emit(
                TraceEvent::new(self.now_ms, kind)
                    .req(rid)
                    .agent(&agent_type)
                    .with("observed_ms", observed)
                    .with("delta_ms", delta),
            );
        }
        let state = self.requests[&rid].state;
        match state {
            RequestState::StalledFc => {
                self.resume_ready.insert(rid);
            }
            RequestState::Offloaded => {
                // Upload as soon as possible; the cycle picks this up.
                self.requests.get_mut(&rid).expect("known").upload_after_offload = true;
            }
            RequestState::Uploading => {} // resume decided at TransferDone
            RequestState::Evicted => {
                let r = self.requests.get_mut(&rid).expect("known");
                r.set_state(RequestState::Waiting);
                r.queued_since_ms = self.now_ms;
            }
            other => debug_assert!(false, "call finish in state {other:?}"),
        }
        self.ensure_stepping();
    }

    // ---- transfers ------------------------------------------------------

    fn on_transfer_done(&mut self, ticket_id: TicketId) {
        let ticket = self.tickets.remove(&ticket_id).expect("ticket fires once");
        debug_assert_eq!(self.now_ms, ticket.end_ms, "ticket fires at its scheduled time");
        let rid = ticket.request;
        let agent_type = self.requests[&rid].agent_type.clone();
        self.requests.get_mut(&rid).expect("known").ticket = None;
        match ticket.direction {
            Direction::Offload => {
                self.pool
                    .finish_offload(rid, &agent_type, ticket.blocks)
                    .expect("offload completion consistent");
                self.emit(
                    TraceEvent::new(self.now_ms, TraceKind::OffloadDone)
                        .req(rid)
                        .agent(&agent_type)
                        .blocks(ticket.blocks),
                );
            }
            Direction::Upload => {
                self.pool.finish_upload(rid, ticket.blocks).expect("upload completion consistent");
                self.upload_plans.remove(&rid);
                let call_done = {
                    let r = self.requests.get_mut(&rid).expect("known");
                    r.set_state(RequestState::StalledFc);
                    r.call_done
                };
                self.emit(
                    TraceEvent::new(self.now_ms, TraceKind::UploadDone)
                        .req(rid)
                        .agent(&agent_type)
                        .blocks(ticket.blocks),
                );
                if call_done {
                    self.resume_ready.insert(rid);
                }
            }
        }
        self.ensure_stepping();
    }

    fn on_reservation_tick(&mut self, rid: RequestId, tick: usize) {
        // Stale ticks (upload already started or the plan was dropped) no-op.
        let Some(res) = self.reservations.get_mut(&rid) else { return };
        if self.requests[&rid].state != RequestState::Offloaded {
            return;
        }
        let got = res.tick(&mut self.pool);
        let readiness = res.readiness();
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::ReservationTick)
                .req(rid)
                .blocks(got)
                .with("tick", tick as u64)
                .with("readiness", readiness),
        );
    }

    // ---- engine steps ---------------------------------------------------

    fn ensure_stepping(&mut self) {
        if self.step_scheduled {
            return;
        }
        if self.requests.values().any(|r| r.state.is_live()) {
            self.queue.push(self.now_ms, SimEvent::StepComplete);
            self.step_scheduled = true;
        }
    }

    fn on_step_complete(&mut self) {
        self.step_scheduled = false;
        if let Some(plan) = self.in_flight.take() {
            self.finalize_step(plan);
        }
        // Idle ticks (no batch in flight) leave the throughput window
        // untouched: it reflects recent decode steps, not wall-clock gaps.
        self.run_cycle();
    }

    fn finalize_step(&mut self, plan: StepPlan) {
        let bs = self.block_size();
        for rid in &plan.prefilling {
            let (prefill_ms, agent_type) = {
                let r = &self.requests[rid];
                (self.prefill_duration_ms(r), r.agent_type.clone())
            };
            let r = self.requests.get_mut(rid).expect("known");
            r.recompute_blocks = 0;
            r.set_state(RequestState::Decode);
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::PrefillDone)
                    .req(*rid)
                    .agent(&agent_type)
                    .with("prefill_ms", prefill_ms),
            );
        }

        let mut tokens = 0u64;
        for rid in &plan.decoding {
            let rid = *rid;
            debug_assert_eq!(self.requests[&rid].state, RequestState::Decode);
            // Secure the next token's block before granting the token: a
            // request preempted here retries the same position later, so the
            // call-boundary check below never skips its firing token.
            let (before, after, agent_type) = {
                let r = &self.requests[&rid];
                let before = r.footprint_blocks(bs);
                let after = tokens_to_blocks(r.prompt_tokens + r.generated + 1, bs);
                (before, after, r.agent_type.clone())
            };
            if after > before {
                let need = after - before;
                let mut ok = self.pool.allocate(rid, &agent_type, need).is_ok();
                if !ok {
                    self.evict_for_pressure(&agent_type, need, rid);
                    ok = self.pool.allocate(rid, &agent_type, need).is_ok();
                }
                if !ok {
                    // Last resort: the growing request preempts itself.
                    let held = self.pool.device_held(rid);
                    self.pool.release_all(rid, &agent_type);
                    let r = self.requests.get_mut(&rid).expect("known");
                    r.recompute_blocks = after;
                    r.set_state(RequestState::Evicted);
                    r.set_state(RequestState::Waiting);
                    r.queued_since_ms = self.now_ms;
                    self.counters.preemptions += 1;
                    self.emit(
                        TraceEvent::new(self.now_ms, TraceKind::Evicted)
                            .req(rid)
                            .agent(&agent_type)
                            .blocks(held)
                            .with("cause", "self"),
                    );
                    continue;
                }
            }
            tokens += 1;
            let r = self.requests.get_mut(&rid).expect("known");
            r.generated += 1;
            if Some(r.generated) == r.call_boundary && r.call_started_ms.is_none() {
                r.set_state(RequestState::StalledFc);
                self.queue.push(self.now_ms, SimEvent::CallStart { request: rid });
            }
        }
        self.push_window(tokens, plan.dt_ms);
    }

    fn run_cycle(&mut self) {
        self.step_count += 1;

        // Finished decoders complete first so their blocks and successors
        // are visible to everything below.
        let finished: Vec<RequestId> = self
            .requests
            .values()
            .filter(|r| r.state == RequestState::Decode && r.decode_complete())
            .map(|r| r.id)
            .collect();
        for rid in finished {
            self.complete_request(rid);
        }

        let sc = self.workload.scenario();
        let update_period = sc.space_scheduler.update_period_steps.max(1);
        let util_period = sc.engine.util_sample_period_steps.max(1);
        if self.policy.space_enabled() && self.step_count % update_period == 0 {
            self.update_partition();
        }
        self.start_due_uploads();
        self.launch_offloads();
        self.resume_and_admit();
        if self.step_count % util_period == 0 {
            self.emit_util_sample();
        }
        self.form_step();
    }

    fn complete_request(&mut self, rid: RequestId) {
        let (agent_type, instance, node_idx, generated, spawn_ms) = {
            let r = &self.requests[&rid];
            (r.agent_type.clone(), r.instance, r.node_idx, r.generated, r.spawn_ms)
        };
        self.pool.release_all(rid, &agent_type);
        self.resume_ready.remove(&rid);
        {
            let r = self.requests.get_mut(&rid).expect("known");
            r.set_state(RequestState::Done);
            r.done_ms = Some(self.now_ms);
        }
        self.counters.completed_requests += 1;
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::RequestDone)
                .req(rid)
                .inst(instance)
                .agent(&agent_type)
                .with("tokens", generated)
                .with("e2e_ms", self.now_ms - spawn_ms),
        );

        let successors: Vec<usize> = self.workload.graph().successors(node_idx).to_vec();
        let mut to_spawn = Vec::new();
        let (finished, arrival_ms) = {
            let inst = self.instances.get_mut(&instance).expect("known instance");
            inst.nodes_done += 1;
            for s in successors {
                inst.pending_preds[s] -= 1;
                if inst.pending_preds[s] == 0 && !inst.spawned[s] {
                    to_spawn.push(s);
                }
            }
            let all_done = inst.nodes_done == self.workload.graph().node_count();
            if all_done {
                inst.finished = true;
            }
            (all_done, inst.arrival_ms)
        };
        for s in to_spawn {
            self.spawn_request(instance, s);
        }
        if finished {
            self.counters.completed_instances += 1;
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::AppDone)
                    .inst(instance)
                    .with("e2e_ms", self.now_ms - arrival_ms),
            );
        }
    }

    fn update_partition(&mut self) {
        let total = self.pool.total_device();
        let usage = self.pool.device_used_total() + self.pool.pending_free();
        let mut per_type_usage: BTreeMap<String, u64> = BTreeMap::new();
        for (rid, blocks) in self.pool.used_by() {
            let ty = self.requests[&rid].agent_type.clone();
            *per_type_usage.entry(ty).or_insert(0) += blocks;
        }
        let params = self.workload.scenario().space_scheduler;
        let scores = score_agent_types(
            self.workload.graph(),
            &self.waiting_infos(),
            params.w_static,
            self.now_ms,
        );
        let critical = select_critical(&scores, params.critical_ratio);
        let plan = update_memory_reservations(
            &self.partition,
            &params,
            total,
            usage,
            &per_type_usage,
            &scores,
            &critical,
        );
        self.pool.apply_reservation_targets(&plan.reserve_num, &plan.critical);
        let reserves = Value::Object(
            plan.reserve_num
                .iter()
                .map(|(k, v)| (k.clone(), Value::from(*v)))
                .collect(),
        );
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::PartitionUpdated)
                .with("ratio", plan.total_reserve_ratio)
                .with("usage_ratio", usage as f64 / total.max(1) as f64)
                .with("critical", plan.critical.clone())
                .with("reserves", reserves),
        );
        self.partition = plan;
    }

    fn start_due_uploads(&mut self) {
        let due: Vec<RequestId> = self
            .upload_plans
            .iter()
            .filter(|(rid, plan)| {
                let r = &self.requests[*rid];
                r.state == RequestState::Offloaded
                    && r.ticket.is_none()
                    && (plan.immediate
                        || r.call_done
                        || r.upload_after_offload
                        || self.now_ms >= plan.upload_start_ms - 1e-9)
            })
            .map(|(rid, _)| *rid)
            .collect();
        for rid in due {
            self.try_start_upload(rid);
        }
    }

    fn try_start_upload(&mut self, rid: RequestId) {
        let agent_type = self.requests[&rid].agent_type.clone();
        let blocks = self.pool.host_held(rid);
        debug_assert!(blocks > 0, "offloaded request holds host blocks");
        let held = self.pool.device_held(rid);
        let mut missing = blocks - held;
        if missing > 0 {
            if let Some(res) = self.reservations.get_mut(&rid) {
                res.claim_rest(&mut self.pool);
                missing = blocks - self.pool.device_held(rid);
            } else {
                // All-at-once claim.
                if self.pool.allocate(rid, &agent_type, missing).is_ok() {
                    missing = 0;
                }
            }
        }
        if missing > 0 {
            // Report once per blocked upload, not once per retry cycle.
            if self.stalled_uploads.insert(rid) {
                self.counters.upload_stalls += 1;
                self.emit(
                    TraceEvent::new(self.now_ms, TraceKind::UploadStall)
                        .req(rid)
                        .agent(&agent_type)
                        .blocks(blocks)
                        .with("missing", missing),
                );
            }
            return;
        }
        self.stalled_uploads.remove(&rid);
        self.reservations.remove(&rid);
        let cost = self.workload.scenario().cost_model;
        let end_ms = self.now_ms + cost.upload_ms(blocks);
        let ticket_id = self.new_ticket(rid, Direction::Upload, blocks, end_ms);
        {
            let r = self.requests.get_mut(&rid).expect("known");
            r.set_state(RequestState::Uploading);
            r.ticket = Some(ticket_id);
        }
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::UploadStarted)
                .req(rid)
                .agent(&agent_type)
                .blocks(blocks),
        );
    }

    fn launch_offloads(&mut self) {
        let pending = std::mem::take(&mut self.pending_offloads);
        for (rid, decision) in pending {
            let (state, call_done, agent_type, call_started) = {
                let r = &self.requests[&rid];
                (r.state, r.call_done, r.agent_type.clone(), r.call_started_ms)
            };
            // The call may have finished (or the request been evicted)
            // between decision and launch; the stall is already over.
            if state != RequestState::StalledFc || call_done {
                continue;
            }
            let blocks = self.pool.device_held(rid);
            if blocks == 0 {
                continue;
            }
            let acq = match self.pool.start_offload(rid, blocks) {
                Ok(acq) => acq,
                Err(_) => continue, // host capacity short: retain instead
            };
            let cost = self.workload.scenario().cost_model;
            let end_ms = self.now_ms + cost.offload_ms(blocks);
            let ticket_id = self.new_ticket(rid, Direction::Offload, blocks, end_ms);
            {
                let r = self.requests.get_mut(&rid).expect("known");
                r.set_state(RequestState::Offloaded);
                r.ticket = Some(ticket_id);
            }
            self.counters.offloads += 1;
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::OffloadStarted)
                    .req(rid)
                    .agent(&agent_type)
                    .blocks(blocks)
                    .with("host_reused", acq.reused)
                    .with("host_acquired", acq.acquired),
            );

            let cfg = self.workload.scenario().time_scheduler;
            let plan = plan_predictive_upload(
                rid,
                blocks,
                call_started.expect("stalled request has a running call"),
                decision.t_fc_ms,
                end_ms,
                &cost,
                &cfg,
            );
            if !plan.immediate && self.workload.scenario().engine.gradual_reservation {
                let res = GradualReservation::new(
                    rid,
                    &agent_type,
                    blocks,
                    cfg.reservation_cycles,
                    plan.reservation_deadline_ms,
                );
                for (i, t) in plan.tick_times_ms.iter().enumerate() {
                    self.queue.push(*t, SimEvent::ReservationTick { request: rid, tick: i });
                }
                self.reservations.insert(rid, res);
            }
            self.upload_plans.insert(rid, plan);
        }
    }

    fn resume_and_admit(&mut self) {
        let max_batch = self.workload.scenario().engine.max_batch_size;
        let mut batch = self
            .requests
            .values()
            .filter(|r| matches!(r.state, RequestState::Prefill | RequestState::Decode))
            .count();

        // Resumes first: stalled work already on device continues cheapest.
        let ready: Vec<RequestId> = self.resume_ready.iter().copied().collect();
        for rid in ready {
            if batch >= max_batch {
                break;
            }
            self.resume_ready.remove(&rid);
            if self.requests[&rid].decode_complete() {
                self.complete_request(rid);
                continue;
            }
            let agent_type = {
                let r = self.requests.get_mut(&rid).expect("known");
                r.set_state(RequestState::Decode);
                r.agent_type.clone()
            };
            batch += 1;
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::Resumed).req(rid).agent(&agent_type),
            );
        }

        // Admissions in hybrid-priority order: type score descending, then
        // longest-queued, then id.
        let scores = self.type_combined_scores();
        let mut waiting: Vec<(RequestId, f64, f64)> = self
            .requests
            .values()
            .filter(|r| r.state == RequestState::Waiting)
            .map(|r| (r.id, scores.get(&r.agent_type).copied().unwrap_or(0.0), r.queued_since_ms))
            .collect();
        waiting.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0))
        });
        let bs = self.block_size();
        let headroom = self.workload.scenario().engine.admission_headroom_blocks;
        for (rid, _, _) in waiting {
            if batch >= max_batch {
                break;
            }
            let (agent_type, need, recompute) = {
                let r = &self.requests[&rid];
                (r.agent_type.clone(), r.footprint_blocks(bs), r.recompute_blocks > 0)
            };
            // An admission must leave `headroom` shared blocks behind for
            // decode growth. If that fails, stalled low-priority caches may
            // be evicted to make room; skip-and-continue afterwards lets
            // smaller requests or types with unclaimed reservations still
            // board this step.
            if self.pool.alloc_headroom(&agent_type) < need + headroom {
                self.evict_for_pressure(&agent_type, need + headroom, rid);
            }
            if self.pool.alloc_headroom(&agent_type) < need + headroom
                || self.pool.allocate(rid, &agent_type, need).is_err()
            {
                continue;
            }
            {
                let r = self.requests.get_mut(&rid).expect("known");
                r.set_state(RequestState::Prefill);
                if r.first_admit_ms.is_none() {
                    r.first_admit_ms = Some(self.now_ms);
                }
                r.last_admit_ms = self.now_ms;
            }
            batch += 1;
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::Admitted)
                    .req(rid)
                    .agent(&agent_type)
                    .blocks(need)
                    .with("recompute", recompute),
            );
        }
    }

    fn form_step(&mut self) {
        let sc = &self.workload.scenario().engine;
        let (step_base_ms, step_per_seq_ms) = (sc.step_base_ms, sc.step_per_seq_ms);
        let mut prefilling = Vec::new();
        let mut decoding = Vec::new();
        for r in self.requests.values() {
            match r.state {
                RequestState::Prefill => prefilling.push(r.id),
                RequestState::Decode => decoding.push(r.id),
                _ => {}
            }
        }
        if prefilling.is_empty() && decoding.is_empty() {
            // No batch; keep ticking while anything is alive so partition
            // updates, offload launches, and admissions still happen.
            self.in_flight = None;
            if self.requests.values().any(|r| r.state.is_live()) {
                self.queue.push(self.now_ms + step_base_ms, SimEvent::StepComplete);
                self.step_scheduled = true;
            }
            return;
        }
        let prefill_ms: f64 =
            prefilling.iter().map(|rid| self.prefill_duration_ms(&self.requests[rid])).sum();
        let decode_ms = if decoding.is_empty() {
            0.0
        } else {
            step_base_ms + step_per_seq_ms * decoding.len() as f64
        };
        let dt_ms = prefill_ms + decode_ms;
        self.queue.push(self.now_ms + dt_ms, SimEvent::StepComplete);
        self.step_scheduled = true;
        self.in_flight = Some(StepPlan { prefilling, decoding, dt_ms });
    }

    // ---- eviction ---------------------------------------------------------

    /// Frees stalled victims until `cause_type` could allocate `need` blocks.
    /// Victims are taken in ascending combined-score order (most recently
    /// admitted first among ties); a victim whose freed blocks would all
    /// refill a reservation the cause cannot draw from is skipped. Requests
    /// whose call has not started yet are off limits: at the stall instant
    /// the offload decision gets first claim on the cache. Under the retain
    /// and evict baselines this never evicts anyone — retain holds stalled
    /// caches on device by definition, and evict freed them at call start —
    /// so the requester simply keeps waiting.
    fn evict_for_pressure(&mut self, cause_type: &str, need: u64, cause_rid: RequestId) -> bool {
        if self.pool.alloc_headroom(cause_type) >= need {
            return true;
        }
        if !self.policy.pressure_evicts() {
            return false;
        }
        let scores = self.type_combined_scores();
        let cause_score = scores.get(cause_type).copied().unwrap_or(0.0);
        // With the space scheduler on, a request may only displace caches of
        // its own priority or below: lower-priority demand waits rather than
        // sacrificing a more critical agent's state. Without it, pressure
        // takes the cheapest victim regardless — the unprotected behaviour
        // the inversion counter exists to expose.
        let shielded = self.policy.space_enabled();
        let mut victims: Vec<(f64, RequestId)> = self
            .requests
            .values()
            .filter(|r| {
                r.id != cause_rid
                    && r.state == RequestState::StalledFc
                    && r.call_started_ms.is_some()
                    && self.pool.device_held(r.id) > 0
            })
            .map(|r| (scores.get(&r.agent_type).copied().unwrap_or(0.0), r.id))
            .filter(|(score, _)| !shielded || *score <= cause_score)
            .collect();
        victims.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let (ra, rb) = (&self.requests[&a.1], &self.requests[&b.1]);
                rb.last_admit_ms.total_cmp(&ra.last_admit_ms).then(rb.id.cmp(&ra.id))
            })
        });
        for (victim_score, vid) in victims {
            if self.pool.alloc_headroom(cause_type) >= need {
                break;
            }
            let victim_type = self.requests[&vid].agent_type.clone();
            let blocks = self.pool.device_held(vid);
            let preview = self.pool.preview_release(&victim_type, blocks);
            let usable = preview.to_free
                + if victim_type == cause_type { preview.to_reservation } else { 0 };
            if usable == 0 {
                continue;
            }
            self.pool.release_all(vid, &victim_type);
            self.resume_ready.remove(&vid);
            self.pending_offloads.retain(|(rid, _)| *rid != vid);
            self.upload_plans.remove(&vid);
            self.reservations.remove(&vid);
            {
                let r = self.requests.get_mut(&vid).expect("known");
                r.recompute_blocks = blocks;
                r.set_state(RequestState::Evicted);
                if r.call_done {
                    r.set_state(RequestState::Waiting);
                    r.queued_since_ms = self.now_ms;
                }
            }
            self.counters.preemptions += 1;
            self.emit(
                TraceEvent::new(self.now_ms, TraceKind::Evicted)
                    .req(vid)
                    .agent(&victim_type)
                    .blocks(blocks)
                    .with("cause", "pressure")
                    .with("cause_type", cause_type),
            );
            if victim_score > cause_score {
                self.counters.critical_inversions += 1;
                self.emit(
                    TraceEvent::new(self.now_ms, TraceKind::CriticalInversion)
                        .req(vid)
                        .agent(&victim_type)
                        .with("victim_score", victim_score)
                        .with("cause_type", cause_type)
                        .with("cause_score", cause_score),
                );
            }
        }
        self.pool.alloc_headroom(cause_type) >= need
    }

    // ---- scoring and sizing helpers ------------------------------------

    fn block_size(&self) -> u64 {
        self.workload.scenario().engine.block_size_tokens
    }

    fn prefill_duration_ms(&self, r: &Request) -> f64 {
        if r.recompute_blocks > 0 {
            self.workload.scenario().cost_model.recompute_ms(r.recompute_blocks)
        } else {
            r.prompt_tokens as f64 / self.workload.scenario().engine.prefill_tokens_per_ms
        }
    }

    fn waiting_infos(&self) -> Vec<WaitingInfo> {
        self.requests
            .values()
            .filter(|r| r.state == RequestState::Waiting)
            .map(|r| WaitingInfo {
                agent_type: r.agent_type.clone(),
                arrival_ms: r.queued_since_ms,
                tokens_requested: r.expected_total_tokens,
            })
            .collect()
    }

    fn type_combined_scores(&self) -> BTreeMap<String, f64> {
        let params = self.workload.scenario().space_scheduler;
        score_agent_types(self.workload.graph(), &self.waiting_infos(), params.w_static, self.now_ms)
            .into_iter()
            .map(|s| (s.agent_type.clone(), s.combined()))
            .collect()
    }

    /// Observed decode throughput over the recent step window (tokens/s),
    /// falling back to the engine's nominal full-batch rate when the window
    /// is empty or saw no tokens.
    fn v_throughput(&self) -> f64 {
        let tokens: u64 = self.window.iter().map(|(t, _)| t).sum();
        let dt: f64 = self.window.iter().map(|(_, d)| d).sum();
        if tokens == 0 || dt <= 0.0 {
            let sc = &self.workload.scenario().engine;
            let mb = sc.max_batch_size as f64;
            return 1000.0 * mb / (sc.step_base_ms + sc.step_per_seq_ms * mb);
        }
        tokens as f64 / dt * 1000.0
    }

    fn push_window(&mut self, tokens: u64, dt_ms: f64) {
        self.window.push_back((tokens, dt_ms));
        let cap = self.workload.scenario().time_scheduler.throughput_window_steps.max(1);
        while self.window.len() > cap {
            self.window.pop_front();
        }
    }

    fn new_ticket(
        &mut self,
        request: RequestId,
        direction: Direction,
        blocks: u64,
        end_ms: f64,
    ) -> TicketId {
        let id = self.next_ticket_id;
        self.next_ticket_id += 1;
        self.tickets.insert(id, TransferTicket { request, direction, blocks, end_ms });
        self.queue.push(end_ms, SimEvent::TransferDone { ticket: id });
        id
    }

    fn emit_util_sample(&mut self) {
        let total = self.pool.total_device();
        let mut active = 0u64;
        let mut stalled = 0u64;
        let mut claims = 0u64;
        for (rid, blocks) in self.pool.used_by() {
            match self.requests[&rid].state {
                RequestState::Prefill | RequestState::Decode => active += blocks,
                RequestState::StalledFc => stalled += blocks,
                RequestState::Offloaded | RequestState::Uploading => claims += blocks,
                _ => {}
            }
        }
        let n_waiting =
            self.requests.values().filter(|r| r.state == RequestState::Waiting).count();
        let n_running = self
            .requests
            .values()
            .filter(|r| matches!(r.state, RequestState::Prefill | RequestState::Decode))
            .count();
        self.emit(
            TraceEvent::new(self.now_ms, TraceKind::UtilSample)
                .with("total", total)
                .with("free", self.pool.device_free())
                .with("unclaimed", self.pool.unclaimed_total())
                .with("pending", self.pool.pending_free())
                .with("active", active)
                .with("stalled", stalled)
                .with("claims", claims)
                .with("n_waiting", n_waiting as u64)
                .with("n_running", n_running as u64),
        );
    }

    /// Structural invariants: pool conservation plus state/holdings
    /// consistency for every request.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.pool.check_invariants()?;
        let bs = self.block_size();
        for r in self.requests.values() {
            let held = self.pool.device_held(r.id);
            let host = self.pool.host_held(r.id);
            let fp = r.footprint_blocks(bs);
            let fail = |msg: &str| {
                Err(format!(
                    "request {} in {:?}: {msg} (held {held}, host {host}, footprint {fp})",
                    r.id, r.state
                ))
            };
            match r.state {
                RequestState::Waiting | RequestState::Evicted | RequestState::Done => {
                    if held != 0 || host != 0 {
                        return fail("holds blocks while inactive");
                    }
                }
                RequestState::Prefill | RequestState::Decode | RequestState::StalledFc => {
                    if held != fp {
                        return fail("device holding does not match footprint");
                    }
                    if host != 0 {
                        return fail("resident request holds host blocks");
                    }
                }
                RequestState::Offloaded => {
                    if host != fp {
                        return fail("offloaded request must hold its footprint on host");
                    }
                    if held > fp {
                        return fail("upload claims exceed footprint");
                    }
                }
                RequestState::Uploading => {
                    if host != fp || held != fp {
                        return fail("uploading request must hold footprint on both sides");
                    }
                }
            }
        }
        Ok(())
    }
}
