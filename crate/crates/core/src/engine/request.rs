//! Per-request lifecycle state.

use crate::block_memory::{tokens_to_blocks, RequestId};
use crate::engine::events::InstanceId;

/// Where a request is in its life, from spawn to completion.
///
/// `StalledFc` covers both "function call in flight, KV resident on device"
/// and "call finished, waiting for a batch slot". `Offloaded` means the KV
/// lives (or is moving) on host memory; `Uploading` means it is moving back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Waiting,
    Prefill,
    Decode,
    StalledFc,
    Offloaded,
    Uploading,
    Evicted,
    Done,
}

impl RequestState {
    pub fn is_live(self) -> bool {
        self != RequestState::Done
    }

    /// Holds device blocks in this state (fully or partially).
    pub fn holds_device(self) -> bool {
        matches!(
            self,
            RequestState::Prefill | RequestState::Decode | RequestState::StalledFc
        )
    }

    fn can_transition(self, to: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, to),
            (Waiting, Prefill)
                | (Prefill, Decode)
                | (Decode, StalledFc)
                | (Decode, Done)
                | (Decode, Evicted)
                | (StalledFc, Decode)
                | (StalledFc, Offloaded)
                | (StalledFc, Evicted)
                | (StalledFc, Done)
                | (Offloaded, Uploading)
                | (Uploading, StalledFc)
                | (Evicted, Waiting)
        )
    }
}

/// One node of one application instance, running as a serving request.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub instance: InstanceId,
    pub node_idx: usize,
    pub agent_type: String,
    pub state: RequestState,

    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// Tokens decoded so far (monotone; survives stalls and eviction).
    pub generated: u64,
    /// Expected total footprint in tokens (prompt + mean output), used when
    /// this request is sized as an offload beneficiary.
    pub expected_total_tokens: f64,

    /// For function-call nodes: decode position at which the call fires.
    pub call_boundary: Option<u64>,
    pub call_started_ms: Option<f64>,
    pub call_latency_ms: Option<f64>,
    pub call_done: bool,
    /// Predicted completion timestamp recorded when the call started.
    pub predicted_finish_ms: Option<f64>,
    /// Call finished while the offload transfer was still in flight; start
    /// the upload as soon as the offload lands.
    pub upload_after_offload: bool,
    /// In-flight transfer ticket, if any.
    pub ticket: Option<u64>,

    pub spawn_ms: f64,
    /// When the request last entered the waiting queue (spawn or re-entry
    /// after eviction); drives the dynamic priority wait term.
    pub queued_since_ms: f64,
    pub first_admit_ms: Option<f64>,
    pub last_admit_ms: f64,
    pub done_ms: Option<f64>,

    /// Blocks that must be re-prefetched (recomputed) on readmission after
    /// an eviction dropped the KV cache.
    pub recompute_blocks: u64,
}

impl Request {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: RequestId,
        instance: InstanceId,
        node_idx: usize,
        agent_type: String,
        prompt_tokens: u64,
        output_tokens: u64,
        expected_total_tokens: f64,
        call_boundary: Option<u64>,
        spawn_ms: f64,
    ) -> Self {
        Request {
            id,
            instance,
            node_idx,
            agent_type,
            state: RequestState::Waiting,
            prompt_tokens,
            output_tokens,
            generated: 0,
            expected_total_tokens,
            call_boundary,
            call_started_ms: None,
            call_latency_ms: None,
            call_done: false,
            predicted_finish_ms: None,
            upload_after_offload: false,
            ticket: None,
            spawn_ms,
            queued_since_ms: spawn_ms,
            first_admit_ms: None,
            last_admit_ms: spawn_ms,
            done_ms: None,
            recompute_blocks: 0,
        }
    }

    pub fn set_state(&mut self, to: RequestState) {
        debug_assert!(
            self.state.can_transition(to),
            "request {} invalid transition {:?} -> {:?}",
            self.id,
            self.state,
            to
        );
        self.state = to;
    }

    /// KV footprint in blocks at the current decode position.
    pub fn footprint_blocks(&self, block_size_tokens: u64) -> u64 {
        tokens_to_blocks(self.prompt_tokens + self.generated, block_size_tokens)
    }

    /// True when the pending function call has not fired yet.
    pub fn call_pending(&self) -> bool {
        self.call_boundary.is_some() && self.call_started_ms.is_none()
    }

    /// Decoding is finished (call, if any, already resolved).
    pub fn decode_complete(&self) -> bool {
        self.generated >= self.output_tokens && (self.call_boundary.is_none() || self.call_done)
    }
}
