//! Deterministic time-ordered event queue.
//!
//! Ties at the same timestamp resolve by event-kind rank, then by insertion
//! sequence, so a run replays identically regardless of heap internals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::block_memory::RequestId;

pub type InstanceId = u64;
pub type TicketId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEvent {
    Arrival { instance: InstanceId },
    CallStart { request: RequestId },
    CallFinish { request: RequestId },
    TransferDone { ticket: TicketId },
    ReservationTick { request: RequestId, tick: usize },
    StepComplete,
}

impl SimEvent {
    /// Processing rank at equal timestamps; the step boundary always runs
    /// after same-time completions so its scheduling cycle sees them.
    fn rank(&self) -> u8 {
        match self {
            SimEvent::Arrival { .. } => 0,
            SimEvent::CallStart { .. } => 1,
            SimEvent::CallFinish { .. } => 2,
            SimEvent::TransferDone { .. } => 3,
            SimEvent::ReservationTick { .. } => 4,
            SimEvent::StepComplete => 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimedEvent {
    pub t_ms: f64,
    pub seq: u64,
    pub event: SimEvent,
}

impl PartialEq for TimedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TimedEvent {}

impl Ord for TimedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t_ms
            .total_cmp(&other.t_ms)
            .then_with(|| self.event.rank().cmp(&other.event.rank()))
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for TimedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap of simulation events.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<TimedEvent>>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue::default()
    }

    pub fn push(&mut self, t_ms: f64, event: SimEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(std::cmp::Reverse(TimedEvent { t_ms, seq, event }));
    }

    pub fn pop(&mut self) -> Option<TimedEvent> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_order() {
        let mut q = EventQueue::new();
        q.push(5.0, SimEvent::StepComplete);
        q.push(1.0, SimEvent::StepComplete);
        q.push(3.0, SimEvent::StepComplete);
        let times: Vec<f64> = std::iter::from_fn(|| q.pop()).map(|e| e.t_ms).collect();
        assert_eq!(times, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn same_time_orders_by_kind_rank() {
        let mut q = EventQueue::new();
        q.push(2.0, SimEvent::StepComplete);
        q.push(2.0, SimEvent::CallFinish { request: 1 });
        q.push(2.0, SimEvent::Arrival { instance: 0 });
        assert!(matches!(q.pop().unwrap().event, SimEvent::Arrival { .. }));
        assert!(matches!(q.pop().unwrap().event, SimEvent::CallFinish { .. }));
        assert!(matches!(q.pop().unwrap().event, SimEvent::StepComplete));
    }

    #[test]
    fn same_time_same_kind_orders_by_insertion() {
        let mut q = EventQueue::new();
        q.push(2.0, SimEvent::CallFinish { request: 10 });
        q.push(2.0, SimEvent::CallFinish { request: 20 });
        assert!(matches!(q.pop().unwrap().event, SimEvent::CallFinish { request: 10 }));
        assert!(matches!(q.pop().unwrap().event, SimEvent::CallFinish { request: 20 }));
    }
}
