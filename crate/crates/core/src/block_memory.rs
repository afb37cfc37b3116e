//! Paged KV-cache block accounting.
//!
//! The device pool is partitioned into four buckets that always sum to the
//! configured total: shared free blocks, per-request used blocks, unclaimed
//! per-agent-type reservations, and pending-free blocks still owned by an
//! in-flight offload. Host memory is a flat pool with an optional free-list
//! buffer so repeated offload cycles reuse capacity instead of acquiring it
//! again.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type RequestId = u64;

/// Linear transfer and recompute cost model.
///
/// Calibration: a 4096-block roundtrip costs `roundtrip_ms_per_4096_blocks`
/// split evenly between offload and upload, and recomputing the same blocks
/// costs `recompute_ms_per_4096_blocks` (150x the transfer at defaults).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferCostModel {
    pub roundtrip_ms_per_4096_blocks: f64,
    /// Fraction of the roundtrip attributed to the offload direction.
    pub offload_fraction: f64,
    pub recompute_ms_per_4096_blocks: f64,
}

impl Default for TransferCostModel {
    fn default() -> Self {
        TransferCostModel {
            roundtrip_ms_per_4096_blocks: 60.0,
            offload_fraction: 0.5,
            recompute_ms_per_4096_blocks: 9000.0,
        }
    }
}

impl TransferCostModel {
    pub fn roundtrip_ms(&self, blocks: u64) -> f64 {
        self.roundtrip_ms_per_4096_blocks * blocks as f64 / 4096.0
    }

    pub fn offload_ms(&self, blocks: u64) -> f64 {
        self.roundtrip_ms(blocks) * self.offload_fraction
    }

    pub fn upload_ms(&self, blocks: u64) -> f64 {
        self.roundtrip_ms(blocks) * (1.0 - self.offload_fraction)
    }

    pub fn recompute_ms(&self, blocks: u64) -> f64 {
        self.recompute_ms_per_4096_blocks * blocks as f64 / 4096.0
    }
}

/// Blocks needed to hold `tokens` at `block_size` tokens per block.
pub fn tokens_to_blocks(tokens: u64, block_size: u64) -> u64 {
    tokens.div_ceil(block_size)
}

/// Per-agent-type reservation state.
///
/// `target` is the partition plan's goal; `unclaimed` is how much of it is
/// physically granted from free blocks. Claims above a shrunken target are
/// never revoked: the entry drains as its requests free blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationEntry {
    pub target: u64,
    pub claimed: u64,
    pub unclaimed: u64,
}

impl ReservationEntry {
    pub fn effective(&self) -> u64 {
        self.claimed + self.unclaimed
    }

    fn is_empty(&self) -> bool {
        self.target == 0 && self.claimed == 0 && self.unclaimed == 0
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PoolError {
    #[error("allocation of zero blocks")]
    ZeroBlocks,
    #[error("insufficient device blocks: requested {requested}, available {available}")]
    InsufficientDevice { requested: u64, available: u64 },
    #[error("insufficient host capacity: requested {requested}, available {available}")]
    InsufficientHost { requested: u64, available: u64 },
    #[error("request {request} holds {held} blocks, operation needs {requested}")]
    NotHeld { request: RequestId, held: u64, requested: u64 },
}

/// Where an allocation came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Allocation {
    pub from_reservation: u64,
    pub from_free: u64,
}

impl Allocation {
    pub fn total(&self) -> u64 {
        self.from_reservation + self.from_free
    }
}

/// Where freed blocks went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FreeReturn {
    pub to_reservation: u64,
    pub to_free: u64,
}

/// Host-side outcome of starting an offload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HostAcquire {
    pub reused: u64,
    pub acquired: u64,
}

/// Device and host block pools with reservation-aware accounting.
#[derive(Debug, Clone)]
pub struct BlockPool {
    block_size: u64,
    total_device: u64,
    device_free: u64,
    pending_free: u64,
    device_used: BTreeMap<RequestId, u64>,
    reservations: BTreeMap<String, ReservationEntry>,
    total_host: u64,
    host_free_list: u64,
    host_in_use: BTreeMap<RequestId, u64>,
    host_buffering: bool,
    host_acquisitions: u64,
}

impl BlockPool {
    pub fn new(total_device: u64, total_host: u64, block_size: u64, host_buffering: bool) -> Self {
        BlockPool {
            block_size: block_size.max(1),
            total_device,
            device_free: total_device,
            pending_free: 0,
            device_used: BTreeMap::new(),
            reservations: BTreeMap::new(),
            total_host,
            host_free_list: 0,
            host_in_use: BTreeMap::new(),
            host_buffering,
            host_acquisitions: 0,
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn blocks_for_tokens(&self, tokens: u64) -> u64 {
        tokens_to_blocks(tokens, self.block_size)
    }

    pub fn total_device(&self) -> u64 {
        self.total_device
    }

    pub fn device_free(&self) -> u64 {
        self.device_free
    }

    pub fn pending_free(&self) -> u64 {
        self.pending_free
    }

    pub fn device_held(&self, request: RequestId) -> u64 {
        self.device_used.get(&request).copied().unwrap_or(0)
    }

    pub fn device_used_total(&self) -> u64 {
        self.device_used.values().sum()
    }

    pub fn used_by<'a>(&'a self) -> impl Iterator<Item = (RequestId, u64)> + 'a {
        self.device_used.iter().map(|(k, v)| (*k, *v))
    }

    pub fn reservation(&self, agent_type: &str) -> Option<ReservationEntry> {
        self.reservations.get(agent_type).copied()
    }

    pub fn unclaimed_total(&self) -> u64 {
        self.reservations.values().map(|e| e.unclaimed).sum()
    }

    pub fn host_held(&self, request: RequestId) -> u64 {
        self.host_in_use.get(&request).copied().unwrap_or(0)
    }

    pub fn host_in_use_total(&self) -> u64 {
        self.host_in_use.values().sum()
    }

    pub fn host_available(&self) -> u64 {
        self.total_host - self.host_in_use_total()
    }

    pub fn host_free_list(&self) -> u64 {
        self.host_free_list
    }

    /// Count of host blocks acquired outside the free-list buffer.
    pub fn host_acquisitions(&self) -> u64 {
        self.host_acquisitions
    }

    /// All-or-nothing allocation. Critical types (those holding a
    /// reservation) draw their unclaimed reservation first, then the shared
    /// pool; everyone else sees only the shared pool. On failure the pool is
    /// unchanged.
    pub fn allocate(
        &mut self,
        request: RequestId,
        agent_type: &str,
        n_blocks: u64,
    ) -> Result<Allocation, PoolError> {
        if n_blocks == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        let reserve_avail =
            self.reservations.get(agent_type).map(|e| e.unclaimed).unwrap_or(0);
        let from_reservation = n_blocks.min(reserve_avail);
        let from_free = n_blocks - from_reservation;
        if from_free > self.device_free {
            return Err(PoolError::InsufficientDevice {
                requested: n_blocks,
                available: self.device_free + reserve_avail,
            });
        }
        if from_reservation > 0 {
            let entry = self.reservations.get_mut(agent_type).expect("checked above");
            entry.unclaimed -= from_reservation;
            entry.claimed += from_reservation;
        }
        self.device_free -= from_free;
        *self.device_used.entry(request).or_insert(0) += n_blocks;
        Ok(Allocation { from_reservation, from_free })
    }

    /// Partial allocation used by gradual reservation ticks: grants up to
    /// `want` blocks, reservation first, and reports how many were taken.
    pub fn allocate_up_to(&mut self, request: RequestId, agent_type: &str, want: u64) -> Allocation {
        let reserve_avail =
            self.reservations.get(agent_type).map(|e| e.unclaimed).unwrap_or(0);
        let grant = want.min(reserve_avail + self.device_free);
        if grant == 0 {
            return Allocation::default();
        }
        let from_reservation = grant.min(reserve_avail);
        let from_free = grant - from_reservation;
        if from_reservation > 0 {
            let entry = self.reservations.get_mut(agent_type).expect("checked above");
            entry.unclaimed -= from_reservation;
            entry.claimed += from_reservation;
        }
        self.device_free -= from_free;
        *self.device_used.entry(request).or_insert(0) += grant;
        Allocation { from_reservation, from_free }
    }

    /// Returns `n_blocks` held by `request`. Blocks refill the agent type's
    /// reservation up to its target before joining the shared pool; claims
    /// above a shrunken target simply drain.
    pub fn free_blocks(
        &mut self,
        request: RequestId,
        agent_type: &str,
        n_blocks: u64,
    ) -> Result<FreeReturn, PoolError> {
        if n_blocks == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        let held = self.device_held(request);
        if held < n_blocks {
            return Err(PoolError::NotHeld { request, held, requested: n_blocks });
        }
        if held == n_blocks {
            self.device_used.remove(&request);
        } else {
            *self.device_used.get_mut(&request).expect("held > 0") -= n_blocks;
        }
        Ok(self.return_blocks(agent_type, n_blocks))
    }

    /// Frees everything `request` holds on device (no-op when empty-handed).
    pub fn release_all(&mut self, request: RequestId, agent_type: &str) -> FreeReturn {
        match self.device_used.remove(&request) {
            Some(n) if n > 0 => self.return_blocks(agent_type, n),
            _ => FreeReturn::default(),
        }
    }

    /// Where `n_blocks` would land if `agent_type` freed them right now,
    /// without changing the pool. Used to judge whether evicting a victim
    /// actually helps another type: blocks that would refill the victim's
    /// own reservation are invisible to everyone else.
    pub fn preview_release(&self, agent_type: &str, n_blocks: u64) -> FreeReturn {
        match self.reservations.get(agent_type) {
            Some(e) => {
                let dec = n_blocks.min(e.claimed);
                let room = e.target.saturating_sub((e.claimed - dec) + e.unclaimed);
                let to_reservation = n_blocks.min(room);
                FreeReturn { to_reservation, to_free: n_blocks - to_reservation }
            }
            None => FreeReturn { to_reservation: 0, to_free: n_blocks },
        }
    }

    /// Blocks `agent_type` could allocate right now (shared free plus its
    /// own unclaimed reservation).
    pub fn alloc_headroom(&self, agent_type: &str) -> u64 {
        self.device_free
            + self.reservations.get(agent_type).map(|e| e.unclaimed).unwrap_or(0)
    }

    /// Shared return path: reservation refill first, remainder to free.
    fn return_blocks(&mut self, agent_type: &str, n_blocks: u64) -> FreeReturn {
        let mut to_reservation = 0;
        if let Some(entry) = self.reservations.get_mut(agent_type) {
            let dec = n_blocks.min(entry.claimed);
            entry.claimed -= dec;
            let room = entry.target.saturating_sub(entry.claimed + entry.unclaimed);
            to_reservation = n_blocks.min(room);
            entry.unclaimed += to_reservation;
            if entry.is_empty() {
                self.reservations.remove(agent_type);
            }
        }
        self.device_free += n_blocks - to_reservation;
        FreeReturn { to_reservation, to_free: n_blocks - to_reservation }
    }

    /// Starts moving `n_blocks` of `request` to host memory. Device blocks
    /// sit in pending-free until [`BlockPool::finish_offload`]; host blocks
    /// come from the free-list buffer first, then fresh acquisitions. On
    /// refusal (host capacity) the pool is unchanged.
    pub fn start_offload(
        &mut self,
        request: RequestId,
        n_blocks: u64,
    ) -> Result<HostAcquire, PoolError> {
        if n_blocks == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        let held = self.device_held(request);
        if held < n_blocks {
            return Err(PoolError::NotHeld { request, held, requested: n_blocks });
        }
        let available = self.host_available();
        if available < n_blocks {
            return Err(PoolError::InsufficientHost { requested: n_blocks, available });
        }
        if held == n_blocks {
            self.device_used.remove(&request);
        } else {
            *self.device_used.get_mut(&request).expect("held > 0") -= n_blocks;
        }
        self.pending_free += n_blocks;
        let reused = n_blocks.min(self.host_free_list);
        self.host_free_list -= reused;
        let acquired = n_blocks - reused;
        self.host_acquisitions += acquired;
        *self.host_in_use.entry(request).or_insert(0) += n_blocks;
        Ok(HostAcquire { reused, acquired })
    }

    /// Completes an offload: pending-free blocks return through the normal
    /// reservation-refill path.
    pub fn finish_offload(
        &mut self,
        request: RequestId,
        agent_type: &str,
        n_blocks: u64,
    ) -> Result<FreeReturn, PoolError> {
        if self.pending_free < n_blocks {
            return Err(PoolError::NotHeld {
                request,
                held: self.pending_free,
                requested: n_blocks,
            });
        }
        self.pending_free -= n_blocks;
        Ok(self.return_blocks(agent_type, n_blocks))
    }

    /// Completes an upload: host blocks return to the free-list buffer (or
    /// to unallocated capacity when buffering is off).
    pub fn finish_upload(&mut self, request: RequestId, n_blocks: u64) -> Result<(), PoolError> {
        let held = self.host_held(request);
        if held < n_blocks {
            return Err(PoolError::NotHeld { request, held, requested: n_blocks });
        }
        if held == n_blocks {
            self.host_in_use.remove(&request);
        } else {
            *self.host_in_use.get_mut(&request).expect("held > 0") -= n_blocks;
        }
        if self.host_buffering {
            self.host_free_list += n_blocks;
        }
        Ok(())
    }

    /// Applies partition plan targets. `order` ranks types by descending
    /// priority; grants are bounded by free blocks, and targets below the
    /// current claim shrink lazily.
    pub fn apply_reservation_targets(&mut self, targets: &BTreeMap<String, u64>, order: &[String]) {
        // Drop or shrink entries that lost their reservation.
        let stale: Vec<String> = self
            .reservations
            .keys()
            .filter(|t| !targets.contains_key(*t))
            .cloned()
            .collect();
        for t in stale {
            let entry = self.reservations.get_mut(&t).expect("listed above");
            self.device_free += entry.unclaimed;
            entry.unclaimed = 0;
            entry.target = 0;
            if entry.is_empty() {
                self.reservations.remove(&t);
            }
        }
        // Shrink first so freed blocks can serve higher-priority grants.
        for (t, &target) in targets {
            let entry = self.reservations.entry(t.clone()).or_default();
            entry.target = target;
            let desired = target.saturating_sub(entry.claimed);
            if entry.unclaimed > desired {
                self.device_free += entry.unclaimed - desired;
                entry.unclaimed = desired;
            }
        }
        for t in order {
            let Some(entry) = self.reservations.get_mut(t) else { continue };
            let desired = entry.target.saturating_sub(entry.claimed);
            if entry.unclaimed < desired {
                let grant = (desired - entry.unclaimed).min(self.device_free);
                self.device_free -= grant;
                entry.unclaimed += grant;
            }
        }
        self.reservations.retain(|_, e| !e.is_empty());
    }

    /// Verifies the conservation identity and bucket bounds.
    pub fn check_invariants(&self) -> Result<(), String> {
        let used: u64 = self.device_used_total();
        let unclaimed: u64 = self.unclaimed_total();
        let sum = self.device_free + used + unclaimed + self.pending_free;
        if sum != self.total_device {
            return Err(format!(
                "device blocks not conserved: free {} + used {} + reserved {} + pending {} != total {}",
                self.device_free, used, unclaimed, self.pending_free, self.total_device
            ));
        }
        let host_used = self.host_in_use_total();
        if host_used + self.host_free_list > self.total_host {
            return Err(format!(
                "host overcommitted: in use {} + free list {} > total {}",
                host_used, self.host_free_list, self.total_host
            ));
        }
        for (t, e) in &self.reservations {
            if e.claimed + e.unclaimed > e.target.max(e.claimed) {
                return Err(format!("reservation for {t:?} overgranted: {e:?}"));
            }
        }
        Ok(())
    }
}

/// A planned gradual claim of device blocks ahead of an upload.
///
/// The target is split into near-equal chunks, largest first (10 over 3
/// cycles claims 4, 3, 3); a tick that finds too few free blocks carries its
/// shortfall into the next tick.
#[derive(Debug, Clone, PartialEq)]
pub struct GradualReservation {
    pub request: RequestId,
    pub agent_type: String,
    pub target_blocks: u64,
    pub claimed_blocks: u64,
    chunks: Vec<u64>,
    next_chunk: usize,
    pub deadline_ms: f64,
}

impl GradualReservation {
    pub fn new(
        request: RequestId,
        agent_type: &str,
        target_blocks: u64,
        cycles: u32,
        deadline_ms: f64,
    ) -> Self {
        let cycles = cycles.max(1) as u64;
        let cycles = cycles.min(target_blocks.max(1));
        let base = target_blocks / cycles;
        let remainder = target_blocks % cycles;
        let chunks: Vec<u64> =
            (0..cycles).map(|i| if i < remainder { base + 1 } else { base }).collect();
        GradualReservation {
            request,
            agent_type: agent_type.to_string(),
            target_blocks,
            claimed_blocks: 0,
            chunks,
            next_chunk: 0,
            deadline_ms,
        }
    }

    pub fn chunk_sizes(&self) -> &[u64] {
        &self.chunks
    }

    pub fn cycles(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_complete(&self) -> bool {
        self.claimed_blocks >= self.target_blocks
    }

    /// Fraction of the target already claimed.
    pub fn readiness(&self) -> f64 {
        if self.target_blocks == 0 {
            1.0
        } else {
            self.claimed_blocks as f64 / self.target_blocks as f64
        }
    }

    /// Executes one tick: claims this cycle's chunk plus any carried
    /// shortfall, bounded by what the pool can grant. Returns blocks claimed.
    pub fn tick(&mut self, pool: &mut BlockPool) -> u64 {
        let due: u64 = self.chunks[..self.chunks.len().min(self.next_chunk + 1)].iter().sum();
        self.next_chunk += 1;
        let want = due.saturating_sub(self.claimed_blocks).min(
            self.target_blocks - self.claimed_blocks,
        );
        if want == 0 {
            return 0;
        }
        let got = pool.allocate_up_to(self.request, &self.agent_type, want).total();
        self.claimed_blocks += got;
        got
    }

    /// Claims everything still missing (used when the upload must start).
    pub fn claim_rest(&mut self, pool: &mut BlockPool) -> u64 {
        let want = self.target_blocks - self.claimed_blocks;
        if want == 0 {
            return 0;
        }
        let got = pool.allocate_up_to(self.request, &self.agent_type, want).total();
        self.claimed_blocks += got;
        got
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(total: u64) -> BlockPool {
        BlockPool::new(total, 100_000, 16, true)
    }

    fn reserve(pool: &mut BlockPool, agent_type: &str, blocks: u64) {
        let targets = BTreeMap::from([(agent_type.to_string(), blocks)]);
        pool.apply_reservation_targets(&targets, &[agent_type.to_string()]);
    }

    #[test]
    fn tokens_round_up_to_blocks() {
        assert_eq!(tokens_to_blocks(1, 16), 1);
        assert_eq!(tokens_to_blocks(16, 16), 1);
        assert_eq!(tokens_to_blocks(17, 16), 2);
        assert_eq!(tokens_to_blocks(0, 16), 0);
    }

    #[test]
    fn allocate_draws_shared_pool() {
        let mut p = pool(10);
        let a = p.allocate(1, "t", 4).unwrap();
        assert_eq!(a, Allocation { from_reservation: 0, from_free: 4 });
        assert_eq!(p.device_free(), 6);
        assert_eq!(p.device_held(1), 4);
        p.check_invariants().unwrap();
    }

    #[test]
    fn non_critical_cannot_touch_other_reservations() {
        let mut p = pool(5);
        reserve(&mut p, "critical", 5);
        assert_eq!(p.device_free(), 0);
        let err = p.allocate(1, "other", 1).unwrap_err();
        assert!(matches!(err, PoolError::InsufficientDevice { .. }));
        assert_eq!(p.device_free(), 0);
        assert_eq!(p.unclaimed_total(), 5);
        p.check_invariants().unwrap();
    }

    #[test]
    fn critical_type_draws_reservation_then_shared() {
        let mut p = pool(20);
        reserve(&mut p, "crit", 8);
        // Claim 5 of the reservation first.
        p.allocate(1, "crit", 5).unwrap();
        let a = p.allocate(2, "crit", 4).unwrap();
        assert_eq!(a, Allocation { from_reservation: 3, from_free: 1 });
        let entry = p.reservation("crit").unwrap();
        assert_eq!(entry.claimed, 8, "reservation fully claimed; the 4th block came from shared");
        assert_eq!(entry.unclaimed, 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn free_returns_everything_for_unreserved_type() {
        let mut p = pool(10);
        p.allocate(1, "t", 6).unwrap();
        let r = p.free_blocks(1, "t", 6).unwrap();
        assert_eq!(r, FreeReturn { to_reservation: 0, to_free: 6 });
        assert_eq!(p.device_free(), 10);
        assert_eq!(p.device_held(1), 0);
    }

    #[test]
    fn free_refills_reservation_up_to_target() {
        let mut p = pool(20);
        reserve(&mut p, "crit", 8);
        p.allocate(1, "crit", 8).unwrap();
        // claimed 8, unclaimed 0; free 3 -> claimed 5... then refill to target.
        let r = p.free_blocks(1, "crit", 3).unwrap();
        assert_eq!(r, FreeReturn { to_reservation: 3, to_free: 0 });
        let entry = p.reservation("crit").unwrap();
        assert_eq!(entry.claimed, 5);
        assert_eq!(entry.unclaimed, 3);
        p.check_invariants().unwrap();
    }

    #[test]
    fn shrunken_target_drains_lazily() {
        let mut p = pool(20);
        reserve(&mut p, "crit", 8);
        p.allocate(1, "crit", 8).unwrap();
        reserve(&mut p, "crit", 2);
        // Claimed 8 stays; freeing 3 sends everything above target to shared.
        let r = p.free_blocks(1, "crit", 3).unwrap();
        assert_eq!(r, FreeReturn { to_reservation: 0, to_free: 3 });
        let entry = p.reservation("crit").unwrap();
        assert_eq!(entry.claimed, 5);
        assert_eq!(entry.unclaimed, 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn freeing_more_than_held_is_an_error() {
        let mut p = pool(10);
        p.allocate(1, "t", 2).unwrap();
        let before = p.clone();
        assert!(p.free_blocks(1, "t", 3).is_err());
        assert_eq!(p.device_free(), before.device_free());
        assert_eq!(p.device_held(1), 2);
    }

    #[test]
    fn transfer_time_matches_calibration() {
        let m = TransferCostModel::default();
        assert_eq!(m.roundtrip_ms(4096), 60.0);
        assert_eq!(m.roundtrip_ms(0), 0.0);
        assert_eq!(m.roundtrip_ms(2048), 30.0);
        assert_eq!(m.offload_ms(4096), 30.0);
        assert_eq!(m.upload_ms(4096), 30.0);
    }

    #[test]
    fn recompute_time_matches_calibration() {
        let m = TransferCostModel::default();
        assert_eq!(m.recompute_ms(4096), 9000.0);
        assert_eq!(m.recompute_ms(0), 0.0);
        assert_eq!(m.recompute_ms(1024), 2250.0);
    }

    #[test]
    fn recompute_to_transfer_ratio_is_invariant_under_rescale() {
        for k in [0.5, 1.0, 2.0, 7.5] {
            let m = TransferCostModel {
                roundtrip_ms_per_4096_blocks: 60.0 * k,
                offload_fraction: 0.5,
                recompute_ms_per_4096_blocks: 9000.0 * k,
            };
            let ratio = m.recompute_ms(1234) / m.roundtrip_ms(1234);
            assert!((ratio - 150.0).abs() < 1e-9);
        }
    }

    #[test]
    fn offload_reuses_buffer_then_acquires() {
        let mut p = pool(200);
        p.allocate(1, "t", 100).unwrap();
        // Preload the free list with 40 blocks via a full cycle.
        p.allocate(9, "t", 40).unwrap();
        p.start_offload(9, 40).unwrap();
        p.finish_offload(9, "t", 40).unwrap();
        p.finish_upload(9, 40).unwrap();
        assert_eq!(p.host_free_list(), 40);
        let before = p.host_acquisitions();

        let acq = p.start_offload(1, 100).unwrap();
        assert_eq!(acq, HostAcquire { reused: 40, acquired: 60 });
        assert_eq!(p.host_acquisitions() - before, 60);
        assert_eq!(p.pending_free(), 100);
        p.check_invariants().unwrap();
    }

    #[test]
    fn offload_refused_when_host_capacity_short() {
        let mut p = BlockPool::new(100, 50, 16, true);
        p.allocate(1, "t", 80).unwrap();
        let before_free = p.device_free();
        let err = p.start_offload(1, 80).unwrap_err();
        assert!(matches!(err, PoolError::InsufficientHost { .. }));
        assert_eq!(p.device_held(1), 80);
        assert_eq!(p.device_free(), before_free);
        assert_eq!(p.pending_free(), 0);
    }

    #[test]
    fn pending_free_blocks_join_shared_pool_on_completion() {
        let mut p = pool(100);
        p.allocate(1, "t", 60).unwrap();
        p.start_offload(1, 60).unwrap();
        assert_eq!(p.device_free(), 40);
        assert_eq!(p.pending_free(), 60);
        p.finish_offload(1, "t", 60).unwrap();
        assert_eq!(p.device_free(), 100);
        assert_eq!(p.pending_free(), 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn repeated_cycles_acquire_no_new_host_capacity() {
        let mut p = BlockPool::new(8000, 10_000, 16, true);
        p.allocate(1, "t", 5120).unwrap();
        for cycle in 0..5 {
            let acq = p.start_offload(1, 5120).unwrap();
            if cycle == 0 {
                assert_eq!(acq.acquired, 5120);
            } else {
                assert_eq!(acq.acquired, 0, "cycle {cycle} acquired fresh capacity");
                assert_eq!(acq.reused, 5120);
            }
            p.finish_offload(1, "t", 5120).unwrap();
            p.allocate(1, "t", 5120).unwrap();
            p.finish_upload(1, 5120).unwrap();
            p.check_invariants().unwrap();
        }
    }

    #[test]
    fn buffering_off_acquires_every_cycle() {
        let mut p = BlockPool::new(8000, 10_000, 16, false);
        p.allocate(1, "t", 5120).unwrap();
        for _ in 0..3 {
            let acq = p.start_offload(1, 5120).unwrap();
            assert_eq!(acq.acquired, 5120);
            p.finish_offload(1, "t", 5120).unwrap();
            p.allocate(1, "t", 5120).unwrap();
            p.finish_upload(1, 5120).unwrap();
        }
        assert_eq!(p.host_acquisitions(), 3 * 5120);
    }

    #[test]
    fn gradual_reservation_splits_near_equal_largest_first() {
        let r = GradualReservation::new(1, "t", 100, 4, 0.0);
        assert_eq!(r.chunk_sizes(), &[25, 25, 25, 25]);
        let r = GradualReservation::new(1, "t", 10, 3, 0.0);
        assert_eq!(r.chunk_sizes(), &[4, 3, 3]);
    }

    #[test]
    fn gradual_reservation_carries_shortfall() {
        let mut p = pool(10);
        p.allocate(99, "other", 10).unwrap();
        let mut r = GradualReservation::new(1, "t", 9, 3, 0.0);
        assert_eq!(r.tick(&mut p), 0, "no free blocks yet");
        assert!((r.readiness() - 0.0).abs() < 1e-12);
        p.free_blocks(99, "other", 10).unwrap();
        // Second tick owes its chunk plus the carried shortfall.
        assert_eq!(r.tick(&mut p), 6);
        assert_eq!(r.tick(&mut p), 3);
        assert!(r.is_complete());
        assert_eq!(p.device_held(1), 9);
        p.check_invariants().unwrap();
    }

    #[test]
    fn preview_matches_actual_release() {
        let mut p = pool(20);
        reserve(&mut p, "crit", 8);
        p.allocate(1, "crit", 8).unwrap();
        let preview = p.preview_release("crit", 3);
        let actual = p.free_blocks(1, "crit", 3).unwrap();
        assert_eq!(preview, actual);
        // Unreserved type: everything goes to the shared pool.
        p.allocate(2, "plain", 4).unwrap();
        assert_eq!(
            p.preview_release("plain", 4),
            FreeReturn { to_reservation: 0, to_free: 4 }
        );
    }

    #[test]
    fn headroom_counts_own_reservation_only() {
        let mut p = pool(10);
        reserve(&mut p, "crit", 6);
        assert_eq!(p.alloc_headroom("crit"), 10);
        assert_eq!(p.alloc_headroom("other"), 4);
    }

    #[test]
    fn reservation_targets_bounded_by_free_blocks() {
        let mut p = pool(10);
        p.allocate(1, "t", 8).unwrap();
        reserve(&mut p, "crit", 6);
        let entry = p.reservation("crit").unwrap();
        assert_eq!(entry.unclaimed, 2, "grant bounded by free blocks");
        assert_eq!(p.device_free(), 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn removed_reservation_returns_unclaimed_blocks() {
        let mut p = pool(10);
        reserve(&mut p, "crit", 6);
        assert_eq!(p.device_free(), 4);
        p.apply_reservation_targets(&BTreeMap::new(), &[]);
        assert_eq!(p.device_free(), 10);
        assert!(p.reservation("crit").is_none());
    }

    #[test]
    fn conservation_holds_under_random_op_sequences() {
        use rand::Rng;
        let mut rng = crate::rng::SeedFactory::new(42).stream("pool_ops", &[]);
        for trial in 0..200 {
            let mut p = BlockPool::new(64, 64, 16, trial % 2 == 0);
            let types = ["a", "b", "c"];
            for _ in 0..200 {
                let rid = rng.gen_range(0..4u64);
                let ty = types[rng.gen_range(0..3)];
                match rng.gen_range(0..6) {
                    0 => {
                        let _ = p.allocate(rid, ty, rng.gen_range(1..8));
                    }
                    1 => {
                        let held = p.device_held(rid);
                        if held > 0 {
                            let n = rng.gen_range(1..=held);
                            p.free_blocks(rid, ty, n).unwrap();
                        }
                    }
                    2 => {
                        let held = p.device_held(rid);
                        if held > 0 && p.start_offload(rid, held).is_ok() {
                            p.finish_offload(rid, ty, held).unwrap();
                        }
                    }
                    3 => {
                        let host = p.host_held(rid);
                        if host > 0 {
                            p.finish_upload(rid, host).unwrap();
                        }
                    }
                    4 => {
                        let mut targets = BTreeMap::new();
                        let mut order: Vec<String> = Vec::new();
                        for t in types {
                            if rng.gen_bool(0.7) {
                                targets.insert(t.to_string(), rng.gen_range(0..32));
                                order.push(t.to_string());
                            }
                        }
                        p.apply_reservation_targets(&targets, &order);
                    }
                    _ => {
                        let _ = p.allocate_up_to(rid, ty, rng.gen_range(0..8));
                    }
                }
                if let Err(e) = p.check_invariants() {
                    panic!("trial {trial}: {e}");
                }
            }
        }
    }
}
