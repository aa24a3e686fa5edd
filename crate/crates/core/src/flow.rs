//! Consolidated per-connection state and the single combined lookup.
//!
//! One [`ConsolidatedFlowState`] holds both the TCP transport state and the
//! precomputed encapsulation headers of a connection, so a packet is handled
//! with one exact-match lookup on the full [`FlowKey`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::packet::{seq_le, seq_lt, FlowKey, HeaderTemplate};
use crate::{CoreId, Cycles, GuestId};

pub const DEFAULT_FLOW_BUFFER_BYTES: u32 = 64 * 1024;

/// Backoff stops doubling at 64 times the base RTO.
pub const MAX_RTO_BACKOFF: u32 = 6;
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowId(pub u32);

/// Circular buffer that tracks byte counts only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteRing {
    capacity: u32,
    head: u64,
    tail: u64,
}

impl ByteRing {
    pub fn new(capacity: u32) -> Self {
        ByteRing {
            capacity,
            head: 0,
            tail: 0,
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn occupancy(&self) -> u32 {
        (self.tail - self.head) as u32
    }

    pub fn free(&self) -> u32 {
        self.capacity - self.occupancy()
    }

    /// Total bytes ever written.
    pub fn written(&self) -> u64 {
        self.tail
    }

    /// Total bytes ever released.
    pub fn released(&self) -> u64 {
        self.head
    }

    /// Appends `n` bytes; fails without side effects if they do not fit.
    pub fn write(&mut self, n: u32) -> bool {
        if n > self.free() {
            return false;
        }
        self.tail += u64::from(n);
        true
    }

    /// Releases up to `n` bytes from the head and returns how many were released.
    pub fn release(&mut self, n: u32) -> u32 {
        let n = n.min(self.occupancy());
        self.head += u64::from(n);
        n
    }
}

/// Outcome of checking an incoming data segment against the receive state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RxVerdict {
    /// In order and fits; payload stored, `rx_next_expected` advanced.
    Accepted,
    /// Already delivered; only an ACK is owed.
    Duplicate,
    /// Beyond the next expected byte, or no room. Dropped.
    OutOfWindow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsolidatedFlowState {
    pub key: FlowKey,
    pub guest: GuestId,
    /// The fast-path core that owns this flow's RX and TX work.
    pub core: CoreId,
    /// Headers for packets this endpoint sends.
    pub template: HeaderTemplate,
    pub tx_next_seq: u32,
    pub tx_acked_seq: u32,
    /// Highest sequence number ever sent. Exceeds `tx_next_seq` only after
    /// a rewind, and the peer may still acknowledge up to it.
    pub tx_max_seq: u32,
    pub rx_next_expected: u32,
    pub tx_buffer: ByteRing,
    pub rx_buffer: ByteRing,
    pub next_send_time: Cycles,
    /// Pacing rate in bytes per cycle, written by the slow-path.
    pub rate: f64,
    pub pending_tx_bytes: u32,
    /// When the oldest outstanding byte last saw progress; `None` when all is acked.
    pub unacked_since: Option<Cycles>,
    /// Consecutive timeouts without progress; each one doubles the RTO.
    pub rto_backoff: u32,
    /// Sequence number of this flow's live entry in its core's TX priority
    /// queue, if it has one. Entries with any other number are stale.
    pub tx_queue_entry: Option<u64>,
    /// Set once this side has sent a FIN.
    pub closing: bool,
}

impl ConsolidatedFlowState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        key: FlowKey,
        guest: GuestId,
        core: CoreId,
        template: HeaderTemplate,
        tx_initial_seq: u32,
        rx_initial_seq: u32,
        buffer_bytes: u32,
        rate: f64,
    ) -> Self {
        ConsolidatedFlowState {
            key,
            guest,
            core,
            template,
            tx_next_seq: tx_initial_seq,
            tx_acked_seq: tx_initial_seq,
            tx_max_seq: tx_initial_seq,
            rx_next_expected: rx_initial_seq,
            tx_buffer: ByteRing::new(buffer_bytes),
            rx_buffer: ByteRing::new(buffer_bytes),
            next_send_time: 0,
            rate,
            pending_tx_bytes: 0,
            unacked_since: None,
            rto_backoff: 0,
            tx_queue_entry: None,
            closing: false,
        }
    }

    /// Bytes sent but not yet acknowledged.
    pub fn unacked_bytes(&self) -> u32 {
        self.tx_next_seq.wrapping_sub(self.tx_acked_seq)
    }

    /// Checks the template against the key; the two must describe the same connection.
    pub fn is_consistent(&self) -> bool {
        self.template.sender_key() == self.key
            && self.unacked_bytes() <= self.tx_buffer.capacity()
            && self.unacked_bytes() + self.pending_tx_bytes == self.tx_buffer.occupancy()
    }

    /// Validates an incoming data segment and stores its payload when in order.
    ///
    /// The caller enqueues the receive notification for the guest on
    /// [`RxVerdict::Accepted`] and sends an ACK in every case.
    pub fn validate_and_deposit(&mut self, seq: u32, payload_len: u32) -> RxVerdict {
        if seq == self.rx_next_expected {
            if self.rx_buffer.write(payload_len) {
                self.rx_next_expected = self.rx_next_expected.wrapping_add(payload_len);
                RxVerdict::Accepted
            } else {
                RxVerdict::OutOfWindow
            }
        } else if seq_lt(seq, self.rx_next_expected) {
            RxVerdict::Duplicate
        } else {
            RxVerdict::OutOfWindow
        }
    }

    /// Highest sequence number the peer can legitimately acknowledge.
    pub fn send_limit(&self) -> u32 {
        if seq_lt(self.tx_next_seq, self.tx_max_seq) {
            self.tx_max_seq
        } else {
            self.tx_next_seq
        }
    }

    /// Applies a cumulative ACK. Returns the number of newly acknowledged bytes.
    ///
    /// An ACK past `tx_next_seq` after a rewind covers data the peer already
    /// has, so those bytes leave the pending count instead of being resent.
    pub fn process_ack(&mut self, ack: u32, now: Cycles) -> u32 {
        if !(seq_lt(self.tx_acked_seq, ack) && seq_le(ack, self.send_limit())) {
            return 0;
        }
        if seq_lt(self.tx_next_seq, ack) {
            self.pending_tx_bytes -= ack.wrapping_sub(self.tx_next_seq);
            self.tx_next_seq = ack;
        }
        let acked = ack.wrapping_sub(self.tx_acked_seq);
        self.tx_acked_seq = ack;
        self.rto_backoff = 0;
        self.tx_buffer.release(acked);
        self.unacked_since = if self.unacked_bytes() == 0 {
            None
        } else {
            Some(now)
        };
        acked
    }

    /// Retransmission timeout after `rto_backoff` doublings of `base`.
    pub fn current_rto(&self, base: Cycles) -> Cycles {
        base << self.rto_backoff.min(MAX_RTO_BACKOFF)
    }

    /// Go-back-N: forget everything after the last acknowledged byte and
    /// queue it for sending again. Returns the number of bytes rewound.
    pub fn rewind_to_acked(&mut self) -> u32 {
        let unacked = self.unacked_bytes();
        self.tx_next_seq = self.tx_acked_seq;
        self.pending_tx_bytes += unacked;
        self.unacked_since = None;
        unacked
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum FlowTableError {
    #[error("a flow with this key is already installed as {0:?}")]
    Duplicate(FlowId),
    #[error("no flow with this key")]
    Absent,
}

/// Exact-match table of consolidated flow states with a per-guest index.
#[derive(Debug, Default)]
pub struct FlowTable {
    slots: Vec<Option<ConsolidatedFlowState>>,
    free: Vec<u32>,
    by_key: HashMap<FlowKey, FlowId>,
    by_guest: BTreeMap<GuestId, BTreeSet<FlowId>>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn lookup(&self, key: &FlowKey) -> Option<FlowId> {
        self.by_key.get(key).copied()
    }

    pub fn get(&self, id: FlowId) -> Option<&ConsolidatedFlowState> {
        self.slots.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: FlowId) -> Option<&mut ConsolidatedFlowState> {
        self.slots.get_mut(id.0 as usize).and_then(Option::as_mut)
    }

    pub fn install(&mut self, state: ConsolidatedFlowState) -> Result<FlowId, FlowTableError> {
        if let Some(&existing) = self.by_key.get(&state.key) {
            return Err(FlowTableError::Duplicate(existing));
        }
        let id = match self.free.pop() {
            Some(slot) => FlowId(slot),
            None => {
                self.slots.push(None);
                FlowId((self.slots.len() - 1) as u32)
            }
        };
        self.by_key.insert(state.key, id);
        self.by_guest.entry(state.guest).or_default().insert(id);
        self.slots[id.0 as usize] = Some(state);
        Ok(id)
    }

    pub fn remove(&mut self, key: &FlowKey) -> Result<ConsolidatedFlowState, FlowTableError> {
        let id = self.by_key.remove(key).ok_or(FlowTableError::Absent)?;
        let state = self.slots[id.0 as usize]
            .take()
            .expect("keyed lookup and slots disagree");
        if let Some(set) = self.by_guest.get_mut(&state.guest) {
            set.remove(&id);
            if set.is_empty() {
                self.by_guest.remove(&state.guest);
            }
        }
        self.free.push(id.0);
        Ok(state)
    }

    /// Flows of one guest in ascending id order.
    pub fn guest_flows(&self, guest: GuestId) -> impl Iterator<Item = FlowId> + '_ {
        self.by_guest.get(&guest).into_iter().flatten().copied()
    }

    /// All installed flows in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (FlowId, &ConsolidatedFlowState)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (FlowId(i as u32), s)))
    }

    /// Checks that the keyed lookup and the per-guest index describe the same set.
    pub fn index_consistent(&self) -> bool {
        let indexed: usize = self.by_guest.values().map(BTreeSet::len).sum();
        indexed == self.by_key.len()
            && self.by_key.iter().all(|(key, id)| {
                self.get(*id).is_some_and(|s| {
                    s.key == *key
                        && self
                            .by_guest
                            .get(&s.guest)
                            .is_some_and(|set| set.contains(id))
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::tests::template;

    fn state_for(template: HeaderTemplate, guest: u32) -> ConsolidatedFlowState {
        ConsolidatedFlowState::new(
            template.sender_key(),
            GuestId(guest),
            CoreId(0),
            template,
            1000,
            5000,
            DEFAULT_FLOW_BUFFER_BYTES,
            1.0,
        )
    }

    #[test]
    fn empty_table_misses() {
        let t = FlowTable::new();
        assert_eq!(t.lookup(&template().sender_key()), None);
    }

    #[test]
    fn install_then_lookup() {
        let mut t = FlowTable::new();
        let s = state_for(template(), 0);
        let id = t.install(s.clone()).unwrap();
        assert_eq!(t.lookup(&s.key), Some(id));
        assert_eq!(t.get(id), Some(&s));
        assert!(t.guest_flows(GuestId(0)).any(|f| f == id));
        assert!(t.index_consistent());
    }

    #[test]
    fn duplicate_install_rejected() {
        let mut t = FlowTable::new();
        let id = t.install(state_for(template(), 0)).unwrap();
        assert_eq!(
            t.install(state_for(template(), 0)),
            Err(FlowTableError::Duplicate(id))
        );
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn tunnel_id_separates_flows() {
        let mut t = FlowTable::new();
        let a = template();
        let mut b = template();
        b.gre_key = a.gre_key + 1;
        let ia = t.install(state_for(a, 0)).unwrap();
        let ib = t.install(state_for(b, 1)).unwrap();
        assert_ne!(ia, ib);
        // Enumerate both keys: each resolves to its own state.
        for (tpl, id) in [(a, ia), (b, ib)] {
            let found = t.lookup(&tpl.sender_key()).unwrap();
            assert_eq!(found, id);
            assert_eq!(t.get(found).unwrap().key.tunnel_id, tpl.gre_key);
        }
    }

    #[test]
    fn remove_and_reinstall() {
        let mut t = FlowTable::new();
        let s = state_for(template(), 3);
        t.install(s.clone()).unwrap();
        assert!(t.remove(&s.key).is_ok());
        assert_eq!(t.lookup(&s.key), None);
        assert_eq!(t.guest_flows(GuestId(3)).count(), 0);
        assert_eq!(t.remove(&s.key), Err(FlowTableError::Absent));
        assert!(t.install(s.clone()).is_ok());
        assert!(t.index_consistent());
    }

    #[test]
    fn remove_unknown_is_absent() {
        let mut t = FlowTable::new();
        assert_eq!(
            t.remove(&template().sender_key()),
            Err(FlowTableError::Absent)
        );
    }

    #[test]
    fn in_order_segment_accepted() {
        let mut s = state_for(template(), 0);
        assert_eq!(s.validate_and_deposit(5000, 100), RxVerdict::Accepted);
        assert_eq!(s.rx_next_expected, 5100);
        assert_eq!(s.rx_buffer.occupancy(), 100);
    }

    #[test]
    fn retransmitted_segment_is_duplicate() {
        // Two-segment trace: deliver both, then replay the second.
        let mut s = state_for(template(), 0);
        let first = 5000;
        let len = 700;
        assert_eq!(s.validate_and_deposit(first, len), RxVerdict::Accepted);
        let second = first + len;
        assert_eq!(s.validate_and_deposit(second, len), RxVerdict::Accepted);
        assert_eq!(s.rx_next_expected, second + len);
        let occupancy = s.rx_buffer.occupancy();
        assert_eq!(
            s.validate_and_deposit(s.rx_next_expected - len, len),
            RxVerdict::Duplicate
        );
        assert_eq!(s.rx_buffer.occupancy(), occupancy);
    }

    #[test]
    fn gap_is_out_of_window() {
        let mut s = state_for(template(), 0);
        assert_eq!(s.validate_and_deposit(5001, 10), RxVerdict::OutOfWindow);
        assert_eq!(s.rx_next_expected, 5000);
    }

    #[test]
    fn full_receive_buffer_refuses() {
        let mut s = state_for(template(), 0);
        s.rx_buffer = ByteRing::new(100);
        assert_eq!(s.validate_and_deposit(5000, 60), RxVerdict::Accepted);
        assert_eq!(s.validate_and_deposit(5060, 60), RxVerdict::OutOfWindow);
        s.rx_buffer.release(60);
        assert_eq!(s.validate_and_deposit(5060, 60), RxVerdict::Accepted);
    }

    #[test]
    fn acks_release_send_buffer() {
        let mut s = state_for(template(), 0);
        assert!(s.tx_buffer.write(3000));
        s.pending_tx_bytes = 1000;
        s.tx_next_seq = s.tx_next_seq.wrapping_add(2000);
        s.unacked_since = Some(10);
        assert!(s.is_consistent());
        assert_eq!(s.process_ack(1500, 20), 500);
        assert_eq!(s.unacked_since, Some(20));
        assert_eq!(s.process_ack(1400, 30), 0, "old ack ignored");
        assert_eq!(s.process_ack(9999, 30), 0, "ack beyond sent data ignored");
        assert_eq!(s.process_ack(3000, 40), 1500);
        assert_eq!(s.unacked_since, None);
        assert!(s.is_consistent());
    }

    #[test]
    fn rewind_requeues_unacked() {
        let mut s = state_for(template(), 0);
        assert!(s.tx_buffer.write(1460));
        s.tx_next_seq = s.tx_next_seq.wrapping_add(1460);
        s.unacked_since = Some(0);
        assert_eq!(s.rewind_to_acked(), 1460);
        assert_eq!(s.tx_next_seq, 1000);
        assert_eq!(s.pending_tx_bytes, 1460);
        assert!(s.is_consistent());
    }

    #[test]
    fn ack_after_rewind_skips_delivered_bytes() {
        let mut s = state_for(template(), 0);
        assert!(s.tx_buffer.write(3000));
        s.tx_next_seq = s.tx_next_seq.wrapping_add(3000);
        s.tx_max_seq = s.tx_next_seq;
        s.unacked_since = Some(0);
        s.rewind_to_acked();
        s.tx_next_seq = s.tx_next_seq.wrapping_add(1000);
        s.pending_tx_bytes -= 1000;
        assert!(s.is_consistent());
        // The original transmission reached the peer in full.
        assert_eq!(s.process_ack(4000, 50), 3000);
        assert_eq!((s.tx_next_seq, s.pending_tx_bytes), (4000, 0));
        assert_eq!(s.tx_buffer.occupancy(), 0);
        assert_eq!(s.process_ack(4001, 60), 0, "nothing was sent past 4000");
        assert!(s.is_consistent());
    }

    #[test]
    fn sequence_space_wraps() {
        let mut s = state_for(template(), 0);
        s.rx_next_expected = u32::MAX - 9;
        assert_eq!(
            s.validate_and_deposit(u32::MAX - 9, 20),
            RxVerdict::Accepted
        );
        assert_eq!(s.rx_next_expected, 10);
        assert_eq!(
            s.validate_and_deposit(u32::MAX - 9, 20),
            RxVerdict::Duplicate
        );
    }
}
