//! Two-level fast-path scheduling.
//!
//! The first level picks a guest by round-robin, skipping guests without
//! budget. The second level picks what to do for that guest: drain its
//! transmit queues (POLL) or send from its flows in earliest-send-time order
//! (TX). RX has no choice to make, only an admission gate.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::accounting::BudgetTable;
use crate::flow::{FlowId, FlowTable};
use crate::guest::GuestContext;
use crate::{CoreId, Cycles, GuestId};

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_MSS: u32 = 1460;

/// Drain up to `max_items` requests from one transmit queue of one guest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PollItem {
    pub guest: GuestId,
    pub queue: usize,
    pub max_items: usize,
}

/// Send one segment of `segment_len` bytes from `flow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TxItem {
    pub flow: FlowId,
    pub guest: GuestId,
    pub segment_len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct QueueEntry {
    time: Cycles,
    seq: u64,
    flow: FlowId,
}

/// Scheduling state private to one fast-path core.
#[derive(Clone, Debug)]
pub struct CoreSchedState {
    core: CoreId,
    batch_size: usize,
    guest_rr_cursor: usize,
    guest_tx_rr_cursor: usize,
    /// Per-guest min-heaps of flows keyed by next send time.
    flow_queues: Vec<BinaryHeap<Reverse<QueueEntry>>>,
    next_entry: u64,
}

impl CoreSchedState {
    /// Cursors start at `core % num_guests` so cores do not all favour guest 0.
    pub fn new(core: CoreId, num_guests: usize, batch_size: usize) -> Self {
        let start = if num_guests == 0 {
            0
        } else {
            core.index() % num_guests
        };
        CoreSchedState {
            core,
            batch_size: batch_size.max(1),
            guest_rr_cursor: start,
            guest_tx_rr_cursor: start,
            flow_queues: vec![BinaryHeap::new(); num_guests],
            next_entry: 0,
        }
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_guests(&self) -> usize {
        self.flow_queues.len()
    }

    pub fn poll_cursor(&self) -> usize {
        self.guest_rr_cursor
    }

    pub fn tx_cursor(&self) -> usize {
        self.guest_tx_rr_cursor
    }

    /// Queue entries held for `guest`, stale ones included.
    pub fn queued_entries(&self, guest: GuestId) -> usize {
        self.flow_queues[guest.index()].len()
    }

    /// Puts a backlogged flow into its guest's priority queue unless it is
    /// already there. A flow that has been idle is not allowed to send
    /// earlier than `now`.
    pub fn enqueue_flow(&mut self, flows: &mut FlowTable, id: FlowId, now: Cycles) -> bool {
        let Some(flow) = flows.get_mut(id) else {
            return false;
        };
        if flow.core != self.core || flow.tx_queue_entry.is_some() || flow.pending_tx_bytes == 0 {
            return false;
        }
        flow.next_send_time = flow.next_send_time.max(now);
        let seq = self.next_entry;
        self.next_entry += 1;
        flow.tx_queue_entry = Some(seq);
        self.flow_queues[flow.guest.index()].push(Reverse(QueueEntry {
            time: flow.next_send_time,
            seq,
            flow: id,
        }));
        true
    }

    /// Earliest time any queued flow may send, stale entries included.
    pub fn earliest_send_time(&self) -> Option<Cycles> {
        self.flow_queues
            .iter()
            .filter_map(|q| q.peek().map(|Reverse(e)| e.time))
            .min()
    }

    /// Plans one POLL batch.
    ///
    /// Each item is assumed to cost `item_cost`; with gating on, a guest stops
    /// being drained once its projected balance reaches zero.
    pub fn schedule_poll(
        &mut self,
        guests: &[GuestContext],
        budgets: &BudgetTable,
        gating: bool,
        item_cost: Cycles,
    ) -> Vec<PollItem> {
        let n = guests.len();
        let mut plan = Vec::new();
        if n == 0 {
            return plan;
        }
        let mut room = self.batch_size;
        let mut last_served = None;
        for step in 0..n {
            if room == 0 {
                break;
            }
            let g = (self.guest_rr_cursor + step) % n;
            let guest = &guests[g];
            if gating && !budgets.has_budget(self.core, guest.id) {
                continue;
            }
            let mut projected = budgets.balance(self.core, guest.id);
            let mut served = false;
            for queue in 0..guest.queues_per_core() {
                let available = guest.queue_len(self.core, queue);
                let mut take = 0;
                while take < available && room > 0 && (!gating || projected > 0) {
                    take += 1;
                    room -= 1;
                    projected -= item_cost as i64;
                }
                if take > 0 {
                    served = true;
                    plan.push(PollItem {
                        guest: guest.id,
                        queue,
                        max_items: take,
                    });
                }
            }
            if served {
                last_served = Some(g);
            }
        }
        if let Some(g) = last_served {
            self.guest_rr_cursor = (g + 1) % n;
        }
        plan
    }

    /// Plans one TX batch.
    ///
    /// Guests are visited round-robin; a guest with budget sends from every
    /// flow whose next send time has arrived, one segment per flow per visit,
    /// in next-send-time order. Each sent flow's next send time advances by
    /// the segment's transmission time at the flow's rate, or at
    /// `default_rate` when the flow has none yet.
    #[allow(clippy::too_many_arguments)]
    pub fn schedule_tx(
        &mut self,
        now: Cycles,
        flows: &mut FlowTable,
        budgets: &BudgetTable,
        gating: bool,
        mss: u32,
        default_rate: f64,
    ) -> Vec<TxItem> {
        let n = self.flow_queues.len();
        let mut plan = Vec::new();
        if n == 0 {
            return plan;
        }
        let mut room = self.batch_size;
        let mut last_served = None;
        for step in 0..n {
            if room == 0 {
                break;
            }
            let g = (self.guest_tx_rr_cursor + step) % n;
            let guest = GuestId(g as u32);
            if gating && !budgets.has_budget(self.core, guest) {
                continue;
            }
            let mut again = Vec::new();
            let mut served = false;
            while room > 0 {
                let Some(&Reverse(entry)) = self.flow_queues[g].peek() else {
                    break;
                };
                if entry.time > now {
                    break;
                }
                self.flow_queues[g].pop();
                let Some(flow) = flows.get_mut(entry.flow) else {
                    continue;
                };
                if flow.tx_queue_entry != Some(entry.seq) || flow.core != self.core {
                    continue;
                }
                if flow.pending_tx_bytes == 0 {
                    flow.tx_queue_entry = None;
                    continue;
                }
                let segment_len = flow.pending_tx_bytes.min(mss);
                let rate = if flow.rate > 0.0 {
                    flow.rate
                } else {
                    default_rate
                };
                flow.next_send_time += transmission_cycles(segment_len, rate);
                plan.push(TxItem {
                    flow: entry.flow,
                    guest,
                    segment_len,
                });
                room -= 1;
                served = true;
                if flow.pending_tx_bytes > segment_len {
                    again.push((entry.flow, flow.next_send_time));
                } else {
                    flow.tx_queue_entry = None;
                }
            }
            for (id, time) in again {
                let seq = self.next_entry;
                self.next_entry += 1;
                if let Some(flow) = flows.get_mut(id) {
                    flow.tx_queue_entry = Some(seq);
                }
                self.flow_queues[g].push(Reverse(QueueEntry {
                    time,
                    seq,
                    flow: id,
                }));
            }
            if served {
                last_served = Some(g);
            }
        }
        if let Some(g) = last_served {
            self.guest_tx_rr_cursor = (g + 1) % n;
        }
        plan
    }

    /// RX admission: packets for a guest without budget on this core are dropped.
    pub fn rx_admit(&self, budgets: &BudgetTable, guest: GuestId, gating: bool) -> Admission {
        if !gating || budgets.has_budget(self.core, guest) {
            Admission::Admit
        } else {
            Admission::Drop
        }
    }
}

/// Cycles needed to send `bytes` at `rate` bytes per cycle, at least one.
pub fn transmission_cycles(bytes: u32, rate: f64) -> Cycles {
    if rate <= 0.0 || !rate.is_finite() {
        return 1;
    }
    ((f64::from(bytes) / rate).ceil() as Cycles).max(1)
}
