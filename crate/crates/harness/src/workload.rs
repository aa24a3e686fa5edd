//! Synthetic RPC clients, one per guest.
//!
//! Each connection slot holds at most one outstanding request. The driver
//! feeds connection events and receive notifications in and carries out the
//! returned actions.

use std::collections::BTreeMap;

use sharedstack::{Cycles, FlowId, GuestId};

use crate::config::{GuestSection, WorkloadMode};

pub const FIRST_LOCAL_PORT: u16 = 10_000;
const LAST_LOCAL_PORT: u16 = 60_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Connect { local_port: u16, token: u64 },
    Post { flow: FlowId, bytes: u32 },
    Close { flow: FlowId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Connecting {
        token: u64,
        started: Cycles,
    },
    /// Connected, waiting for the burst to resume.
    Parked {
        flow: FlowId,
    },
    Busy {
        flow: FlowId,
        issued_at: Cycles,
        received: u64,
    },
    Dead,
}

/// On/off duty cycle in cycles, starting with an on phase at time zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DutyCycle {
    pub on: Cycles,
    pub off: Cycles,
}

impl DutyCycle {
    pub fn is_on(&self, at: Cycles) -> bool {
        self.off == 0 || at % (self.on + self.off) < self.on
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkloadStats {
    pub connects: u64,
    pub refused: u64,
    pub issued: u64,
    pub completed: u64,
    /// Completions of requests issued at or after the warmup instant.
    pub measured: u64,
    /// Response bytes delivered at or after the warmup instant.
    pub measured_bytes: u64,
    /// Latencies of measured completions, in cycles.
    pub latencies: Vec<Cycles>,
    /// Issue instants, kept for duty-cycled guests only.
    pub issue_times: Vec<Cycles>,
}

#[derive(Debug)]
pub struct GuestWorkload {
    pub guest: GuestId,
    mode: WorkloadMode,
    request: u32,
    response: u32,
    duty: Option<DutyCycle>,
    warmup: Cycles,
    slots: Vec<Slot>,
    by_flow: BTreeMap<FlowId, usize>,
    by_token: BTreeMap<u64, usize>,
    next_port: u16,
    next_token: u32,
    pub stats: WorkloadStats,
}

impl GuestWorkload {
    pub fn new(
        guest: GuestId,
        spec: &GuestSection,
        duty: Option<DutyCycle>,
        warmup: Cycles,
    ) -> Self {
        GuestWorkload {
            guest,
            mode: spec.mode,
            request: spec.message_size,
            response: spec.response_size(),
            duty: if spec.mode == WorkloadMode::Burst {
                duty
            } else {
                None
            },
            warmup,
            slots: vec![Slot::Dead; spec.connections],
            by_flow: BTreeMap::new(),
            by_token: BTreeMap::new(),
            next_port: FIRST_LOCAL_PORT,
            next_token: 0,
            stats: WorkloadStats::default(),
        }
    }

    pub fn duty(&self) -> Option<DutyCycle> {
        self.duty
    }

    /// Requests issued and not yet answered.
    pub fn in_flight(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Busy { .. }))
            .count() as u64
    }

    /// Whether no slot is waiting for its connection.
    pub fn all_connected(&self) -> bool {
        !self
            .slots
            .iter()
            .any(|s| matches!(s, Slot::Connecting { .. }))
    }

    fn allowed(&self, at: Cycles) -> bool {
        self.duty.is_none_or(|d| d.is_on(at))
    }

    fn connect(&mut self, slot: usize, now: Cycles) -> Action {
        let token = (u64::from(self.guest.0) << 32) | u64::from(self.next_token);
        self.next_token = self.next_token.wrapping_add(1);
        let local_port = self.next_port;
        self.next_port = if self.next_port >= LAST_LOCAL_PORT {
            FIRST_LOCAL_PORT
        } else {
            self.next_port + 1
        };
        self.slots[slot] = Slot::Connecting {
            token,
            started: now,
        };
        self.by_token.insert(token, slot);
        self.stats.connects += 1;
        Action::Connect { local_port, token }
    }

    fn issue(&mut self, slot: usize, flow: FlowId, issued_at: Cycles, now: Cycles) -> Action {
        self.slots[slot] = Slot::Busy {
            flow,
            issued_at,
            received: 0,
        };
        self.stats.issued += 1;
        if self.duty.is_some() {
            self.stats.issue_times.push(now);
        }
        Action::Post {
            flow,
            bytes: self.request,
        }
    }

    /// Opens every connection.
    pub fn start(&mut self, now: Cycles) -> Vec<Action> {
        (0..self.slots.len())
            .map(|i| self.connect(i, now))
            .collect()
    }

    pub fn on_connected(&mut self, now: Cycles, token: u64, flow: FlowId) -> Vec<Action> {
        let Some(slot) = self.by_token.remove(&token) else {
            return Vec::new();
        };
        let Slot::Connecting { started, .. } = self.slots[slot] else {
            return Vec::new();
        };
        self.by_flow.insert(flow, slot);
        // A short-lived connection's latency includes its setup.
        let issued_at = if self.mode == WorkloadMode::ConnectionPerRpc {
            started
        } else {
            now
        };
        if self.allowed(now) {
            vec![self.issue(slot, flow, issued_at, now)]
        } else {
            self.slots[slot] = Slot::Parked { flow };
            Vec::new()
        }
    }

    pub fn on_refused(&mut self, token: u64) {
        if let Some(slot) = self.by_token.remove(&token) {
            self.slots[slot] = Slot::Dead;
            self.stats.refused += 1;
        }
    }

    /// Response bytes arrived on `flow`.
    pub fn on_notify(&mut self, now: Cycles, flow: FlowId, bytes: u32) -> Vec<Action> {
        let Some(&slot) = self.by_flow.get(&flow) else {
            return Vec::new();
        };
        let Slot::Busy {
            issued_at,
            ref mut received,
            ..
        } = self.slots[slot]
        else {
            return Vec::new();
        };
        *received += u64::from(bytes);
        let done = *received >= u64::from(self.response);
        if now >= self.warmup {
            self.stats.measured_bytes += u64::from(bytes);
        }
        if !done {
            return Vec::new();
        }
        self.stats.completed += 1;
        if issued_at >= self.warmup {
            self.stats.measured += 1;
            self.stats.latencies.push(now - issued_at);
        }
        match self.mode {
            WorkloadMode::ConnectionPerRpc => {
                self.by_flow.remove(&flow);
                let reconnect = self.connect(slot, now);
                vec![Action::Close { flow }, reconnect]
            }
            _ if self.allowed(now) => vec![self.issue(slot, flow, now, now)],
            _ => {
                self.slots[slot] = Slot::Parked { flow };
                Vec::new()
            }
        }
    }

    /// The start of an on phase: every parked connection sends again.
    pub fn on_burst_start(&mut self, now: Cycles) -> Vec<Action> {
        if !self.allowed(now) {
            return Vec::new();
        }
        let parked: Vec<(usize, FlowId)> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match *s {
                Slot::Parked { flow } => Some((i, flow)),
                _ => None,
            })
            .collect();
        parked
            .into_iter()
            .map(|(i, flow)| self.issue(i, flow, now, now))
            .collect()
    }

    /// A connection was torn down underneath its slot.
    pub fn on_closed(&mut self, flow: FlowId) {
        if let Some(slot) = self.by_flow.remove(&flow) {
            self.slots[slot] = Slot::Dead;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: WorkloadMode, connections: usize) -> GuestSection {
        GuestSection {
            connections,
            message_size: 64,
            response_size: Some(100),
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn closed_loop_keeps_one_request_per_connection() {
        let mut w = GuestWorkload::new(GuestId(2), &spec(WorkloadMode::ClosedLoop, 3), None, 0);
        let connects = w.start(0);
        assert_eq!(connects.len(), 3);
        let Action::Connect { token, local_port } = connects[1] else {
            panic!()
        };
        assert_eq!(token >> 32, 2);
        assert_eq!(local_port, FIRST_LOCAL_PORT + 1);
        assert!(!w.all_connected());
        for (i, a) in connects.iter().enumerate() {
            let Action::Connect { token, .. } = *a else {
                panic!()
            };
            let posted = w.on_connected(10, token, FlowId(i as u32));
            assert_eq!(
                posted,
                vec![Action::Post {
                    flow: FlowId(i as u32),
                    bytes: 64
                }]
            );
        }
        assert!(w.all_connected());
        assert_eq!(w.in_flight(), 3);
        assert!(w.on_notify(20, FlowId(0), 60).is_empty());
        assert_eq!(w.on_notify(30, FlowId(0), 40).len(), 1);
        assert_eq!(w.stats.latencies, vec![20]);
        assert_eq!(w.stats.issued, w.stats.completed + w.in_flight());
    }

    #[test]
    fn burst_parks_during_off_phase() {
        let duty = DutyCycle { on: 100, off: 100 };
        let mut w = GuestWorkload::new(GuestId(0), &spec(WorkloadMode::Burst, 1), Some(duty), 0);
        let Action::Connect { token, .. } = w.start(0)[0] else {
            panic!()
        };
        assert_eq!(w.on_connected(10, token, FlowId(5)).len(), 1);
        // Completes in the off phase: nothing is issued.
        assert!(w.on_notify(150, FlowId(5), 100).is_empty());
        assert_eq!(w.in_flight(), 0);
        assert!(w.on_burst_start(199).is_empty());
        assert_eq!(w.on_burst_start(200).len(), 1);
        assert_eq!(w.stats.issue_times, vec![10, 200]);
    }

    #[test]
    fn per_rpc_closes_and_reconnects() {
        let mut w = GuestWorkload::new(
            GuestId(0),
            &spec(WorkloadMode::ConnectionPerRpc, 1),
            None,
            0,
        );
        let Action::Connect { token, .. } = w.start(5)[0] else {
            panic!()
        };
        w.on_connected(50, token, FlowId(1));
        let next = w.on_notify(80, FlowId(1), 100);
        assert_eq!(next[0], Action::Close { flow: FlowId(1) });
        assert!(matches!(next[1], Action::Connect { .. }));
        // Latency counts from the connect.
        assert_eq!(w.stats.latencies, vec![75]);
    }

    #[test]
    fn warmup_completions_are_not_measured() {
        let mut w = GuestWorkload::new(GuestId(0), &spec(WorkloadMode::ClosedLoop, 1), None, 1_000);
        let Action::Connect { token, .. } = w.start(0)[0] else {
            panic!()
        };
        w.on_connected(900, token, FlowId(0));
        w.on_notify(1_100, FlowId(0), 100);
        assert_eq!((w.stats.completed, w.stats.measured), (1, 0));
        assert_eq!(w.stats.measured_bytes, 100);
        w.on_notify(1_200, FlowId(0), 100);
        assert_eq!(w.stats.latencies, vec![100]);
    }

    #[test]
    fn duty_cycle_phases() {
        let d = DutyCycle { on: 3, off: 2 };
        let on: Vec<bool> = (0..10).map(|t| d.is_on(t)).collect();
        assert_eq!(
            on,
            [true, true, true, false, false, true, true, true, false, false]
        );
        assert!(DutyCycle { on: 3, off: 0 }.is_on(4));
    }
}
