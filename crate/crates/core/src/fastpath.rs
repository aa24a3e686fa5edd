//! The per-core fast-path engine.
//!
//! One iteration runs three batched tasks in order: RX ingests packets from
//! the core's NIC queue, POLL drains guest transmit queues into flow send
//! buffers, and TX assembles segments for flows whose send time has come.
//! Each batch is measured with the cost model and charged to the guests it
//! served; work that belongs to no guest is booked as unaccounted.

use std::collections::{BTreeMap, VecDeque};
use std::hash::Hasher;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::accounting::{BudgetTable, CostModel, TaskKind};
use crate::flow::{FlowId, FlowTable, RxVerdict};
use crate::guest::{GuestContext, RxNotification};
use crate::packet::{assemble_packet, make_ack, parse_packet, seq_lt, FlowKey, Packet, TcpFlags};
use crate::sched::{Admission, CoreSchedState, DEFAULT_BATCH_SIZE, DEFAULT_MSS};
use crate::{CoreId, Cycles, GuestId};

/// 100 Gbit/s at 2.1 GHz, in bytes per cycle.
pub const DEFAULT_INITIAL_RATE: f64 = 100e9 / 8.0 / 2.1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastPathConfig {
    pub batch_size: usize,
    pub mss: u32,
    /// Share of the base task cost charged for an RX drop.
    pub drop_cost_fraction: f64,
    /// Pacing rate for flows the slow-path has not rated yet, bytes per cycle.
    pub initial_rate: f64,
    /// Budget gating; turning it off keeps accounting but schedules everyone.
    pub gating: bool,
    /// Record every scheduling decision for an external audit.
    pub audit: bool,
}

impl Default for FastPathConfig {
    fn default() -> Self {
        FastPathConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            mss: DEFAULT_MSS,
            drop_cost_fraction: 0.25,
            initial_rate: DEFAULT_INITIAL_RATE,
            gating: true,
            audit: false,
        }
    }
}

impl FastPathConfig {
    pub fn drop_cost(&self, cost: &CostModel) -> Cycles {
        (self.drop_cost_fraction * cost.base_cycles_per_task as f64).round() as Cycles
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreStats {
    pub iterations: u64,
    pub idle_iterations: u64,
    pub cycles_total: Cycles,
    /// Part of `cycles_total` spent in iterations that found nothing to do.
    pub idle_cycles: Cycles,
    pub cycles_accounted: Cycles,
    pub cycles_unaccounted: Cycles,
    pub rx_cycles: Cycles,
    pub poll_cycles: Cycles,
    pub tx_cycles: Cycles,
    pub rx_packets: u64,
    pub rx_drops: u64,
    pub rx_misses: u64,
    pub acks_sent: u64,
    pub poll_items: u64,
    pub bad_requests: u64,
    pub tx_segments: u64,
    pub tx_bytes: u64,
}

impl CoreStats {
    /// Share of consumed cycles spent in iterations that did work.
    pub fn utilization(&self) -> f64 {
        if self.cycles_total == 0 {
            0.0
        } else {
            1.0 - self.idle_cycles as f64 / self.cycles_total as f64
        }
    }

    pub fn accounted_fraction(&self) -> f64 {
        if self.cycles_total == 0 {
            0.0
        } else {
            self.cycles_accounted as f64 / self.cycles_total as f64
        }
    }

    fn book(&mut self, kind: TaskKind, accounted: Cycles, unaccounted: Cycles) -> Cycles {
        let total = accounted + unaccounted;
        self.cycles_accounted += accounted;
        self.cycles_unaccounted += unaccounted;
        self.cycles_total += total;
        match kind {
            TaskKind::Rx => self.rx_cycles += total,
            TaskKind::Poll => self.poll_cycles += total,
            TaskKind::Tx => self.tx_cycles += total,
        }
        total
    }
}

/// One scheduling decision, with the guest's balance as the scheduler saw it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuditRecord {
    pub at: Cycles,
    pub core: CoreId,
    pub guest: GuestId,
    pub kind: TaskKind,
    pub balance: i64,
    /// RX only: whether the packet was admitted.
    pub admitted: bool,
}

impl AuditRecord {
    /// Work done for a guest that had no budget.
    pub fn is_violation(&self) -> bool {
        self.balance <= 0
            && match self.kind {
                TaskKind::Rx => self.admitted,
                TaskKind::Poll | TaskKind::Tx => true,
            }
    }
}

/// Everything a core emits during a step, stamped with the cycle it left the core.
#[derive(Clone, Debug, Default)]
pub struct FastPathOutput {
    pub wire: Vec<(Cycles, Packet)>,
    pub to_slowpath: Vec<(Cycles, Packet)>,
}

/// State shared by all cores, borrowed for one step.
pub struct FastPathEnv<'a> {
    pub flows: &'a mut FlowTable,
    pub budgets: &'a mut BudgetTable,
    pub guests: &'a mut [GuestContext],
    pub cost: &'a CostModel,
    pub rng: &'a mut dyn RngCore,
    pub out: &'a mut FastPathOutput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IterationReport {
    pub rx: Cycles,
    pub poll: Cycles,
    pub tx: Cycles,
    /// Packets, requests and segments handled.
    pub work_items: u64,
}

impl IterationReport {
    pub fn total(&self) -> Cycles {
        self.rx + self.poll + self.tx
    }

    pub fn is_idle(&self) -> bool {
        self.work_items == 0
    }
}

/// NIC receive-side scaling: the core that owns a flow key.
pub fn rss_core(key: &FlowKey, num_cores: usize) -> CoreId {
    let mut h = Fnv1a::default();
    h.write(&key.guest_local_ip.octets());
    h.write_u16(key.guest_local_port);
    h.write(&key.remote_ip.octets());
    h.write_u16(key.remote_port);
    h.write_u32(key.tunnel_id);
    CoreId((h.finish() % num_cores.max(1) as u64) as u32)
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[derive(Debug)]
pub struct FastPathCore {
    pub id: CoreId,
    pub config: FastPathConfig,
    pub sched: CoreSchedState,
    pub nic_rx: VecDeque<Packet>,
    /// Flows the slow-path asks this core to put back on its TX queue.
    pub kicks: VecDeque<FlowId>,
    pub stats: CoreStats,
    pub audit_log: Vec<AuditRecord>,
}

impl FastPathCore {
    pub fn new(id: CoreId, num_guests: usize, config: FastPathConfig) -> Self {
        FastPathCore {
            id,
            sched: CoreSchedState::new(id, num_guests, config.batch_size),
            config,
            nic_rx: VecDeque::new(),
            kicks: VecDeque::new(),
            stats: CoreStats::default(),
            audit_log: Vec::new(),
        }
    }

    fn audit(&mut self, at: Cycles, guest: GuestId, kind: TaskKind, balance: i64, admitted: bool) {
        if self.config.audit {
            self.audit_log.push(AuditRecord {
                at,
                core: self.id,
                guest,
                kind,
                balance,
                admitted,
            });
        }
    }

    /// Books `cycles` spent with nothing to do, as when a sleeping core is
    /// woken and the skipped iterations are accounted after the fact.
    pub fn book_idle(&mut self, iterations: u64, cycles: Cycles) {
        self.stats.iterations += iterations;
        self.stats.idle_iterations += iterations;
        self.stats.idle_cycles += cycles;
        self.stats.cycles_total += cycles;
        self.stats.cycles_unaccounted += cycles;
    }

    /// Whether the core has anything it could do at `now` ignoring budgets.
    pub fn has_pending_input(&self, guests: &[GuestContext]) -> bool {
        !self.nic_rx.is_empty()
            || !self.kicks.is_empty()
            || guests.iter().any(|g| g.backlog(self.id) > 0)
    }

    pub fn run_rx_batch(&mut self, now: Cycles, env: &mut FastPathEnv<'_>) -> (Cycles, u64) {
        if self.nic_rx.is_empty() {
            let idle = env.cost.empty_poll_cost();
            return (self.stats.book(TaskKind::Rx, 0, idle), 0);
        }
        let drop_cost = self.config.drop_cost(env.cost);
        let mut admitted: BTreeMap<GuestId, u64> = BTreeMap::new();
        let mut admitted_cycles = 0;
        let mut dropped: BTreeMap<GuestId, u64> = BTreeMap::new();
        let mut dropped_cycles = 0;
        let mut unaccounted = 0;
        let mut t = now;
        let mut handled = 0;

        while handled < self.config.batch_size {
            let Some(packet) = self.nic_rx.pop_front() else {
                break;
            };
            handled += 1;
            self.stats.rx_packets += 1;
            let hit = parse_packet(&packet)
                .ok()
                .and_then(|seg| env.flows.lookup(&seg.key).map(|id| (seg, id)))
                .filter(|(seg, _)| !seg.flags.is_control());
            let Some((seg, id)) = hit else {
                let cost = env.cost.sample(TaskKind::Rx, 0, env.rng);
                t += cost;
                unaccounted += cost;
                self.stats.rx_misses += 1;
                env.out.to_slowpath.push((t, packet));
                continue;
            };
            let guest = env.flows.get(id).expect("looked-up flow").guest;
            let balance = env.budgets.balance(self.id, guest);
            let admission = self.sched.rx_admit(env.budgets, guest, self.config.gating);
            self.audit(
                t,
                guest,
                TaskKind::Rx,
                balance,
                admission == Admission::Admit,
            );
            if admission == Admission::Drop {
                t += drop_cost;
                dropped_cycles += drop_cost;
                *dropped.entry(guest).or_default() += 1;
                self.stats.rx_drops += 1;
                env.guests[guest.index()].stats.rx_drops += 1;
                continue;
            }
            let cost = env.cost.sample(TaskKind::Rx, seg.payload_len, env.rng);
            t += cost;
            admitted_cycles += cost;
            *admitted.entry(guest).or_default() += 1;
            env.guests[guest.index()].stats.rx_packets += 1;

            let flow = env.flows.get_mut(id).expect("looked-up flow");
            if seg.flags.contains(TcpFlags::ACK) {
                flow.process_ack(seg.ack, t);
            }
            if seg.payload_len == 0 {
                continue;
            }
            if flow.validate_and_deposit(seg.seq, seg.payload_len) == RxVerdict::Accepted {
                env.guests[guest.index()]
                    .rx_notifications
                    .push_back(RxNotification {
                        at: t,
                        flow: id,
                        bytes: seg.payload_len,
                    });
            }
            env.out.wire.push((
                t,
                make_ack(&packet, flow.tx_next_seq, flow.rx_next_expected),
            ));
            self.stats.acks_sent += 1;
        }

        let charged = admitted_cycles + dropped_cycles;
        env.budgets
            .charge_batch(self.id, &admitted, admitted_cycles);
        env.budgets.charge_batch(self.id, &dropped, dropped_cycles);
        (
            self.stats.book(TaskKind::Rx, charged, unaccounted),
            handled as u64,
        )
    }

    pub fn run_poll_batch(&mut self, now: Cycles, env: &mut FastPathEnv<'_>) -> (Cycles, u64) {
        let item_cost = env.cost.task_cost(TaskKind::Poll, 0);
        let plan = self
            .sched
            .schedule_poll(env.guests, env.budgets, self.config.gating, item_cost);
        let mut counts: BTreeMap<GuestId, u64> = BTreeMap::new();
        let mut cycles = 0;
        let mut t = now;
        let mut items = 0;

        for entry in plan {
            let balance = env.budgets.balance(self.id, entry.guest);
            for _ in 0..entry.max_items {
                let guest = &mut env.guests[entry.guest.index()];
                let Some(request) = guest.front_mut(self.id, entry.queue).copied() else {
                    break;
                };
                let flow = env
                    .flows
                    .get_mut(request.flow)
                    .filter(|f| f.guest == entry.guest && f.core == self.id && !f.closing);
                let mut backlogged = None;
                let mut partial = false;
                match flow {
                    None => {
                        guest.take(self.id, entry.queue);
                        guest.stats.bad_requests += 1;
                        self.stats.bad_requests += 1;
                    }
                    Some(flow) => {
                        let n = request.bytes.min(flow.tx_buffer.free());
                        if n == 0 {
                            break;
                        }
                        flow.tx_buffer.write(n);
                        flow.pending_tx_bytes += n;
                        if n == request.bytes {
                            guest.take(self.id, entry.queue);
                        } else {
                            guest
                                .front_mut(self.id, entry.queue)
                                .expect("head request")
                                .bytes -= n;
                            partial = true;
                        }
                        backlogged = Some(request.flow);
                    }
                }
                guest.stats.requests_polled += 1;
                let cost = env.cost.sample(TaskKind::Poll, 0, env.rng);
                t += cost;
                cycles += cost;
                *counts.entry(entry.guest).or_default() += 1;
                items += 1;
                self.stats.poll_items += 1;
                self.audit(t, entry.guest, TaskKind::Poll, balance, true);
                if let Some(id) = backlogged {
                    self.sched.enqueue_flow(env.flows, id, t);
                }
                // The send buffer is full; the rest of the request waits at the head.
                if partial {
                    break;
                }
            }
        }

        if items == 0 {
            let idle = env.cost.empty_poll_cost();
            return (self.stats.book(TaskKind::Poll, 0, idle), 0);
        }
        env.budgets.charge_batch(self.id, &counts, cycles);
        (self.stats.book(TaskKind::Poll, cycles, 0), items)
    }

    pub fn run_tx_batch(&mut self, now: Cycles, env: &mut FastPathEnv<'_>) -> (Cycles, u64) {
        while let Some(id) = self.kicks.pop_front() {
            self.sched.enqueue_flow(env.flows, id, now);
        }
        let plan = self.sched.schedule_tx(
            now,
            env.flows,
            env.budgets,
            self.config.gating,
            self.config.mss,
            self.config.initial_rate,
        );
        if plan.is_empty() {
            let idle = env.cost.empty_poll_cost();
            return (self.stats.book(TaskKind::Tx, 0, idle), 0);
        }
        let mut counts: BTreeMap<GuestId, u64> = BTreeMap::new();
        let mut cycles = 0;
        let mut t = now;
        for item in &plan {
            let balance = env.budgets.balance(self.id, item.guest);
            let cost = env.cost.sample(TaskKind::Tx, item.segment_len, env.rng);
            t += cost;
            cycles += cost;
            *counts.entry(item.guest).or_default() += 1;
            self.audit(t, item.guest, TaskKind::Tx, balance, true);

            let flow = env.flows.get_mut(item.flow).expect("scheduled flow");
            let packet = assemble_packet(
                &flow.template,
                flow.tx_next_seq,
                flow.rx_next_expected,
                TcpFlags::ACK | TcpFlags::PSH,
                item.segment_len,
            );
            flow.tx_next_seq = flow.tx_next_seq.wrapping_add(item.segment_len);
            if seq_lt(flow.tx_max_seq, flow.tx_next_seq) {
                flow.tx_max_seq = flow.tx_next_seq;
            }
            flow.pending_tx_bytes -= item.segment_len;
            if flow.unacked_since.is_none() {
                flow.unacked_since = Some(t);
            }
            env.out.wire.push((t, packet));
            let guest = &mut env.guests[item.guest.index()];
            guest.stats.tx_segments += 1;
            guest.stats.tx_bytes += u64::from(item.segment_len);
            self.stats.tx_segments += 1;
            self.stats.tx_bytes += u64::from(item.segment_len);
        }
        env.budgets.charge_batch(self.id, &counts, cycles);
        (self.stats.book(TaskKind::Tx, cycles, 0), plan.len() as u64)
    }

    /// RX, then POLL, then TX, each starting where the previous one ended.
    pub fn run_iteration(&mut self, now: Cycles, env: &mut FastPathEnv<'_>) -> IterationReport {
        let (rx, rx_items) = self.run_rx_batch(now, env);
        let (poll, poll_items) = self.run_poll_batch(now + rx, env);
        let (tx, tx_items) = self.run_tx_batch(now + rx + poll, env);
        let report = IterationReport {
            rx,
            poll,
            tx,
            work_items: rx_items + poll_items + tx_items,
        };
        self.stats.iterations += 1;
        if report.is_idle() {
            self.stats.idle_iterations += 1;
            self.stats.idle_cycles += report.total();
        }
        report
    }
}
