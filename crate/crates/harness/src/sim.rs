//! The discrete-event driver for one run.
//!
//! Time is counted in CPU cycles. Events are totally ordered by
//! (time, kind priority, insertion sequence), so a run is a pure function of
//! its configuration.
//!
//! A fast-path core busy-polls. Rather than simulate every empty iteration,
//! an idle core sleeps and on wake-up books the empty iterations it would
//! have run, so it resumes on the same iteration boundary a polling loop
//! would have reached.

use std::cmp::Reverse;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharedstack::fastpath::{rss_core, FastPathEnv, FastPathOutput};
use sharedstack::guest::TxRequest;
use sharedstack::packet::{parse_packet, MacAddr};
use sharedstack::slowpath::{
    ConnEvent, LocalHost, SlowPathEnv, SlowPathOutput, TunnelInfo, Work, TUNNEL_UDP_PORT,
};
use sharedstack::{
    Allocator, BudgetTable, CoreId, CostModel, Cycles, FastPathConfig, FastPathCore, FlowId,
    FlowKey, FlowTable, GuestContext, GuestId, Packet, SlowPath, SlowPathConfig, TunnelRegistry,
};

use crate::config::{SimConfig, WorkloadMode};
use crate::metrics::{CoreMetrics, GuestMetrics, LatencySummary, Ledger, RunMetrics};
use crate::remote::{MessageSizes, RemoteConfig, RemoteHost};
use crate::workload::{Action, DutyCycle, GuestWorkload};
use crate::HarnessError;

/// Every guest uses this address inside its own virtual network.
pub const GUEST_VIRTUAL_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
pub const SERVER_VIRTUAL_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
pub const SERVER_PORT: u16 = 7;
const HOST: LocalHost = LocalHost {
    ip: Ipv4Addr::new(192, 168, 0, 1),
    mac: MacAddr([2, 0, 0, 0, 0, 1]),
};
const PEER_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 0, 2);
const PEER_MAC: MacAddr = MacAddr([2, 0, 0, 0, 0, 2]);

/// Guest `g` lives in the virtual network with this tunnel id.
pub fn tunnel_of(guest: usize) -> u32 {
    guest as u32 + 1
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Tick,
    Warmup,
    NicArrival(Packet),
    RemoteArrival(Packet),
    RemoteTimer(FlowKey),
    Notify {
        guest: usize,
        flow: FlowId,
        bytes: u32,
    },
    Conn {
        guest: usize,
        event: ConnEvent,
    },
    BurstStart(usize),
    SlowPathPunt(Packet),
    SlowPathStep(u64),
    Egress(Packet),
    Ingress(Packet),
    CoreWake(usize),
    CoreStep(usize),
    End,
}

impl Event {
    /// Order among events at the same instant: budgets are refreshed
    /// first, inputs land before the work that consumes them, and the end
    /// marker comes last.
    fn priority(&self) -> u8 {
        match self {
            Event::Tick => 0,
            Event::Warmup => 1,
            Event::NicArrival(_) => 2,
            Event::RemoteArrival(_) => 3,
            Event::RemoteTimer(_) => 4,
            Event::Notify { .. } | Event::Conn { .. } | Event::BurstStart(_) => 5,
            Event::SlowPathPunt(_) => 6,
            Event::SlowPathStep(_) => 7,
            Event::Egress(_) | Event::Ingress(_) => 8,
            Event::CoreWake(_) => 9,
            Event::CoreStep(_) => 10,
            Event::End => 11,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Scheduled {
    at: Cycles,
    priority: u8,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl Scheduled {
    fn key(&self) -> (Cycles, u8, u64) {
        (self.at, self.priority, self.seq)
    }
}

/// One direction of the wire: serialization at line rate behind earlier
/// packets, then a fixed propagation delay.
#[derive(Clone, Debug)]
struct Link {
    bytes_per_cycle: f64,
    propagation: Cycles,
    free_at: Cycles,
    max_wait: Cycles,
}

impl Link {
    /// When a packet handed to the link at `now` reaches the far end.
    fn transmit(&mut self, now: Cycles, wire_len: u32) -> Cycles {
        let serialization = ((f64::from(wire_len) / self.bytes_per_cycle).ceil() as Cycles).max(1);
        let start = now.max(self.free_at);
        self.max_wait = self.max_wait.max(start - now);
        self.free_at = start + serialization;
        self.free_at + self.propagation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CoreState {
    /// A step is scheduled at `next`.
    Running { next: Cycles },
    /// Empty iterations of `idle` cycles each have been running since `since`.
    Sleeping { since: Cycles, idle: Cycles },
}

#[derive(Clone, Copy, Debug, Default)]
struct Snapshot {
    core_total: Cycles,
    core_accounted: Cycles,
}

pub struct Simulation {
    cfg: SimConfig,
    end: Cycles,
    warmup: Cycles,
    period: Cycles,
    now: Cycles,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_seq: u64,

    flows: FlowTable,
    budgets: BudgetTable,
    guests: Vec<GuestContext>,
    cost: CostModel,
    cores: Vec<FastPathCore>,
    core_state: Vec<CoreState>,
    nic_drops: Vec<u64>,
    nic_max_depth: Vec<usize>,
    slowpath: SlowPath,
    sp_generation: u64,
    sp_armed: Option<Cycles>,
    fp_out: FastPathOutput,
    sp_out: SlowPathOutput,
    cost_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,

    egress: Link,
    ingress: Link,
    remote: RemoteHost,
    remote_timers: BTreeMap<FlowKey, Cycles>,
    workloads: Vec<GuestWorkload>,

    audit_records: u64,
    audit_violations: u64,
    link_losses: u64,
    warm: Option<Snapshot>,
    setup: Option<(Cycles, u64)>,
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Self, HarnessError> {
        cfg.validate_run()?;
        let cfg = cfg.clone();
        let num_guests = cfg.guests.len();
        let num_cores = cfg.num_fastpath_cores;
        let alloc = cfg.allocator_config();
        alloc.validate().map_err(|e| {
            HarnessError::Config(crate::config::ConfigError {
                field: "allocator".into(),
                message: e.to_string(),
            })
        })?;

        // Every guest starts with one period's worth of its credit.
        let mut budgets = BudgetTable::new(num_cores, num_guests, alloc.cap, 0);
        let initial = sharedstack::allocator::credits_for_elapsed(
            alloc.update_period * num_cores as u64,
            &alloc,
        );
        for (g, credit) in initial.iter().enumerate() {
            let shares = sharedstack::accounting::apportion(&vec![1; num_cores], *credit);
            for (c, share) in shares.into_iter().enumerate() {
                budgets.replenish_entry(CoreId(c as u32), GuestId(g as u32), share);
            }
        }

        let mut registry = TunnelRegistry::new(HOST);
        let mut sizes = BTreeMap::new();
        let mut addrs = Vec::with_capacity(num_guests);
        for (g, spec) in cfg.guests.iter().enumerate() {
            let tunnel = tunnel_of(g);
            registry.register_local(tunnel, GUEST_VIRTUAL_IP, GuestId(g as u32));
            registry.register(
                tunnel,
                SERVER_VIRTUAL_IP,
                TunnelInfo {
                    outer_dst_ip: PEER_IP,
                    outer_dst_mac: PEER_MAC,
                    outer_dst_port: TUNNEL_UDP_PORT,
                    gre_key: tunnel,
                    local_guest: None,
                },
            );
            sizes.insert(
                tunnel,
                MessageSizes {
                    request: spec.message_size,
                    response: spec.response_size(),
                },
            );
            addrs.push((tunnel, GUEST_VIRTUAL_IP));
        }

        let rate = cfg.gbps_to_bytes_per_cycle(cfg.slowpath.rate_gbps);
        let rto = cfg.us_to_cycles(cfg.slowpath.rto_us).max(1);
        let slowpath = SlowPath::new(
            SlowPathConfig {
                rto,
                resolution_latency: cfg.slowpath.resolution_latency_cycles,
                item_cycles: cfg.slowpath.item_cycles,
                charge_guests: cfg.slowpath.charge_guests,
                rate_policy: cfg.slowpath.rate_policy,
                rate,
                flow_buffer_bytes: cfg.flow_buffer_bytes,
            },
            registry,
            Allocator::new(alloc.clone(), 0),
            num_cores,
            &addrs,
        );

        let fp_config = FastPathConfig {
            batch_size: cfg.batch_size,
            mss: cfg.mss,
            drop_cost_fraction: cfg.drop_cost_fraction,
            initial_rate: cfg.gbps_to_bytes_per_cycle(cfg.initial_rate_gbps),
            gating: !cfg.ablate_no_budget,
            audit: true,
        };
        let cores = (0..num_cores)
            .map(|c| FastPathCore::new(CoreId(c as u32), num_guests, fp_config))
            .collect();

        let link = Link {
            bytes_per_cycle: cfg.gbps_to_bytes_per_cycle(cfg.link.bandwidth_gbps),
            propagation: cfg.us_to_cycles(cfg.link.propagation_us),
            free_at: 0,
            max_wait: 0,
        };
        let warmup = cfg.ms_to_cycles(cfg.warmup_ms);
        let workloads = cfg
            .guests
            .iter()
            .enumerate()
            .map(|(g, spec)| {
                let duty = match (spec.on_ms, spec.off_ms) {
                    (Some(on), Some(off)) => Some(DutyCycle {
                        on: cfg.ms_to_cycles(on).max(1),
                        off: cfg.ms_to_cycles(off),
                    }),
                    _ => None,
                };
                GuestWorkload::new(GuestId(g as u32), spec, duty, warmup)
            })
            .collect();

        let mut cost_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        cost_rng.set_stream(1);
        let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        loss_rng.set_stream(2);

        Ok(Simulation {
            end: cfg.ms_to_cycles(cfg.duration_ms),
            warmup,
            period: alloc.update_period,
            now: 0,
            queue: BinaryHeap::new(),
            next_seq: 0,
            flows: FlowTable::new(),
            budgets,
            guests: (0..num_guests)
                .map(|g| {
                    GuestContext::new(
                        GuestId(g as u32),
                        cfg.guests[g].weight,
                        tunnel_of(g),
                        GUEST_VIRTUAL_IP,
                        num_cores,
                        1,
                    )
                })
                .collect(),
            cost: cfg.cost,
            cores,
            core_state: vec![CoreState::Running { next: 0 }; num_cores],
            nic_drops: vec![0; num_cores],
            nic_max_depth: vec![0; num_cores],
            slowpath,
            sp_generation: 0,
            sp_armed: None,
            fp_out: FastPathOutput::default(),
            sp_out: SlowPathOutput::default(),
            cost_rng,
            loss_rng,
            egress: link.clone(),
            ingress: link,
            remote: RemoteHost::new(
                RemoteConfig {
                    mss: cfg.mss,
                    window: cfg.flow_buffer_bytes,
                    rto,
                },
                sizes,
            ),
            remote_timers: BTreeMap::new(),
            workloads,
            audit_records: 0,
            audit_violations: 0,
            link_losses: 0,
            warm: None,
            setup: None,
            cfg,
        })
    }

    fn schedule(&mut self, at: Cycles, event: Event) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            priority: event.priority(),
            seq,
            event,
        }));
    }

    pub fn run(mut self) -> Result<RunMetrics, HarnessError> {
        self.schedule(self.end, Event::End);
        if self.period <= self.end {
            self.schedule(self.period, Event::Tick);
        }
        self.schedule(self.warmup.min(self.end), Event::Warmup);
        for c in 0..self.cores.len() {
            self.schedule(0, Event::CoreStep(c));
        }
        for g in 0..self.workloads.len() {
            let actions = self.workloads[g].start(0);
            self.apply(g, actions);
            if let Some(duty) = self.workloads[g].duty() {
                if duty.off > 0 {
                    self.schedule_burst(g, duty, 0);
                }
            }
        }

        while let Some(Reverse(item)) = self.queue.pop() {
            self.now = item.at;
            if let Event::End = item.event {
                break;
            }
            self.dispatch(item.event);
        }
        self.finish()
    }

    fn schedule_burst(&mut self, g: usize, duty: DutyCycle, after: Cycles) {
        let cycle = duty.on + duty.off;
        let next = (after / cycle + 1) * cycle;
        if next <= self.end {
            self.schedule(next, Event::BurstStart(g));
        }
    }

    fn dispatch(&mut self, event: Event) {
        let now = self.now;
        match event {
            Event::Tick => self.tick(),
            Event::Warmup => {
                self.warm = Some(Snapshot {
                    core_total: self.cores.iter().map(|c| c.stats.cycles_total).sum(),
                    core_accounted: self.cores.iter().map(|c| c.stats.cycles_accounted).sum(),
                })
            }
            Event::NicArrival(packet) => {
                let core = parse_packet(&packet)
                    .map(|seg| rss_core(&seg.key, self.cores.len()))
                    .unwrap_or(CoreId(0))
                    .index();
                if self.cores[core].nic_rx.len() >= self.cfg.nic_queue_packets {
                    self.nic_drops[core] += 1;
                } else {
                    self.cores[core].nic_rx.push_back(packet);
                    self.nic_max_depth[core] =
                        self.nic_max_depth[core].max(self.cores[core].nic_rx.len());
                    self.wake(core);
                }
            }
            Event::RemoteArrival(packet) => {
                let out = self.remote.receive(now, &packet);
                for p in out.packets {
                    self.schedule(now, Event::Ingress(p));
                }
                if let Some((deadline, key)) = out.timer {
                    self.arm_remote_timer(deadline, key);
                }
            }
            Event::RemoteTimer(key) => {
                self.remote_timers.remove(&key);
                let out = self.remote.timeout(now, key);
                for p in out.packets {
                    self.schedule(now, Event::Ingress(p));
                }
                if let Some((deadline, key)) = out.timer {
                    self.arm_remote_timer(deadline, key);
                }
            }
            Event::Notify { guest, flow, bytes } => {
                if let Some(f) = self.flows.get_mut(flow) {
                    f.rx_buffer.release(bytes);
                }
                let actions = self.workloads[guest].on_notify(now, flow, bytes);
                self.apply(guest, actions);
            }
            Event::Conn { guest, event } => {
                let w = &mut self.workloads[guest];
                let actions = match event {
                    ConnEvent::Connected { token, flow } => w.on_connected(now, token, flow),
                    ConnEvent::Refused { token } => {
                        w.on_refused(token);
                        Vec::new()
                    }
                    ConnEvent::Closed { flow } => {
                        w.on_closed(flow);
                        Vec::new()
                    }
                    ConnEvent::Accepted { .. } => Vec::new(),
                };
                self.apply(guest, actions);
                self.check_setup();
            }
            Event::BurstStart(g) => {
                let actions = self.workloads[g].on_burst_start(now);
                self.apply(g, actions);
                if let Some(duty) = self.workloads[g].duty() {
                    self.schedule_burst(g, duty, now);
                }
            }
            Event::SlowPathPunt(packet) => {
                self.slowpath.enqueue_packet(packet);
                self.arm_slowpath();
            }
            Event::SlowPathStep(generation) => {
                if generation == self.sp_generation {
                    self.sp_armed = None;
                    self.slowpath.complete_resolutions(now);
                    if self.slowpath.next_step_time(now) == Some(now) {
                        let mut env = SlowPathEnv {
                            flows: &mut self.flows,
                            budgets: &mut self.budgets,
                            out: &mut self.sp_out,
                        };
                        self.slowpath.step(now, &mut env);
                        self.drain_slowpath();
                    }
                    self.arm_slowpath();
                }
            }
            Event::Egress(packet) => {
                let arrival = self.egress.transmit(now, packet.wire_len);
                if !self.lost() {
                    self.schedule(arrival, Event::RemoteArrival(packet));
                }
            }
            Event::Ingress(packet) => {
                let arrival = self.ingress.transmit(now, packet.wire_len);
                if !self.lost() {
                    self.schedule(arrival, Event::NicArrival(packet));
                }
            }
            Event::CoreWake(c) => self.wake(c),
            Event::CoreStep(c) => self.step_core(c),
            Event::End => {}
        }
    }

    fn lost(&mut self) -> bool {
        let rate = self.cfg.link.loss_rate;
        let lost = rate > 0.0 && self.loss_rng.gen_bool(rate);
        self.link_losses += u64::from(lost);
        lost
    }

    fn arm_remote_timer(&mut self, deadline: Cycles, key: FlowKey) {
        // One pending timer per connection; the remote re-arms lazily.
        if let Entry::Vacant(slot) = self.remote_timers.entry(key) {
            slot.insert(deadline);
            self.schedule(deadline.max(self.now), Event::RemoteTimer(key));
        }
    }

    fn arm_slowpath(&mut self) {
        let now = self.now;
        let next = [
            self.slowpath.next_step_time(now),
            self.slowpath.next_resolution_time().map(|t| t.max(now)),
        ]
        .into_iter()
        .flatten()
        .min();
        if let Some(t) = next {
            if self.sp_armed.is_none_or(|armed| t < armed) {
                self.sp_generation += 1;
                self.sp_armed = Some(t);
                self.schedule(t, Event::SlowPathStep(self.sp_generation));
            }
        }
    }

    fn tick(&mut self) {
        let now = self.now;
        let mut env = SlowPathEnv {
            flows: &mut self.flows,
            budgets: &mut self.budgets,
            out: &mut self.sp_out,
        };
        self.slowpath.tick(now, &mut env);
        self.drain_slowpath();
        for c in 0..self.cores.len() {
            let core = &self.cores[c];
            let ready = core.has_pending_input(&self.guests)
                || core.sched.earliest_send_time().is_some_and(|t| t <= now);
            if ready {
                self.wake(c);
            }
        }
        self.arm_slowpath();
        if now + self.period <= self.end {
            self.schedule(now + self.period, Event::Tick);
        }
    }

    fn drain_slowpath(&mut self) {
        for (at, packet) in std::mem::take(&mut self.sp_out.wire) {
            self.schedule(at.max(self.now), Event::Egress(packet));
        }
        for (core, flow) in std::mem::take(&mut self.sp_out.kicks) {
            self.cores[core.index()].kicks.push_back(flow);
            self.wake(core.index());
        }
        for (at, guest, event) in std::mem::take(&mut self.sp_out.conn_events) {
            self.schedule(
                at.max(self.now),
                Event::Conn {
                    guest: guest.index(),
                    event,
                },
            );
        }
    }

    fn apply(&mut self, guest: usize, actions: Vec<Action>) {
        let g = GuestId(guest as u32);
        for action in actions {
            match action {
                Action::Connect { local_port, token } => {
                    self.slowpath.enqueue_request(Work::Connect {
                        guest: g,
                        local_port,
                        remote_ip: SERVER_VIRTUAL_IP,
                        remote_port: SERVER_PORT,
                        token,
                    });
                    self.arm_slowpath();
                }
                Action::Post { flow, bytes } => {
                    let Some(core) = self.flows.get(flow).map(|f| f.core) else {
                        continue;
                    };
                    self.guests[guest].post(core, 0, TxRequest { flow, bytes });
                    self.wake(core.index());
                }
                Action::Close { flow } => {
                    self.slowpath
                        .enqueue_request(Work::Close { guest: g, flow });
                    self.arm_slowpath();
                }
            }
        }
    }

    /// Records the instant every connection is up and no handshake is left.
    fn check_setup(&mut self) {
        if self.setup.is_some()
            || self
                .cfg
                .guests
                .iter()
                .any(|g| g.mode == WorkloadMode::ConnectionPerRpc)
        {
            return;
        }
        if self.workloads.iter().all(GuestWorkload::all_connected)
            && self.slowpath.handshakes_in_progress() == 0
        {
            self.setup = Some((self.now, self.slowpath.stats.events));
        }
    }

    fn wake(&mut self, c: usize) {
        let CoreState::Sleeping { since, idle } = self.core_state[c] else {
            return;
        };
        let skipped = self.now.saturating_sub(since).div_ceil(idle);
        self.cores[c].book_idle(skipped, skipped * idle);
        let next = since + skipped * idle;
        self.core_state[c] = CoreState::Running { next };
        self.schedule(next, Event::CoreStep(c));
    }

    fn step_core(&mut self, c: usize) {
        let now = self.now;
        debug_assert_eq!(self.core_state[c], CoreState::Running { next: now });
        let mut env = FastPathEnv {
            flows: &mut self.flows,
            budgets: &mut self.budgets,
            guests: &mut self.guests,
            cost: &self.cost,
            rng: &mut self.cost_rng,
            out: &mut self.fp_out,
        };
        let report = self.cores[c].run_iteration(now, &mut env);
        let done = now + report.total();

        for (at, packet) in std::mem::take(&mut self.fp_out.wire) {
            self.schedule(at, Event::Egress(packet));
        }
        for (at, packet) in std::mem::take(&mut self.fp_out.to_slowpath) {
            self.schedule(at, Event::SlowPathPunt(packet));
        }
        for g in 0..self.guests.len() {
            while let Some(n) = self.guests[g].rx_notifications.pop_front() {
                self.schedule(
                    n.at,
                    Event::Notify {
                        guest: g,
                        flow: n.flow,
                        bytes: n.bytes,
                    },
                );
            }
        }
        let log = std::mem::take(&mut self.cores[c].audit_log);
        self.audit_records += log.len() as u64;
        self.audit_violations += log.iter().filter(|r| r.is_violation()).count() as u64;

        if report.is_idle() {
            self.core_state[c] = CoreState::Sleeping {
                since: done,
                idle: report.total(),
            };
            if let Some(t) = self.cores[c]
                .sched
                .earliest_send_time()
                .filter(|&t| t > done)
            {
                self.schedule(t, Event::CoreWake(c));
            }
        } else {
            self.core_state[c] = CoreState::Running { next: done };
            self.schedule(done, Event::CoreStep(c));
        }
    }

    fn finish(mut self) -> Result<RunMetrics, HarnessError> {
        let end = self.end;
        // Idle polling up to the end of the run.
        for c in 0..self.cores.len() {
            if let CoreState::Sleeping { since, idle } = self.core_state[c] {
                if end > since {
                    let skipped = (end - since).div_ceil(idle);
                    self.cores[c].book_idle(skipped, skipped * idle);
                    self.core_state[c] = CoreState::Sleeping {
                        since: since + skipped * idle,
                        idle,
                    };
                }
            }
        }
        for (c, core) in self.cores.iter().enumerate() {
            let clock = match self.core_state[c] {
                CoreState::Running { next } => next,
                CoreState::Sleeping { since, .. } => since,
            };
            if clock != core.stats.cycles_total {
                return Err(HarnessError::Invariant(format!(
                    "core {c} clock {clock} differs from its booked cycles {}",
                    core.stats.cycles_total
                )));
            }
        }

        let sp = &self.slowpath.stats;
        let ledger = Ledger {
            charged: (0..self.guests.len())
                .map(|g| self.budgets.debited(GuestId(g as u32)))
                .sum(),
            unaccounted: self
                .cores
                .iter()
                .map(|c| c.stats.cycles_unaccounted)
                .sum::<Cycles>()
                + sp.cycles_unaccounted,
            consumed: self
                .cores
                .iter()
                .map(|c| c.stats.cycles_total)
                .sum::<Cycles>()
                + sp.cycles_total,
        };
        if !ledger.balanced() {
            return Err(HarnessError::Invariant(format!(
                "cycle ledger does not balance: charged {} + unaccounted {} != consumed {}",
                ledger.charged, ledger.unaccounted, ledger.consumed
            )));
        }
        if !self.cfg.ablate_no_budget && self.audit_violations > 0 {
            return Err(HarnessError::Invariant(format!(
                "{} work items were admitted for guests without budget",
                self.audit_violations
            )));
        }
        for w in &self.workloads {
            let s = &w.stats;
            if s.issued != s.completed + w.in_flight() {
                return Err(HarnessError::Invariant(format!(
                    "guest {} issued {} requests but completed {} with {} in flight",
                    w.guest.0,
                    s.issued,
                    s.completed,
                    w.in_flight()
                )));
            }
        }

        let cfg = &self.cfg;
        let measured = end.saturating_sub(self.warmup);
        let measured_s = measured as f64 / (cfg.cpu_ghz * 1e9);
        let per_second = |count: u64| {
            if measured_s > 0.0 {
                count as f64 / measured_s
            } else {
                0.0
            }
        };
        let to_us = |cycles: Cycles| cfg.cycles_to_us(cycles);

        let guests: Vec<GuestMetrics> = self
            .workloads
            .iter_mut()
            .enumerate()
            .map(|(g, w)| {
                let spec = &cfg.guests[g];
                let in_flight = w.in_flight();
                let duty = w.duty();
                let s = &mut w.stats;
                let issued_while_off = duty.map_or(0, |d| {
                    s.issue_times.iter().filter(|&&t| !d.is_on(t)).count()
                }) as u64;
                GuestMetrics {
                    guest: g as u32,
                    weight: spec.weight,
                    connections: spec.connections,
                    message_size: spec.message_size,
                    response_size: spec.response_size(),
                    throughput_rps: per_second(s.measured),
                    goodput_bytes_per_s: per_second(s.measured_bytes),
                    latency: LatencySummary::from_cycles(std::mem::take(&mut s.latencies), to_us),
                    rx_drops: self.guests[g].stats.rx_drops,
                    slowpath_events: sp.events_per_guest[g],
                    cycles_charged: self.budgets.debited(GuestId(g as u32)),
                    connects: s.connects,
                    refused: s.refused,
                    issued: s.issued,
                    completed: s.completed,
                    in_flight,
                    issued_while_off,
                }
            })
            .collect();

        let cores: Vec<CoreMetrics> = self
            .cores
            .iter()
            .enumerate()
            .map(|(c, core)| CoreMetrics {
                core: c as u32,
                utilization: core.stats.utilization(),
                accounted_fraction: core.stats.accounted_fraction(),
                cycles_total: core.stats.cycles_total,
                idle_cycles: core.stats.idle_cycles,
                rx_packets: core.stats.rx_packets,
                rx_drops: core.stats.rx_drops,
                rx_misses: core.stats.rx_misses,
                nic_drops: self.nic_drops[c],
                nic_max_depth: self.nic_max_depth[c] as u64,
                tx_segments: core.stats.tx_segments,
            })
            .collect();

        let fraction = |accounted: Cycles, total: Cycles| {
            if total == 0 {
                0.0
            } else {
                accounted as f64 / total as f64
            }
        };
        let total: Cycles = self.cores.iter().map(|c| c.stats.cycles_total).sum();
        let accounted: Cycles = self.cores.iter().map(|c| c.stats.cycles_accounted).sum();
        let warm = self.warm.unwrap_or_default();
        let throughput: f64 = guests.iter().map(|g| g.throughput_rps).sum();
        Ok(RunMetrics {
            duration_us: cfg.cycles_to_us(end),
            measured_us: cfg.cycles_to_us(measured),
            throughput_rps: throughput,
            per_core_throughput_rps: throughput / self.cores.len() as f64,
            accounted_fraction: fraction(accounted, total),
            accounted_fraction_measured: fraction(
                accounted - warm.core_accounted,
                total - warm.core_total,
            ),
            ledger,
            ledger_ok: true,
            audit_records: self.audit_records,
            audit_violations: self.audit_violations,
            slowpath_events: sp.events,
            slowpath_events_after_setup: self.setup.map(|(_, events)| sp.events - events),
            setup_complete_us: self.setup.map(|(at, _)| cfg.cycles_to_us(at)),
            allocator_ticks: sp.ticks,
            slowpath_timeouts: sp.timeouts,
            nic_drops: self.nic_drops.iter().sum(),
            link_losses: self.link_losses,
            egress_max_queue_us: cfg.cycles_to_us(self.egress.max_wait),
            ingress_max_queue_us: cfg.cycles_to_us(self.ingress.max_wait),
            remote_timeouts: self.remote.stats.timeouts,
            guests,
            cores,
        })
    }
}
