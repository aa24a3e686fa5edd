//! Connection control, virtualization lookups, timeouts, rate updates and
//! the periodic budget replenishment.
//!
//! The slow-path runs on its own core as an event-driven server. Work
//! arrives in per-VM queues that are served one item at a time in
//! round-robin order, so one VM flooding the slow-path delays the others by
//! at most one item per round.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::accounting::BudgetTable;
use crate::allocator::{Allocator, ReplenishSummary};
use crate::fastpath::rss_core;
use crate::flow::{
    ConsolidatedFlowState, FlowId, FlowTable, DEFAULT_FLOW_BUFFER_BYTES, MAX_RTO_BACKOFF,
};
use crate::packet::{
    assemble_packet, parse_packet, FlowKey, HeaderTemplate, MacAddr, Packet, Segment, TcpFlags,
};
use crate::{CoreId, Cycles, GuestId};

/// UDP destination port of the tunnel.
pub const TUNNEL_UDP_PORT: u16 = 4754;

/// Physical-network identity of this host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalHost {
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
}

/// Where a virtual address lives on the physical network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelInfo {
    pub outer_dst_ip: Ipv4Addr,
    pub outer_dst_mac: MacAddr,
    pub outer_dst_port: u16,
    pub gre_key: u32,
    /// Set when the address belongs to a guest on this host.
    pub local_guest: Option<GuestId>,
}

/// Simulated virtual switch: (tenant, virtual IP) to tunnel endpoint.
///
/// The tenant id doubles as the GRE key of the tenant's virtual network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TunnelRegistry {
    pub local: LocalHost,
    entries: BTreeMap<(u32, Ipv4Addr), TunnelInfo>,
}

impl TunnelRegistry {
    pub fn new(local: LocalHost) -> Self {
        TunnelRegistry {
            local,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, tenant: u32, virtual_ip: Ipv4Addr, info: TunnelInfo) {
        self.entries.insert((tenant, virtual_ip), info);
    }

    /// Registers a guest of this host.
    pub fn register_local(&mut self, tenant: u32, virtual_ip: Ipv4Addr, guest: GuestId) {
        let info = TunnelInfo {
            outer_dst_ip: self.local.ip,
            outer_dst_mac: self.local.mac,
            outer_dst_port: TUNNEL_UDP_PORT,
            gre_key: tenant,
            local_guest: Some(guest),
        };
        self.register(tenant, virtual_ip, info);
    }

    pub fn resolve(&self, tenant: u32, virtual_ip: Ipv4Addr) -> Option<TunnelInfo> {
        self.entries.get(&(tenant, virtual_ip)).copied()
    }

    /// The local guest a packet addressed to `virtual_ip` on tunnel `gre_key` belongs to.
    pub fn classify(&self, gre_key: u32, virtual_ip: Ipv4Addr) -> Option<GuestId> {
        self.resolve(gre_key, virtual_ip)
            .and_then(|i| i.local_guest)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePolicy {
    /// Halve on timeout, recover by a tenth of the configured rate per period.
    #[default]
    Aimd,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowPathConfig {
    pub rto: Cycles,
    pub resolution_latency: Cycles,
    /// Slow-path core time per work item.
    pub item_cycles: Cycles,
    /// Charge slow-path work to the guest it serves.
    pub charge_guests: bool,
    pub rate_policy: RatePolicy,
    /// Configured flow rate, bytes per cycle.
    pub rate: f64,
    pub flow_buffer_bytes: u32,
}

impl Default for SlowPathConfig {
    fn default() -> Self {
        SlowPathConfig {
            rto: 420_000,
            resolution_latency: 2_000,
            item_cycles: 2_000,
            charge_guests: false,
            rate_policy: RatePolicy::Aimd,
            rate: crate::fastpath::DEFAULT_INITIAL_RATE,
            flow_buffer_bytes: DEFAULT_FLOW_BUFFER_BYTES,
        }
    }
}

/// What a guest learns about its connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnEvent {
    Connected { token: u64, flow: FlowId },
    Refused { token: u64 },
    Accepted { flow: FlowId },
    Closed { flow: FlowId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Work {
    Packet(Packet),
    Connect {
        guest: GuestId,
        local_port: u16,
        remote_ip: Ipv4Addr,
        remote_port: u16,
        token: u64,
    },
    Close {
        guest: GuestId,
        flow: FlowId,
    },
    Resolved {
        request: Resolution,
        info: Option<TunnelInfo>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Active {
        guest: GuestId,
        local_port: u16,
        remote_ip: Ipv4Addr,
        remote_port: u16,
        token: u64,
    },
    Passive {
        guest: GuestId,
        key: FlowKey,
        irs: u32,
    },
}

impl Resolution {
    fn guest(&self) -> GuestId {
        match *self {
            Resolution::Active { guest, .. } | Resolution::Passive { guest, .. } => guest,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Handshake {
    guest: GuestId,
    template: HeaderTemplate,
    iss: u32,
    irs: u32,
    token: Option<u64>,
    sent_at: Cycles,
}

#[derive(Clone, Copy, Debug)]
struct Closing {
    flow: FlowId,
    guest: GuestId,
    fin_seq: u32,
    sent_at: Cycles,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlowPathStats {
    /// Work items served and timeouts handled; ticks are not events.
    pub events: u64,
    pub events_per_guest: Vec<u64>,
    pub unclassified: u64,
    pub timeouts: u64,
    pub resolutions: u64,
    pub resets_sent: u64,
    pub ticks: u64,
    pub cycles_total: Cycles,
    pub cycles_charged: Cycles,
    pub cycles_unaccounted: Cycles,
}

/// Everything the slow-path emits, stamped with the cycle it was produced.
#[derive(Clone, Debug, Default)]
pub struct SlowPathOutput {
    pub wire: Vec<(Cycles, Packet)>,
    /// Flows each core should put back on its TX queue.
    pub kicks: Vec<(CoreId, FlowId)>,
    pub conn_events: Vec<(Cycles, GuestId, ConnEvent)>,
}

pub struct SlowPathEnv<'a> {
    pub flows: &'a mut FlowTable,
    pub budgets: &'a mut BudgetTable,
    pub out: &'a mut SlowPathOutput,
}

#[derive(Clone, Copy, Debug)]
struct GuestAddr {
    tunnel_id: u32,
    virtual_ip: Ipv4Addr,
}

pub struct SlowPath {
    pub config: SlowPathConfig,
    pub registry: TunnelRegistry,
    pub allocator: Allocator,
    num_cores: usize,
    guests: Vec<GuestAddr>,
    /// One queue per guest, then the queue for unclassified packets.
    queues: Vec<VecDeque<Work>>,
    cursor: usize,
    busy_until: Cycles,
    listeners: BTreeSet<(GuestId, u16)>,
    handshakes: BTreeMap<FlowKey, Handshake>,
    resolving: BTreeSet<FlowKey>,
    closing: BTreeMap<FlowKey, Closing>,
    /// Keys closed by the remote whose final ACK is still expected.
    lingering: BTreeSet<FlowKey>,
    deferred_closes: Vec<(GuestId, FlowId)>,
    timers: BinaryHeap<Reverse<(Cycles, u64)>>,
    pending_resolutions: BTreeMap<u64, Resolution>,
    next_timer: u64,
    next_iss: u32,
    pub stats: SlowPathStats,
}

impl SlowPath {
    /// `guests` lists each guest's tunnel id and virtual IP, indexed by guest id.
    pub fn new(
        config: SlowPathConfig,
        registry: TunnelRegistry,
        allocator: Allocator,
        num_cores: usize,
        guests: &[(u32, Ipv4Addr)],
    ) -> Self {
        let n = guests.len();
        SlowPath {
            config,
            registry,
            allocator,
            num_cores,
            guests: guests
                .iter()
                .map(|&(tunnel_id, virtual_ip)| GuestAddr {
                    tunnel_id,
                    virtual_ip,
                })
                .collect(),
            queues: vec![VecDeque::new(); n + 1],
            cursor: 0,
            busy_until: 0,
            listeners: BTreeSet::new(),
            handshakes: BTreeMap::new(),
            resolving: BTreeSet::new(),
            closing: BTreeMap::new(),
            lingering: BTreeSet::new(),
            deferred_closes: Vec::new(),
            timers: BinaryHeap::new(),
            pending_resolutions: BTreeMap::new(),
            next_timer: 0,
            next_iss: 0x1000_0000,
            stats: SlowPathStats {
                events_per_guest: vec![0; n],
                ..Default::default()
            },
        }
    }

    pub fn listen(&mut self, guest: GuestId, port: u16) {
        self.listeners.insert((guest, port));
    }

    pub fn queue_len(&self, guest: GuestId) -> usize {
        self.queues[guest.index()].len()
    }

    pub fn backlog(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn busy_until(&self) -> Cycles {
        self.busy_until
    }

    pub fn handshakes_in_progress(&self) -> usize {
        self.handshakes.len() + self.resolving.len() + self.pending_resolutions.len()
    }

    /// When the next work item can start, if any is queued.
    pub fn next_step_time(&self, now: Cycles) -> Option<Cycles> {
        (self.backlog() > 0).then(|| self.busy_until.max(now))
    }

    /// When the earliest outstanding resolution completes.
    pub fn next_resolution_time(&self) -> Option<Cycles> {
        self.timers.peek().map(|Reverse((t, _))| *t)
    }

    fn unclassified_queue(&self) -> usize {
        self.guests.len()
    }

    /// Queues a packet punted by the fast-path, classified by its destination.
    pub fn enqueue_packet(&mut self, packet: Packet) {
        let queue = parse_packet(&packet)
            .ok()
            .and_then(|seg| {
                self.registry
                    .classify(seg.key.tunnel_id, seg.key.guest_local_ip)
            })
            .filter(|g| g.index() < self.guests.len())
            .map_or(self.unclassified_queue(), GuestId::index);
        self.queues[queue].push_back(Work::Packet(packet));
    }

    /// Queues a guest's connect or close request.
    pub fn enqueue_request(&mut self, work: Work) {
        let guest = match work {
            Work::Connect { guest, .. } | Work::Close { guest, .. } => guest,
            Work::Resolved { request, .. } => request.guest(),
            Work::Packet(packet) => return self.enqueue_packet(packet),
        };
        self.queues[guest.index()].push_back(work);
    }

    /// Starts an asynchronous virtualization lookup.
    pub fn resolve_virtualization(&mut self, now: Cycles, request: Resolution) -> Cycles {
        let due = now + self.config.resolution_latency;
        let id = self.next_timer;
        self.next_timer += 1;
        self.timers.push(Reverse((due, id)));
        self.pending_resolutions.insert(id, request);
        self.stats.resolutions += 1;
        due
    }

    /// Hands every resolution due by `now` back to its VM's queue.
    pub fn complete_resolutions(&mut self, now: Cycles) -> usize {
        let mut done = 0;
        while let Some(&Reverse((due, id))) = self.timers.peek() {
            if due > now {
                break;
            }
            self.timers.pop();
            let request = self
                .pending_resolutions
                .remove(&id)
                .expect("timer without resolution");
            let info = match request {
                Resolution::Active {
                    guest, remote_ip, ..
                } => self
                    .registry
                    .resolve(self.guests[guest.index()].tunnel_id, remote_ip),
                Resolution::Passive { key, .. } => {
                    self.registry.resolve(key.tunnel_id, key.remote_ip)
                }
            };
            self.enqueue_request(Work::Resolved { request, info });
            done += 1;
        }
        done
    }

    fn iss(&mut self) -> u32 {
        let iss = self.next_iss;
        self.next_iss = self.next_iss.wrapping_add(0x9e37_79b9);
        iss
    }

    fn count_event(&mut self, guest: Option<GuestId>) {
        self.stats.events += 1;
        match guest {
            Some(g) => self.stats.events_per_guest[g.index()] += 1,
            None => self.stats.unclassified += 1,
        }
    }

    /// Serves the next queued item in round-robin order, starting at `now`.
    /// Returns when the slow-path core is free again.
    pub fn step(&mut self, now: Cycles, env: &mut SlowPathEnv<'_>) -> Option<Cycles> {
        let n = self.queues.len();
        let queue = (0..n)
            .map(|i| (self.cursor + i) % n)
            .find(|&q| !self.queues[q].is_empty())?;
        self.cursor = (queue + 1) % n;
        let work = self.queues[queue].pop_front().expect("nonempty queue");
        let start = now.max(self.busy_until);
        let done = start + self.config.item_cycles;
        self.busy_until = done;

        let guest = (queue < self.guests.len()).then_some(GuestId(queue as u32));
        self.count_event(guest);
        let charge_core = self.handle(done, guest, work, env);
        self.stats.cycles_total += self.config.item_cycles;
        match (self.config.charge_guests, guest, charge_core) {
            (true, Some(g), Some(core)) => {
                env.budgets.charge(core, g, self.config.item_cycles);
                self.stats.cycles_charged += self.config.item_cycles;
            }
            _ => self.stats.cycles_unaccounted += self.config.item_cycles,
        }
        Some(done)
    }

    /// Handles one item; returns the fast-path core the work relates to.
    fn handle(
        &mut self,
        at: Cycles,
        guest: Option<GuestId>,
        work: Work,
        env: &mut SlowPathEnv<'_>,
    ) -> Option<CoreId> {
        match work {
            Work::Connect {
                guest,
                local_port,
                remote_ip,
                remote_port,
                token,
            } => {
                self.resolve_virtualization(
                    at,
                    Resolution::Active {
                        guest,
                        local_port,
                        remote_ip,
                        remote_port,
                        token,
                    },
                );
                None
            }
            Work::Resolved { request, info } => self.finish_resolution(at, request, info, env),
            Work::Close { guest, flow } => self.start_close(at, guest, flow, env),
            Work::Packet(packet) => match (guest, parse_packet(&packet)) {
                (Some(g), Ok(seg)) => self.handle_control(at, g, &packet, seg, env),
                _ => None,
            },
        }
    }

    fn template_for(
        &self,
        guest: GuestId,
        local_port: u16,
        info: &TunnelInfo,
        remote: (Ipv4Addr, u16),
    ) -> HeaderTemplate {
        let addr = self.guests[guest.index()];
        HeaderTemplate {
            outer_src_mac: self.registry.local.mac,
            outer_dst_mac: info.outer_dst_mac,
            outer_src_ip: self.registry.local.ip,
            outer_dst_ip: info.outer_dst_ip,
            outer_src_port: 0xc000 | (local_port & 0x3fff),
            outer_dst_port: info.outer_dst_port,
            gre_key: info.gre_key,
            inner_src_ip: addr.virtual_ip,
            inner_dst_ip: remote.0,
            inner_src_port: local_port,
            inner_dst_port: remote.1,
        }
    }

    fn finish_resolution(
        &mut self,
        at: Cycles,
        request: Resolution,
        info: Option<TunnelInfo>,
        env: &mut SlowPathEnv<'_>,
    ) -> Option<CoreId> {
        match request {
            Resolution::Active {
                guest,
                local_port,
                remote_ip,
                remote_port,
                token,
            } => {
                let Some(info) = info else {
                    env.out
                        .conn_events
                        .push((at, guest, ConnEvent::Refused { token }));
                    return None;
                };
                let template =
                    self.template_for(guest, local_port, &info, (remote_ip, remote_port));
                let key = template.sender_key();
                if env.flows.lookup(&key).is_some() || self.handshakes.contains_key(&key) {
                    env.out
                        .conn_events
                        .push((at, guest, ConnEvent::Refused { token }));
                    return None;
                }
                let iss = self.iss();
                self.handshakes.insert(
                    key,
                    Handshake {
                        guest,
                        template,
                        iss,
                        irs: 0,
                        token: Some(token),
                        sent_at: at,
                    },
                );
                env.out
                    .wire
                    .push((at, assemble_packet(&template, iss, 0, TcpFlags::SYN, 0)));
                Some(rss_core(&key, self.num_cores))
            }
            Resolution::Passive { guest, key, irs } => {
                self.resolving.remove(&key);
                let Some(info) = info else {
                    self.send_reset_for(at, key, irs, env);
                    return None;
                };
                let template = self.template_for(
                    guest,
                    key.guest_local_port,
                    &info,
                    (key.remote_ip, key.remote_port),
                );
                let iss = self.iss();
                self.handshakes.insert(
                    key,
                    Handshake {
                        guest,
                        template,
                        iss,
                        irs,
                        token: None,
                        sent_at: at,
                    },
                );
                env.out.wire.push((
                    at,
                    assemble_packet(
                        &template,
                        iss,
                        irs.wrapping_add(1),
                        TcpFlags::SYN | TcpFlags::ACK,
                        0,
                    ),
                ));
                Some(rss_core(&key, self.num_cores))
            }
        }
    }

    fn send_reset_for(&mut self, at: Cycles, key: FlowKey, irs: u32, env: &mut SlowPathEnv<'_>) {
        let template = HeaderTemplate {
            outer_src_mac: self.registry.local.mac,
            outer_dst_mac: MacAddr::default(),
            outer_src_ip: self.registry.local.ip,
            outer_dst_ip: Ipv4Addr::UNSPECIFIED,
            outer_src_port: 0,
            outer_dst_port: TUNNEL_UDP_PORT,
            gre_key: key.tunnel_id,
            inner_src_ip: key.guest_local_ip,
            inner_dst_ip: key.remote_ip,
            inner_src_port: key.guest_local_port,
            inner_dst_port: key.remote_port,
        };
        self.reset(at, &template, irs, env);
    }

    fn reset(
        &mut self,
        at: Cycles,
        template: &HeaderTemplate,
        irs: u32,
        env: &mut SlowPathEnv<'_>,
    ) {
        env.out.wire.push((
            at,
            assemble_packet(
                template,
                0,
                irs.wrapping_add(1),
                TcpFlags::RST | TcpFlags::ACK,
                0,
            ),
        ));
        self.stats.resets_sent += 1;
    }

    fn install(
        &mut self,
        key: FlowKey,
        hs: Handshake,
        env: &mut SlowPathEnv<'_>,
    ) -> Option<FlowId> {
        let core = rss_core(&key, self.num_cores);
        let state = ConsolidatedFlowState::new(
            key,
            hs.guest,
            core,
            hs.template,
            hs.iss.wrapping_add(1),
            hs.irs.wrapping_add(1),
            self.config.flow_buffer_bytes,
            self.config.rate,
        );
        env.flows.install(state).ok()
    }

    fn handle_control(
        &mut self,
        at: Cycles,
        guest: GuestId,
        packet: &Packet,
        seg: Segment,
        env: &mut SlowPathEnv<'_>,
    ) -> Option<CoreId> {
        let key = seg.key;
        let core = Some(rss_core(&key, self.num_cores));
        let flags = seg.flags;
        let reply = packet.header.reversed();

        if flags.contains(TcpFlags::RST) {
            self.handshakes.remove(&key);
            if let Some(c) = self.closing.remove(&key) {
                self.remove_flow(at, c.guest, key, env);
            } else if let Some(id) = env.flows.lookup(&key) {
                self.remove_flow(at, env.flows.get(id).expect("flow").guest, key, env);
            }
            return core;
        }

        if flags.contains(TcpFlags::SYN) && flags.contains(TcpFlags::ACK) {
            // Active open, second step.
            if let Some(hs) = self
                .handshakes
                .get(&key)
                .copied()
                .filter(|h| h.token.is_some())
            {
                if seg.ack == hs.iss.wrapping_add(1) {
                    self.handshakes.remove(&key);
                    let hs = Handshake { irs: seg.seq, ..hs };
                    if let Some(flow) = self.install(key, hs, env) {
                        let ack = assemble_packet(
                            &hs.template,
                            seg.ack,
                            seg.seq.wrapping_add(1),
                            TcpFlags::ACK,
                            0,
                        );
                        env.out.wire.push((at, ack));
                        let token = hs.token.expect("active handshake");
                        env.out.conn_events.push((
                            at,
                            hs.guest,
                            ConnEvent::Connected { token, flow },
                        ));
                    }
                }
            } else if env.flows.lookup(&key).is_some() {
                // Our ACK was lost; the peer retransmitted its SYN-ACK.
                let ack =
                    assemble_packet(&reply, seg.ack, seg.seq.wrapping_add(1), TcpFlags::ACK, 0);
                env.out.wire.push((at, ack));
            }
            return core;
        }

        if flags.contains(TcpFlags::SYN) {
            // Passive open.
            if let Some(hs) = self.handshakes.get(&key) {
                let synack = assemble_packet(
                    &hs.template,
                    hs.iss,
                    hs.irs.wrapping_add(1),
                    TcpFlags::SYN | TcpFlags::ACK,
                    0,
                );
                env.out.wire.push((at, synack));
            } else if env.flows.lookup(&key).is_some() || self.resolving.contains(&key) {
                // Retransmission of a SYN already being handled.
            } else if self.listeners.contains(&(guest, key.guest_local_port)) {
                self.resolving.insert(key);
                self.resolve_virtualization(
                    at,
                    Resolution::Passive {
                        guest,
                        key,
                        irs: seg.seq,
                    },
                );
            } else {
                self.reset(at, &reply, seg.seq, env);
            }
            return core;
        }

        if flags.contains(TcpFlags::FIN) {
            if let Some(c) = self.closing.get(&key).copied() {
                // The peer answers our FIN.
                if seg.ack == c.fin_seq.wrapping_add(1) {
                    self.closing.remove(&key);
                    let ack =
                        assemble_packet(&reply, seg.ack, seg.seq.wrapping_add(1), TcpFlags::ACK, 0);
                    env.out.wire.push((at, ack));
                    self.remove_flow(at, c.guest, key, env);
                }
            } else if let Some(id) = env.flows.lookup(&key) {
                // The peer closes first: answer FIN with FIN and drop our state.
                let flow = env.flows.get(id).expect("flow");
                let finack = assemble_packet(
                    &flow.template,
                    flow.tx_next_seq,
                    seg.seq.wrapping_add(seg.payload_len).wrapping_add(1),
                    TcpFlags::FIN | TcpFlags::ACK,
                    0,
                );
                env.out.wire.push((at, finack));
                let owner = flow.guest;
                self.lingering.insert(key);
                self.remove_flow(at, owner, key, env);
            } else {
                // Retransmitted FIN after teardown.
                let ack =
                    assemble_packet(&reply, seg.ack, seg.seq.wrapping_add(1), TcpFlags::ACK, 0);
                env.out.wire.push((at, ack));
            }
            return core;
        }

        // Plain segment with no flow state: the last step of a handshake or teardown.
        if let Some(hs) = self
            .handshakes
            .get(&key)
            .copied()
            .filter(|h| h.token.is_none())
        {
            if flags.contains(TcpFlags::ACK) && seg.ack == hs.iss.wrapping_add(1) {
                self.handshakes.remove(&key);
                if let Some(flow) = self.install(key, hs, env) {
                    env.out
                        .conn_events
                        .push((at, hs.guest, ConnEvent::Accepted { flow }));
                }
            }
        } else {
            self.lingering.remove(&key);
        }
        core
    }

    fn remove_flow(&mut self, at: Cycles, guest: GuestId, key: FlowKey, env: &mut SlowPathEnv<'_>) {
        if let Some(id) = env.flows.lookup(&key) {
            env.flows.remove(&key).expect("looked-up flow");
            env.out
                .conn_events
                .push((at, guest, ConnEvent::Closed { flow: id }));
        }
    }

    fn start_close(
        &mut self,
        at: Cycles,
        guest: GuestId,
        id: FlowId,
        env: &mut SlowPathEnv<'_>,
    ) -> Option<CoreId> {
        let flow = env.flows.get_mut(id).filter(|f| f.guest == guest)?;
        flow.closing = true;
        let core = flow.core;
        if flow.pending_tx_bytes > 0 || flow.unacked_bytes() > 0 {
            self.deferred_closes.push((guest, id));
            return Some(core);
        }
        let fin_seq = flow.tx_next_seq;
        let fin = assemble_packet(
            &flow.template,
            fin_seq,
            flow.rx_next_expected,
            TcpFlags::FIN | TcpFlags::ACK,
            0,
        );
        let key = flow.key;
        env.out.wire.push((at, fin));
        self.closing.insert(
            key,
            Closing {
                flow: id,
                guest,
                fin_seq,
                sent_at: at,
            },
        );
        Some(core)
    }

    /// Guests in round-robin order starting at the queue cursor.
    fn guest_order(&self) -> Vec<GuestId> {
        let n = self.guests.len();
        (0..n)
            .map(|i| GuestId(((self.cursor + i) % n.max(1)) as u32))
            .collect()
    }

    /// Go-back-N for every flow whose oldest unacked byte is older than the
    /// timeout, plus retransmission of unanswered SYNs and FINs.
    pub fn handle_timeouts(&mut self, now: Cycles, env: &mut SlowPathEnv<'_>) -> usize {
        let rto = self.config.rto;
        let mut fired = 0;
        for guest in self.guest_order() {
            let ids: Vec<FlowId> = env.flows.guest_flows(guest).collect();
            for id in ids {
                let flow = env.flows.get_mut(id).expect("indexed flow");
                let Some(since) = flow.unacked_since else {
                    continue;
                };
                if now.saturating_sub(since) < flow.current_rto(rto) {
                    continue;
                }
                flow.rewind_to_acked();
                flow.rto_backoff = (flow.rto_backoff + 1).min(MAX_RTO_BACKOFF);
                if self.config.rate_policy == RatePolicy::Aimd {
                    flow.rate /= 2.0;
                }
                env.out.kicks.push((flow.core, id));
                self.stats.timeouts += 1;
                self.count_event(Some(guest));
                fired += 1;
            }
        }
        for hs in self.handshakes.values_mut() {
            if now.saturating_sub(hs.sent_at) >= rto {
                hs.sent_at = now;
                let packet = match hs.token {
                    Some(_) => assemble_packet(&hs.template, hs.iss, 0, TcpFlags::SYN, 0),
                    None => assemble_packet(
                        &hs.template,
                        hs.iss,
                        hs.irs.wrapping_add(1),
                        TcpFlags::SYN | TcpFlags::ACK,
                        0,
                    ),
                };
                env.out.wire.push((now, packet));
                self.stats.timeouts += 1;
                self.stats.events += 1;
                self.stats.events_per_guest[hs.guest.index()] += 1;
                fired += 1;
            }
        }
        for c in self.closing.values_mut() {
            if now.saturating_sub(c.sent_at) >= rto {
                if let Some(flow) = env.flows.get(c.flow) {
                    c.sent_at = now;
                    let fin = assemble_packet(
                        &flow.template,
                        c.fin_seq,
                        flow.rx_next_expected,
                        TcpFlags::FIN | TcpFlags::ACK,
                        0,
                    );
                    env.out.wire.push((now, fin));
                    self.stats.timeouts += 1;
                    self.stats.events += 1;
                    self.stats.events_per_guest[c.guest.index()] += 1;
                    fired += 1;
                }
            }
        }
        fired
    }

    /// Applies the rate policy to every flow. Only `flow.rate` is written.
    pub fn update_flow_rates(&mut self, env: &mut SlowPathEnv<'_>) {
        let configured = self.config.rate;
        for guest in self.guest_order() {
            let ids: Vec<FlowId> = env.flows.guest_flows(guest).collect();
            for id in ids {
                let flow = env.flows.get_mut(id).expect("indexed flow");
                flow.rate = match self.config.rate_policy {
                    RatePolicy::Constant => configured,
                    RatePolicy::Aimd => (flow.rate + configured / 10.0).min(configured),
                };
            }
        }
    }

    /// The periodic slow-path duties: replenish budgets, then timeouts, then
    /// rate updates, then closes that were waiting for data to drain.
    pub fn tick(&mut self, now: Cycles, env: &mut SlowPathEnv<'_>) -> ReplenishSummary {
        self.stats.ticks += 1;
        let summary = self.allocator.replenish_all(now, env.budgets);
        self.handle_timeouts(now, env);
        self.update_flow_rates(env);
        for (guest, flow) in std::mem::take(&mut self.deferred_closes) {
            self.enqueue_request(Work::Close { guest, flow });
        }
        summary
    }
}
