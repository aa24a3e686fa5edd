//! A connection opened through the slow-path and then used on the fast-path
//! only, against a hand-scripted remote endpoint.

use std::net::Ipv4Addr;

use rand::rngs::mock::StepRng;
use sharedstack::allocator::AllocatorConfig;
use sharedstack::fastpath::{FastPathEnv, FastPathOutput};
use sharedstack::guest::TxRequest;
use sharedstack::packet::{assemble_packet, parse_packet, MacAddr, Packet};
use sharedstack::slowpath::{ConnEvent, LocalHost, SlowPathEnv, SlowPathOutput, TunnelInfo, Work};
use sharedstack::{
    Allocator, BudgetTable, Cap, CoreId, Cycles, FastPathConfig, FastPathCore, FlowId, FlowTable,
    GuestContext, GuestId, SlowPath, SlowPathConfig, TcpFlags, TunnelRegistry,
};

const GUEST_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const SERVER_IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

struct World {
    flows: FlowTable,
    budgets: BudgetTable,
    guests: Vec<GuestContext>,
    core: FastPathCore,
    sp: SlowPath,
    fp_out: FastPathOutput,
    sp_out: SlowPathOutput,
    rng: StepRng,
    now: Cycles,
}

impl World {
    fn new() -> Self {
        let host = LocalHost {
            ip: Ipv4Addr::new(192, 168, 0, 1),
            mac: MacAddr([2, 0, 0, 0, 0, 1]),
        };
        let mut registry = TunnelRegistry::new(host);
        registry.register_local(3, GUEST_IP, GuestId(0));
        registry.register(
            3,
            SERVER_IP,
            TunnelInfo {
                outer_dst_ip: Ipv4Addr::new(192, 168, 0, 2),
                outer_dst_mac: MacAddr([2, 0, 0, 0, 0, 2]),
                outer_dst_port: 4754,
                gre_key: 3,
                local_guest: None,
            },
        );
        let alloc = AllocatorConfig::with_weights(vec![1.0]);
        World {
            flows: FlowTable::new(),
            budgets: BudgetTable::new(1, 1, Cap::UNBOUNDED, 1 << 40),
            guests: vec![GuestContext::new(GuestId(0), 1.0, 3, GUEST_IP, 1, 1)],
            core: FastPathCore::new(CoreId(0), 1, FastPathConfig::default()),
            sp: SlowPath::new(
                SlowPathConfig::default(),
                registry,
                Allocator::new(alloc, 0),
                1,
                &[(3, GUEST_IP)],
            ),
            fp_out: FastPathOutput::default(),
            sp_out: SlowPathOutput::default(),
            rng: StepRng::new(0, 1),
            now: 0,
        }
    }

    /// One fast-path iteration, with misses handed to the slow-path.
    fn iterate(&mut self) -> Vec<Packet> {
        let mut env = FastPathEnv {
            flows: &mut self.flows,
            budgets: &mut self.budgets,
            guests: &mut self.guests,
            cost: &Default::default(),
            rng: &mut self.rng,
            out: &mut self.fp_out,
        };
        self.now += self.core.run_iteration(self.now, &mut env).total();
        for (_, p) in self.fp_out.to_slowpath.drain(..) {
            self.sp.enqueue_packet(p);
        }
        self.fp_out.wire.drain(..).map(|(_, p)| p).collect()
    }

    fn settle_slowpath(&mut self) -> Vec<Packet> {
        loop {
            self.sp.complete_resolutions(self.now);
            if let Some(t) = self.sp.next_step_time(self.now) {
                let mut env = SlowPathEnv {
                    flows: &mut self.flows,
                    budgets: &mut self.budgets,
                    out: &mut self.sp_out,
                };
                self.now = self.sp.step(t, &mut env).unwrap();
            } else if let Some(t) = self.sp.next_resolution_time() {
                self.now = self.now.max(t);
            } else {
                break;
            }
        }
        self.sp_out.wire.drain(..).map(|(_, p)| p).collect()
    }

    fn connect(&mut self) -> FlowId {
        self.sp.enqueue_request(Work::Connect {
            guest: GuestId(0),
            local_port: 40_000,
            remote_ip: SERVER_IP,
            remote_port: 7,
            token: 1,
        });
        let syn = self.settle_slowpath().pop().expect("SYN");
        assert_eq!(syn.flags, TcpFlags::SYN);
        self.core.nic_rx.push_back(assemble_packet(
            &syn.header.reversed(),
            5_000,
            syn.seq.wrapping_add(1),
            TcpFlags::SYN | TcpFlags::ACK,
            0,
        ));
        assert!(self.iterate().is_empty());
        let ack = self.settle_slowpath().pop().expect("handshake ACK");
        assert_eq!(ack.flags, TcpFlags::ACK);
        match self.sp_out.conn_events.pop().expect("connected").2 {
            ConnEvent::Connected { token: 1, flow } => flow,
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn data_after_handshake_never_touches_the_slowpath() {
    let mut w = World::new();
    let flow = w.connect();
    assert_eq!(w.flows.len(), 1);
    let events_after_setup = w.sp.stats.events;

    let request = 3_000;
    let response = 1_000u32;
    w.guests[0].post(
        CoreId(0),
        0,
        TxRequest {
            flow,
            bytes: request,
        },
    );
    let mut server_next = 5_001u32;
    let mut received = 0u32;
    let mut delivered = 0u32;
    for _ in 0..200 {
        for p in w.iterate() {
            let seg = parse_packet(&p).unwrap();
            if seg.payload_len == 0 {
                continue;
            }
            received += seg.payload_len;
            let reply = p.header.reversed();
            let ack_no = seg.seq.wrapping_add(seg.payload_len);
            let answer = if received == request {
                let data = assemble_packet(
                    &reply,
                    server_next,
                    ack_no,
                    TcpFlags::ACK | TcpFlags::PSH,
                    response,
                );
                server_next = server_next.wrapping_add(response);
                data
            } else {
                assemble_packet(&reply, server_next, ack_no, TcpFlags::ACK, 0)
            };
            w.core.nic_rx.push_back(answer);
        }
        while let Some(n) = w.guests[0].rx_notifications.pop_front() {
            delivered += n.bytes;
        }
        if delivered == response && w.flows.get(flow).unwrap().unacked_bytes() == 0 {
            break;
        }
    }
    assert_eq!(received, request);
    assert_eq!(delivered, response);
    assert_eq!(w.sp.backlog(), 0);
    assert_eq!(w.sp.stats.events, events_after_setup);
    assert_eq!(w.core.stats.rx_misses, 1, "only the SYN-ACK missed");
    assert!(w.flows.get(flow).unwrap().is_consistent());
}

#[test]
fn retransmitted_syn_ack_is_reacknowledged_without_new_state() {
    let mut w = World::new();
    let flow = w.connect();
    let f = w.flows.get(flow).unwrap().clone();
    w.core.nic_rx.push_back(assemble_packet(
        &f.template.reversed(),
        5_000,
        f.tx_next_seq,
        TcpFlags::SYN | TcpFlags::ACK,
        0,
    ));
    w.iterate();
    let replies = w.settle_slowpath();
    assert_eq!(replies.len(), 1);
    assert_eq!(replies[0].flags, TcpFlags::ACK);
    assert_eq!(w.flows.len(), 1);
}
