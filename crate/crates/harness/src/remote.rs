//! The far end of every guest connection: an echo-style RPC server that
//! spends no CPU time of its own.
//!
//! Each connection answers a request of `request_size` bytes with a response
//! of `response_size` bytes. Responses are sent in MSS segments under a
//! Reno-style congestion window (ten-segment initial window, slow start,
//! additive increase, one segment after a timeout) capped by the receive
//! window, and recovered go-back-N after a timeout. A FIN is answered at
//! once and the connection forgotten.

use std::collections::BTreeMap;

use sharedstack::flow::MAX_RTO_BACKOFF;
use sharedstack::packet::{assemble_packet, parse_packet, seq_le, seq_lt};
use sharedstack::{Cycles, FlowKey, HeaderTemplate, Packet, TcpFlags};

/// Request and response sizes for one tenant's traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageSizes {
    pub request: u32,
    pub response: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemoteConfig {
    pub mss: u32,
    /// Receive window of the guest side: most bytes in flight.
    pub window: u32,
    pub rto: Cycles,
}

#[derive(Clone, Debug)]
struct Conn {
    /// Template for packets from the server to the guest.
    reply: HeaderTemplate,
    sizes: MessageSizes,
    iss: u32,
    established: bool,
    rcv_next: u32,
    snd_una: u32,
    snd_nxt: u32,
    /// Sequence number one past the last response byte produced.
    snd_end: u32,
    request_bytes: u64,
    rto_deadline: Option<Cycles>,
    cwnd: u32,
    ssthresh: u32,
    /// Timeouts since the last new ACK; each doubles the RTO.
    backoff: u32,
}

impl Conn {
    fn in_flight(&self) -> u32 {
        self.snd_nxt.wrapping_sub(self.snd_una)
    }

    fn unsent(&self) -> u32 {
        self.snd_end.wrapping_sub(self.snd_nxt)
    }

    fn grow(&mut self, acked: u32, mss: u32) {
        let inc = if self.cwnd < self.ssthresh {
            acked
        } else {
            (u64::from(mss) * u64::from(acked) / u64::from(self.cwnd)).max(1) as u32
        };
        self.cwnd = self.cwnd.saturating_add(inc);
    }
}

const INITIAL_WINDOW_SEGMENTS: u32 = 10;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RemoteStats {
    pub packets_in: u64,
    pub packets_out: u64,
    pub requests: u64,
    pub timeouts: u64,
    pub stray: u64,
}

/// What the remote wants done after handling an input.
#[derive(Debug, Default)]
pub struct RemoteOutput {
    pub packets: Vec<Packet>,
    /// A retransmission timer to arm: (deadline, connection).
    pub timer: Option<(Cycles, FlowKey)>,
}

#[derive(Debug)]
pub struct RemoteHost {
    config: RemoteConfig,
    sizes: BTreeMap<u32, MessageSizes>,
    conns: BTreeMap<FlowKey, Conn>,
    next_iss: u32,
    pub stats: RemoteStats,
}

impl RemoteHost {
    /// `sizes` maps a tunnel id to the message sizes of its tenant.
    pub fn new(config: RemoteConfig, sizes: BTreeMap<u32, MessageSizes>) -> Self {
        RemoteHost {
            config,
            sizes,
            conns: BTreeMap::new(),
            next_iss: 0x2000_0000,
            stats: RemoteStats::default(),
        }
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    pub fn receive(&mut self, now: Cycles, packet: &Packet) -> RemoteOutput {
        let mut out = RemoteOutput::default();
        self.stats.packets_in += 1;
        let Ok(seg) = parse_packet(packet) else {
            self.stats.stray += 1;
            return out;
        };
        let key = seg.key;
        let flags = seg.flags;

        if flags.contains(TcpFlags::RST) {
            self.conns.remove(&key);
            return out;
        }
        if flags.contains(TcpFlags::SYN) {
            if !flags.contains(TcpFlags::ACK) {
                self.syn(key, packet, seg.seq, &mut out);
            }
            return self.finish(out);
        }
        if flags.contains(TcpFlags::FIN) {
            if self.conns.remove(&key).is_some() {
                out.packets.push(assemble_packet(
                    &packet.header.reversed(),
                    seg.ack,
                    seg.seq.wrapping_add(seg.payload_len).wrapping_add(1),
                    TcpFlags::FIN | TcpFlags::ACK,
                    0,
                ));
            }
            return self.finish(out);
        }

        let rto = self.config.rto;
        let Some(conn) = self.conns.get_mut(&key) else {
            // Final ACK of a teardown, or traffic for a forgotten connection.
            self.stats.stray += 1;
            return out;
        };
        if flags.contains(TcpFlags::ACK) {
            let ack = seg.ack;
            if !conn.established && ack == conn.iss.wrapping_add(1) {
                conn.established = true;
            }
            // After a rewind the peer may acknowledge past snd_nxt.
            if seq_lt(conn.snd_una, ack) && seq_le(ack, conn.snd_end) {
                let acked = ack.wrapping_sub(conn.snd_una);
                conn.grow(acked, self.config.mss);
                conn.backoff = 0;
                conn.snd_una = ack;
                if seq_lt(conn.snd_nxt, ack) {
                    conn.snd_nxt = ack;
                }
                conn.rto_deadline = (conn.in_flight() > 0).then_some(now + rto);
            }
        }
        let mut must_ack = false;
        if seg.payload_len > 0 {
            must_ack = true;
            if seg.seq == conn.rcv_next {
                conn.rcv_next = conn.rcv_next.wrapping_add(seg.payload_len);
                conn.request_bytes += u64::from(seg.payload_len);
                let request = u64::from(conn.sizes.request);
                while conn.request_bytes >= request {
                    conn.request_bytes -= request;
                    conn.snd_end = conn.snd_end.wrapping_add(conn.sizes.response);
                    self.stats.requests += 1;
                }
            }
        }
        let sent = Self::pump(conn, self.config, &mut out);
        if sent == 0 && must_ack {
            out.packets.push(assemble_packet(
                &conn.reply,
                conn.snd_nxt,
                conn.rcv_next,
                TcpFlags::ACK,
                0,
            ));
        }
        if sent > 0 && conn.rto_deadline.is_none() {
            conn.rto_deadline = Some(now + rto);
        }
        if let Some(deadline) = conn.rto_deadline {
            out.timer = Some((deadline, key));
        }
        self.finish(out)
    }

    fn syn(&mut self, key: FlowKey, packet: &Packet, seq: u32, out: &mut RemoteOutput) {
        let sizes = self
            .sizes
            .get(&key.tunnel_id)
            .copied()
            .unwrap_or(MessageSizes {
                request: 1,
                response: 1,
            });
        let conn = match self.conns.get(&key) {
            Some(c) if c.established => return,
            Some(c) => c,
            None => {
                let iss = self.next_iss;
                self.next_iss = self.next_iss.wrapping_add(0x0101_0101);
                let conn = Conn {
                    reply: packet.header.reversed(),
                    sizes,
                    iss,
                    established: false,
                    rcv_next: seq.wrapping_add(1),
                    snd_una: iss.wrapping_add(1),
                    snd_nxt: iss.wrapping_add(1),
                    snd_end: iss.wrapping_add(1),
                    request_bytes: 0,
                    rto_deadline: None,
                    cwnd: INITIAL_WINDOW_SEGMENTS * self.config.mss,
                    ssthresh: self.config.window,
                    backoff: 0,
                };
                self.conns.entry(key).or_insert(conn)
            }
        };
        out.packets.push(assemble_packet(
            &conn.reply,
            conn.iss,
            conn.rcv_next,
            TcpFlags::SYN | TcpFlags::ACK,
            0,
        ));
    }

    /// Sends whatever the window allows; returns the segment count.
    fn pump(conn: &mut Conn, config: RemoteConfig, out: &mut RemoteOutput) -> usize {
        let mut sent = 0;
        let window = config.window.min(conn.cwnd);
        while conn.unsent() > 0 && conn.in_flight() < window {
            let room = window - conn.in_flight();
            let len = conn.unsent().min(config.mss).min(room);
            out.packets.push(assemble_packet(
                &conn.reply,
                conn.snd_nxt,
                conn.rcv_next,
                TcpFlags::ACK | TcpFlags::PSH,
                len,
            ));
            conn.snd_nxt = conn.snd_nxt.wrapping_add(len);
            sent += 1;
        }
        sent
    }

    /// A retransmission timer fired. Stale timers are answered with the
    /// current deadline so the caller can re-arm.
    pub fn timeout(&mut self, now: Cycles, key: FlowKey) -> RemoteOutput {
        let mut out = RemoteOutput::default();
        let config = self.config;
        let Some(conn) = self.conns.get_mut(&key) else {
            return out;
        };
        match conn.rto_deadline {
            None => {}
            Some(deadline) if deadline > now => out.timer = Some((deadline, key)),
            Some(_) => {
                self.stats.timeouts += 1;
                conn.ssthresh = (conn.in_flight() / 2).max(2 * config.mss);
                conn.cwnd = config.mss;
                conn.snd_nxt = conn.snd_una;
                conn.backoff = (conn.backoff + 1).min(MAX_RTO_BACKOFF);
                Self::pump(conn, config, &mut out);
                let rto = config.rto << conn.backoff;
                conn.rto_deadline = (conn.in_flight() > 0).then_some(now + rto);
                out.timer = conn.rto_deadline.map(|d| (d, key));
            }
        }
        self.finish(out)
    }

    fn finish(&mut self, out: RemoteOutput) -> RemoteOutput {
        self.stats.packets_out += out.packets.len() as u64;
        out
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use sharedstack::packet::MacAddr;

    use super::*;

    fn guest_side() -> HeaderTemplate {
        HeaderTemplate {
            outer_src_mac: MacAddr([2, 0, 0, 0, 0, 1]),
            outer_dst_mac: MacAddr([2, 0, 0, 0, 0, 2]),
            outer_src_ip: Ipv4Addr::new(192, 168, 0, 1),
            outer_dst_ip: Ipv4Addr::new(192, 168, 0, 2),
            outer_src_port: 0xc000,
            outer_dst_port: 4754,
            gre_key: 1,
            inner_src_ip: Ipv4Addr::new(10, 0, 0, 1),
            inner_dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            inner_src_port: 10_000,
            inner_dst_port: 7,
        }
    }

    fn host(request: u32, response: u32) -> RemoteHost {
        RemoteHost::new(
            RemoteConfig {
                mss: 1_000,
                window: 3_000,
                rto: 100,
            },
            BTreeMap::from([(1, MessageSizes { request, response })]),
        )
    }

    /// Runs the handshake; returns the server's first sequence number.
    fn open(r: &mut RemoteHost) -> u32 {
        let t = guest_side();
        let out = r.receive(0, &assemble_packet(&t, 99, 0, TcpFlags::SYN, 0));
        let synack = out.packets[0];
        assert_eq!(synack.flags, TcpFlags::SYN | TcpFlags::ACK);
        assert_eq!(synack.ack, 100);
        assert_eq!(synack.header, t.reversed());
        let out = r.receive(
            0,
            &assemble_packet(&t, 100, synack.seq.wrapping_add(1), TcpFlags::ACK, 0),
        );
        assert!(out.packets.is_empty());
        synack.seq.wrapping_add(1)
    }

    #[test]
    fn partial_request_is_only_acknowledged() {
        let mut r = host(100, 50);
        let s = open(&mut r);
        let out = r.receive(
            5,
            &assemble_packet(&guest_side(), 100, s, TcpFlags::ACK, 60),
        );
        assert_eq!(out.packets.len(), 1);
        assert!(out.packets[0].is_pure_ack());
        assert_eq!(out.packets[0].ack, 160);
        assert_eq!(r.stats.requests, 0);
    }

    #[test]
    fn completed_request_gets_windowed_response() {
        let mut r = host(100, 5_000);
        let s = open(&mut r);
        let out = r.receive(
            5,
            &assemble_packet(&guest_side(), 100, s, TcpFlags::ACK, 100),
        );
        let lens: Vec<u32> = out.packets.iter().map(|p| p.payload_len).collect();
        assert_eq!(lens, vec![1_000, 1_000, 1_000]);
        assert!(out.packets.iter().all(|p| p.ack == 200));
        assert_eq!(out.timer.map(|t| t.0), Some(105));
        // Acking two segments opens the window for two more.
        let out = r.receive(
            10,
            &assemble_packet(&guest_side(), 200, s.wrapping_add(2_000), TcpFlags::ACK, 0),
        );
        let seqs: Vec<u32> = out.packets.iter().map(|p| p.seq.wrapping_sub(s)).collect();
        assert_eq!(seqs, vec![3_000, 4_000]);
    }

    #[test]
    fn timeout_goes_back_to_the_first_unacked_byte() {
        let mut r = host(10, 2_500);
        let s = open(&mut r);
        let key = guest_side().receiver_key();
        r.receive(
            0,
            &assemble_packet(&guest_side(), 100, s, TcpFlags::ACK, 10),
        );
        r.receive(
            20,
            &assemble_packet(&guest_side(), 110, s.wrapping_add(1_000), TcpFlags::ACK, 0),
        );
        // The deadline moved with the ACK, so the original timer is stale.
        let early = r.timeout(100, key);
        assert!(early.packets.is_empty());
        assert_eq!(early.timer.map(|t| t.0), Some(120));
        let out = r.timeout(120, key);
        // The window collapses to one segment.
        let seqs: Vec<u32> = out.packets.iter().map(|p| p.seq.wrapping_sub(s)).collect();
        assert_eq!(seqs, vec![1_000]);
        assert_eq!(r.stats.timeouts, 1);
        // Slow start: the ACK of that segment lets two more out.
        let out = r.receive(
            130,
            &assemble_packet(&guest_side(), 110, s.wrapping_add(2_000), TcpFlags::ACK, 0),
        );
        assert_eq!(out.packets.len(), 1);
        assert_eq!(out.packets[0].payload_len, 500);
    }

    #[test]
    fn fin_is_answered_and_forgotten() {
        let mut r = host(10, 10);
        let s = open(&mut r);
        let out = r.receive(
            0,
            &assemble_packet(&guest_side(), 100, s, TcpFlags::FIN | TcpFlags::ACK, 0),
        );
        assert_eq!(out.packets[0].flags, TcpFlags::FIN | TcpFlags::ACK);
        assert_eq!((out.packets[0].seq, out.packets[0].ack), (s, 101));
        assert_eq!(r.connections(), 0);
    }

    #[test]
    fn duplicate_syn_repeats_the_syn_ack() {
        let mut r = host(10, 10);
        let t = guest_side();
        let a = r.receive(0, &assemble_packet(&t, 99, 0, TcpFlags::SYN, 0));
        let b = r.receive(1, &assemble_packet(&t, 99, 0, TcpFlags::SYN, 0));
        assert_eq!(a.packets, b.packets);
        assert_eq!(r.connections(), 1);
    }
}
