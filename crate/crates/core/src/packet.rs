//! Simulated wire packets and one-shot header handling.
//!
//! Packets are structured records rather than byte buffers. Every packet
//! carries the full encapsulation stack used on the physical network:
//!
//! ```text
//! Ethernet (14) | IPv4 (20) | UDP (8) | GRE+key (8) | IPv4 (20) | TCP (20) | payload
//! ```
//!
//! The outer headers address the physical hosts, the GRE key names the
//! virtual network, and the inner IPv4/TCP headers address the guests.

use std::fmt;
use std::net::Ipv4Addr;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ETHERNET_HEADER_LEN: u32 = 14;
pub const IPV4_HEADER_LEN: u32 = 20;
pub const UDP_HEADER_LEN: u32 = 8;
/// 4-byte base header plus the 4-byte key extension.
pub const GRE_KEYED_HEADER_LEN: u32 = 8;
pub const TCP_HEADER_LEN: u32 = 20;

/// Bytes on the wire that are not TCP payload.
pub const HEADER_OVERHEAD: u32 = ETHERNET_HEADER_LEN
    + IPV4_HEADER_LEN
    + UDP_HEADER_LEN
    + GRE_KEYED_HEADER_LEN
    + IPV4_HEADER_LEN
    + TCP_HEADER_LEN;

/// IP protocol number of TCP, the only inner protocol the fast-path handles.
pub const IPPROTO_TCP: u8 = 6;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            m[0], m[1], m[2], m[3], m[4], m[5]
        )
    }
}

bitflags! {
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
    }
}

impl TcpFlags {
    /// Flags that force a packet off the fast-path.
    pub const CONTROL: TcpFlags = TcpFlags::SYN.union(TcpFlags::FIN).union(TcpFlags::RST);

    pub fn is_control(self) -> bool {
        self.intersects(Self::CONTROL)
    }
}

/// Connection identity as seen by one endpoint.
///
/// The tunnel id is part of the identity: two virtual networks may reuse the
/// same guest addresses and ports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub guest_local_ip: Ipv4Addr,
    pub guest_local_port: u16,
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub tunnel_id: u32,
}

impl FlowKey {
    /// The same connection from the other endpoint's point of view.
    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            guest_local_ip: self.remote_ip,
            guest_local_port: self.remote_port,
            remote_ip: self.guest_local_ip,
            remote_port: self.guest_local_port,
            tunnel_id: self.tunnel_id,
        }
    }
}

/// Precomputed headers of one direction of a connection.
///
/// Installed once per connection by the slow-path; the fast-path only copies
/// it into outgoing packets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeaderTemplate {
    pub outer_src_mac: MacAddr,
    pub outer_dst_mac: MacAddr,
    pub outer_src_ip: Ipv4Addr,
    pub outer_dst_ip: Ipv4Addr,
    pub outer_src_port: u16,
    pub outer_dst_port: u16,
    pub gre_key: u32,
    pub inner_src_ip: Ipv4Addr,
    pub inner_dst_ip: Ipv4Addr,
    pub inner_src_port: u16,
    pub inner_dst_port: u16,
}

impl HeaderTemplate {
    /// Flow key of the sending endpoint.
    pub fn sender_key(&self) -> FlowKey {
        FlowKey {
            guest_local_ip: self.inner_src_ip,
            guest_local_port: self.inner_src_port,
            remote_ip: self.inner_dst_ip,
            remote_port: self.inner_dst_port,
            tunnel_id: self.gre_key,
        }
    }

    /// Flow key of the receiving endpoint.
    pub fn receiver_key(&self) -> FlowKey {
        self.sender_key().reversed()
    }

    /// Template for traffic in the opposite direction: every address pair swapped.
    pub fn reversed(&self) -> HeaderTemplate {
        HeaderTemplate {
            outer_src_mac: self.outer_dst_mac,
            outer_dst_mac: self.outer_src_mac,
            outer_src_ip: self.outer_dst_ip,
            outer_dst_ip: self.outer_src_ip,
            outer_src_port: self.outer_dst_port,
            outer_dst_port: self.outer_src_port,
            gre_key: self.gre_key,
            inner_src_ip: self.inner_dst_ip,
            inner_dst_ip: self.inner_src_ip,
            inner_src_port: self.inner_dst_port,
            inner_dst_port: self.inner_src_port,
        }
    }
}

/// What the GRE payload carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encapsulated {
    /// TCP over IPv4 inside GRE, the format the fast-path expects.
    Tcp,
    /// Any other inner IP protocol, by protocol number.
    Other(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub header: HeaderTemplate,
    pub inner: Encapsulated,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub payload_len: u32,
    pub wire_len: u32,
}

impl Packet {
    pub fn is_pure_ack(&self) -> bool {
        self.payload_len == 0 && self.flags == TcpFlags::ACK
    }
}

/// Transport view of a parsed packet, keyed from the receiver's side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub key: FlowKey,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub payload_len: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("inner protocol {0} is not TCP; packet belongs on the legacy path")]
    NotTcp(u8),
}

/// Builds a complete packet straight from a flow's template.
pub fn assemble_packet(
    template: &HeaderTemplate,
    seq: u32,
    ack: u32,
    flags: TcpFlags,
    payload_len: u32,
) -> Packet {
    Packet {
        header: *template,
        inner: Encapsulated::Tcp,
        seq,
        ack,
        flags,
        payload_len,
        wire_len: HEADER_OVERHEAD + payload_len,
    }
}

/// Parses a packet in the expected TCP-over-GRE format.
///
/// Anything else is reported as an error and must be handed to the slow-path.
pub fn parse_packet(packet: &Packet) -> Result<Segment, ParseError> {
    match packet.inner {
        Encapsulated::Tcp => Ok(Segment {
            key: packet.header.receiver_key(),
            seq: packet.seq,
            ack: packet.ack,
            flags: packet.flags,
            payload_len: packet.payload_len,
        }),
        Encapsulated::Other(proto) => Err(ParseError::NotTcp(proto)),
    }
}

/// Turns a received packet into the acknowledgement sent back to its source.
pub fn make_ack(packet: &Packet, seq: u32, ack: u32) -> Packet {
    assemble_packet(&packet.header.reversed(), seq, ack, TcpFlags::ACK, 0)
}

/// `a < b` in 32-bit sequence space.
pub fn seq_lt(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}

/// `a <= b` in 32-bit sequence space.
pub fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}
