use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::flow::FlowId;
use crate::{CoreId, Cycles, GuestId};

/// A send request posted by a guest application: `bytes` more bytes of the
/// flow's send buffer are ready for transmission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TxRequest {
    pub flow: FlowId,
    pub bytes: u32,
}

/// Payload landed in a flow's receive buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RxNotification {
    pub at: Cycles,
    pub flow: FlowId,
    pub bytes: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GuestStats {
    pub rx_packets: u64,
    pub rx_drops: u64,
    pub requests_polled: u64,
    pub bad_requests: u64,
    pub tx_segments: u64,
    pub tx_bytes: u64,
}

/// One tenant attached to the shared stack.
#[derive(Clone, Debug)]
pub struct GuestContext {
    pub id: GuestId,
    pub weight: f64,
    /// GRE key of the guest's virtual network.
    pub tunnel_id: u32,
    pub virtual_ip: Ipv4Addr,
    /// Transmit queues, `queues_per_core` of them for each fast-path core.
    tx_queues: Vec<Vec<VecDeque<TxRequest>>>,
    pub rx_notifications: VecDeque<RxNotification>,
    pub stats: GuestStats,
}

impl GuestContext {
    pub fn new(
        id: GuestId,
        weight: f64,
        tunnel_id: u32,
        virtual_ip: Ipv4Addr,
        num_cores: usize,
        queues_per_core: usize,
    ) -> Self {
        GuestContext {
            id,
            weight,
            tunnel_id,
            virtual_ip,
            tx_queues: vec![vec![VecDeque::new(); queues_per_core.max(1)]; num_cores],
            rx_notifications: VecDeque::new(),
            stats: GuestStats::default(),
        }
    }

    pub fn queues_per_core(&self) -> usize {
        self.tx_queues.first().map_or(0, Vec::len)
    }

    pub fn queue_len(&self, core: CoreId, queue: usize) -> usize {
        self.tx_queues[core.index()][queue].len()
    }

    pub fn backlog(&self, core: CoreId) -> usize {
        self.tx_queues[core.index()].iter().map(VecDeque::len).sum()
    }

    pub fn post(&mut self, core: CoreId, queue: usize, request: TxRequest) {
        self.tx_queues[core.index()][queue].push_back(request);
    }

    pub fn front_mut(&mut self, core: CoreId, queue: usize) -> Option<&mut TxRequest> {
        self.tx_queues[core.index()][queue].front_mut()
    }

    pub fn take(&mut self, core: CoreId, queue: usize) -> Option<TxRequest> {
        self.tx_queues[core.index()][queue].pop_front()
    }
}
