//! Per-run measurements.

use serde::{Deserialize, Serialize};
use sharedstack::Cycles;

/// Nearest-rank percentile `num/den` of an ascending slice.
pub fn nearest_rank(sorted: &[Cycles], num: u64, den: u64) -> Option<Cycles> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (n * num).div_ceil(den).max(1);
    Some(sorted[(rank - 1) as usize])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub p50_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub p999_us: Option<f64>,
    pub max_us: Option<f64>,
}

impl LatencySummary {
    /// `to_us` converts cycles to microseconds.
    pub fn from_cycles(mut latencies: Vec<Cycles>, to_us: impl Fn(Cycles) -> f64) -> Self {
        latencies.sort_unstable();
        let pick = |num, den| nearest_rank(&latencies, num, den).map(&to_us);
        LatencySummary {
            samples: latencies.len() as u64,
            p50_us: pick(50, 100),
            p99_us: pick(99, 100),
            p999_us: pick(999, 1_000),
            max_us: latencies.last().copied().map(&to_us),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuestMetrics {
    pub guest: u32,
    pub weight: f64,
    pub connections: usize,
    pub message_size: u32,
    pub response_size: u32,
    /// Completed requests per second of measured virtual time.
    pub throughput_rps: f64,
    /// Response bytes per second of measured virtual time.
    pub goodput_bytes_per_s: f64,
    pub latency: LatencySummary,
    pub rx_drops: u64,
    pub slowpath_events: u64,
    pub cycles_charged: u64,
    pub connects: u64,
    pub refused: u64,
    pub issued: u64,
    pub completed: u64,
    pub in_flight: u64,
    /// Requests issued while the guest's duty cycle was off.
    pub issued_while_off: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub core: u32,
    /// Share of cycles spent on anything but idle polling.
    pub utilization: f64,
    pub accounted_fraction: f64,
    pub cycles_total: Cycles,
    pub idle_cycles: Cycles,
    pub rx_packets: u64,
    pub rx_drops: u64,
    pub rx_misses: u64,
    pub nic_drops: u64,
    /// Deepest the NIC receive queue got, in packets.
    pub nic_max_depth: u64,
    pub tx_segments: u64,
}

/// Every consumed cycle is either charged to a guest or booked as overhead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub charged: Cycles,
    pub unaccounted: Cycles,
    pub consumed: Cycles,
}

impl Ledger {
    pub fn balanced(&self) -> bool {
        self.charged + self.unaccounted == self.consumed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub duration_us: f64,
    pub measured_us: f64,
    pub guests: Vec<GuestMetrics>,
    pub cores: Vec<CoreMetrics>,
    pub throughput_rps: f64,
    pub per_core_throughput_rps: f64,
    /// Fraction of fast-path cycles charged to guests over the whole run.
    pub accounted_fraction: f64,
    /// The same fraction after warmup.
    pub accounted_fraction_measured: f64,
    pub ledger: Ledger,
    pub ledger_ok: bool,
    pub audit_records: u64,
    pub audit_violations: u64,
    pub slowpath_events: u64,
    /// Slow-path events after every connection was up; `None` if that
    /// never happened.
    pub slowpath_events_after_setup: Option<u64>,
    pub setup_complete_us: Option<f64>,
    pub allocator_ticks: u64,
    pub slowpath_timeouts: u64,
    pub nic_drops: u64,
    pub link_losses: u64,
    /// Longest any packet waited behind others for the wire.
    pub egress_max_queue_us: f64,
    pub ingress_max_queue_us: f64,
    pub remote_timeouts: u64,
}
