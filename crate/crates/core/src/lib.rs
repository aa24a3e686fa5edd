//! A shared multi-tenant TCP dataplane.
//!
//! Guests (VMs or containers) attach to one shared stack through queues. A
//! multi-core fast-path handles data packets of established connections in a
//! single pass over consolidated per-connection state, while a separate
//! slow-path handles connection control, timeouts, rate updates and
//! virtualization lookups. CPU time spent on the fast-path is accounted per
//! guest in per-core cycle budgets that a central allocator replenishes, and
//! a two-level scheduler only does work for guests that still have budget.
//!
//! Time is virtual and measured in CPU cycles. Everything in this crate is
//! single-threaded and deterministic; the harness crate drives it.

pub mod accounting;
pub mod allocator;
pub mod fastpath;
pub mod flow;
pub mod guest;
pub mod packet;
pub mod sched;
pub mod slowpath;

use serde::{Deserialize, Serialize};

/// Virtual time and CPU work, in cycles.
pub type Cycles = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GuestId(pub u32);

impl GuestId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoreId(pub u32);

impl CoreId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub use accounting::{BudgetTable, Cap, CostModel, TaskKind};
pub use allocator::{Allocator, AllocatorConfig};
pub use fastpath::{FastPathConfig, FastPathCore};
pub use flow::{ConsolidatedFlowState, FlowId, FlowTable};
pub use guest::GuestContext;
pub use packet::{FlowKey, HeaderTemplate, Packet, TcpFlags};
pub use sched::CoreSchedState;
pub use slowpath::{SlowPath, SlowPathConfig, TunnelRegistry};
