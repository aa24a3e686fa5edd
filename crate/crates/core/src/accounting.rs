//! Per-(core, guest) cycle budgets and the cycle cost model.
//!
//! Fast-path work is measured per batch and broken down to guests by their
//! packet counts. Balances are signed: a guest that overruns its budget in
//! the middle of a batch carries the overrun as a deficit and is skipped
//! until replenishment has paid it back.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreId, Cycles, GuestId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rx,
    Poll,
    Tx,
}

/// Deterministic stand-in for measuring tasks with the timestamp counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub base_cycles_per_task: Cycles,
    /// Cycles per payload byte in thousandths (300 = 0.3 cycles/byte).
    pub per_byte_millicycles: Cycles,
    pub poll_empty_cycles: Cycles,
    /// Relative amplitude of the optional uniform cost noise; 0 disables it.
    pub jitter: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_cycles_per_task: 200,
            per_byte_millicycles: 300,
            poll_empty_cycles: 50,
            jitter: 0.0,
        }
    }
}

impl CostModel {
    /// Cycles for one task touching `payload_len` bytes of payload.
    ///
    /// All three task kinds share the same affine model; they differ only in
    /// how much payload they touch (POLL touches none).
    pub fn task_cost(&self, _kind: TaskKind, payload_len: u32) -> Cycles {
        let bytes = self.per_byte_millicycles * Cycles::from(payload_len);
        self.base_cycles_per_task + (bytes + 500) / 1000
    }

    /// Cost of finding a queue empty.
    pub fn empty_poll_cost(&self) -> Cycles {
        self.poll_empty_cycles
    }

    /// `task_cost` with the configured noise applied.
    pub fn sample<R: Rng + ?Sized>(&self, kind: TaskKind, payload_len: u32, rng: &mut R) -> Cycles {
        let cost = self.task_cost(kind, payload_len);
        if self.jitter <= 0.0 {
            return cost;
        }
        let factor = 1.0 + rng.gen_range(-self.jitter..=self.jitter);
        ((cost as f64) * factor).round().max(1.0) as Cycles
    }
}

/// Upper bound on a per-core guest balance after replenishment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cap {
    Bounded(Cycles),
    Unbounded(UnboundedKeyword),
}

/// The literal `"unbounded"` in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnboundedKeyword {
    Unbounded,
}

impl Cap {
    pub const UNBOUNDED: Cap = Cap::Unbounded(UnboundedKeyword::Unbounded);

    pub fn limit(self) -> Option<i64> {
        match self {
            Cap::Bounded(c) => Some(c as i64),
            Cap::Unbounded(_) => None,
        }
    }

    pub fn clamp(self, value: i64) -> i64 {
        match self.limit() {
            Some(c) => value.min(c),
            None => value,
        }
    }
}

impl fmt::Display for Cap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cap::Bounded(c) => write!(f, "{c}"),
            Cap::Unbounded(_) => f.write_str("unbounded"),
        }
    }
}

/// Splits `total` in proportion to `weights` with the largest-remainder method.
///
/// Shares are integers and sum to `total` exactly. Leftover units go to the
/// largest fractional remainders, ties to the lower index. All-zero weights
/// yield all-zero shares.
pub fn apportion(weights: &[u64], total: u64) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| u128::from(w)).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total_wide = u128::from(total);
    let mut shares = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned: u128 = 0;
    for (i, &w) in weights.iter().enumerate() {
        let scaled = total_wide * u128::from(w);
        let share = scaled / sum;
        assigned += share;
        shares.push(share as u64);
        remainders.push((scaled % sum, i));
    }
    let leftover = (total_wide - assigned) as usize;
    // Descending remainder, ascending index on ties.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(leftover) {
        shares[i] += 1;
    }
    shares
}

/// Signed cycle balances for every (core, guest) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetTable {
    num_cores: usize,
    num_guests: usize,
    cap: Cap,
    balances: Vec<i64>,
    debited: Vec<u64>,
    credited: Vec<u64>,
}

impl BudgetTable {
    pub fn new(num_cores: usize, num_guests: usize, cap: Cap, initial: i64) -> Self {
        let initial = cap.clamp(initial);
        BudgetTable {
            num_cores,
            num_guests,
            cap,
            balances: vec![initial; num_cores * num_guests],
            debited: vec![0; num_guests],
            credited: vec![0; num_guests],
        }
    }

    pub fn num_cores(&self) -> usize {
        self.num_cores
    }

    pub fn num_guests(&self) -> usize {
        self.num_guests
    }

    pub fn cap(&self) -> Cap {
        self.cap
    }

    fn slot(&self, core: CoreId, guest: GuestId) -> usize {
        debug_assert!(core.index() < self.num_cores && guest.index() < self.num_guests);
        core.index() * self.num_guests + guest.index()
    }

    pub fn balance(&self, core: CoreId, guest: GuestId) -> i64 {
        self.balances[self.slot(core, guest)]
    }

    /// A guest may be scheduled on a core only while its balance is strictly positive.
    pub fn has_budget(&self, core: CoreId, guest: GuestId) -> bool {
        self.balance(core, guest) > 0
    }

    /// The guest's balances on every core, in core order.
    pub fn guest_balances(&self, guest: GuestId) -> Vec<i64> {
        (0..self.num_cores)
            .map(|c| self.balance(CoreId(c as u32), guest))
            .collect()
    }

    /// Subtracts `cycles` from one entry; the balance may go negative.
    pub fn charge(&mut self, core: CoreId, guest: GuestId, cycles: Cycles) {
        let slot = self.slot(core, guest);
        self.balances[slot] -= cycles as i64;
        self.debited[guest.index()] += cycles;
    }

    /// Breaks a measured batch total down to guests by packet count and
    /// charges each guest's balance on `core`.
    ///
    /// The returned charges sum to `measured_cycles` exactly.
    pub fn charge_batch(
        &mut self,
        core: CoreId,
        per_guest_packet_counts: &BTreeMap<GuestId, u64>,
        measured_cycles: Cycles,
    ) -> BTreeMap<GuestId, Cycles> {
        let counts: Vec<u64> = per_guest_packet_counts.values().copied().collect();
        if counts.iter().all(|&c| c == 0) {
            debug_assert_eq!(measured_cycles, 0, "cycles measured for an empty batch");
            return BTreeMap::new();
        }
        let shares = apportion(&counts, measured_cycles);
        let mut charged = BTreeMap::new();
        for (&guest, share) in per_guest_packet_counts.keys().zip(shares) {
            self.charge(core, guest, share);
            charged.insert(guest, share);
        }
        charged
    }

    /// `balance <- min(cap, balance + credit)`; returns the new balance.
    pub fn replenish_entry(&mut self, core: CoreId, guest: GuestId, credit: Cycles) -> i64 {
        let slot = self.slot(core, guest);
        let before = self.balances[slot];
        let after = self
            .cap
            .clamp(before.saturating_add(credit as i64))
            .max(before);
        self.balances[slot] = after;
        self.credited[guest.index()] += (after - before) as u64;
        after
    }

    /// Total cycles ever charged to a guest across all cores.
    pub fn debited(&self, guest: GuestId) -> u64 {
        self.debited[guest.index()]
    }

    /// Total cycles of credit that actually landed (after capping) for a guest.
    pub fn credited(&self, guest: GuestId) -> u64 {
        self.credited[guest.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: i64 = 210_000;

    fn counts(pairs: &[(u32, u64)]) -> BTreeMap<GuestId, u64> {
        pairs.iter().map(|&(g, c)| (GuestId(g), c)).collect()
    }

    #[test]
    fn base_cost_without_payload() {
        assert_eq!(CostModel::default().task_cost(TaskKind::Tx, 0), 200);
    }

    #[test]
    fn full_kilobyte_cost() {
        // 200 + round(0.3 * 1024) = 200 + round(307.2)
        assert_eq!(CostModel::default().task_cost(TaskKind::Tx, 1024), 507);
    }

    #[test]
    fn small_packet_cost() {
        // 200 + round(0.3 * 64) = 200 + round(19.2)
        assert_eq!(CostModel::default().task_cost(TaskKind::Rx, 64), 219);
    }

    #[test]
    fn default_costs_stay_in_bounded_range() {
        let m = CostModel::default();
        for len in 0..=1024 {
            for kind in [TaskKind::Rx, TaskKind::Poll, TaskKind::Tx] {
                let c = m.task_cost(kind, len);
                assert!((200..=508).contains(&c), "{kind:?} {len} -> {c}");
            }
        }
    }

    #[test]
    fn jitter_stays_within_ten_percent() {
        use rand::SeedableRng;
        let m = CostModel {
            jitter: 0.1,
            ..CostModel::default()
        };
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = m.sample(TaskKind::Rx, 0, &mut rng);
            assert!((180..=220).contains(&c));
        }
    }

    #[test]
    fn proportional_split() {
        let mut t = BudgetTable::new(1, 2, Cap::Bounded(C as u64), C);
        let charged = t.charge_batch(CoreId(0), &counts(&[(0, 12), (1, 4)]), 4800);
        assert_eq!(charged, counts(&[(0, 3600), (1, 1200)]));
        assert_eq!(t.balance(CoreId(0), GuestId(0)), C - 3600);
        assert_eq!(t.balance(CoreId(0), GuestId(1)), C - 1200);
    }

    #[test]
    fn single_guest_takes_all() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), C);
        let charged = t.charge_batch(CoreId(0), &counts(&[(0, 1)]), 257);
        assert_eq!(charged, counts(&[(0, 257)]));
    }

    #[test]
    fn three_way_split_conserves() {
        let mut t = BudgetTable::new(1, 3, Cap::Bounded(C as u64), C);
        let charged = t.charge_batch(CoreId(0), &counts(&[(0, 1), (1, 1), (2, 1)]), 100);
        assert_eq!(charged, counts(&[(0, 34), (1, 33), (2, 33)]));
    }

    #[test]
    fn charging_can_go_negative() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), 100);
        t.charge(CoreId(0), GuestId(0), 600);
        assert_eq!(t.balance(CoreId(0), GuestId(0)), -500);
        assert!(!t.has_budget(CoreId(0), GuestId(0)));
    }

    #[test]
    fn has_budget_is_strict() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), 1);
        assert!(t.has_budget(CoreId(0), GuestId(0)));
        t.charge(CoreId(0), GuestId(0), 1);
        assert!(!t.has_budget(CoreId(0), GuestId(0)));
        t.charge(CoreId(0), GuestId(0), 500);
        assert!(!t.has_budget(CoreId(0), GuestId(0)));
    }

    #[test]
    fn replenish_saturates_at_cap() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), C);
        assert_eq!(t.replenish_entry(CoreId(0), GuestId(0), 1000), C);
    }

    #[test]
    fn replenish_pays_back_deficit() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), 0);
        t.charge(CoreId(0), GuestId(0), 300);
        assert_eq!(t.replenish_entry(CoreId(0), GuestId(0), 500), 200);
    }

    #[test]
    fn zero_credit_is_noop() {
        let mut t = BudgetTable::new(1, 1, Cap::Bounded(C as u64), 0);
        assert_eq!(t.replenish_entry(CoreId(0), GuestId(0), 0), 0);
    }

    #[test]
    fn unbounded_cap_accumulates() {
        let mut t = BudgetTable::new(1, 1, Cap::UNBOUNDED, 10);
        for _ in 0..4 {
            t.replenish_entry(CoreId(0), GuestId(0), 1_000_000);
        }
        assert_eq!(t.balance(CoreId(0), GuestId(0)), 4_000_010);
    }

    #[test]
    fn apportion_zero_weights() {
        assert_eq!(apportion(&[0, 0], 10), vec![0, 0]);
        assert_eq!(apportion(&[], 10), Vec::<u64>::new());
    }
}
