//! Central, work-conserving budget allocation.
//!
//! Every update period the slow-path grants each guest a share of the elapsed
//! fast-path cycles proportional to its weight, scaled down by the boost
//! factor that reserves room for cycles no guest is charged for. A guest's
//! grant is then routed to the cores where it actually spent budget, in
//! proportion to how far below the cap each core's balance sits, and every
//! entry is capped.

use thiserror::Error;

use crate::accounting::{apportion, BudgetTable, Cap};
use crate::{CoreId, Cycles, GuestId};

pub const DEFAULT_BOOST: f64 = 0.94;
/// 100 µs at 2.1 GHz.
pub const DEFAULT_UPDATE_PERIOD: Cycles = 210_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AllocatorConfig {
    pub boost: f64,
    pub cap: Cap,
    pub update_period: Cycles,
    /// Weight of each guest, indexed by guest id.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum AllocatorConfigError {
    #[error("boost must lie in (0, 1], got {0}")]
    Boost(f64),
    #[error("cap must be positive")]
    Cap,
    #[error("update period must be positive")]
    UpdatePeriod,
    #[error("weight of guest {guest} must be positive and finite, got {weight}")]
    Weight { guest: usize, weight: f64 },
}

impl AllocatorConfig {
    pub fn with_weights(weights: Vec<f64>) -> Self {
        AllocatorConfig {
            boost: DEFAULT_BOOST,
            cap: Cap::Bounded(DEFAULT_UPDATE_PERIOD),
            update_period: DEFAULT_UPDATE_PERIOD,
            weights,
        }
    }

    pub fn validate(&self) -> Result<(), AllocatorConfigError> {
        if !(self.boost > 0.0 && self.boost <= 1.0) {
            return Err(AllocatorConfigError::Boost(self.boost));
        }
        if self.cap == Cap::Bounded(0) {
            return Err(AllocatorConfigError::Cap);
        }
        if self.update_period == 0 {
            return Err(AllocatorConfigError::UpdatePeriod);
        }
        for (guest, &weight) in self.weights.iter().enumerate() {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(AllocatorConfigError::Weight { guest, weight });
            }
        }
        Ok(())
    }
}

/// Per-guest credit for `elapsed` cycles: `round(boost * elapsed * w_g / sum(w))`.
pub fn credits_for_elapsed(elapsed: Cycles, config: &AllocatorConfig) -> Vec<Cycles> {
    let total_weight: f64 = config.weights.iter().sum();
    config
        .weights
        .iter()
        .map(|w| (config.boost * elapsed as f64 * w / total_weight).round() as Cycles)
        .collect()
}

/// Update credits earned between two allocator timestamps, indexed by guest.
pub fn compute_update_credits(
    now: Cycles,
    last_update: Cycles,
    config: &AllocatorConfig,
) -> Vec<Cycles> {
    debug_assert!(now >= last_update);
    credits_for_elapsed(now.saturating_sub(last_update), config)
}

/// Routes one guest's credit to cores in proportion to their deficit below the cap.
///
/// With a bounded cap, a guest sitting at the cap everywhere forfeits the
/// credit. With an unbounded cap deficits are measured against the guest's
/// richest core, and a guest that is level everywhere banks the credit in
/// equal parts.
pub fn distribute_to_cores(credit: Cycles, balances: &[i64], cap: Cap) -> Vec<Cycles> {
    let reference = match cap.limit() {
        Some(c) => c,
        None => balances.iter().copied().max().unwrap_or(0),
    };
    let deficits: Vec<u64> = balances
        .iter()
        .map(|&b| reference.saturating_sub(b).max(0) as u64)
        .collect();
    if deficits.iter().all(|&d| d == 0) {
        return match cap {
            Cap::Bounded(_) => vec![0; balances.len()],
            Cap::Unbounded(_) => apportion(&vec![1; balances.len()], credit),
        };
    }
    apportion(&deficits, credit)
}

/// What one replenish round did, per guest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplenishSummary {
    pub credits: Vec<Cycles>,
    /// Credit that actually raised balances after capping.
    pub landed: Vec<Cycles>,
}

#[derive(Clone, Debug)]
pub struct Allocator {
    config: AllocatorConfig,
    last_update: Cycles,
}

impl Allocator {
    pub fn new(config: AllocatorConfig, start: Cycles) -> Self {
        Allocator {
            config,
            last_update: start,
        }
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn last_update(&self) -> Cycles {
        self.last_update
    }

    pub fn is_due(&self, now: Cycles) -> bool {
        now - self.last_update >= self.config.update_period
    }

    /// Grants every guest its credit for the fast-path cycles elapsed since
    /// the previous round and spreads it over the cores.
    ///
    /// Elapsed time is counted on every core of the table, so the grants of
    /// one round add up to `boost` times the fast-path capacity.
    pub fn replenish_all(&mut self, now: Cycles, budgets: &mut BudgetTable) -> ReplenishSummary {
        let cores = budgets.num_cores() as Cycles;
        let elapsed = now.saturating_sub(self.last_update) * cores;
        let credits = credits_for_elapsed(elapsed, &self.config);
        let mut landed = Vec::with_capacity(credits.len());
        for (g, &credit) in credits.iter().enumerate() {
            let guest = GuestId(g as u32);
            let before = budgets.credited(guest);
            let shares = distribute_to_cores(credit, &budgets.guest_balances(guest), budgets.cap());
            for (c, share) in shares.into_iter().enumerate() {
                if share > 0 {
                    budgets.replenish_entry(CoreId(c as u32), guest, share);
                }
            }
            landed.push(budgets.credited(guest) - before);
        }
        self.last_update = now;
        ReplenishSummary { credits, landed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: i64 = DEFAULT_UPDATE_PERIOD as i64;

    #[test]
    fn equal_weights_at_default_period() {
        let cfg = AllocatorConfig::with_weights(vec![1.0, 1.0]);
        assert_eq!(
            compute_update_credits(210_000, 0, &cfg),
            vec![98_700, 98_700]
        );
    }

    #[test]
    fn weights_cancel_for_single_guest() {
        let cfg = AllocatorConfig {
            boost: 1.0,
            ..AllocatorConfig::with_weights(vec![5.0])
        };
        assert_eq!(compute_update_credits(1_000, 0, &cfg), vec![1_000]);
    }

    #[test]
    fn two_to_one_weights() {
        let cfg = AllocatorConfig::with_weights(vec![2.0, 1.0]);
        assert_eq!(
            compute_update_credits(420_000, 210_000, &cfg),
            vec![131_600, 65_800]
        );
    }

    #[test]
    fn no_guests_no_credits() {
        let cfg = AllocatorConfig::with_weights(vec![]);
        assert!(compute_update_credits(10, 0, &cfg).is_empty());
    }

    #[test]
    fn deficit_on_one_core_takes_everything() {
        assert_eq!(
            distribute_to_cores(1_000, &[C, C - 400], Cap::Bounded(C as u64)),
            vec![0, 1_000]
        );
    }

    #[test]
    fn deficits_split_proportionally() {
        assert_eq!(
            distribute_to_cores(900, &[C - 100, C - 200], Cap::Bounded(C as u64)),
            vec![300, 600]
        );
    }

    #[test]
    fn idle_guest_forfeits() {
        assert_eq!(
            distribute_to_cores(500, &[C, C], Cap::Bounded(C as u64)),
            vec![0, 0]
        );
    }

    #[test]
    fn unbounded_level_guest_banks_evenly() {
        assert_eq!(
            distribute_to_cores(501, &[7, 7], Cap::UNBOUNDED),
            vec![251, 250]
        );
        assert_eq!(
            distribute_to_cores(500, &[10, 0], Cap::UNBOUNDED),
            vec![0, 500]
        );
    }

    #[test]
    fn saturated_guests_stay_at_cap() {
        let cfg = AllocatorConfig::with_weights(vec![1.0, 1.0]);
        let mut budgets = BudgetTable::new(2, 2, cfg.cap, C);
        let mut alloc = Allocator::new(cfg, 0);
        alloc.replenish_all(210_000, &mut budgets);
        for g in 0..2 {
            assert_eq!(budgets.guest_balances(GuestId(g)), vec![C, C]);
        }
    }

    #[test]
    fn deficit_repaid_in_one_period() {
        let cfg = AllocatorConfig::with_weights(vec![1.0, 1.0]);
        let mut budgets = BudgetTable::new(1, 2, cfg.cap, 0);
        budgets.charge(CoreId(0), GuestId(0), 98_700);
        let mut alloc = Allocator::new(cfg, 0);
        let summary = alloc.replenish_all(210_000, &mut budgets);
        assert_eq!(summary.credits, vec![98_700, 98_700]);
        assert_eq!(budgets.balance(CoreId(0), GuestId(0)), 0);
        assert_eq!(alloc.last_update(), 210_000);
    }

    #[test]
    fn replenish_never_exceeds_cap() {
        let cfg = AllocatorConfig::with_weights(vec![1.0, 3.0, 2.0]);
        let mut budgets = BudgetTable::new(3, 3, cfg.cap, C);
        budgets.charge(CoreId(1), GuestId(1), 10);
        budgets.charge(CoreId(2), GuestId(2), 400_000);
        let mut alloc = Allocator::new(cfg, 0);
        alloc.replenish_all(1_000_000, &mut budgets);
        for c in 0..3 {
            for g in 0..3 {
                assert!(budgets.balance(CoreId(c), GuestId(g)) <= C);
            }
        }
    }

    #[test]
    fn config_validation() {
        let good = AllocatorConfig::with_weights(vec![1.0]);
        assert!(good.validate().is_ok());
        let bad_boost = AllocatorConfig {
            boost: 1.5,
            ..good.clone()
        };
        assert_eq!(bad_boost.validate(), Err(AllocatorConfigError::Boost(1.5)));
        let bad_weight = AllocatorConfig::with_weights(vec![1.0, 0.0]);
        assert!(matches!(
            bad_weight.validate(),
            Err(AllocatorConfigError::Weight { guest: 1, .. })
        ));
        let bad_period = AllocatorConfig {
            update_period: 0,
            ..good
        };
        assert_eq!(
            bad_period.validate(),
            Err(AllocatorConfigError::UpdatePeriod)
        );
    }
}
