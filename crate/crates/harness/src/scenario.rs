//! Built-in scenarios. Each one expands the base configuration into sweep
//! points that run independently and in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sharedstack::Cap;

use crate::config::{IsolationSweep, SensitivityParameter, SimConfig, SweepValue, WorkloadMode};
use crate::metrics::RunMetrics;
use crate::sim::Simulation;
use crate::HarnessError;

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub label: String,
    pub value: Option<SweepValue>,
    pub config: SimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub label: String,
    pub value: Option<SweepValue>,
    pub metrics: RunMetrics,
}

fn point(label: String, value: Option<SweepValue>, config: SimConfig) -> Point {
    Point {
        label,
        value,
        config,
    }
}

/// The sweep points of the configured scenario, in report order.
pub fn expand(base: &SimConfig) -> Vec<Point> {
    let s = &base.scenario;
    match s.name.as_str() {
        "isolation" => {
            let mut points = Vec::new();
            if s.include_solo {
                let mut solo = base.clone();
                solo.guests.truncate(1);
                points.push(point("solo".into(), None, solo));
            }
            let values = if s.points.is_empty() {
                vec![match s.sweep {
                    IsolationSweep::Connections => base.guests[1].connections as u64,
                    IsolationSweep::MessageSize => u64::from(base.guests[1].message_size),
                }]
            } else {
                s.points.clone()
            };
            for v in values {
                let mut cfg = base.clone();
                let label = match s.sweep {
                    IsolationSweep::Connections => {
                        cfg.guests[1].connections = v as usize;
                        format!("aggressor_connections={v}")
                    }
                    IsolationSweep::MessageSize => {
                        cfg.guests[1].message_size = v as u32;
                        format!("aggressor_message_size={v}")
                    }
                };
                points.push(point(label, Some(SweepValue::Number(v as f64)), cfg));
            }
            points
        }
        "efficiency" => {
            let max = s.max_guests.unwrap_or(base.guests.len()).max(1);
            (1..=max)
                .map(|n| with_guest_count(base, n, "guests"))
                .collect()
        }
        "scalability" => {
            let counts = if s.guest_counts.is_empty() {
                vec![base.guests.len()]
            } else {
                s.guest_counts.clone()
            };
            counts
                .into_iter()
                .map(|n| with_guest_count(base, n, "guests"))
                .collect()
        }
        "sensitivity" => {
            if s.values.is_empty() {
                return vec![point("base".into(), None, base.clone())];
            }
            s.values
                .iter()
                .map(|v| {
                    let mut cfg = base.clone();
                    let label = match (s.parameter, v) {
                        (SensitivityParameter::UpdatePeriodUs, SweepValue::Number(us)) => {
                            cfg.allocator.update_period_us = *us;
                            format!("update_period_us={us}")
                        }
                        (SensitivityParameter::Boost, SweepValue::Number(b)) => {
                            cfg.allocator.boost = *b;
                            format!("boost={b}")
                        }
                        (SensitivityParameter::Cap, SweepValue::Number(c)) => {
                            cfg.allocator.cap = Some(Cap::Bounded(*c as u64));
                            format!("cap={c}")
                        }
                        // "default" restores one update period's worth of cycles.
                        (_, SweepValue::Keyword(k)) if k == "default" => {
                            cfg.allocator.cap = None;
                            "cap=default".into()
                        }
                        (_, SweepValue::Keyword(_)) => {
                            cfg.allocator.cap = Some(Cap::UNBOUNDED);
                            "cap=unbounded".into()
                        }
                    };
                    point(label, Some(v.clone()), cfg)
                })
                .collect()
        }
        "short_lived" => {
            let latencies = if s.resolution_latencies.is_empty() {
                vec![base.slowpath.resolution_latency_cycles]
            } else {
                s.resolution_latencies.clone()
            };
            latencies
                .into_iter()
                .map(|lat| {
                    let mut cfg = base.clone();
                    cfg.slowpath.resolution_latency_cycles = lat;
                    for g in &mut cfg.guests {
                        g.mode = WorkloadMode::ConnectionPerRpc;
                    }
                    point(
                        format!("resolution_latency_cycles={lat}"),
                        Some(SweepValue::Number(lat as f64)),
                        cfg,
                    )
                })
                .collect()
        }
        _ => vec![point(s.name.clone(), None, base.clone())],
    }
}

/// `n` copies of the first guest.
fn with_guest_count(base: &SimConfig, n: usize, what: &str) -> Point {
    let mut cfg = base.clone();
    cfg.guests = vec![base.guests[0].clone(); n];
    point(
        format!("{what}={n}"),
        Some(SweepValue::Number(n as f64)),
        cfg,
    )
}

/// Runs every point; the results keep the point order.
pub fn run_points(points: Vec<Point>) -> Result<Vec<PointResult>, HarnessError> {
    points
        .into_par_iter()
        .map(|p| {
            let metrics = Simulation::new(&p.config)?.run()?;
            Ok(PointResult {
                label: p.label,
                value: p.value,
                metrics,
            })
        })
        .collect()
}
