//! Simulation configuration, loaded from TOML.
//!
//! Durations are given in human units (ms, µs, Gbit/s) and converted to
//! cycles at `cpu_ghz` when a run is built.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sharedstack::allocator::{AllocatorConfig, DEFAULT_BOOST};
use sharedstack::slowpath::RatePolicy;
use sharedstack::{Cap, CostModel, Cycles};

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::duration_ms")]
    pub duration_ms: f64,
    /// Completions before this point are left out of the metrics.
    #[serde(default = "defaults::warmup_ms")]
    pub warmup_ms: f64,
    #[serde(default = "defaults::cpu_ghz")]
    pub cpu_ghz: f64,
    #[serde(default = "defaults::num_fastpath_cores")]
    pub num_fastpath_cores: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::mss")]
    pub mss: u32,
    #[serde(default = "defaults::flow_buffer_bytes")]
    pub flow_buffer_bytes: u32,
    /// Share of the base task cost charged for each RX drop.
    #[serde(default = "defaults::drop_cost_fraction")]
    pub drop_cost_fraction: f64,
    /// Pacing rate of flows the slow-path has not rated yet.
    #[serde(default = "defaults::rate_gbps")]
    pub initial_rate_gbps: f64,
    /// NIC receive ring size per core, in packets.
    #[serde(default = "defaults::nic_queue_packets")]
    pub nic_queue_packets: usize,
    /// Turn budget gating off while keeping the accounting.
    #[serde(default)]
    pub ablate_no_budget: bool,
    #[serde(default)]
    pub allocator: AllocatorSection,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub slowpath: SlowPathSection,
    #[serde(default)]
    pub guests: Vec<GuestSection>,
    #[serde(default)]
    pub scenario: ScenarioSection,
}

mod defaults {
    pub fn seed() -> u64 {
        1
    }
    pub fn duration_ms() -> f64 {
        20.0
    }
    pub fn warmup_ms() -> f64 {
        2.0
    }
    pub fn cpu_ghz() -> f64 {
        2.1
    }
    pub fn num_fastpath_cores() -> usize {
        2
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn mss() -> u32 {
        1460
    }
    pub fn flow_buffer_bytes() -> u32 {
        64 * 1024
    }
    pub fn drop_cost_fraction() -> f64 {
        0.25
    }
    pub fn rate_gbps() -> f64 {
        100.0
    }
    pub fn nic_queue_packets() -> usize {
        4096
    }
    pub fn boost() -> f64 {
        super::DEFAULT_BOOST
    }
    pub fn update_period_us() -> f64 {
        100.0
    }
    pub fn bandwidth_gbps() -> f64 {
        100.0
    }
    pub fn propagation_us() -> f64 {
        10.0
    }
    pub fn rto_us() -> f64 {
        200.0
    }
    pub fn resolution_latency_cycles() -> u64 {
        2_000
    }
    pub fn item_cycles() -> u64 {
        2_000
    }
    pub fn weight() -> f64 {
        1.0
    }
    pub fn connections() -> usize {
        1
    }
    pub fn message_size() -> u32 {
        64
    }
    pub fn scenario() -> String {
        "echo".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorSection {
    #[serde(default = "defaults::boost")]
    pub boost: f64,
    #[serde(default = "defaults::update_period_us")]
    pub update_period_us: f64,
    /// Cycles, or "unbounded". Defaults to one update period of cycles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<Cap>,
}

impl Default for AllocatorSection {
    fn default() -> Self {
        AllocatorSection {
            boost: defaults::boost(),
            update_period_us: defaults::update_period_us(),
            cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    #[serde(default = "defaults::bandwidth_gbps")]
    pub bandwidth_gbps: f64,
    /// One-way delay, which also stands in for the remote host's own stack.
    #[serde(default = "defaults::propagation_us")]
    pub propagation_us: f64,
    /// Probability that any packet is lost, in either direction.
    #[serde(default)]
    pub loss_rate: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            bandwidth_gbps: defaults::bandwidth_gbps(),
            propagation_us: defaults::propagation_us(),
            loss_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowPathSection {
    #[serde(default = "defaults::rto_us")]
    pub rto_us: f64,
    #[serde(default = "defaults::resolution_latency_cycles")]
    pub resolution_latency_cycles: Cycles,
    #[serde(default = "defaults::item_cycles")]
    pub item_cycles: Cycles,
    #[serde(default)]
    pub charge_guests: bool,
    #[serde(default)]
    pub rate_policy: RatePolicy,
    #[serde(default = "defaults::rate_gbps")]
    pub rate_gbps: f64,
}

impl Default for SlowPathSection {
    fn default() -> Self {
        SlowPathSection {
            rto_us: defaults::rto_us(),
            resolution_latency_cycles: defaults::resolution_latency_cycles(),
            item_cycles: defaults::item_cycles(),
            charge_guests: false,
            rate_policy: RatePolicy::default(),
            rate_gbps: defaults::rate_gbps(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadMode {
    /// One outstanding request per connection, the next sent as soon as the
    /// response is complete.
    #[default]
    ClosedLoop,
    /// Closed loop during on phases; no new requests during off phases.
    Burst,
    /// A fresh connection for every request, closed after the response.
    ConnectionPerRpc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestSection {
    #[serde(default = "defaults::weight")]
    pub weight: f64,
    #[serde(default = "defaults::connections")]
    pub connections: usize,
    /// Request size in bytes.
    #[serde(default = "defaults::message_size")]
    pub message_size: u32,
    /// Response size in bytes; the request size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_size: Option<u32>,
    #[serde(default)]
    pub mode: WorkloadMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_ms: Option<f64>,
}

impl Default for GuestSection {
    fn default() -> Self {
        GuestSection {
            weight: defaults::weight(),
            connections: defaults::connections(),
            message_size: defaults::message_size(),
            response_size: None,
            mode: WorkloadMode::ClosedLoop,
            on_ms: None,
            off_ms: None,
        }
    }
}

impl GuestSection {
    pub fn response_size(&self) -> u32 {
        self.response_size.unwrap_or(self.message_size)
    }
}

/// A sweep value: a number, or a keyword such as "unbounded".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Keyword(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Keyword(k) => f.write_str(k),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationSweep {
    #[default]
    Connections,
    MessageSize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityParameter {
    #[default]
    UpdatePeriodUs,
    Boost,
    Cap,
}

/// Scenario selection plus the parameters of every scenario; each scenario
/// reads only its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "defaults::scenario")]
    pub name: String,
    /// isolation: what the aggressor sweep varies.
    #[serde(default)]
    pub sweep: IsolationSweep,
    /// isolation: aggressor connection counts or message sizes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<u64>,
    /// isolation: add a row with the aggressor removed.
    #[serde(default)]
    pub include_solo: bool,
    /// efficiency: add copies of the first guest up to this count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_guests: Option<usize>,
    /// scalability: guest counts to run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guest_counts: Vec<usize>,
    /// sensitivity: the allocator parameter to sweep.
    #[serde(default)]
    pub parameter: SensitivityParameter,
    /// sensitivity: values of that parameter.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<SweepValue>,
    /// short_lived: resolution latencies in cycles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resolution_latencies: Vec<Cycles>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            name: defaults::scenario(),
            sweep: IsolationSweep::default(),
            points: Vec::new(),
            include_solo: false,
            max_guests: None,
            guest_counts: Vec::new(),
            parameter: SensitivityParameter::default(),
            values: Vec::new(),
            resolution_latencies: Vec::new(),
        }
    }
}

pub const SCENARIOS: [&str; 6] = [
    "echo",
    "isolation",
    "efficiency",
    "scalability",
    "sensitivity",
    "short_lived",
];

/// A configuration value that failed validation, named by its path.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: defaults::seed(),
            duration_ms: defaults::duration_ms(),
            warmup_ms: defaults::warmup_ms(),
            cpu_ghz: defaults::cpu_ghz(),
            num_fastpath_cores: defaults::num_fastpath_cores(),
            batch_size: defaults::batch_size(),
            mss: defaults::mss(),
            flow_buffer_bytes: defaults::flow_buffer_bytes(),
            drop_cost_fraction: defaults::drop_cost_fraction(),
            initial_rate_gbps: defaults::rate_gbps(),
            nic_queue_packets: defaults::nic_queue_packets(),
            ablate_no_budget: false,
            allocator: AllocatorSection::default(),
            cost: CostModel::default(),
            link: LinkSection::default(),
            slowpath: SlowPathSection::default(),
            guests: vec![GuestSection::default()],
            scenario: ScenarioSection::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_run()?;
        self.validate_scenario()
    }

    /// Checks everything a single run needs; the scenario section is ignored.
    pub fn validate_run(&self) -> Result<(), ConfigError> {
        if self.num_fastpath_cores == 0 {
            return Err(invalid("num_fastpath_cores", "must be at least 1"));
        }
        if self.guests.is_empty() {
            return Err(invalid("guests", "at least one guest is required"));
        }
        if !(self.duration_ms >= 0.0 && self.duration_ms.is_finite()) {
            return Err(invalid("duration_ms", "must be a non-negative number"));
        }
        if !(self.warmup_ms >= 0.0 && self.warmup_ms.is_finite()) {
            return Err(invalid("warmup_ms", "must be a non-negative number"));
        }
        positive("cpu_ghz", self.cpu_ghz)?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.mss == 0 {
            return Err(invalid("mss", "must be at least 1"));
        }
        if self.flow_buffer_bytes < self.mss {
            return Err(invalid(
                "flow_buffer_bytes",
                "must hold at least one segment",
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_cost_fraction) {
            return Err(invalid("drop_cost_fraction", "must lie in [0, 1]"));
        }
        positive("initial_rate_gbps", self.initial_rate_gbps)?;
        if self.nic_queue_packets == 0 {
            return Err(invalid("nic_queue_packets", "must be at least 1"));
        }
        if !(self.allocator.boost > 0.0 && self.allocator.boost <= 1.0) {
            return Err(invalid("allocator.boost", "must lie in (0, 1]"));
        }
        positive(
            "allocator.update_period_us",
            self.allocator.update_period_us,
        )?;
        if self.allocator.cap == Some(Cap::Bounded(0)) {
            return Err(invalid(
                "allocator.cap",
                "must be positive or \"unbounded\"",
            ));
        }
        if !(self.cost.jitter >= 0.0 && self.cost.jitter < 1.0) {
            return Err(invalid("cost.jitter", "must lie in [0, 1)"));
        }
        positive("link.bandwidth_gbps", self.link.bandwidth_gbps)?;
        if !(self.link.propagation_us >= 0.0 && self.link.propagation_us.is_finite()) {
            return Err(invalid(
                "link.propagation_us",
                "must be a non-negative number",
            ));
        }
        if !(0.0..1.0).contains(&self.link.loss_rate) {
            return Err(invalid("link.loss_rate", "must lie in [0, 1)"));
        }
        positive("slowpath.rto_us", self.slowpath.rto_us)?;
        positive("slowpath.rate_gbps", self.slowpath.rate_gbps)?;
        if self.slowpath.item_cycles == 0 {
            return Err(invalid("slowpath.item_cycles", "must be at least 1"));
        }
        for (i, g) in self.guests.iter().enumerate() {
            let field = |name: &str| format!("guests[{i}].{name}");
            positive(&field("weight"), g.weight)?;
            if g.message_size == 0 {
                return Err(invalid(field("message_size"), "must be at least 1"));
            }
            if g.response_size == Some(0) {
                return Err(invalid(field("response_size"), "must be at least 1"));
            }
            if g.connections > 20_000 {
                return Err(invalid(field("connections"), "at most 20000 per guest"));
            }
            if g.mode == WorkloadMode::Burst {
                let on = g
                    .on_ms
                    .ok_or_else(|| invalid(field("on_ms"), "required in burst mode"))?;
                let off = g
                    .off_ms
                    .ok_or_else(|| invalid(field("off_ms"), "required in burst mode"))?;
                positive(&field("on_ms"), on)?;
                if !(off >= 0.0 && off.is_finite()) {
                    return Err(invalid(field("off_ms"), "must be a non-negative number"));
                }
            }
        }
        Ok(())
    }

    fn validate_scenario(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        if !SCENARIOS.contains(&s.name.as_str()) {
            return Err(invalid(
                "scenario.name",
                format!(
                    "unknown scenario {:?}; expected one of {}",
                    s.name,
                    SCENARIOS.join(", ")
                ),
            ));
        }
        match s.name.as_str() {
            "isolation" if self.guests.len() != 2 => Err(invalid(
                "guests",
                "the isolation scenario needs exactly two guests: victim, then aggressor",
            )),
            "isolation" if s.sweep == IsolationSweep::MessageSize && s.points.contains(&0) => Err(
                invalid("scenario.points", "message sizes must be at least 1"),
            ),
            "efficiency" if s.max_guests == Some(0) => {
                Err(invalid("scenario.max_guests", "must be at least 1"))
            }
            "scalability" if s.guest_counts.contains(&0) => Err(invalid(
                "scenario.guest_counts",
                "guest counts must be at least 1",
            )),
            "sensitivity" => {
                for (i, v) in s.values.iter().enumerate() {
                    let field = format!("scenario.values[{i}]");
                    match (s.parameter, v) {
                        (SensitivityParameter::Cap, SweepValue::Keyword(k))
                            if k == "unbounded" || k == "default" => {}
                        (_, SweepValue::Keyword(k)) => {
                            return Err(invalid(field, format!("unexpected keyword {k:?}")));
                        }
                        (SensitivityParameter::Boost, SweepValue::Number(b))
                            if !(*b > 0.0 && *b <= 1.0) =>
                        {
                            return Err(invalid(field, "boost must lie in (0, 1]"));
                        }
                        (_, SweepValue::Number(n)) if !(*n > 0.0 && n.is_finite()) => {
                            return Err(invalid(field, "must be positive"));
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn cycles_per_us(&self) -> f64 {
        self.cpu_ghz * 1_000.0
    }

    pub fn us_to_cycles(&self, us: f64) -> Cycles {
        (us * self.cycles_per_us()).round() as Cycles
    }

    pub fn ms_to_cycles(&self, ms: f64) -> Cycles {
        self.us_to_cycles(ms * 1_000.0)
    }

    pub fn cycles_to_us(&self, cycles: Cycles) -> f64 {
        cycles as f64 / self.cycles_per_us()
    }

    /// Gbit/s to bytes per cycle.
    pub fn gbps_to_bytes_per_cycle(&self, gbps: f64) -> f64 {
        gbps / 8.0 / self.cpu_ghz
    }

    pub fn update_period(&self) -> Cycles {
        self.us_to_cycles(self.allocator.update_period_us).max(1)
    }

    /// The configured cap, or one update period of cycles.
    pub fn cap(&self) -> Cap {
        self.allocator
            .cap
            .unwrap_or(Cap::Bounded(self.update_period()))
    }

    pub fn allocator_config(&self) -> AllocatorConfig {
        AllocatorConfig {
            boost: self.allocator.boost,
            cap: self.cap(),
            update_period: self.update_period(),
            weights: self.guests.iter().map(|g| g.weight).collect(),
        }
    }
}
