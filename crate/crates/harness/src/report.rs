//! Report assembly and output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::scenario::PointResult;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    /// The configuration the run started from, before sweep expansion.
    pub config: SimConfig,
    pub points: Vec<PointResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// One CSV row per guest per sweep point. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub seed: u64,
    pub point: usize,
    pub label: String,
    pub guest: u32,
    pub weight: f64,
    pub connections: usize,
    pub message_size: u32,
    pub response_size: u32,
    pub throughput_rps: f64,
    pub goodput_bytes_per_s: f64,
    pub latency_samples: u64,
    pub p50_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub p999_us: Option<f64>,
    pub rx_drops: u64,
    pub slowpath_events: u64,
    pub cycles_charged: u64,
    pub issued: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub per_core_throughput_rps: f64,
    pub mean_core_utilization: f64,
    pub accounted_fraction: f64,
    pub ledger_ok: bool,
}

impl Report {
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let m = &p.metrics;
            let utilization = if m.cores.is_empty() {
                0.0
            } else {
                m.cores.iter().map(|c| c.utilization).sum::<f64>() / m.cores.len() as f64
            };
            for g in &m.guests {
                rows.push(CsvRow {
                    scenario: self.scenario.clone(),
                    seed: self.seed,
                    point: i,
                    label: p.label.clone(),
                    guest: g.guest,
                    weight: g.weight,
                    connections: g.connections,
                    message_size: g.message_size,
                    response_size: g.response_size,
                    throughput_rps: g.throughput_rps,
                    goodput_bytes_per_s: g.goodput_bytes_per_s,
                    latency_samples: g.latency.samples,
                    p50_us: g.latency.p50_us,
                    p99_us: g.latency.p99_us,
                    p999_us: g.latency.p999_us,
                    rx_drops: g.rx_drops,
                    slowpath_events: g.slowpath_events,
                    cycles_charged: g.cycles_charged,
                    issued: g.issued,
                    completed: g.completed,
                    in_flight: g.in_flight,
                    per_core_throughput_rps: m.per_core_throughput_rps,
                    mean_core_utilization: utilization,
                    accounted_fraction: m.accounted_fraction,
                    ledger_ok: m.ledger_ok,
                });
            }
        }
        rows
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Output(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            writer
                .serialize(row)
                .map_err(|e| HarnessError::Output(e.to_string()))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| HarnessError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Output(e.to_string()))
    }
}

pub fn emit_report(report: &Report, format: Format, path: &Path) -> Result<(), HarnessError> {
    let text = match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    let io = |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(text.as_bytes()).map_err(io)?;
    out.flush().map_err(io)
}
