use std::path::PathBuf;

use harness::config::{GuestSection, WorkloadMode};
use harness::{run_scenario, HarnessError, Report, SimConfig};
use sharedstack::packet::HEADER_OVERHEAD;
use sharedstack::{CostModel, TaskKind};

fn config(name: &str) -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"));
    SimConfig::load(&path).unwrap()
}

fn echo(duration_ms: f64) -> SimConfig {
    SimConfig {
        duration_ms,
        ..config("echo")
    }
}

fn field_of(result: Result<Report, HarnessError>) -> String {
    match result {
        Err(HarnessError::Config(e)) => e.field,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn same_seed_gives_identical_reports() {
    let cfg = config("isolation_connections");
    let a = run_scenario(&cfg).unwrap().to_json().unwrap();
    let b = run_scenario(&cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn json_round_trips_and_echoes_the_config() {
    let cfg = SimConfig {
        seed: 77,
        ..echo(5.0)
    };
    let report = run_scenario(&cfg).unwrap();
    assert_eq!((report.seed, &report.config), (77, &cfg));
    let back: Report = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn csv_has_one_row_per_guest_and_point() {
    let report = run_scenario(&config("short_lived")).unwrap();
    let text = report.to_csv().unwrap();
    let expected: usize = report.points.iter().map(|p| p.metrics.guests.len()).sum();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        &header[..5],
        ["scenario", "seed", "point", "label", "guest"]
    );
    assert_eq!(header.last().map(String::as_str), Some("ledger_ok"));
    assert_eq!(reader.records().count(), expected);
    assert_eq!(expected, 4 * 2);
}

#[test]
fn isolation_sweep_gives_one_row_per_point() {
    let mut cfg = config("isolation_connections");
    cfg.guests[0].connections = 2;
    cfg.scenario.points = vec![2, 10, 20];
    cfg.scenario.include_solo = false;
    cfg.duration_ms = 5.0;
    let report = run_scenario(&cfg).unwrap();
    let labels: Vec<&str> = report.points.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "aggressor_connections=2",
            "aggressor_connections=10",
            "aggressor_connections=20"
        ]
    );
    assert_eq!(report.csv_rows().iter().filter(|r| r.guest == 0).count(), 3);
}

#[test]
fn zero_duration_run_is_empty() {
    let report = run_scenario(&echo(0.0)).unwrap();
    let m = &report.points[0].metrics;
    assert_eq!(m.throughput_rps, 0.0);
    let latency = &m.guests[0].latency;
    assert_eq!(
        (latency.samples, latency.p50_us, latency.p99_us),
        (0, None, None)
    );
    assert!(m.ledger.balanced());
}

/// One 64-byte request and its echo cross the wire twice each way and cost
/// one POLL, one TX and one RX on the host.
#[test]
fn echo_latency_matches_the_cost_model() {
    let cfg = config("echo");
    let ghz = cfg.cpu_ghz;
    let cost = CostModel::default();
    let propagation = (cfg.link.propagation_us * ghz * 1e3).round() as u64;
    let bytes_per_cycle = cfg.link.bandwidth_gbps / 8.0 / ghz;
    let serialization = (f64::from(64 + HEADER_OVERHEAD) / bytes_per_cycle).ceil() as u64;
    let cpu = cost.task_cost(TaskKind::Poll, 0)
        + cost.task_cost(TaskKind::Tx, 64)
        + cost.task_cost(TaskKind::Rx, 64);
    let base = 2 * propagation + 2 * serialization + cpu;
    assert_eq!(base, 42_690);

    let report = run_scenario(&cfg).unwrap();
    let latency = &report.points[0].metrics.guests[0].latency;
    let p50 = (latency.p50_us.unwrap() * ghz * 1e3).round() as u64;
    // Above the base only by where the request lands in an idle poll loop.
    let idle_iteration = cost.empty_poll_cost() * 3;
    assert!(
        p50 >= base && p50 < base + 2 * idle_iteration,
        "p50 {p50} cycles, base {base}"
    );
    assert_eq!(
        latency.p50_us, latency.p99_us,
        "an idle system has no jitter"
    );
}

#[test]
fn closed_loop_keeps_one_request_per_connection() {
    let mut cfg = config("fairness");
    cfg.duration_ms = 5.0;
    for g in &mut cfg.guests {
        g.connections = 500;
    }
    let report = run_scenario(&cfg).unwrap();
    for g in &report.points[0].metrics.guests {
        assert!(g.in_flight <= 500);
        assert_eq!(g.issued, g.completed + g.in_flight);
        assert!(g.completed > 0);
    }
}

#[test]
fn burst_guest_is_silent_while_off() {
    let mut cfg = config("sensitivity");
    cfg.scenario.values.truncate(1);
    let report = run_scenario(&cfg).unwrap();
    let aggressor = &report.points[0].metrics.guests[1];
    assert!(aggressor.issued > 0);
    assert_eq!(aggressor.issued_while_off, 0);
}

#[test]
fn zero_aggressor_connections_equals_solo() {
    let mut cfg = config("isolation_connections");
    cfg.scenario.points = vec![0];
    cfg.duration_ms = 10.0;
    let report = run_scenario(&cfg).unwrap();
    let (solo, zero) = (&report.points[0], &report.points[1]);
    assert_eq!(
        (solo.label.as_str(), zero.label.as_str()),
        ("solo", "aggressor_connections=0")
    );
    let (a, b) = (&solo.metrics.guests[0], &zero.metrics.guests[0]);
    assert_eq!(a.latency, b.latency);
    assert_eq!(
        (a.throughput_rps, a.completed),
        (b.throughput_rps, b.completed)
    );
}

#[test]
fn ablation_hurts_the_victim_at_the_largest_point() {
    let mut cfg = config("isolation_connections");
    cfg.scenario.points = vec![1000];
    cfg.scenario.include_solo = false;
    let gated = run_scenario(&cfg).unwrap();
    cfg.ablate_no_budget = true;
    let ablated = run_scenario(&cfg).unwrap();
    let p99 = |r: &Report| r.points[0].metrics.guests[0].latency.p99_us.unwrap();
    assert!(
        p99(&ablated) > p99(&gated),
        "{} vs {}",
        p99(&ablated),
        p99(&gated)
    );
}

#[test]
fn every_shipped_config_validates() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            SimConfig::load(&path).unwrap().validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn validation_names_the_offending_field() {
    let mut cfg = config("isolation");
    cfg.guests.push(GuestSection::default());
    assert_eq!(field_of(run_scenario(&cfg)), "guests");

    let mut cfg = config("isolation");
    cfg.guests[1].weight = -1.0;
    assert_eq!(field_of(run_scenario(&cfg)), "guests[1].weight");

    let mut cfg = config("echo");
    cfg.scenario.name = "nope".into();
    assert_eq!(field_of(run_scenario(&cfg)), "scenario.name");

    let mut cfg = config("echo");
    cfg.guests[0].mode = WorkloadMode::Burst;
    assert!(field_of(run_scenario(&cfg)).starts_with("guests[0]."));
}
