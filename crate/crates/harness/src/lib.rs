//! Virtual-time simulation harness for the `sharedstack` dataplane.
//!
//! [`run_scenario`] validates a [`SimConfig`], expands its scenario into
//! sweep points, runs each point as an independent deterministic
//! simulation, and returns a [`Report`].

pub mod config;
pub mod metrics;
pub mod remote;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod workload;

pub use config::{ConfigError, SimConfig};
pub use metrics::RunMetrics;
pub use report::{emit_report, Format, Report};
pub use sim::Simulation;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode report: {0}")]
    Output(String),
}

impl HarnessError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Parse(_) | HarnessError::Config(_) => 2,
            HarnessError::Invariant(_) => 3,
            HarnessError::Io { .. } | HarnessError::Output(_) => 1,
        }
    }
}

pub fn run_scenario(config: &SimConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let points = scenario::run_points(scenario::expand(config))?;
    Ok(Report {
        scenario: config.scenario.name.clone(),
        seed: config.seed,
        config: config.clone(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let config = ConfigError {
            field: "seed".into(),
            message: "x".into(),
        };
        let io = HarnessError::Io {
            path: "p".into(),
            source: std::io::Error::other("x"),
        };
        assert_eq!(HarnessError::Parse("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::from(config).exit_code(), 2);
        assert_eq!(HarnessError::Invariant("x".into()).exit_code(), 3);
        assert_eq!(io.exit_code(), 1);
        assert_eq!(HarnessError::Output("x".into()).exit_code(), 1);
    }
}
