//! Synthetic training, resolution transfer, micro-benchmarks and the
//! aggregated verification run, all reporting through [`RunReport`].

pub mod bench;
pub mod data;
pub mod train;
pub mod verify;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::Result;

pub use bench::{bench, bench_all, BenchOp, BenchSizes};
pub use data::{upscale_nearest, Dataset, SyntheticTask};
pub use train::{evaluate, resolution_transfer_check, train_toy, TrainConfig, TrainOutcome};
pub use verify::{verify_all, verify_all_with, RestoreFn};

/// JSON Schema for [`RunReport`], shipped with the repository.
pub const RUN_REPORT_SCHEMA: &str = include_str!("../../../../schemas/run_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Machine-readable outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn new(command: &str, config: impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            metrics: Map::new(),
            checks: Vec::new(),
            passed: true,
            wall_clock_s: 0.0,
        }
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    /// Stamps the elapsed time since `start`.
    pub fn finish(mut self, start: Instant) -> Self {
        self.wall_clock_s = start.elapsed().as_secs_f64();
        self
    }

    /// The report with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
