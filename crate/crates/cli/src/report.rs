//! Scenario and report documents.

use std::path::PathBuf;

use cachevisor::attacks::{AesExtraction, AttackOutcome, Recovery};
use cachevisor::scenario::{SpawnReport, StepRecord};
use cachevisor::{GuestOp, SystemConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedAttack {
    Integrity,
    AesExtract,
}

/// Input of `run-scenario`. Either `ops` or `attack` drives the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub config: SystemConfig,
    /// Golden image as hex lines, relative to the scenario file.
    #[serde(default)]
    pub golden_image: Option<PathBuf>,
    #[serde(default)]
    pub ops: Vec<GuestOp>,
    #[serde(default)]
    pub attack: Option<NamedAttack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub check: String,
    pub seed: u64,
    pub passed: bool,
    pub witness: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Integrity { outcome: AttackOutcome },
    AesExtract { extraction: AesExtraction },
    CheckProps { checks: Vec<CheckEntry> },
    DemoSpawn { spawn: SpawnReport },
    Scenario { steps: Vec<StepRecord>, invariant_failures: usize },
    AnalyzeLog { entries: usize, recovery: Recovery },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: SystemConfig,
    /// Whether the run ended the way it is documented to end.
    pub expected: bool,
    pub body: Body,
}
