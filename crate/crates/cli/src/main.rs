//! `cachevisor`: runs attacks, property checks and scenarios against the
//! simulator and writes a JSON report.
//!
//! Exit codes: 0 when the run ends as documented, 1 when it does not, 2 on
//! usage or configuration errors.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cachevisor::{CacheGeometry, Countermeasure, Indexing};

#[derive(Parser, Debug)]
#[command(
    name = "cachevisor",
    version,
    about = "Cache-aware hypervisor simulator: attacks, countermeasures and property checks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    #[arg(long, global = true)]
    pub cache_sets: Option<usize>,
    #[arg(long, global = true)]
    pub cache_ways: Option<usize>,
    #[arg(long, global = true)]
    pub line_bytes: Option<usize>,
    #[arg(long, global = true)]
    pub mem_mb: Option<u32>,
    #[arg(long, global = true, value_enum)]
    pub countermeasure: Option<CmArg>,
    /// Enable the W⊕X code-signing monitor.
    #[arg(long, global = true)]
    pub monitor: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Encryption budget for `aes-extract`.
    #[arg(long, global = true, default_value_t = 20_000)]
    pub encryptions: usize,
    /// Report destination; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CmArg {
    None,
    Acpt,
    Selective,
    Flush,
    Detect,
}

impl From<CmArg> for Countermeasure {
    fn from(c: CmArg) -> Self {
        match c {
            CmArg::None => Countermeasure::None,
            CmArg::Acpt => Countermeasure::Acpt,
            CmArg::Selective => Countermeasure::SelectiveEvict,
            CmArg::Flush => Countermeasure::FullFlush,
            CmArg::Detect => Countermeasure::IncoherencyDetect,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a named attack.
    RunAttack {
        #[arg(value_enum)]
        attack: AttackArg,
        /// Also write the eviction log (`aes-extract` only).
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Run randomized property checks.
    CheckProps {
        #[arg(value_enum, default_value = "all")]
        which: PropArg,
        /// Seeds, starting at `--seed`.
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        /// Steps per trace.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Run the process-spawn example.
    DemoSpawn,
    /// Run a JSON scenario file.
    RunScenario { file: PathBuf },
    /// Recover the last round key from an eviction log file.
    AnalyzeLog { file: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    Integrity,
    AesExtract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PropArg {
    All,
    Derivability,
    Refcount,
    CacheLemmas,
    Noninterference,
    Obligations,
}

impl GlobalArgs {
    /// Overrides `base` with the flags that were given.
    pub fn apply(&self, base: &cachevisor::SystemConfig) -> Result<cachevisor::SystemConfig, cachevisor::SimError> {
        let mut cfg = base.clone();
        let g = cfg.geometry;
        cfg.geometry = CacheGeometry::new(
            self.cache_sets.unwrap_or(g.num_sets),
            self.cache_ways.unwrap_or(g.ways),
            self.line_bytes.unwrap_or(g.line_words * 4),
            Indexing::Physical,
        )?;
        cfg.geometry.indexing = g.indexing;
        if let Some(mb) = self.mem_mb {
            cfg.mem_mb = mb;
        }
        if let Some(cm) = self.countermeasure {
            cfg.countermeasure = cm.into();
        }
        cfg.monitor |= self.monitor;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
