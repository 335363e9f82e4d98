use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use cachevisor::attacks::aes::{T4Layout, VICTIM_TABLES};
use cachevisor::attacks::{
    extract_with_log, recover_last_round_key, run_integrity_attack, EvictionLog, ExtractionConfig, Recovery,
    RecoveryConfig,
};
use cachevisor::dmmu::FaultInjection;
use cachevisor::harness::cache_lemmas::check_cache_lemmas;
use cachevisor::harness::obligations::check_obligations;
use cachevisor::harness::refcount::check_refcounts;
use cachevisor::harness::traces::{run_trace, Checks, InitialState, OpMix, TraceSpec};
use cachevisor::harness::{check_no_exfiltration, check_no_infiltration};
use cachevisor::scenario::{demo_spawn, run_ops};
use cachevisor::{Countermeasure, GoldenImage, SimError, System, SystemConfig};

use crate::report::{Body, CheckEntry, NamedAttack, Report, Scenario};
use crate::{AttackArg, Cli, Command, GlobalArgs, PropArg};

/// Table blocks used by `demo-spawn`.
const SPAWN_TABLE: u32 = 264;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Runs the command and emits its report. Returns whether the outcome was
/// the documented one.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    let g = &cli.global;
    let (command, report) = match &cli.command {
        Command::RunAttack { attack, log_out } => {
            let cfg = g.apply(&SystemConfig::default())?;
            let attack = match attack {
                AttackArg::Integrity => NamedAttack::Integrity,
                AttackArg::AesExtract => NamedAttack::AesExtract,
            };
            ("run-attack", attack_report(&cfg, attack, g.encryptions, log_out.as_deref())?)
        }
        Command::CheckProps { which, seeds, steps } => {
            let cfg = g.apply(&SystemConfig::default())?;
            let checks = check_props(*which, &cfg, *seeds, *steps)?;
            let expected = checks.iter().all(|c| c.passed);
            ("check-props", (expected, Body::CheckProps { checks }, cfg))
        }
        Command::DemoSpawn => {
            let cfg = g.apply(&SystemConfig::default())?;
            let spawn = demo_spawn(&cfg, SPAWN_TABLE)?;
            let expected = spawn.accepted && spawn.invariant_holds && spawn.rc_trace == [0, 1, 0];
            ("demo-spawn", (expected, Body::DemoSpawn { spawn }, cfg))
        }
        Command::RunScenario { file } => ("run-scenario", scenario(g, file)?),
        Command::AnalyzeLog { file } => {
            let cfg = g.apply(&SystemConfig::default())?;
            let log = EvictionLog::parse(&read(file)?)?;
            let layout = T4Layout::of(VICTIM_TABLES, &cfg.geometry);
            let recovery = recover_last_round_key(&log, &layout, &RecoveryConfig::default());
            let expected = matches!(recovery, Recovery::Recovered { .. });
            ("analyze-log", (expected, Body::AnalyzeLog { entries: log.entries.len(), recovery }, cfg))
        }
    };
    let (expected, body, config) = report;
    let report = Report { command: command.into(), config, expected, body };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &g.out {
        Some(path) => write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(expected)
}

fn attack_report(
    cfg: &SystemConfig,
    attack: NamedAttack,
    encryptions: usize,
    log_out: Option<&Path>,
) -> Result<(bool, Body, SystemConfig), CliError> {
    match attack {
        NamedAttack::Integrity => {
            let outcome = run_integrity_attack(cfg)?;
            // The baseline is expected to fall; every countermeasure to hold.
            let expected = outcome.bypassed == (cfg.countermeasure == Countermeasure::None);
            Ok((expected, Body::Integrity { outcome }, cfg.clone()))
        }
        NamedAttack::AesExtract => {
            let key: [u8; 16] = ChaCha8Rng::seed_from_u64(cfg.seed).gen();
            let ex = ExtractionConfig { max_encryptions: encryptions, ..ExtractionConfig::default() };
            let (extraction, log) = extract_with_log(cfg, &key, &ex)?;
            if let Some(path) = log_out {
                write(path, &log.to_lines())?;
            }
            // Only flushing on every victim entry closes this channel.
            let expected = extraction.success == (cfg.countermeasure != Countermeasure::FullFlush);
            Ok((expected, Body::AesExtract { extraction }, cfg.clone()))
        }
    }
}

fn scenario(g: &GlobalArgs, file: &Path) -> Result<(bool, Body, SystemConfig), CliError> {
    let sc: Scenario =
        serde_json::from_str(&read(file)?).map_err(|source| CliError::Json { path: file.into(), source })?;
    let mut cfg = g.apply(&sc.config)?;
    if let Some(attack) = sc.attack {
        if !sc.ops.is_empty() {
            return Err(CliError::Usage("a scenario has either ops or an attack, not both".into()));
        }
        return attack_report(&cfg, attack, g.encryptions, None);
    }
    let golden = match &sc.golden_image {
        Some(p) => {
            cfg.monitor = true;
            let path = file.parent().unwrap_or(Path::new(".")).join(p);
            Some(GoldenImage::parse(&read(&path)?)?)
        }
        None => None,
    };
    let mut sys = System::boot(&cfg)?;
    if golden.is_some() {
        sys.golden = golden;
    }
    let steps = run_ops(&mut sys, &sc.ops)?;
    let invariant_failures = steps.iter().filter(|s| s.invariant.is_some()).count();
    Ok((invariant_failures == 0, Body::Scenario { steps, invariant_failures }, cfg))
}

/// Histories per seed for the cache-lemma check.
const LEMMA_HISTORIES: usize = 250;

fn check_seed(which: PropArg, cfg: &SystemConfig, seed: u64, steps: usize) -> Result<Vec<CheckEntry>, SimError> {
    let cm = cfg.countermeasure;
    let init = if seed.is_multiple_of(2) { InitialState::Boot } else { InitialState::Spawned };
    let spec = TraceSpec { seed, steps, mix: OpMix::for_countermeasure(cm), init };
    let heavy = TraceSpec {
        mix: if cm == Countermeasure::None {
            OpMix::hypercall_heavy().cacheable_only()
        } else {
            OpMix::hypercall_heavy()
        },
        ..spec
    };
    let entry = |check: &str, passed: bool, witness: serde_json::Value| CheckEntry {
        check: check.into(),
        seed,
        passed,
        witness,
    };
    let all = which == PropArg::All;
    let mut out = Vec::new();
    if all || which == PropArg::Derivability {
        let checks = Checks { exfiltration: false, ..Checks::all() };
        let r = run_trace(cfg, &spec, &checks)?;
        out.push(entry("derivability", r.passed(), json(&r)));
    }
    if all || which == PropArg::Refcount {
        let r = check_refcounts(cfg, &heavy, FaultInjection::default())?;
        out.push(entry("refcount", r.passed(), json(&r)));
    }
    if all || which == PropArg::CacheLemmas {
        let r = check_cache_lemmas(seed, LEMMA_HISTORIES);
        out.push(entry("cache_lemmas", r.passed(), json(&r)));
    }
    if all || which == PropArg::Noninterference {
        let r = check_no_exfiltration(cfg, &spec)?;
        out.push(entry("no_exfiltration", r.passed(), json(&r)));
        let r = check_no_infiltration(cfg, &spec)?;
        out.push(entry("no_infiltration", r.passed(), json(&r)));
    }
    if all || which == PropArg::Obligations {
        for mode in Countermeasure::ALL {
            let c = SystemConfig { countermeasure: mode, ..cfg.clone() };
            let spec = TraceSpec { mix: OpMix::hypercall_heavy(), ..spec };
            let r = check_obligations(&c, &spec)?;
            out.push(entry(&format!("obligations:{}", json(&mode).as_str().unwrap_or("?")), r.passed(), json(&r)));
        }
    }
    Ok(out)
}

/// One worker thread per seed; results are concatenated in seed order.
fn check_props(which: PropArg, cfg: &SystemConfig, seeds: u64, steps: usize) -> Result<Vec<CheckEntry>, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let per_seed: Vec<Result<Vec<CheckEntry>, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            (0..seeds).map(|k| s.spawn(move || check_seed(which, cfg, cfg.seed + k, steps))).collect();
        handles.into_iter().map(|h| h.join().expect("check thread panicked")).collect()
    });
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}
