//! Eviction logs and last-round key recovery by non-elimination.
//!
//! For byte position `j` and ciphertext byte value `v`, every encryption
//! with `c[j] = v` used the `Te4` line holding `S[x] = v ^ K[j]`, so that
//! line is evicted in each of them. Intersecting their evicted sets gives
//! `E(j, v)`; the values held by those lines give the candidates
//! `T4(j, v)` for `v ^ K[j]`. Since `K[j] = v ^ t(j, v)` for every `v`, the
//! candidate sets are shrunk against each other until one is a singleton.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::PhysAddr;
use crate::attacks::aes::{invert_key_schedule, AesVariant, AesVictim, Block, T4Layout, VICTIM_TABLES};
use crate::attacks::probe::{prime, probe, ProbeConfig, ProbeStrategy, PROBE_BUFFER};
use crate::dmmu::Countermeasure;
use crate::error::SimError;
use crate::system::{System, SystemConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub ct: Block,
    pub evicted: BTreeSet<(usize, usize)>,
}

impl LogEntry {
    pub fn evicted_sets(&self) -> BTreeSet<usize> {
        self.evicted.iter().map(|&(s, _)| s).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionLog {
    pub entries: Vec<LogEntry>,
}

impl EvictionLog {
    /// One line per entry: the ciphertext in hex, then `set:way` pairs.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            for b in e.ct {
                let _ = write!(out, "{b:02x}");
            }
            for (s, w) in &e.evicted {
                let _ = write!(out, " {s}:{w}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let bad = |n: usize, what: &str| SimError::Parse(format!("line {}: {what}", n + 1));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let hex = parts.next().unwrap_or_default();
            if hex.len() != 32 {
                return Err(bad(n, "ciphertext must be 32 hex digits"));
            }
            let mut ct = [0u8; 16];
            for (i, b) in ct.iter_mut().enumerate() {
                *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad(n, "bad hex"))?;
            }
            let mut evicted = BTreeSet::new();
            for p in parts {
                let (s, w) = p.split_once(':').ok_or_else(|| bad(n, "expected set:way"))?;
                evicted.insert((s.parse().map_err(|_| bad(n, "bad set"))?, w.parse().map_err(|_| bad(n, "bad way"))?));
            }
            entries.push(LogEntry { ct, evicted });
        }
        Ok(EvictionLog { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Lines evicted in at least this fraction of entries are ignored.
    pub noise_threshold: f64,
    pub filter_noise: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig { noise_threshold: 0.9, filter_noise: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Recovery {
    Recovered {
        last_round_key: Block,
    },
    /// Byte positions with no single surviving candidate.
    Insufficient {
        byte_positions: Vec<usize>,
    },
}

/// Per byte position, the `E(j, v)` line sets and the shrunk `T4(j, v)`
/// candidates for each observed `v`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecoveryState {
    pub lines: Vec<BTreeMap<u8, BTreeSet<usize>>>,
    pub candidates: Vec<BTreeMap<u8, BTreeSet<u8>>>,
    pub noisy_sets: BTreeSet<usize>,
}

pub fn analyze(log: &EvictionLog, layout: &T4Layout, cfg: &RecoveryConfig) -> KeyRecoveryState {
    let t4: BTreeSet<usize> = layout.sets().collect();
    let values: BTreeMap<usize, &[u8]> = layout.lines.iter().map(|l| (l.set, l.values.as_slice())).collect();
    let observed: Vec<BTreeSet<usize>> =
        log.entries.iter().map(|e| e.evicted_sets().intersection(&t4).copied().collect()).collect();

    let mut noisy_sets = BTreeSet::new();
    if cfg.filter_noise && !observed.is_empty() {
        for &s in &t4 {
            let hits = observed.iter().filter(|o| o.contains(&s)).count();
            if hits as f64 >= cfg.noise_threshold * observed.len() as f64 {
                noisy_sets.insert(s);
            }
        }
    }

    let mut state = KeyRecoveryState { noisy_sets, ..KeyRecoveryState::default() };
    for j in 0..16 {
        let mut e: BTreeMap<u8, BTreeSet<usize>> = BTreeMap::new();
        for (entry, o) in log.entries.iter().zip(&observed) {
            let o: BTreeSet<usize> = o.difference(&state.noisy_sets).copied().collect();
            e.entry(entry.ct[j]).and_modify(|acc| acc.retain(|s| o.contains(s))).or_insert(o);
        }
        let mut t: BTreeMap<u8, BTreeSet<u8>> = e
            .iter()
            .filter(|(_, lines)| !lines.is_empty())
            .map(|(&v, lines)| (v, lines.iter().flat_map(|s| values[s].iter().copied()).collect()))
            .collect();
        shrink(&mut t);
        state.lines.push(e);
        state.candidates.push(t);
    }
    state
}

/// Pairwise shrinking to the fixpoint: `t` survives in `T4(v)` only if
/// `t ^ v ^ v'` is in `T4(v')` for every other observed `v'`. The fixpoint
/// keeps exactly the `t` whose key guess `v ^ t` is consistent with every
/// set, so it is computed through that intersection.
fn shrink(t: &mut BTreeMap<u8, BTreeSet<u8>>) {
    let mut keys = [true; 256];
    for (&v, set) in t.iter() {
        let mut here = [false; 256];
        for &x in set {
            here[(v ^ x) as usize] = true;
        }
        for k in 0..256 {
            keys[k] &= here[k];
        }
    }
    for (&v, set) in t.iter_mut() {
        set.retain(|&x| keys[(v ^ x) as usize]);
    }
}

/// Recovers the last round key. Only ciphertexts and evicted lines are
/// consulted.
pub fn recover_last_round_key(log: &EvictionLog, layout: &T4Layout, cfg: &RecoveryConfig) -> Recovery {
    let state = analyze(log, layout, cfg);
    let mut key = [0u8; 16];
    let mut missing = Vec::new();
    for (j, t) in state.candidates.iter().enumerate() {
        let guesses: BTreeSet<u8> = t.iter().flat_map(|(&v, set)| set.iter().map(move |&x| v ^ x)).collect();
        match (guesses.len(), t.values().any(|s| s.len() == 1)) {
            (1, true) => key[j] = *guesses.first().unwrap(),
            _ => missing.push(j),
        }
    }
    if missing.is_empty() {
        Recovery::Recovered { last_round_key: key }
    } else {
        Recovery::Insufficient { byte_positions: missing }
    }
}

/// Runs `n` rounds of prime, victim encryption of a random plaintext, probe.
/// With [`Countermeasure::FullFlush`] the cache is flushed on every entry
/// into the victim. `noise_reads` random lines of hypervisor memory below
/// the victim tables are read after each encryption.
pub fn collect_log(
    sys: &mut System,
    victim: &AesVictim,
    probe_cfg: &ProbeConfig,
    n: usize,
    noise_reads: usize,
    rng: &mut impl Rng,
) -> Result<EvictionLog, SimError> {
    let mut log = EvictionLog::default();
    let line = sys.machine.cache.geometry().line_bytes();
    for _ in 0..n {
        prime(sys, probe_cfg)?;
        let pt: Block = rng.gen();
        if sys.hyp.countermeasure == Countermeasure::FullFlush {
            let m = &mut sys.machine;
            m.cache.flush_all(&mut m.mem);
        }
        let ct = victim.encrypt(&mut sys.machine, &pt);
        for _ in 0..noise_reads {
            sys.machine.cached_read(PhysAddr(rng.gen_range(0..VICTIM_TABLES.0 / line) * line));
        }
        let evicted = probe(sys, probe_cfg)?;
        log.entries.push(LogEntry { ct, evicted });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AesExtraction {
    pub key: Block,
    pub recovered_key: Option<Block>,
    pub success: bool,
    pub encryptions_used: usize,
    /// Last-round key bytes determined and correct at the end of the run.
    pub bytes_recovered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub max_encryptions: usize,
    /// Encryptions between analysis attempts.
    pub batch: usize,
    pub strategy: ProbeStrategy,
    pub variant: AesVariant,
    pub recovery: RecoveryConfig,
    /// Extra victim reads of random hypervisor lines per encryption.
    pub noise_reads: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            max_encryptions: 20_000,
            batch: 10,
            strategy: ProbeStrategy::EvictionRobust,
            variant: AesVariant::TTable,
            recovery: RecoveryConfig::default(),
            noise_reads: 0,
        }
    }
}

/// Prepares a booted system with the victim installed and a probe over the
/// `Te4` sets.
pub fn setup_aes(
    cfg: &SystemConfig,
    key: &Block,
    ex: &ExtractionConfig,
) -> Result<(System, AesVictim, ProbeConfig, T4Layout), SimError> {
    let mut cfg = cfg.clone();
    cfg.history_limit = cfg.history_limit.or(Some(256));
    let mut sys = System::boot(&cfg)?;
    let victim = AesVictim::new(key, VICTIM_TABLES, ex.variant);
    victim.install(&mut sys.machine);
    let layout = T4Layout::of(VICTIM_TABLES, sys.machine.cache.geometry());
    let probe_cfg = ProbeConfig::new(&sys, layout.sets(), PROBE_BUFFER, ex.strategy)?;
    Ok((sys, victim, probe_cfg, layout))
}

/// Collects in batches until the analyzer recovers all 16 bytes or the
/// budget runs out, then inverts the key schedule.
pub fn run_aes_extraction(cfg: &SystemConfig, key: &Block, ex: &ExtractionConfig) -> Result<AesExtraction, SimError> {
    extract_with_log(cfg, key, ex).map(|(r, _)| r)
}

/// [`run_aes_extraction`], also returning the eviction log it analyzed.
pub fn extract_with_log(
    cfg: &SystemConfig,
    key: &Block,
    ex: &ExtractionConfig,
) -> Result<(AesExtraction, EvictionLog), SimError> {
    let (mut sys, victim, probe_cfg, layout) = setup_aes(cfg, key, ex)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae5);
    let mut log = EvictionLog::default();
    let truth = victim.last_round_key();
    let mut recovery = Recovery::Insufficient { byte_positions: (0..16).collect() };
    while log.entries.len() < ex.max_encryptions {
        let n = ex.batch.max(1).min(ex.max_encryptions - log.entries.len());
        log.entries.extend(collect_log(&mut sys, &victim, &probe_cfg, n, ex.noise_reads, &mut rng)?.entries);
        recovery = recover_last_round_key(&log, &layout, &ex.recovery);
        if matches!(recovery, Recovery::Recovered { .. }) {
            break;
        }
    }
    let (recovered_key, bytes_recovered) = match &recovery {
        Recovery::Recovered { last_round_key } => {
            (Some(invert_key_schedule(last_round_key)), (0..16).filter(|&j| last_round_key[j] == truth[j]).count())
        }
        Recovery::Insufficient { .. } => {
            let state = analyze(&log, &layout, &ex.recovery);
            let n = (0..16)
                .filter(|&j| {
                    let g: BTreeSet<u8> =
                        state.candidates[j].iter().flat_map(|(&v, s)| s.iter().map(move |&x| v ^ x)).collect();
                    g.len() == 1 && g.contains(&truth[j])
                })
                .count();
            (None, n)
        }
    };
    let r = AesExtraction {
        key: *key,
        success: recovered_key == Some(*key),
        recovered_key,
        encryptions_used: log.entries.len(),
        bytes_recovered,
    };
    Ok((r, log))
}
