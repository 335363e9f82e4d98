//! No-exfiltration (single trace) and no-infiltration (two traces).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{PhysAddr, BLOCK_WORDS};
use crate::error::SimError;
use crate::harness::traces::{initial_system, run_trace, Checks, OpGenerator, TraceReport, TraceSpec};
use crate::system::{System, SystemConfig};

/// Guest steps never change the secure observation.
pub fn check_no_exfiltration(cfg: &SystemConfig, spec: &TraceSpec) -> Result<TraceReport, SimError> {
    let checks =
        Checks { derivability: false, mmu_integrity: false, exfiltration: true, invariant_every: None, samples: 0 };
    run_trace(cfg, spec, &checks)
}

/// First difference in what the guest can observe: registers, coprocessor
/// registers, guest memory, and the cache projection (per-set tag layout,
/// dirtiness, recency queue, and the contents of lines in guest memory).
pub fn guest_observation_diff(a: &System, b: &System) -> Option<String> {
    let (ma, mb) = (&a.machine, &b.machine);
    if ma.regs != mb.regs || ma.mode != mb.mode {
        return Some("registers differ".into());
    }
    if ma.coregs != mb.coregs {
        return Some("coprocessor registers differ".into());
    }
    let g = a.hyp.guest_mem;
    if let Some(blk) = ma.mem.changed_blocks(&mb.mem).find(|&blk| g.contains(blk)) {
        return Some(format!("guest block {blk} differs"));
    }
    let geometry = ma.cache.geometry();
    for (i, (sa, sb)) in ma.cache.sets().iter().zip(mb.cache.sets()).enumerate() {
        if sa.queue() != sb.queue() {
            return Some(format!("set {i}: recency queue differs"));
        }
        for (wa, wb) in sa.ways().iter().zip(sb.ways()) {
            let same = match (wa, wb) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.tag == y.tag
                        && x.line.dirty == y.line.dirty
                        && (!g.contains(geometry.line_base(i, x.tag).block()) || x.line.data == y.line.data)
                }
                _ => false,
            };
            if !same {
                return Some(format!("set {i}: line layout differs"));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum InfiltrationVerdict {
    /// Guest observations stayed equal for every step.
    Equal {
        steps: usize,
    },
    /// The two initial states were not guest-equivalent.
    Skipped {
        reason: String,
    },
    Diverged {
        step: usize,
        detail: String,
    },
}

impl InfiltrationVerdict {
    /// Skipped runs do not count as failures.
    pub fn passed(&self) -> bool {
        !matches!(self, InfiltrationVerdict::Diverged { .. })
    }
}

/// Runs the same op stream (drawn against the first system) on both states
/// and compares guest observations after every step.
pub fn check_no_infiltration_pair(
    mut s1: System,
    mut s2: System,
    spec: &TraceSpec,
) -> Result<InfiltrationVerdict, SimError> {
    if let Some(reason) = guest_observation_diff(&s1, &s2) {
        return Ok(InfiltrationVerdict::Skipped { reason });
    }
    let mut gen = OpGenerator::new(spec.seed, spec.mix, &s1);
    for step in 0..spec.steps {
        let op = gen.next_op(&s1);
        let r1 = s1.step(&op)?;
        let r2 = s2.step(&op)?;
        if r1 != r2 {
            return Ok(InfiltrationVerdict::Diverged { step, detail: format!("{r1:?} vs {r2:?}") });
        }
        if let Some(detail) = guest_observation_diff(&s1, &s2) {
            return Ok(InfiltrationVerdict::Diverged { step, detail });
        }
    }
    Ok(InfiltrationVerdict::Equal { steps: spec.steps })
}

/// Second state differs from the first only in memory outside guest memory.
pub fn check_no_infiltration(cfg: &SystemConfig, spec: &TraceSpec) -> Result<InfiltrationVerdict, SimError> {
    let s1 = initial_system(cfg, spec.init)?;
    let mut s2 = s1.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1f11);
    let g = s2.hyp.guest_mem;
    for b in (0..s2.hyp.num_blocks()).filter(|&b| !g.contains(b)) {
        for i in 0..BLOCK_WORDS {
            s2.machine.mem.write(PhysAddr::of_block(b, i), rng.gen());
        }
    }
    check_no_infiltration_pair(s1, s2, spec)
}
