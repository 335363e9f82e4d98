//! The alias-driven integrity attack on direct paging.
//!
//! The guest lets the hypervisor validate a harmless L1 table, which leaves
//! clean copies of it in the cache, then rewrites the table in memory through
//! an uncacheable alias. A second validation reads the stale cached copy and
//! accepts; once the stale lines are evicted the MMU walks the unvalidated
//! memory content.

use serde::{Deserialize, Serialize};

use crate::addr::{AccessReq, Mode, PhysAddr, VirtAddr, BLOCK_WORDS};
use crate::dmmu::{Hypercall, Rejection, Rights, Verdict};
use crate::error::SimError;
use crate::mmu::{translate, AccessPerm, L1Descriptor};
use crate::monitor::{self, GoldenImage};
use crate::system::{scratch_va, va_cached, System, SystemConfig, BOOT_L1, BOOT_L2, CODE_BLOCKS, CODE_FIRST};

/// The four blocks of the attacker's L1 table.
pub const ATTACK_L1: u32 = 264;
/// L1 entry mapping hypervisor memory (section 0) user read-write.
pub const EVIL_RW_IDX: u32 = 0x7fe;
/// L1 entry mapping section 3 user read-write and executable.
pub const EVIL_EXEC_IDX: u32 = 0x7ff;
/// Marker the attacker stores into hypervisor memory once the bypass works.
pub const EVIL_MARK: u32 = 0x0bad_c0de;
const EVIL_MARK_PA: PhysAddr = PhysAddr(0x40);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackStep {
    pub label: String,
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// The MMU translates through table content that differs from what the
    /// last accepted validation read.
    pub bypassed: bool,
    /// Some request was rejected by the W⊕X monitor.
    pub monitor_detected: bool,
    /// Integrity of the executable working set at the end of the run,
    /// against the boot code signatures.
    pub final_integrity: bool,
    /// The guest reached hypervisor memory through the unvalidated entry.
    pub evil_write_succeeded: bool,
    /// First rejection that stopped the attack, if any.
    pub rejection: Option<Rejection>,
    pub steps: Vec<AttackStep>,
}

struct Run {
    sys: System,
    steps: Vec<AttackStep>,
    rejection: Option<Rejection>,
}

impl Run {
    fn call(&mut self, label: &str, call: Hypercall) -> bool {
        let v = self.sys.hypercall(&call);
        self.steps.push(AttackStep { label: label.into(), verdict: Some(v) });
        if let Some(r) = v.rejection() {
            self.rejection = Some(r);
            return false;
        }
        true
    }

    fn note(&mut self, label: &str) {
        self.steps.push(AttackStep { label: label.into(), verdict: None });
    }

    fn map_scratch(&mut self) -> bool {
        (0..4).all(|k| {
            self.call(
                &format!("map scratch page {k} uncacheable over block {}", ATTACK_L1 + k),
                Hypercall::MapL2 {
                    bl: BOOT_L2,
                    idx: 256 + k,
                    target: ATTACK_L1 + k,
                    rights: Rights::user_rw().uncached(),
                },
            )
        })
    }

    fn unmap_scratch(&mut self) -> bool {
        (0..4).all(|k| self.call(&format!("unmap scratch page {k}"), Hypercall::UnmapL2 { bl: BOOT_L2, idx: 256 + k }))
    }

    fn table_view(&self) -> Vec<u32> {
        (0..4 * BLOCK_WORDS).map(|i| self.sys.machine.core_view_unchecked(PhysAddr::of_block(ATTACK_L1, i))).collect()
    }
}

fn boot_golden(sys: &System) -> GoldenImage {
    sys.golden.clone().unwrap_or_else(|| {
        GoldenImage::new((CODE_FIRST..CODE_FIRST + CODE_BLOCKS).map(|b| {
            let words: Vec<u32> = (0..BLOCK_WORDS).map(|i| sys.machine.mem.read(PhysAddr::of_block(b, i))).collect();
            monitor::sig(&words)
        }))
    })
}

/// Runs the attack on a fresh system booted from `cfg`.
pub fn run_integrity_attack(cfg: &SystemConfig) -> Result<AttackOutcome, SimError> {
    let sys = System::boot(cfg)?;
    let golden = boot_golden(&sys);
    let mut run = Run { sys, steps: Vec::new(), rejection: None };
    let mut validated: Option<Vec<u32>> = None;
    let switched = attack(&mut run, &mut validated)?;

    let bypassed = switched && validated.as_ref().is_some_and(|v| *v != run.table_view());
    let mut evil_write_succeeded = false;
    if switched {
        let va = VirtAddr((EVIL_RW_IDX << 20) | EVIL_MARK_PA.0);
        if translate(&run.sys.machine, va, Mode::NonPrivileged, AccessReq::Write).is_ok() {
            run.sys.write(va, EVIL_MARK)?;
            run.note("write hypervisor memory through the unvalidated entry");
            evil_write_succeeded = run.sys.machine.core_view(EVIL_MARK_PA)? == EVIL_MARK;
        }
    }
    let monitor_detected =
        run.steps.iter().any(|s| matches!(s.verdict.and_then(|v| v.rejection()), Some(Rejection::Monitor { .. })));
    Ok(AttackOutcome {
        bypassed,
        monitor_detected,
        final_integrity: monitor::integrity(&golden, &run.sys.machine),
        evil_write_succeeded,
        rejection: run.rejection,
        steps: run.steps,
    })
}

/// Returns whether the final switch to the attacker's table happened.
fn attack(run: &mut Run, validated: &mut Option<Vec<u32>>) -> Result<bool, SimError> {
    for k in 0..4 {
        if !run.call(
            &format!("release boot mapping of block {}", ATTACK_L1 + k),
            Hypercall::UnmapL2 { bl: BOOT_L2, idx: ATTACK_L1 + k - 256 },
        ) {
            return Ok(false);
        }
    }

    // A harmless copy of the boot table, written to memory only.
    if !run.map_scratch() {
        return Ok(false);
    }
    for i in 0..4 * BLOCK_WORDS {
        let w = run.sys.read(va_cached(PhysAddr::of_block(BOOT_L1, i)))?;
        run.sys.write(scratch_va(i as u32 / BLOCK_WORDS as u32, i % BLOCK_WORDS), w)?;
    }
    run.note("copy the boot L1 table through the uncacheable alias");
    if !run.unmap_scratch() {
        return Ok(false);
    }

    // Validation pulls the harmless table into the cache as clean lines.
    if !run.call("create L1 from the harmless copy", Hypercall::CreateL1 { bl: ATTACK_L1 }) {
        return Ok(false);
    }
    if !run.call("free it again", Hypercall::FreeL1 { bl: ATTACK_L1 }) {
        return Ok(false);
    }

    // Memory now diverges from the clean cached copy.
    if !run.map_scratch() {
        return Ok(false);
    }
    let evil_rw =
        L1Descriptor::Section { base: PhysAddr(0), ap: AccessPerm::USER_RW, cacheable: true, xn: true, domain: 0 };
    let evil_x = L1Descriptor::Section {
        base: PhysAddr(3 << 20),
        ap: AccessPerm::USER_RW,
        cacheable: true,
        xn: false,
        domain: 0,
    };
    for (idx, d) in [(EVIL_RW_IDX, evil_rw), (EVIL_EXEC_IDX, evil_x)] {
        run.sys.write(scratch_va(idx / BLOCK_WORDS as u32, idx as usize % BLOCK_WORDS), d.encode())?;
    }
    run.note("write the malicious entries through the uncacheable alias");
    if !run.unmap_scratch() {
        return Ok(false);
    }

    if !run.call("create L1 again", Hypercall::CreateL1 { bl: ATTACK_L1 }) {
        return Ok(false);
    }
    *validated = Some(run.table_view());

    // Evict the clean stale lines by sweeping a cache-sized buffer.
    let g = *run.sys.machine.cache.geometry();
    let sweep = (g.way_bytes() * g.ways as u32) as usize;
    let passes = match run.sys.machine.cache.policy() {
        crate::cache::ReplacementPolicy::Lru => 1,
        crate::cache::ReplacementPolicy::Random => 16,
    };
    let base = 2u32 << 20;
    for p in 0..passes {
        for off in (0..sweep).step_by(g.line_bytes() as usize) {
            run.sys.read(VirtAddr(base + ((p * sweep + off) as u32 % (1 << 20))))?;
        }
    }
    run.note("sweep the cache to evict the stale table lines");

    Ok(run.call("switch to the attacker's L1", Hypercall::Switch { bl: ATTACK_L1 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmmu::Countermeasure;

    fn outcome(cm: Countermeasure, monitor: bool) -> AttackOutcome {
        run_integrity_attack(&SystemConfig { countermeasure: cm, monitor, ..SystemConfig::default() }).unwrap()
    }

    #[test]
    fn baseline_is_bypassed() {
        for monitor in [false, true] {
            let o = outcome(Countermeasure::None, monitor);
            assert!(o.bypassed && o.evil_write_succeeded && !o.final_integrity, "{o:?}");
            assert!(!o.monitor_detected);
            assert_eq!(o.rejection, None);
        }
    }

    #[test]
    fn countermeasures_block() {
        let cases = [
            (Countermeasure::Acpt, "OutsideAlwaysCacheable"),
            (Countermeasure::IncoherencyDetect, "IncoherentInput"),
            (Countermeasure::SelectiveEvict, "OutsideGuestMemory"),
            (Countermeasure::FullFlush, "OutsideGuestMemory"),
        ];
        for (cm, kind) in cases {
            let o = outcome(cm, true);
            assert!(!o.bypassed && !o.evil_write_succeeded && o.final_integrity, "{cm:?} {o:?}");
            assert_eq!(o.rejection.map(|r| r.kind()), Some(kind), "{cm:?}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(outcome(Countermeasure::None, true), outcome(Countermeasure::None, true));
    }

    #[test]
    fn random_replacement_still_bypasses() {
        let cfg = SystemConfig { policy: crate::cache::ReplacementPolicy::Random, ..SystemConfig::default() };
        assert!(run_integrity_attack(&cfg).unwrap().bypassed);
    }
}
