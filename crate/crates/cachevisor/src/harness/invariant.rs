//! The hypervisor invariant, checked on a whole system state.

use serde::Serialize;

use crate::addr::PhysAddr;
use crate::dmmu::{self, Countermeasure, PageType, RefCounters, Violation};
use crate::harness::refcount::refcount_mismatch;
use crate::monitor;
use crate::system::System;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvariantViolation {
    MmuDisabled,
    ActiveTableNotL1 { block: u32 },
    TypedOutsideGuestMemory { block: u32 },
    TypedOutsideAlwaysCacheable { block: u32 },
    InvalidTable { block: u32, violation: Violation },
    RefMismatch { block: u32, stored: RefCounters, recount: RefCounters },
    IncoherentCritical { pa: PhysAddr },
    WritableAndExecutable { block: u32 },
    UnsignedCode { block: u32 },
}

fn table_words(sys: &System, first: u32, blocks: u32) -> Vec<u32> {
    (first..first + blocks).flat_map(|b| sys.machine.memory_view_block(b)).collect()
}

/// Checks, in order: active table, typing regions, every typed table
/// against its validator, counter soundness, coherency of the critical
/// resources and, with the monitor, W⊕X and code integrity.
pub fn check_invariant(sys: &System) -> Result<(), InvariantViolation> {
    let m = &sys.machine;
    let h = &sys.hyp;
    if !m.coregs.mmu_enabled {
        return Err(InvariantViolation::MmuDisabled);
    }
    let active = m.coregs.ttbr0.block();
    if !m.coregs.ttbr0.0.is_multiple_of(4 * 4096) {
        return Err(InvariantViolation::ActiveTableNotL1 { block: active });
    }
    if let Some(block) = (active..active + 4).find(|&b| h.pgtype.get(b as usize) != Some(&PageType::L1)) {
        return Err(InvariantViolation::ActiveTableNotL1 { block });
    }
    for (b, ty) in h.pgtype.iter().enumerate() {
        let block = b as u32;
        if *ty == PageType::Data {
            continue;
        }
        if !h.guest_mem.contains(block) {
            return Err(InvariantViolation::TypedOutsideGuestMemory { block });
        }
        if h.countermeasure == Countermeasure::Acpt && !h.always_cacheable.contains(block) {
            return Err(InvariantViolation::TypedOutsideAlwaysCacheable { block });
        }
        let checked = match ty {
            PageType::L1 if block.is_multiple_of(4) => dmmu::validate_l1(h, &table_words(sys, block, 4), None),
            PageType::L2 => dmmu::validate_l2(h, &table_words(sys, block, 1), None),
            _ => Ok(()),
        };
        checked.map_err(|violation| InvariantViolation::InvalidTable { block, violation })?;
    }
    if let Some((block, stored, recount)) = refcount_mismatch(m, h) {
        return Err(InvariantViolation::RefMismatch { block, stored, recount });
    }
    if let Some(pa) = m.incoherent_words().find(|pa| h.is_critical(pa.block())) {
        return Err(InvariantViolation::IncoherentCritical { pa });
    }
    if let Some(gi) = &sys.golden {
        if let Some(b) = h.refs.iter().position(|r| r.wt > 0 && r.ex > 0) {
            return Err(InvariantViolation::WritableAndExecutable { block: b as u32 });
        }
        if let Some(&block) = monitor::unsigned_blocks(gi, m).first() {
            return Err(InvariantViolation::UnsignedCode { block });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{SystemConfig, BOOT_L2};
    use crate::Countermeasure;

    #[test]
    fn boot_states_satisfy_invariant() {
        for cm in Countermeasure::ALL {
            for monitor in [false, true] {
                let sys = System::boot(&SystemConfig { countermeasure: cm, monitor, ..Default::default() }).unwrap();
                assert_eq!(check_invariant(&sys), Ok(()), "{cm:?} monitor={monitor}");
            }
        }
    }

    #[test]
    fn detects_tampered_counters_and_tables() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        sys.hyp.refs[300].wt += 1;
        assert!(matches!(check_invariant(&sys), Err(InvariantViolation::RefMismatch { block: 300, .. })));
        sys.hyp.refs[300].wt -= 1;
        // A writable mapping of the L2 block written behind the hypervisor's back.
        let pa = PhysAddr::of_block(BOOT_L2, 300);
        let d = crate::mmu::L2Descriptor::Small {
            base: PhysAddr::of_block(BOOT_L2, 0),
            ap: crate::AccessPerm::USER_RW,
            cacheable: true,
            xn: true,
        };
        sys.machine.mem.write(pa, d.encode());
        assert!(matches!(check_invariant(&sys), Err(InvariantViolation::InvalidTable { block: BOOT_L2, .. })));
    }

    #[test]
    fn detects_stale_page_table_line() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let pa = PhysAddr::of_block(BOOT_L2, 700);
        sys.machine.cached_read(pa);
        sys.machine.mem.write(pa, 0x1234_0000);
        assert_eq!(check_invariant(&sys), Err(InvariantViolation::IncoherentCritical { pa }));
    }
}
