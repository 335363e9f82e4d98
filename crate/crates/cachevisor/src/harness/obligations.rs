//! Countermeasure proof obligations as online monitors over random traces.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::dmmu::{Countermeasure, HypState, PageType};
use crate::error::SimError;
use crate::harness::traces::{initial_system, OpGenerator, TraceSpec};
use crate::machine::GuestOp;
use crate::mmu::{mmu_view, Resolved};
use crate::mmu::{L1Descriptor, L2Descriptor};
use crate::system::{System, SystemConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ObligationVerdict {
    NotApplicable,
    Pass { steps: usize, hypercalls: usize },
    Fail { step: usize, obligation: &'static str, detail: String },
}

impl ObligationVerdict {
    pub fn passed(&self) -> bool {
        !matches!(self, ObligationVerdict::Fail { .. })
    }
}

fn critical(h: &HypState) -> BTreeSet<u32> {
    (0..h.num_blocks()).filter(|&b| h.is_critical(b)).collect()
}

/// Blocks of the always-cacheable region reachable through an uncacheable
/// descriptor of the active tables, in any mode.
pub fn uncacheable_aliases(sys: &System) -> Vec<u32> {
    let ac = sys.hyp.always_cacheable;
    let view = mmu_view(&sys.machine);
    let mut out = BTreeSet::new();
    for slot in &view.slots {
        match slot {
            Resolved::Section(L1Descriptor::Section { base, cacheable: false, .. }) => {
                out.extend((base.block()..base.block() + 256).filter(|&b| ac.contains(b)));
            }
            Resolved::Table { entries, .. } => {
                for e in entries {
                    if let L2Descriptor::Small { base, cacheable: false, .. } = e {
                        if ac.contains(base.block()) {
                            out.insert(base.block());
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out.into_iter().collect()
}

/// State-only obligations, checked after every step.
fn state_obligations(sys: &System) -> Result<(), (&'static str, String)> {
    let h = &sys.hyp;
    if h.countermeasure == Countermeasure::Acpt {
        if let Some(b) = uncacheable_aliases(sys).first() {
            return Err(("acpt_aliases_cacheable", format!("uncacheable alias of block {b}")));
        }
        let outside =
            h.pgtype.iter().enumerate().find(|(b, t)| **t != PageType::Data && !h.always_cacheable.contains(*b as u32));
        if let Some((b, _)) = outside {
            return Err(("acpt_tables_in_mac", format!("page table at block {b}")));
        }
    }
    Ok(())
}

/// Obligations on one handler run, given the critical set before it.
fn handler_obligations(h: &HypState, cr_before: &BTreeSet<u32>) -> Result<(), (&'static str, String)> {
    match h.countermeasure {
        Countermeasure::Acpt => {
            if let Some(b) = h.handler_reads.keys().find(|&&b| !h.always_cacheable.contains(b)) {
                return Err(("acpt_reads_in_mac", format!("handler read block {b}")));
            }
        }
        Countermeasure::SelectiveEvict => {
            let allowed = |b: &u32| cr_before.contains(b) || h.cleaned_history.contains(b);
            if let Some(b) = h.handler_reads.keys().find(|b| !allowed(b)) {
                return Err(("selective_reads_cleaned", format!("handler read uncleaned block {b}")));
            }
            if let Some(b) = critical(h).iter().find(|b| !allowed(b)) {
                return Err(("selective_cr_growth", format!("block {b} became critical without cleaning")));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Runs the obligations of `cfg.countermeasure` over a random trace from
/// `sys`. None, FullFlush and IncoherencyDetect have no obligations of
/// this kind.
pub fn check_obligations_on(mut sys: System, spec: &TraceSpec) -> Result<ObligationVerdict, SimError> {
    if !matches!(sys.hyp.countermeasure, Countermeasure::Acpt | Countermeasure::SelectiveEvict) {
        return Ok(ObligationVerdict::NotApplicable);
    }
    if let Err((obligation, detail)) = state_obligations(&sys) {
        return Ok(ObligationVerdict::Fail { step: 0, obligation, detail });
    }
    let mut gen = OpGenerator::new(spec.seed, spec.mix, &sys);
    let mut hypercalls = 0;
    for step in 0..spec.steps {
        let op = gen.next_op(&sys);
        let cr_before = critical(&sys.hyp);
        sys.step(&op)?;
        if matches!(op, GuestOp::Hypercall { .. }) {
            hypercalls += 1;
            if let Err((obligation, detail)) = handler_obligations(&sys.hyp, &cr_before) {
                return Ok(ObligationVerdict::Fail { step, obligation, detail });
            }
        }
        if let Err((obligation, detail)) = state_obligations(&sys) {
            return Ok(ObligationVerdict::Fail { step, obligation, detail });
        }
    }
    Ok(ObligationVerdict::Pass { steps: spec.steps, hypercalls })
}

pub fn check_obligations(cfg: &SystemConfig, spec: &TraceSpec) -> Result<ObligationVerdict, SimError> {
    check_obligations_on(initial_system(cfg, spec.init)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::PhysAddr;
    use crate::harness::traces::OpMix;
    use crate::mmu::AccessPerm;
    use crate::system::BOOT_L2;

    fn cfg(cm: Countermeasure) -> SystemConfig {
        SystemConfig { countermeasure: cm, ..SystemConfig::default() }
    }

    fn spec(seed: u64) -> TraceSpec {
        TraceSpec { mix: OpMix::hypercall_heavy(), ..TraceSpec::new(seed, 1500) }
    }

    #[test]
    fn acpt_and_selective_pass() {
        for cm in [Countermeasure::Acpt, Countermeasure::SelectiveEvict] {
            for seed in 0..3 {
                let v = check_obligations(&cfg(cm), &spec(seed)).unwrap();
                assert!(matches!(v, ObligationVerdict::Pass { .. }), "{cm:?} {v:?}");
            }
        }
    }

    #[test]
    fn other_modes_not_applicable() {
        for cm in [Countermeasure::None, Countermeasure::FullFlush, Countermeasure::IncoherencyDetect] {
            assert_eq!(check_obligations(&cfg(cm), &spec(0)).unwrap(), ObligationVerdict::NotApplicable);
        }
    }

    #[test]
    fn planted_uncacheable_alias_fails() {
        let mut sys = System::boot(&cfg(Countermeasure::Acpt)).unwrap();
        let d = L2Descriptor::Small {
            base: PhysAddr::of_block(300, 0),
            ap: AccessPerm::USER_RW,
            cacheable: false,
            xn: true,
        };
        sys.machine.cached_write(PhysAddr::of_block(BOOT_L2, 256), d.encode());
        let v = check_obligations_on(sys, &spec(0)).unwrap();
        assert!(matches!(v, ObligationVerdict::Fail { obligation: "acpt_aliases_cacheable", .. }), "{v:?}");
    }

    #[test]
    fn skipping_selective_eviction_fails() {
        // Same trace, but the countermeasure silently does nothing: the
        // handler reads blocks that were never cleaned.
        let mut sys = System::boot(&cfg(Countermeasure::SelectiveEvict)).unwrap();
        sys.hyp.countermeasure = Countermeasure::None;
        let mut spec = spec(1);
        spec.steps = 3000;
        let mut gen = OpGenerator::new(spec.seed, spec.mix, &sys);
        let mut failed = false;
        for _ in 0..spec.steps {
            let op = gen.next_op(&sys);
            let cr = critical(&sys.hyp);
            sys.step(&op).unwrap();
            sys.hyp.countermeasure = Countermeasure::SelectiveEvict;
            if matches!(op, GuestOp::Hypercall { .. }) && handler_obligations(&sys.hyp, &cr).is_err() {
                failed = true;
                break;
            }
            sys.hyp.countermeasure = Countermeasure::None;
        }
        assert!(failed);
    }
}
