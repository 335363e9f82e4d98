//! Brute-force reference counts, computed from scratch.

use serde::{Deserialize, Serialize};

use crate::addr::SECTION_BLOCKS;
use crate::dmmu::{FaultInjection, HypState, PageType, RefCounters};
use crate::error::SimError;
use crate::harness::traces::{initial_system, OpGenerator, TraceSpec};
use crate::machine::{MachineState, StepResult};
use crate::mmu::{L1Descriptor, L2Descriptor};
use crate::system::SystemConfig;

/// Scans every descriptor of every non-Data block (memory-view content) and
/// counts, per target block, the user-writable, user-executable and
/// page-table references. Deliberately shares nothing with the
/// hypervisor's incremental bookkeeping beyond descriptor decoding.
pub fn recount_refs(m: &MachineState, h: &HypState) -> Vec<RefCounters> {
    let n = h.pgtype.len();
    let mut out = vec![RefCounters::default(); n];
    let mut bump = |first: u32, count: u32, f: &dyn Fn(&mut RefCounters)| {
        for b in first..first + count {
            if let Some(r) = out.get_mut(b as usize) {
                f(r);
            }
        }
    };
    for (b, ty) in h.pgtype.iter().enumerate() {
        if *ty == PageType::Data {
            continue;
        }
        for w in m.memory_view_block(b as u32) {
            match ty {
                PageType::Data => break,
                PageType::L1 => match L1Descriptor::decode(w) {
                    L1Descriptor::Section { base, ap, xn, .. } if !ap.is_unpredictable() => {
                        let user_rd = ap.bits() >= 2;
                        let user_wt = ap.bits() == 3;
                        bump(base.0 >> 12, SECTION_BLOCKS, &|r| {
                            r.wt += user_wt as u32;
                            r.ex += (user_rd && !xn) as u32;
                        });
                    }
                    L1Descriptor::PageTable { base, .. } => bump(base.0 >> 12, 1, &|r| r.ptlink += 1),
                    _ => {}
                },
                PageType::L2 => {
                    if let L2Descriptor::Small { base, ap, xn, .. } = L2Descriptor::decode(w) {
                        if !ap.is_unpredictable() {
                            let user_rd = ap.bits() >= 2;
                            let user_wt = ap.bits() == 3;
                            bump(base.0 >> 12, 1, &|r| {
                                r.wt += user_wt as u32;
                                r.ex += (user_rd && !xn) as u32;
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// First block whose stored counters differ from the recount.
pub fn refcount_mismatch(m: &MachineState, h: &HypState) -> Option<(u32, RefCounters, RefCounters)> {
    let fresh = recount_refs(m, h);
    fresh.iter().zip(&h.refs).enumerate().find(|(_, (a, b))| a != b).map(|(i, (a, b))| (i as u32, *b, *a))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefMismatch {
    pub step: usize,
    pub block: u32,
    pub stored: RefCounters,
    pub recount: RefCounters,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefcountReport {
    pub seed: u64,
    pub hypercalls: usize,
    pub accepted: usize,
    pub mismatch: Option<RefMismatch>,
}

impl RefcountReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Runs a random trace and compares stored and recounted counters after
/// every accepted hypercall, stopping at the first difference.
pub fn check_refcounts(
    cfg: &SystemConfig,
    spec: &TraceSpec,
    faults: FaultInjection,
) -> Result<RefcountReport, SimError> {
    let mut sys = initial_system(cfg, spec.init)?;
    sys.hyp.faults = faults;
    let mut gen = OpGenerator::new(spec.seed, spec.mix, &sys);
    let mut report = RefcountReport { seed: spec.seed, hypercalls: 0, accepted: 0, mismatch: None };
    for step in 0..spec.steps {
        let op = gen.next_op(&sys);
        if let StepResult::Hypercall(v) = sys.step(&op)? {
            report.hypercalls += 1;
            if v.is_accepted() {
                report.accepted += 1;
                if let Some((block, stored, recount)) = refcount_mismatch(&sys.machine, &sys.hyp) {
                    report.mismatch = Some(RefMismatch { step, block, stored, recount });
                    break;
                }
            }
        }
    }
    Ok(report)
}
