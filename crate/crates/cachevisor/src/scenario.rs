//! Scripted runs: explicit operation streams and the process-spawn example.

use serde::{Deserialize, Serialize};

use crate::addr::{PhysAddr, VirtAddr, BLOCK_WORDS, SECTION_BLOCKS};
use crate::dmmu::{Hypercall, RefCounters, Rights, Verdict};
use crate::error::SimError;
use crate::harness::invariant::check_invariant;
use crate::machine::{GuestOp, StepResult};
use crate::system::{scratch_va, System, SystemConfig, BOOT_L2, SCRATCH_L2_FIRST};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub op: GuestOp,
    pub result: StepResult,
    /// `None` when the invariant holds, otherwise the violation.
    pub invariant: Option<String>,
}

/// Runs `ops` in order, checking the hypervisor invariant after each.
pub fn run_ops(sys: &mut System, ops: &[GuestOp]) -> Result<Vec<StepRecord>, SimError> {
    ops.iter()
        .map(|op| {
            let result = sys.step(op)?;
            let invariant = check_invariant(sys).err().map(|v| format!("{v:?}"));
            Ok(StepRecord { op: op.clone(), result, invariant })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnStep {
    pub label: String,
    pub verdict: Option<Verdict>,
    /// Counters of the first block of the new table after the step.
    pub refs: RefCounters,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnReport {
    pub table: u32,
    pub steps: Vec<SpawnStep>,
    /// `wt + ptlink` of the new table's first block before mapping, while
    /// mapped writable, and after the unmap.
    pub rc_trace: Vec<u32>,
    pub accepted: bool,
    pub invariant_holds: bool,
}

/// Spawning a process: the guest maps four free blocks writable, copies
/// its L1 table into them, unmaps them, has them validated as an L1 and
/// switches to it.
pub fn demo_spawn(cfg: &SystemConfig, bl: u32) -> Result<SpawnReport, SimError> {
    let mut sys = System::boot(cfg)?;
    let mut steps = Vec::new();
    let mut all_ok = true;
    let mut push = |sys: &System, label: String, verdict: Option<Verdict>| {
        all_ok &= verdict.is_none_or(|v| v.is_accepted());
        steps.push(SpawnStep { label, verdict, refs: sys.hyp.refs[bl as usize] });
    };
    let rc = |sys: &System| sys.hyp.refs[bl as usize].wt + sys.hyp.refs[bl as usize].ptlink;

    for j in 0..4 {
        let v = sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: bl + j - SECTION_BLOCKS });
        push(&sys, format!("drop boot mapping of block {}", bl + j), Some(v));
    }
    let mut rc_trace = vec![rc(&sys)];
    for j in 0..4 {
        let call =
            Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j, target: bl + j, rights: Rights::user_rw() };
        let v = sys.hypercall(&call);
        push(&sys, format!("map block {} writable", bl + j), Some(v));
    }
    rc_trace.push(rc(&sys));
    let src = sys.machine.coregs.ttbr0;
    for i in 0..4 * BLOCK_WORDS {
        let w = sys.read(VirtAddr(src.0 + 4 * i as u32))?;
        sys.write(scratch_va(0, i), w)?;
    }
    push(&sys, format!("copy the active table from {src}"), None);
    for j in 0..4 {
        let v = sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j });
        push(&sys, format!("unmap block {}", bl + j), Some(v));
    }
    rc_trace.push(rc(&sys));
    let v = sys.hypercall(&Hypercall::CreateL1 { bl });
    push(&sys, "create L1".into(), Some(v));
    let v = sys.hypercall(&Hypercall::Switch { bl });
    push(&sys, "switch".into(), Some(v));
    let accepted = all_ok && sys.machine.coregs.ttbr0 == PhysAddr::of_block(bl, 0);
    Ok(SpawnReport { table: bl, steps, rc_trace, accepted, invariant_holds: check_invariant(&sys).is_ok() })
}
