//! Seeded random guest traces and the stepwise checks run over them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{AccessReq, Mode, PhysAddr, VirtAddr, BLOCK_WORDS, SECTION_BLOCKS};
use crate::dmmu::{Countermeasure, HypState, Hypercall, PageType, RefCounters, Rights};
use crate::error::SimError;
use crate::harness::derivability::check_derivability_with;
use crate::harness::invariant::check_invariant;
use crate::machine::{CoprocConfig, GuestOp, MachineState, StepResult};
use crate::mmu::{mmu_view, translate, AccessPerm, MmuView, PermissionMap};
use crate::system::{
    scratch_va, va_uncached, System, SystemConfig, BOOT_L1, BOOT_L2, CODE_BLOCKS, CODE_FIRST, SCRATCH_L2_FIRST,
};

/// Relative weights of the operation kinds a trace draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpMix {
    pub read: u32,
    pub write: u32,
    /// Share of reads and writes (in percent) sent through the uncacheable window.
    pub uncached_pct: u32,
    pub maintenance: u32,
    pub hypercall: u32,
}

impl Default for OpMix {
    fn default() -> Self {
        OpMix { read: 40, write: 35, uncached_pct: 15, maintenance: 5, hypercall: 20 }
    }
}

impl OpMix {
    pub fn guest_only() -> Self {
        OpMix { hypercall: 0, ..Self::default() }
    }

    pub fn hypercall_heavy() -> Self {
        OpMix { read: 20, write: 20, uncached_pct: 20, maintenance: 5, hypercall: 55 }
    }

    pub fn cacheable_only(self) -> Self {
        OpMix { uncached_pct: 0, ..self }
    }

    /// The default mix, minus uncacheable accesses when no countermeasure
    /// is active: there the guest can make its own page tables incoherent
    /// through an uncacheable alias, which is the integrity attack rather
    /// than a state the invariant covers.
    pub fn for_countermeasure(cm: Countermeasure) -> Self {
        match cm {
            Countermeasure::None => Self::default().cacheable_only(),
            _ => Self::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// The plain boot layout.
    #[default]
    Boot,
    /// Boot plus a second, spawned L1 table and a guest-built L2 table.
    Spawned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub seed: u64,
    pub steps: usize,
    pub mix: OpMix,
    pub init: InitialState,
}

impl TraceSpec {
    pub fn new(seed: u64, steps: usize) -> Self {
        TraceSpec { seed, steps, mix: OpMix::default(), init: InitialState::Boot }
    }
}

/// Blocks of section 1 the generator uses for new tables.
const L1_CANDIDATES: [u32; 4] = [264, 268, 280, 284];
const L2_CANDIDATES: [u32; 5] = [261, 262, 263, 276, 277];

/// Draws guest operations. Hypercall arguments are chosen with a peek at
/// the hypervisor state so that a useful share of them is accepted.
pub struct OpGenerator {
    rng: ChaCha8Rng,
    mix: OpMix,
    hot: Vec<PhysAddr>,
}

impl OpGenerator {
    pub fn new(seed: u64, mix: OpMix, sys: &System) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sys.hyp.num_blocks();
        let line = sys.machine.cache.geometry().line_bytes();
        // A few dozen blocks, a handful of lines each: enough tags per set
        // to force evictions.
        let mut blocks: Vec<u32> = (SECTION_BLOCKS..SECTION_BLOCKS + 64).collect();
        blocks.extend((0..24).map(|_| rng.gen_range(2 * SECTION_BLOCKS..n.min(8 * SECTION_BLOCKS))));
        let hot = blocks.iter().flat_map(|&b| (0..3).map(move |k| PhysAddr(b * 4096 + k * line))).collect();
        OpGenerator { rng, mix, hot }
    }

    fn address(&mut self) -> VirtAddr {
        let roll = self.rng.gen_range(0..100);
        let word = 4 * self.rng.gen_range(0..4u32);
        if roll < 6 {
            return scratch_va(self.rng.gen_range(0..16), self.rng.gen_range(0..BLOCK_WORDS));
        }
        if roll < 8 {
            return VirtAddr(self.rng.gen());
        }
        let pa = PhysAddr(self.hot.choose(&mut self.rng).expect("hot set").0 + word);
        if self.rng.gen_range(0..100) < self.mix.uncached_pct && pa.block() >= 2 * SECTION_BLOCKS {
            return va_uncached(pa);
        }
        VirtAddr(pa.0)
    }

    fn rights(&mut self) -> Rights {
        let mut r = *[Rights::user_rw(), Rights::user_ro(), Rights::user_rx(), Rights::user_rw()]
            .choose(&mut self.rng)
            .expect("non-empty");
        if self.rng.gen_range(0..5) == 0 {
            r = r.uncached();
        }
        if self.rng.gen_range(0..12) == 0 {
            r.ap = AccessPerm::PRIV_ONLY;
        }
        r
    }

    fn typed(&mut self, h: &HypState, ty: PageType) -> Option<u32> {
        let all: Vec<u32> = h
            .pgtype
            .iter()
            .enumerate()
            .filter(|(b, t)| **t == ty && (ty != PageType::L1 || b % 4 == 0))
            .map(|(b, _)| b as u32)
            .collect();
        all.choose(&mut self.rng).copied()
    }

    fn hypercall(&mut self, sys: &System) -> Hypercall {
        let h = &sys.hyp;
        let l1 = self.typed(h, PageType::L1).unwrap_or(BOOT_L1);
        let l2 = self.typed(h, PageType::L2).unwrap_or(BOOT_L2);
        let target_page = |rng: &mut ChaCha8Rng| -> u32 {
            match rng.gen_range(0..10) {
                0 => CODE_FIRST + rng.gen_range(0..CODE_BLOCKS),
                1..=6 => rng.gen_range(SECTION_BLOCKS..SECTION_BLOCKS + 64),
                _ => rng.gen_range(SECTION_BLOCKS..h.num_blocks()),
            }
        };
        let l2_idx = |rng: &mut ChaCha8Rng| -> u32 {
            if rng.gen_bool(0.5) {
                SCRATCH_L2_FIRST + rng.gen_range(0..16)
            } else {
                rng.gen_range(0..64)
            }
        };
        let l1_idx = |rng: &mut ChaCha8Rng| -> u32 {
            match rng.gen_range(0..4) {
                0 => rng.gen_range(2..16),
                1 => 0x800 + rng.gen_range(2..16),
                2 => 0x400 + rng.gen_range(0..4),
                _ => rng.gen_range(0..4096),
            }
        };
        match self.rng.gen_range(0..20) {
            0..=5 => {
                let (bl, idx) = (l2, l2_idx(&mut self.rng));
                let target = target_page(&mut self.rng);
                Hypercall::MapL2 { bl, idx, target, rights: self.rights() }
            }
            6..=10 => Hypercall::UnmapL2 { bl: l2, idx: l2_idx(&mut self.rng) },
            11 => {
                let target = SECTION_BLOCKS * self.rng.gen_range(0..sys.config.mem_mb);
                Hypercall::MapL1 { bl: l1, idx: l1_idx(&mut self.rng), target, rights: self.rights() }
            }
            12 => Hypercall::UnmapL1 { bl: l1, idx: l1_idx(&mut self.rng) },
            13 => Hypercall::CreateL1 { bl: *L1_CANDIDATES.choose(&mut self.rng).expect("non-empty") },
            14 => Hypercall::CreateL2 { bl: *L2_CANDIDATES.choose(&mut self.rng).expect("non-empty") },
            15 => Hypercall::FreeL1 { bl: l1 },
            16 => Hypercall::FreeL2 { bl: l2 },
            17 => Hypercall::Switch { bl: l1 },
            _ => Hypercall::LinkL1 { bl: l1, idx: l1_idx(&mut self.rng), l2_bl: l2, l2_slot: self.rng.gen_range(0..4) },
        }
    }

    pub fn next_op(&mut self, sys: &System) -> GuestOp {
        let mix = self.mix;
        let total = mix.read + mix.write + mix.maintenance + mix.hypercall;
        let mut roll = self.rng.gen_range(0..total.max(1));
        if roll < mix.read {
            return GuestOp::Read { va: self.address() };
        }
        roll -= mix.read;
        if roll < mix.write {
            return GuestOp::Write { va: self.address(), value: self.rng.gen() };
        }
        roll -= mix.write;
        if roll < mix.maintenance {
            let va = self.address();
            return if self.rng.gen() { GuestOp::Clean { va } } else { GuestOp::Invalidate { va } };
        }
        GuestOp::Hypercall { call: self.hypercall(sys) }
    }
}

/// Boots a system and brings it to the requested initial state.
pub fn initial_system(cfg: &SystemConfig, init: InitialState) -> Result<System, SimError> {
    let mut sys = System::boot(cfg)?;
    if init == InitialState::Spawned {
        spawn_copy(&mut sys, 268)?;
        // A guest-built L2 table holding one read-only page, linked at 0x0500_0000.
        let l2 = 262;
        let ok = |v: crate::Verdict| {
            v.is_accepted().then_some(()).ok_or_else(|| SimError::InvalidConfig(format!("setup rejected: {v:?}")))
        };
        ok(sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: l2 - SECTION_BLOCKS }))?;
        ok(sys.hypercall(&Hypercall::CreateL2 { bl: l2 }))?;
        ok(sys.hypercall(&Hypercall::MapL2 { bl: l2, idx: 0, target: 300, rights: Rights::user_ro() }))?;
        ok(sys.hypercall(&Hypercall::LinkL1 { bl: BOOT_L1, idx: 0x50, l2_bl: l2, l2_slot: 0 }))?;
    }
    Ok(sys)
}

/// The allocation sequence for a new L1 at `bl` (four free section-1
/// blocks): drop their boot mappings, map them writable in the scratch
/// window, copy the active table, unmap, create. Leaves the boot table active.
pub fn spawn_copy(sys: &mut System, bl: u32) -> Result<(), SimError> {
    let fail = |what: &str, v: crate::Verdict| SimError::InvalidConfig(format!("spawn {what}: {v:?}"));
    for j in 0..4 {
        let v = sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: bl + j - SECTION_BLOCKS });
        v.is_accepted().then_some(()).ok_or_else(|| fail("unmap boot", v))?;
        let call =
            Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j, target: bl + j, rights: Rights::user_rw() };
        let v = sys.hypercall(&call);
        v.is_accepted().then_some(()).ok_or_else(|| fail("map", v))?;
    }
    let src = sys.machine.coregs.ttbr0.0;
    for i in 0..4 * BLOCK_WORDS {
        let w = sys.read(VirtAddr(src + 4 * i as u32))?;
        sys.write(scratch_va(0, i), w)?;
    }
    for j in 0..4 {
        let v = sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j });
        v.is_accepted().then_some(()).ok_or_else(|| fail("unmap", v))?;
    }
    let v = sys.hypercall(&Hypercall::CreateL1 { bl });
    v.is_accepted().then_some(()).ok_or_else(|| fail("create", v))
}

/// What the guest must never be able to change: coprocessor registers,
/// hypervisor data and memory outside guest memory.
#[derive(Clone, Debug)]
pub struct SecureObservation {
    coregs: CoprocConfig,
    pgtype: Vec<PageType>,
    refs: Vec<RefCounters>,
    machine: MachineState,
}

impl SecureObservation {
    pub fn of(sys: &System) -> Self {
        SecureObservation {
            coregs: sys.machine.coregs,
            pgtype: sys.hyp.pgtype.clone(),
            refs: sys.hyp.refs.clone(),
            machine: sys.machine.clone(),
        }
    }

    /// First difference against `sys`, if any.
    pub fn diff(&self, sys: &System) -> Option<String> {
        if self.coregs != sys.machine.coregs {
            return Some("coprocessor registers changed".into());
        }
        if self.pgtype != sys.hyp.pgtype || self.refs != sys.hyp.refs {
            return Some("hypervisor data changed".into());
        }
        let g = sys.hyp.guest_mem;
        let (a, b) = (&self.machine, &sys.machine);
        let mut blocks: Vec<u32> = a.mem.changed_blocks(&b.mem).filter(|&blk| !g.contains(blk)).collect();
        for m in [a, b] {
            blocks.extend(m.cache.lines().filter(|l| l.3.dirty && !g.contains(l.2.block())).map(|l| l.2.block()));
        }
        blocks.sort_unstable();
        blocks.dedup();
        for blk in blocks {
            let (x, y) = (a.memory_view_block(blk), b.memory_view_block(blk));
            if let Some(i) = (0..BLOCK_WORDS).find(|&i| x[i] != y[i]) {
                return Some(format!("secure memory changed at {}", PhysAddr::of_block(blk, i)));
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checks {
    pub derivability: bool,
    pub mmu_integrity: bool,
    pub exfiltration: bool,
    /// Check the invariant after every hypercall and every this many guest steps.
    pub invariant_every: Option<usize>,
    /// Random translations compared per step on top of the exact view check.
    pub samples: usize,
}

impl Checks {
    pub fn all() -> Self {
        Checks { derivability: true, mmu_integrity: true, exfiltration: true, invariant_every: Some(256), samples: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceFailure {
    pub step: usize,
    pub check: &'static str,
    pub op: GuestOp,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TraceReport {
    pub seed: u64,
    pub steps: usize,
    pub guest_steps: usize,
    pub faults: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub invariant_checks: usize,
    pub failure: Option<TraceFailure>,
}

impl TraceReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs `spec` on a fresh system and applies `checks` stepwise. Stops at
/// the first failed check.
pub fn run_trace(cfg: &SystemConfig, spec: &TraceSpec, checks: &Checks) -> Result<TraceReport, SimError> {
    let mut sys = initial_system(cfg, spec.init)?;
    run_trace_on(&mut sys, spec, checks)
}

pub fn run_trace_on(sys: &mut System, spec: &TraceSpec, checks: &Checks) -> Result<TraceReport, SimError> {
    let mut gen = OpGenerator::new(spec.seed, spec.mix, sys);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x006d_6d75);
    let mut report = TraceReport { seed: spec.seed, ..TraceReport::default() };
    let mut view: Option<MmuView> = None;
    // User permissions of `view`, valid while the view is carried forward.
    let mut perms: Option<PermissionMap> = None;
    let mut since_invariant = 0usize;
    let fail = |report: &mut TraceReport, step, check, op: &GuestOp, detail: String| {
        report.failure = Some(TraceFailure { step, check, op: op.clone(), detail });
    };
    if checks.invariant_every.is_some() {
        report.invariant_checks += 1;
        if let Err(v) = check_invariant(sys) {
            fail(&mut report, 0, "invariant", &GuestOp::Read { va: VirtAddr(0) }, format!("{v:?}"));
            return Ok(report);
        }
    }
    for step in 0..spec.steps {
        let op = gen.next_op(sys);
        report.steps += 1;
        let is_call = matches!(op, GuestOp::Hypercall { .. });
        let pre_machine = (!is_call && (checks.derivability || checks.mmu_integrity)).then(|| sys.machine.clone());
        let pre_view = pre_machine.as_ref().map(|pre| view.take().unwrap_or_else(|| mmu_view(pre)));
        let pre_secure = (!is_call && checks.exfiltration).then(|| SecureObservation::of(sys));
        let result = sys.step(&op)?;
        match result {
            StepResult::Fault(_) => report.faults += 1,
            StepResult::Hypercall(v) if v.is_accepted() => report.accepted += 1,
            StepResult::Hypercall(_) => report.rejected += 1,
            _ => {}
        }
        if is_call {
            view = None;
            perms = None;
            if checks.invariant_every.is_some() {
                report.invariant_checks += 1;
                since_invariant = 0;
                if let Err(v) = check_invariant(sys) {
                    fail(&mut report, step, "invariant", &op, format!("{v:?}"));
                    return Ok(report);
                }
            }
            continue;
        }
        report.guest_steps += 1;
        if let Some(pre) = &pre_machine {
            let before = pre_view.expect("computed with pre_machine");
            if checks.derivability {
                let pm = perms.get_or_insert_with(|| PermissionMap::build(&before, Mode::NonPrivileged));
                let w = check_derivability_with(pm, pre, &sys.machine);
                if !w.passed() {
                    fail(&mut report, step, "derivability", &op, format!("{:?}", w.violation));
                    return Ok(report);
                }
            }
            if checks.mmu_integrity {
                let after = mmu_view(&sys.machine);
                let mut same = before == after;
                for _ in 0..checks.samples {
                    let va = VirtAddr(rng.gen());
                    let mode = if rng.gen() { Mode::NonPrivileged } else { Mode::Privileged };
                    let req = [AccessReq::Read, AccessReq::Write, AccessReq::Execute][rng.gen_range(0..3)];
                    same &= translate(pre, va, mode, req) == translate(&sys.machine, va, mode, req);
                }
                if !same {
                    fail(&mut report, step, "mmu_integrity", &op, "translation changed".into());
                    return Ok(report);
                }
                view = Some(after);
            } else {
                // Without the integrity check the view is not known to persist.
                perms = None;
            }
        }
        if let Some(obs) = &pre_secure {
            if let Some(d) = obs.diff(sys) {
                fail(&mut report, step, "no_exfiltration", &op, d);
                return Ok(report);
            }
        }
        if let Some(every) = checks.invariant_every {
            since_invariant += 1;
            if since_invariant >= every {
                since_invariant = 0;
                report.invariant_checks += 1;
                if let Err(v) = check_invariant(sys) {
                    fail(&mut report, step, "invariant", &op, format!("{v:?}"));
                    return Ok(report);
                }
            }
        }
    }
    Ok(report)
}
