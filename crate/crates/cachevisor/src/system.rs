//! A booted machine: the hypervisor's initial layout, the guest's initial
//! page tables and the step function that routes hypercalls to the DMMU.
//!
//! Physical layout (block = 4 KB, section = 1 MB):
//!
//! | range               | contents                                        |
//! |---------------------|-------------------------------------------------|
//! | section 0           | hypervisor memory, never guest-accessible       |
//! | blocks 256..260     | boot L1 table (`ttbr0 = 0x0010_0000`)           |
//! | block 260           | boot L2 block (table 0: section 1, table 1: scratch) |
//! | blocks 272..276     | signed guest code                               |
//! | rest of section 1   | guest data, mapped page by page                 |
//! | sections 2..        | guest data, mapped as sections                  |
//!
//! Guest virtual layout: sections from 1 upward are mapped at their physical
//! address (cacheable, user read-write, never executable except the code
//! blocks). [`SCRATCH_VA`] is a 1 MB window backed by the initially empty
//! boot L2 table 1, for the guest's own small-page mappings. Sections from 2
//! upward also appear uncacheable at `UNCACHED_VA_BASE + pa`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{PhysAddr, VirtAddr, BLOCK_BYTES, BLOCK_WORDS, SECTION_BLOCKS};
use crate::cache::{CacheGeometry, ReplacementPolicy};
use crate::dmmu::{
    apply_grant, dmmu_dispatch, l1_grant, l2_grant, BlockRange, Countermeasure, HypState, Hypercall, PageType, Verdict,
    GUEST_DOMAIN,
};
use crate::error::SimError;
use crate::machine::{GuestOp, MachineState, StepResult};
use crate::mmu::{AccessPerm, L1Descriptor, L2Descriptor};
use crate::monitor::{self, GoldenImage};

pub const BOOT_L1: u32 = 256;
pub const BOOT_L2: u32 = 260;
pub const CODE_FIRST: u32 = 272;
pub const CODE_BLOCKS: u32 = 4;
/// Base of the guest's small-page window (L1 slot 0x400).
pub const SCRATCH_VA: u32 = 0x4000_0000;
/// Base of the uncacheable alias window (L1 slots 0x800..).
pub const UNCACHED_VA_BASE: u32 = 0x8000_0000;
/// L2 entry index (within [`BOOT_L2`]) of the first scratch-window page.
pub const SCRATCH_L2_FIRST: u32 = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub geometry: CacheGeometry,
    pub policy: ReplacementPolicy,
    pub mem_mb: u32,
    pub countermeasure: Countermeasure,
    pub monitor: bool,
    pub seed: u64,
    /// Defaults to every block from section 1 up.
    pub guest_mem: Option<BlockRange>,
    /// Defaults to section 1.
    pub always_cacheable: Option<BlockRange>,
    /// See [`crate::cache::Cache::set_history_limit`].
    pub history_limit: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            geometry: CacheGeometry::default(),
            policy: ReplacementPolicy::Lru,
            mem_mb: 16,
            countermeasure: Countermeasure::None,
            monitor: false,
            seed: 0,
            guest_mem: None,
            always_cacheable: None,
            history_limit: None,
        }
    }
}

impl SystemConfig {
    pub fn num_blocks(&self) -> u32 {
        self.mem_mb * SECTION_BLOCKS
    }

    pub fn guest_mem(&self) -> BlockRange {
        self.guest_mem.unwrap_or(BlockRange::new(SECTION_BLOCKS, self.num_blocks()))
    }

    pub fn always_cacheable(&self) -> BlockRange {
        self.always_cacheable.unwrap_or(BlockRange::new(SECTION_BLOCKS, 2 * SECTION_BLOCKS))
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::InvalidConfig(s));
        let g = &self.geometry;
        CacheGeometry::new(g.num_sets, g.ways, g.line_words * 4, g.indexing)?;
        if !(2..=1024).contains(&self.mem_mb) {
            return bad(format!("memory must be 2..=1024 MB, got {}", self.mem_mb));
        }
        let n = self.num_blocks();
        let g = self.guest_mem();
        let ac = self.always_cacheable();
        if g.start < SECTION_BLOCKS || g.end > n || g.start >= g.end {
            return bad(format!("guest memory {g:?} must lie in [{SECTION_BLOCKS}, {n})"));
        }
        if ac.start < SECTION_BLOCKS || ac.end > n {
            return bad(format!("always-cacheable region {ac:?} overlaps hypervisor memory"));
        }
        let boot = BlockRange::new(BOOT_L1, CODE_FIRST + CODE_BLOCKS);
        if !g.contains_range(&boot) || !ac.contains_range(&BlockRange::new(BOOT_L1, BOOT_L2 + 1)) {
            return bad("boot page tables and code must be guest memory and always cacheable".into());
        }
        Ok(())
    }
}

/// Cacheable alias of a guest physical address.
pub fn va_cached(pa: PhysAddr) -> VirtAddr {
    VirtAddr(pa.0)
}

/// Uncacheable alias of a guest physical address in section 2 or above.
pub fn va_uncached(pa: PhysAddr) -> VirtAddr {
    VirtAddr(UNCACHED_VA_BASE + pa.0)
}

/// Virtual address of word `word` of scratch page `page`.
pub fn scratch_va(page: u32, word: usize) -> VirtAddr {
    VirtAddr(SCRATCH_VA + page * BLOCK_BYTES + word as u32 * 4)
}

#[derive(Clone, Debug)]
pub struct System {
    pub machine: MachineState,
    pub hyp: HypState,
    pub golden: Option<GoldenImage>,
    pub config: SystemConfig,
}

impl System {
    pub fn boot(config: &SystemConfig) -> Result<System, SimError> {
        config.validate()?;
        let n = config.num_blocks();
        let mut m = MachineState::new(n as usize, config.geometry, config.policy, config.seed);
        m.cache.set_history_limit(config.history_limit);
        let mut h = HypState::new(n as usize, config.guest_mem(), config.always_cacheable(), config.countermeasure);
        let guest = config.guest_mem();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
        let code = CODE_FIRST..CODE_FIRST + CODE_BLOCKS;
        for b in code.clone() {
            for i in 0..BLOCK_WORDS {
                m.mem.write(PhysAddr::of_block(b, i), rng.gen());
            }
        }

        let l1_word = |i: u32| PhysAddr::of_block(BOOT_L1, 0).0 + 4 * i;
        let l2_word = |i: u32| PhysAddr::of_block(BOOT_L2, 0).0 + 4 * i;
        let section = |s: u32, cacheable: bool| L1Descriptor::Section {
            base: PhysAddr(s << 20),
            ap: AccessPerm::USER_RW,
            cacheable,
            xn: true,
            domain: GUEST_DOMAIN,
        };
        let link = |slot: u32| L1Descriptor::PageTable {
            base: PhysAddr(PhysAddr::of_block(BOOT_L2, 0).0 + slot * 1024),
            domain: GUEST_DOMAIN,
        };
        m.mem.write(PhysAddr(l1_word(1)), link(0).encode());
        m.mem.write(PhysAddr(l1_word(SCRATCH_VA >> 20)), link(1).encode());
        for s in 2..config.mem_mb {
            let in_guest = |b: u32| guest.contains(b);
            if (s * SECTION_BLOCKS..(s + 1) * SECTION_BLOCKS).all(in_guest) {
                m.mem.write(PhysAddr(l1_word(s)), section(s, true).encode());
                m.mem.write(PhysAddr(l1_word((UNCACHED_VA_BASE >> 20) + s)), section(s, false).encode());
            }
        }
        for j in 0..SECTION_BLOCKS {
            let b = SECTION_BLOCKS + j;
            if !guest.contains(b) {
                continue;
            }
            let (ap, xn) = if (BOOT_L1..=BOOT_L2).contains(&b) {
                (AccessPerm::USER_RO, true)
            } else if code.contains(&b) {
                (AccessPerm::USER_RO, false)
            } else {
                (AccessPerm::USER_RW, true)
            };
            let d = L2Descriptor::Small { base: PhysAddr::of_block(b, 0), ap, cacheable: true, xn };
            m.mem.write(PhysAddr(l2_word(j)), d.encode());
        }

        for b in BOOT_L1..BOOT_L1 + 4 {
            h.pgtype[b as usize] = PageType::L1;
        }
        h.pgtype[BOOT_L2 as usize] = PageType::L2;
        for i in 0..4 * BLOCK_WORDS as u32 {
            if let Some(g) = l1_grant(m.mem.read(PhysAddr(l1_word(i)))) {
                apply_grant(&mut h.refs, &g, true, true).map_err(|e| SimError::InvalidConfig(format!("{e:?}")))?;
            }
        }
        for i in 0..BLOCK_WORDS as u32 {
            if let Some(g) = l2_grant(m.mem.read(PhysAddr(l2_word(i)))) {
                apply_grant(&mut h.refs, &g, true, true).map_err(|e| SimError::InvalidConfig(format!("{e:?}")))?;
            }
        }

        m.coregs.ttbr0 = PhysAddr::of_block(BOOT_L1, 0);
        m.coregs.dacr = 1 << GUEST_DOMAIN;
        m.coregs.mmu_enabled = true;

        let golden = config.monitor.then(|| {
            GoldenImage::new(code.map(|b| {
                let words: Vec<u32> = (0..BLOCK_WORDS).map(|i| m.mem.read(PhysAddr::of_block(b, i))).collect();
                monitor::sig(&words)
            }))
        });
        Ok(System { machine: m, hyp: h, golden, config: config.clone() })
    }

    /// Runs one guest operation. Hypercalls also leave their verdict code in
    /// `r0` (0 accepted, 1 rejected).
    pub fn step(&mut self, op: &GuestOp) -> Result<StepResult, SimError> {
        match op {
            GuestOp::Hypercall { call } => Ok(StepResult::Hypercall(self.hypercall(call))),
            _ => self.machine.step_user(op),
        }
    }

    pub fn hypercall(&mut self, call: &Hypercall) -> Verdict {
        let v = dmmu_dispatch(&mut self.machine, &mut self.hyp, self.golden.as_ref(), call);
        self.machine.regs[0] = u32::from(!v.is_accepted());
        v
    }

    /// Convenience for tests and scenarios: user read that must not fault.
    pub fn read(&mut self, va: VirtAddr) -> Result<u32, SimError> {
        match self.step(&GuestOp::Read { va })? {
            StepResult::Value(v) => Ok(v),
            other => Err(SimError::InvalidConfig(format!("read of {va} gave {other:?}"))),
        }
    }

    /// User write that must not fault.
    pub fn write(&mut self, va: VirtAddr, value: u32) -> Result<(), SimError> {
        match self.step(&GuestOp::Write { va, value })? {
            StepResult::Done => Ok(()),
            other => Err(SimError::InvalidConfig(format!("write of {va} gave {other:?}"))),
        }
    }

    /// Integrity of the executable working set, if the monitor is on.
    pub fn integrity(&self) -> Option<bool> {
        self.golden.as_ref().map(|gi| monitor::integrity(gi, &self.machine))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmu::{translate, Fault};
    use crate::{AccessReq, Mode};

    #[test]
    fn boot_layout_translates() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let m = &sys.machine;
        let t = translate(m, VirtAddr(0x0030_0010), Mode::NonPrivileged, AccessReq::Write).unwrap();
        assert_eq!((t.pa, t.cacheable), (PhysAddr(0x0030_0010), true));
        let t = translate(m, va_uncached(PhysAddr(0x0030_0010)), Mode::NonPrivileged, AccessReq::Write).unwrap();
        assert_eq!((t.pa, t.cacheable), (PhysAddr(0x0030_0010), false));
        assert_eq!(translate(m, VirtAddr(0x0000_1000), Mode::NonPrivileged, AccessReq::Read), Err(Fault::Unmapped));
        assert_eq!(translate(m, VirtAddr(0x0010_0000), Mode::NonPrivileged, AccessReq::Write), Err(Fault::Permission));
        assert!(translate(m, VirtAddr(0x0011_0000), Mode::NonPrivileged, AccessReq::Execute).is_ok());
        assert_eq!(translate(m, scratch_va(0, 0), Mode::NonPrivileged, AccessReq::Read), Err(Fault::Unmapped));
        sys.write(VirtAddr(0x0020_0040), 5).unwrap();
        assert_eq!(sys.read(VirtAddr(0x0020_0040)).unwrap(), 5);
    }

    #[test]
    fn boot_refcounts() {
        let sys = System::boot(&SystemConfig::default()).unwrap();
        let r = |b: u32| sys.hyp.refs[b as usize];
        assert_eq!(r(BOOT_L1).wt, 0);
        assert_eq!(r(BOOT_L2).ptlink, 2);
        assert_eq!((r(CODE_FIRST).wt, r(CODE_FIRST).ex), (0, 1));
        assert_eq!(r(0x300).wt, 2);
        assert_eq!(r(300).wt, 1);
    }

    #[test]
    fn monitor_boot_state_has_integrity() {
        let cfg = SystemConfig { monitor: true, ..SystemConfig::default() };
        let sys = System::boot(&cfg).unwrap();
        assert_eq!(sys.integrity(), Some(true));
        assert_eq!(monitor::working_set(&sys.machine).len(), CODE_BLOCKS as usize);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(System::boot(&SystemConfig { mem_mb: 1, ..SystemConfig::default() }).is_err());
        let g = Some(BlockRange::new(0, 4096));
        assert!(System::boot(&SystemConfig { guest_mem: g, ..SystemConfig::default() }).is_err());
        let mut cfg = SystemConfig::default();
        cfg.geometry.num_sets = 100;
        assert!(matches!(System::boot(&cfg), Err(SimError::InvalidGeometry(_))));
    }
}
