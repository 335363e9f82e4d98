//! Two-level short-descriptor page-table walk and the definitional
//! predicates built on it (Mon, write-derivability, MMU equivalence,
//! MMU safety).
//!
//! Descriptor fetches read the core view: a cached descriptor wins over
//! memory, but the walk never allocates lines. The bit layout is documented
//! in `docs/descriptors.md`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{AccessReq, Mode, PhysAddr, VirtAddr, SECTION_BLOCKS};
use crate::machine::MachineState;

/// The 2-bit AP field.
///
/// | bits | privileged | non-privileged |
/// |------|------------|----------------|
/// | 00   | reserved: unpredictable | |
/// | 01   | read/write | none |
/// | 10   | read/write | read |
/// | 11   | read/write | read/write |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessPerm(u8);

impl AccessPerm {
    pub const UNPREDICTABLE: AccessPerm = AccessPerm(0b00);
    pub const PRIV_ONLY: AccessPerm = AccessPerm(0b01);
    pub const USER_RO: AccessPerm = AccessPerm(0b10);
    pub const USER_RW: AccessPerm = AccessPerm(0b11);

    pub fn from_bits(bits: u8) -> Self {
        AccessPerm(bits & 0b11)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_unpredictable(self) -> bool {
        self == Self::UNPREDICTABLE
    }

    pub fn allows(self, mode: Mode, write: bool) -> bool {
        match (self.0, mode) {
            (0b00, _) => false,
            (_, Mode::Privileged) => true,
            (0b10, Mode::NonPrivileged) => !write,
            (0b11, Mode::NonPrivileged) => true,
            _ => false,
        }
    }

    pub fn user_read(self) -> bool {
        self.allows(Mode::NonPrivileged, false)
    }

    pub fn user_write(self) -> bool {
        self.allows(Mode::NonPrivileged, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum L1Descriptor {
    Invalid,
    Section { base: PhysAddr, ap: AccessPerm, cacheable: bool, xn: bool, domain: u8 },
    PageTable { base: PhysAddr, domain: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum L2Descriptor {
    Invalid,
    Small { base: PhysAddr, ap: AccessPerm, cacheable: bool, xn: bool },
}

impl L1Descriptor {
    pub fn decode(w: u32) -> Self {
        match w & 0b11 {
            0b01 => L1Descriptor::PageTable { base: PhysAddr(w & 0xffff_fc00), domain: ((w >> 5) & 0xf) as u8 },
            0b10 => L1Descriptor::Section {
                base: PhysAddr(w & 0xfff0_0000),
                ap: AccessPerm::from_bits((w >> 10) as u8),
                cacheable: w & (1 << 3) != 0,
                xn: w & (1 << 4) != 0,
                domain: ((w >> 5) & 0xf) as u8,
            },
            _ => L1Descriptor::Invalid,
        }
    }

    pub fn encode(self) -> u32 {
        match self {
            L1Descriptor::Invalid => 0,
            L1Descriptor::PageTable { base, domain } => (base.0 & 0xffff_fc00) | ((domain as u32 & 0xf) << 5) | 0b01,
            L1Descriptor::Section { base, ap, cacheable, xn, domain } => {
                (base.0 & 0xfff0_0000)
                    | ((ap.bits() as u32) << 10)
                    | ((domain as u32 & 0xf) << 5)
                    | ((xn as u32) << 4)
                    | ((cacheable as u32) << 3)
                    | 0b10
            }
        }
    }
}

impl L2Descriptor {
    pub fn decode(w: u32) -> Self {
        if w & 0b10 == 0 {
            return L2Descriptor::Invalid;
        }
        L2Descriptor::Small {
            base: PhysAddr(w & 0xffff_f000),
            ap: AccessPerm::from_bits((w >> 4) as u8),
            cacheable: w & (1 << 3) != 0,
            xn: w & 1 != 0,
        }
    }

    pub fn encode(self) -> u32 {
        match self {
            L2Descriptor::Invalid => 0,
            L2Descriptor::Small { base, ap, cacheable, xn } => {
                (base.0 & 0xffff_f000) | ((ap.bits() as u32) << 4) | ((cacheable as u32) << 3) | 0b10 | xn as u32
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Unmapped,
    Domain,
    Permission,
    /// The walk reached an encoding the hypervisor must never admit.
    Unpredictable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Translation {
    pub pa: PhysAddr,
    pub cacheable: bool,
}

fn permits(ap: AccessPerm, xn: bool, mode: Mode, req: AccessReq) -> Result<(), Fault> {
    if ap.is_unpredictable() {
        return Err(Fault::Unpredictable);
    }
    let ok = match req {
        AccessReq::Read => ap.allows(mode, false),
        AccessReq::Write => ap.allows(mode, true),
        AccessReq::Execute => ap.allows(mode, false) && !xn,
    };
    if ok {
        Ok(())
    } else {
        Err(Fault::Permission)
    }
}

fn domain_on(dacr: u16, domain: u8) -> bool {
    dacr & (1 << domain) != 0
}

/// Address of the L1 entry for `va`.
pub fn l1_entry_addr(ttbr0: PhysAddr, va: VirtAddr) -> PhysAddr {
    PhysAddr((ttbr0.0 & !0x3fff) | ((va.0 >> 20) << 2))
}

/// Address of the L2 entry for `va` in the table at `l2_base`.
pub fn l2_entry_addr(l2_base: PhysAddr, va: VirtAddr) -> PhysAddr {
    PhysAddr(l2_base.0 | (((va.0 >> 12) & 0xff) << 2))
}

pub fn translate(m: &MachineState, va: VirtAddr, mode: Mode, req: AccessReq) -> Result<Translation, Fault> {
    if !m.coregs.mmu_enabled {
        let pa = PhysAddr(va.0);
        return if m.mem.contains(pa) { Ok(Translation { pa, cacheable: false }) } else { Err(Fault::Unmapped) };
    }
    let fetch = |pa: PhysAddr| m.mem.contains(pa).then(|| m.core_view_unchecked(pa));
    let l1 = fetch(l1_entry_addr(m.coregs.ttbr0, va)).ok_or(Fault::Unmapped)?;
    let tr = match L1Descriptor::decode(l1) {
        L1Descriptor::Invalid => return Err(Fault::Unmapped),
        L1Descriptor::Section { base, ap, cacheable, xn, domain } => {
            if !domain_on(m.coregs.dacr, domain) {
                return Err(Fault::Domain);
            }
            permits(ap, xn, mode, req)?;
            Translation { pa: PhysAddr(base.0 | (va.0 & 0x000f_ffff)), cacheable }
        }
        L1Descriptor::PageTable { base, domain } => {
            let l2 = fetch(l2_entry_addr(base, va)).ok_or(Fault::Unmapped)?;
            match L2Descriptor::decode(l2) {
                L2Descriptor::Invalid => return Err(Fault::Unmapped),
                L2Descriptor::Small { base, ap, cacheable, xn } => {
                    if !domain_on(m.coregs.dacr, domain) {
                        return Err(Fault::Domain);
                    }
                    permits(ap, xn, mode, req)?;
                    Translation { pa: PhysAddr(base.0 | (va.0 & 0xfff)), cacheable }
                }
            }
        }
    };
    if m.mem.contains(tr.pa) {
        Ok(tr)
    } else {
        Err(Fault::Unmapped)
    }
}

/// One resolved L1 slot: the section, or the linked L2 table's 256 entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Resolved {
    Fault,
    Section(L1Descriptor),
    Table { domain: u8, entries: Vec<L2Descriptor> },
}

/// Everything the MMU's behaviour depends on, as seen through the core view.
/// Two states with equal views translate every address identically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MmuView {
    pub enabled: bool,
    pub dacr: u16,
    pub mem_blocks: usize,
    pub slots: Vec<Resolved>,
}

pub fn mmu_view(m: &MachineState) -> MmuView {
    let mem_blocks = m.mem.num_blocks();
    if !m.coregs.mmu_enabled {
        return MmuView { enabled: false, dacr: 0, mem_blocks, slots: Vec::new() };
    }
    let l1 = m.core_view_span(l1_entry_addr(m.coregs.ttbr0, VirtAddr(0)), 4096);
    let slots = l1
        .into_iter()
        .map(|w| {
            let Some(w) = w else {
                return Resolved::Fault;
            };
            match L1Descriptor::decode(w) {
                L1Descriptor::Invalid => Resolved::Fault,
                d @ L1Descriptor::Section { .. } => Resolved::Section(d),
                L1Descriptor::PageTable { base, domain } => Resolved::Table {
                    domain,
                    entries: m
                        .core_view_span(base, 256)
                        .into_iter()
                        .map(|w| w.map_or(L2Descriptor::Invalid, L2Descriptor::decode))
                        .collect(),
                },
            }
        })
        .collect();
    MmuView { enabled: true, dacr: m.coregs.dacr, mem_blocks, slots }
}

/// Per-block rights granted by a view to one mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionMap {
    flags: Vec<u8>,
}

impl PermissionMap {
    pub const READ: u8 = 1;
    pub const WRITE: u8 = 2;
    pub const EXEC: u8 = 4;
    /// Writable through at least one uncacheable mapping.
    pub const WRITE_UNCACHED: u8 = 8;

    pub fn build(view: &MmuView, mode: Mode) -> Self {
        let n = view.mem_blocks;
        if !view.enabled {
            let all = Self::READ | Self::WRITE | Self::EXEC | Self::WRITE_UNCACHED;
            return PermissionMap { flags: vec![all; n] };
        }
        let mut flags = vec![0u8; n];
        let mut grant = |first: u32, count: u32, ap: AccessPerm, xn: bool, cacheable: bool| {
            if ap.is_unpredictable() {
                return;
            }
            let mut f = 0;
            if ap.allows(mode, false) {
                f |= Self::READ;
                if !xn {
                    f |= Self::EXEC;
                }
            }
            if ap.allows(mode, true) {
                f |= Self::WRITE;
                if !cacheable {
                    f |= Self::WRITE_UNCACHED;
                }
            }
            for b in first..(first + count).min(n as u32) {
                flags[b as usize] |= f;
            }
        };
        for slot in &view.slots {
            match slot {
                Resolved::Section(L1Descriptor::Section { base, ap, cacheable, xn, domain }) => {
                    if domain_on(view.dacr, *domain) {
                        grant(base.block(), SECTION_BLOCKS, *ap, *xn, *cacheable);
                    }
                }
                Resolved::Table { domain, entries } if domain_on(view.dacr, *domain) => {
                    for e in entries {
                        if let L2Descriptor::Small { base, ap, cacheable, xn } = e {
                            grant(base.block(), 1, *ap, *xn, *cacheable);
                        }
                    }
                }
                _ => {}
            }
        }
        PermissionMap { flags }
    }

    pub fn flags(&self, block: u32) -> u8 {
        self.flags.get(block as usize).copied().unwrap_or(0)
    }

    pub fn allows(&self, pa: PhysAddr, req: AccessReq) -> bool {
        let bit = match req {
            AccessReq::Read => Self::READ,
            AccessReq::Write => Self::WRITE,
            AccessReq::Execute => Self::EXEC,
        };
        self.flags(pa.block()) & bit != 0
    }

    pub fn writable_uncached(&self, pa: PhysAddr) -> bool {
        self.flags(pa.block()) & Self::WRITE_UNCACHED != 0
    }

    pub fn blocks_with(&self, bit: u8) -> impl Iterator<Item = u32> + '_ {
        self.flags.iter().enumerate().filter(move |(_, f)| *f & bit != 0).map(|(b, _)| b as u32)
    }
}

/// Whether some virtual address grants `acc` on `pa` to `mode`.
pub fn mon(m: &MachineState, pa: PhysAddr, mode: Mode, acc: AccessReq) -> bool {
    PermissionMap::build(&mmu_view(m), mode).allows(pa, acc)
}

/// Memories of `s` and `s2` differ only at addresses writable in `mode` under `s`.
pub fn write_derivable(s: &MachineState, s2: &MachineState, mode: Mode) -> bool {
    let pm = PermissionMap::build(&mmu_view(s), mode);
    s.mem.changed_words(&s2.mem).iter().all(|&pa| pm.allows(pa, AccessReq::Write))
}

/// Same translation and rights for every address, mode and request. Exact
/// comparison of the resolved tables, cross-checked on `samples` random
/// addresses against the walker.
pub fn mmu_equivalent<R: Rng>(s1: &MachineState, s2: &MachineState, samples: usize, rng: &mut R) -> bool {
    if mmu_view(s1) != mmu_view(s2) {
        return false;
    }
    (0..samples).all(|_| {
        let va = VirtAddr(rng.gen());
        let mode = if rng.gen() { Mode::NonPrivileged } else { Mode::Privileged };
        let req = [AccessReq::Read, AccessReq::Write, AccessReq::Execute][rng.gen_range(0..3)];
        translate(s1, va, mode, req) == translate(s2, va, mode, req)
    })
}

/// Randomized MMU-safety: overwrite random multisets of user-writable words
/// (keeping any cached copy in step, as a user store would) and look for a
/// translation change. `false` means a counterexample was found.
pub fn mmu_safe_check<R: Rng>(s: &MachineState, trials: usize, rng: &mut R) -> bool {
    let view = mmu_view(s);
    let writable: Vec<u32> =
        PermissionMap::build(&view, Mode::NonPrivileged).blocks_with(PermissionMap::WRITE).collect();
    if writable.is_empty() {
        return true;
    }
    let geometry = *s.cache.geometry();
    for _ in 0..trials {
        let mut s2 = s.clone();
        for _ in 0..rng.gen_range(1..=16) {
            let b = writable[rng.gen_range(0..writable.len())];
            let pa = PhysAddr::of_block(b, rng.gen_range(0..crate::addr::BLOCK_WORDS));
            let v: u32 = rng.gen();
            s2.mem.write(pa, v);
            if let Some((set, way)) = s2.cache.find(pa) {
                s2.cache.poke(set, way, geometry.word_index(pa), v);
            }
        }
        if mmu_view(&s2) != view {
            return false;
        }
    }
    true
}
