//! The direct-paging hypervisor: page typing, reference counting and the
//! page-table hypercalls, with the cache countermeasure applied on entry.
//!
//! A block is a 4 KB physical page typed Data, L1 or L2. An L1 table spans
//! four consecutive blocks; an L2 block packs four 1 KB tables. Guest page
//! tables live in guest memory and are validated in place. Once typed they
//! are never guest-writable, so switching to an L1 needs no revalidation.

mod access;
mod policy;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use access::{hyp_read_guest, hyp_write_guest};
pub use policy::{apply_grant, l1_grant, l2_grant, Clause, Grant, PolicyCtx, Violation};

use crate::addr::{Mode, PhysAddr, BLOCK_WORDS, SECTION_BLOCKS};
use crate::machine::MachineState;
use crate::mmu::{AccessPerm, L1Descriptor, L2Descriptor};
use crate::monitor::{self, GoldenImage, MonitorReject};

/// Largest value a reference counter may hold (30-bit counters).
pub const COUNTER_MAX: u32 = (1 << 30) - 1;
/// Domain used for every guest descriptor the hypervisor writes.
pub const GUEST_DOMAIN: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageType {
    Data,
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RefCounters {
    /// User-writable descriptors targeting the block.
    pub wt: u32,
    /// User-executable descriptors targeting the block.
    pub ex: u32,
    /// Page-table descriptors pointing into the block.
    pub ptlink: u32,
}

/// Half-open range of block indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRange {
    pub start: u32,
    pub end: u32,
}

impl BlockRange {
    pub fn new(start: u32, end: u32) -> Self {
        BlockRange { start, end }
    }

    pub fn contains(&self, b: u32) -> bool {
        self.start <= b && b < self.end
    }

    pub fn contains_range(&self, other: &BlockRange) -> bool {
        other.start >= self.start && other.end <= self.end
    }

    pub fn iter(&self) -> std::ops::Range<u32> {
        self.start..self.end
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Countermeasure {
    #[default]
    None,
    /// Always-cacheable page tables.
    Acpt,
    /// Clean and invalidate exactly the non-critical blocks a handler reads.
    SelectiveEvict,
    /// Flush the whole data cache on every hypercall.
    FullFlush,
    /// Compare cacheable and uncacheable reads; reject on mismatch.
    IncoherencyDetect,
}

impl Countermeasure {
    pub const ALL: [Countermeasure; 5] = [
        Countermeasure::None,
        Countermeasure::Acpt,
        Countermeasure::SelectiveEvict,
        Countermeasure::FullFlush,
        Countermeasure::IncoherencyDetect,
    ];
}

/// Guest-requested rights for a new mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rights {
    pub ap: AccessPerm,
    pub cacheable: bool,
    pub executable: bool,
}

impl Rights {
    pub const fn user_rw() -> Self {
        Rights { ap: AccessPerm::USER_RW, cacheable: true, executable: false }
    }

    pub const fn user_ro() -> Self {
        Rights { ap: AccessPerm::USER_RO, cacheable: true, executable: false }
    }

    pub const fn user_rx() -> Self {
        Rights { ap: AccessPerm::USER_RO, cacheable: true, executable: true }
    }

    pub const fn uncached(self) -> Self {
        Rights { cacheable: false, ..self }
    }
}

/// The DMMU requests. `bl` is always the base block of the table operated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum Hypercall {
    Switch {
        bl: u32,
    },
    CreateL1 {
        bl: u32,
    },
    CreateL2 {
        bl: u32,
    },
    FreeL1 {
        bl: u32,
    },
    FreeL2 {
        bl: u32,
    },
    /// Section entry `idx` (< 4096) mapping the 1 MB aligned block `target`.
    MapL1 {
        bl: u32,
        idx: u32,
        target: u32,
        rights: Rights,
    },
    /// Small-page entry `idx` (masked to 10 bits) mapping block `target`.
    MapL2 {
        bl: u32,
        idx: u32,
        target: u32,
        rights: Rights,
    },
    UnmapL1 {
        bl: u32,
        idx: u32,
    },
    UnmapL2 {
        bl: u32,
        idx: u32,
    },
    /// Points L1 entry `idx` at table `l2_slot` (0..4) of the L2 block `l2_bl`.
    LinkL1 {
        bl: u32,
        idx: u32,
        l2_bl: u32,
        l2_slot: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    RefNonZero { block: u32 },
    OutsideGuestMemory { block: u32 },
    PolicyViolation { index: u32, clause: Clause },
    OutsideAlwaysCacheable { block: u32 },
    IncoherentInput { pa: PhysAddr },
    TypeMismatch { block: u32 },
    BadArgument,
    EntryInUse { index: u32 },
    ActiveTable,
    CounterOverflow { block: u32 },
    Monitor { reject: MonitorReject },
}

impl Rejection {
    /// Coarse reason name. Validator clauses that have a dedicated reason
    /// (unpredictable encodings, guest-memory escapes, uncacheable aliases of
    /// always-cacheable memory) report it instead of `PolicyViolation`.
    pub fn kind(&self) -> &'static str {
        match self {
            Rejection::RefNonZero { .. } => "RefNonZero",
            Rejection::OutsideGuestMemory { .. } => "OutsideGuestMemory",
            Rejection::PolicyViolation { clause, .. } => match clause {
                Clause::Unpredictable => "Unpredictable",
                Clause::GuestAccessOutsideGuestMemory => "OutsideGuestMemory",
                Clause::UncacheableAlias => "OutsideAlwaysCacheable",
                _ => "PolicyViolation",
            },
            Rejection::OutsideAlwaysCacheable { .. } => "OutsideAlwaysCacheable",
            Rejection::IncoherentInput { .. } => "IncoherentInput",
            Rejection::TypeMismatch { .. } => "TypeMismatch",
            Rejection::BadArgument => "BadArgument",
            Rejection::EntryInUse { .. } => "EntryInUse",
            Rejection::ActiveTable => "ActiveTable",
            Rejection::CounterOverflow { .. } => "CounterOverflow",
            Rejection::Monitor { reject } => reject.kind(),
        }
    }
}

impl From<MonitorReject> for Rejection {
    fn from(reject: MonitorReject) -> Self {
        Rejection::Monitor { reject }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected { rejection: Rejection },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }

    pub fn rejection(&self) -> Option<Rejection> {
        match self {
            Verdict::Accepted => None,
            Verdict::Rejected { rejection } => Some(*rejection),
        }
    }
}

/// Switches that break the hypervisor on purpose, for mutation tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    /// LinkL1 writes the descriptor but leaves `ptlink` alone.
    pub skip_link_refcount: bool,
}

#[derive(Clone, Debug)]
pub struct HypState {
    pub pgtype: Vec<PageType>,
    pub refs: Vec<RefCounters>,
    pub guest_mem: BlockRange,
    pub always_cacheable: BlockRange,
    pub countermeasure: Countermeasure,
    /// Blocks cleaned by the current handler before it read them.
    pub cleaned_history: BTreeSet<u32>,
    /// Blocks read by the current handler, with whether every read word was
    /// coherent at the time of the read.
    pub handler_reads: BTreeMap<u32, bool>,
    pub faults: FaultInjection,
}

impl HypState {
    pub fn new(
        num_blocks: usize,
        guest_mem: BlockRange,
        always_cacheable: BlockRange,
        countermeasure: Countermeasure,
    ) -> Self {
        HypState {
            pgtype: vec![PageType::Data; num_blocks],
            refs: vec![RefCounters::default(); num_blocks],
            guest_mem,
            always_cacheable,
            countermeasure,
            cleaned_history: BTreeSet::new(),
            handler_reads: BTreeMap::new(),
            faults: FaultInjection::default(),
        }
    }

    pub fn num_blocks(&self) -> u32 {
        self.pgtype.len() as u32
    }

    /// Critical resources: hypervisor memory and every typed page table.
    pub fn is_critical(&self, b: u32) -> bool {
        !self.guest_mem.contains(b) || self.pgtype[b as usize] != PageType::Data
    }

    pub fn policy_ctx(&self, pending: Option<(BlockRange, PageType)>) -> PolicyCtx<'_> {
        PolicyCtx {
            pgtype: &self.pgtype,
            guest_mem: self.guest_mem,
            acpt: (self.countermeasure == Countermeasure::Acpt).then_some(self.always_cacheable),
            pending,
        }
    }

    fn l1_table(&self, bl: u32) -> Result<BlockRange, Rejection> {
        if !bl.is_multiple_of(4) || bl + 4 > self.num_blocks() {
            return Err(Rejection::BadArgument);
        }
        let r = BlockRange::new(bl, bl + 4);
        match r.iter().find(|&b| self.pgtype[b as usize] != PageType::L1) {
            Some(block) => Err(Rejection::TypeMismatch { block }),
            None => Ok(r),
        }
    }

    fn l2_table(&self, bl: u32) -> Result<BlockRange, Rejection> {
        if bl >= self.num_blocks() {
            return Err(Rejection::BadArgument);
        }
        if self.pgtype[bl as usize] != PageType::L2 {
            return Err(Rejection::TypeMismatch { block: bl });
        }
        Ok(BlockRange::new(bl, bl + 1))
    }
}

/// Handles one hypercall atomically. A rejected call restores the machine
/// exactly, cache included; only the instrumentation records survive.
pub fn dmmu_dispatch(m: &mut MachineState, h: &mut HypState, gi: Option<&GoldenImage>, call: &Hypercall) -> Verdict {
    h.cleaned_history.clear();
    h.handler_reads.clear();
    let saved = m.clone();
    let saved_mode = m.mode;
    m.mode = Mode::Privileged;
    match h.countermeasure {
        Countermeasure::FullFlush => m.cache.flush_all(&mut m.mem),
        // Selective eviction happens lazily, on the handler's first read of
        // each non-critical block.
        Countermeasure::None
        | Countermeasure::SelectiveEvict
        | Countermeasure::Acpt
        | Countermeasure::IncoherencyDetect => {}
    }
    match handle(m, h, gi, call) {
        Ok(()) => {
            m.mode = saved_mode;
            Verdict::Accepted
        }
        Err(rejection) => {
            *m = saved;
            Verdict::Rejected { rejection }
        }
    }
}

#[derive(Clone, Copy)]
enum Entry {
    L1(u32),
    L2(u32),
}

impl Entry {
    fn word(self) -> u32 {
        match self {
            Entry::L1(w) | Entry::L2(w) => w,
        }
    }

    fn grant(self) -> Option<Grant> {
        match self {
            Entry::L1(w) => l1_grant(w),
            Entry::L2(w) => l2_grant(w),
        }
    }

    fn is_invalid(self) -> bool {
        match self {
            Entry::L1(w) => L1Descriptor::decode(w) == L1Descriptor::Invalid,
            Entry::L2(w) => L2Descriptor::decode(w) == L2Descriptor::Invalid,
        }
    }

    fn same_level(self, w: u32) -> Entry {
        match self {
            Entry::L1(_) => Entry::L1(w),
            Entry::L2(_) => Entry::L2(w),
        }
    }
}

fn handle(m: &mut MachineState, h: &mut HypState, gi: Option<&GoldenImage>, call: &Hypercall) -> Result<(), Rejection> {
    match *call {
        Hypercall::Switch { bl } => {
            h.l1_table(bl)?;
            m.coregs.ttbr0 = PhysAddr::of_block(bl, 0);
            Ok(())
        }
        Hypercall::CreateL1 { bl } => create(m, h, gi.map(|g| (g, call)), bl, PageType::L1),
        Hypercall::CreateL2 { bl } => create(m, h, gi.map(|g| (g, call)), bl, PageType::L2),
        Hypercall::FreeL1 { bl } => free(m, h, bl, PageType::L1),
        Hypercall::FreeL2 { bl } => free(m, h, bl, PageType::L2),
        Hypercall::MapL1 { bl, idx, target, .. } => {
            let table = h.l1_table(bl)?;
            if idx >= 4096 || target % SECTION_BLOCKS != 0 {
                return Err(Rejection::BadArgument);
            }
            let w = requested_descriptor(call).expect("map request");
            map(m, h, gi.map(|g| (g, call)), table, idx, Entry::L1(w), false)
        }
        Hypercall::MapL2 { bl, idx, .. } => {
            let table = h.l2_table(bl)?;
            let w = requested_descriptor(call).expect("map request");
            map(m, h, gi.map(|g| (g, call)), table, idx & 0x3ff, Entry::L2(w), false)
        }
        Hypercall::LinkL1 { bl, idx, l2_bl, l2_slot } => {
            let table = h.l1_table(bl)?;
            if idx >= 4096 || l2_slot >= 4 || l2_bl >= h.num_blocks() {
                return Err(Rejection::BadArgument);
            }
            let w = requested_descriptor(call).expect("link request");
            map(m, h, gi.map(|g| (g, call)), table, idx, Entry::L1(w), true)
        }
        Hypercall::UnmapL1 { bl, idx } => {
            let table = h.l1_table(bl)?;
            if idx >= 4096 {
                return Err(Rejection::BadArgument);
            }
            unmap(m, h, gi.map(|g| (g, call)), table, idx, Entry::L1(0))
        }
        Hypercall::UnmapL2 { bl, idx } => {
            let table = h.l2_table(bl)?;
            unmap(m, h, gi.map(|g| (g, call)), table, idx & 0x3ff, Entry::L2(0))
        }
    }
}

/// The descriptor word a map or link request asks to install.
pub fn requested_descriptor(call: &Hypercall) -> Option<u32> {
    match *call {
        Hypercall::MapL1 { target, rights, .. } => Some(
            L1Descriptor::Section {
                base: PhysAddr::of_block(target, 0),
                ap: rights.ap,
                cacheable: rights.cacheable,
                xn: !rights.executable,
                domain: GUEST_DOMAIN,
            }
            .encode(),
        ),
        Hypercall::MapL2 { target, rights, .. } => Some(
            L2Descriptor::Small {
                base: PhysAddr::of_block(target, 0),
                ap: rights.ap,
                cacheable: rights.cacheable,
                xn: !rights.executable,
            }
            .encode(),
        ),
        Hypercall::LinkL1 { l2_bl, l2_slot, .. } => Some(
            L1Descriptor::PageTable {
                base: PhysAddr(PhysAddr::of_block(l2_bl, 0).0 + l2_slot * 1024),
                domain: GUEST_DOMAIN,
            }
            .encode(),
        ),
        _ => None,
    }
}

fn entry_location(table: BlockRange, idx: u32) -> (u32, usize) {
    (table.start + idx / BLOCK_WORDS as u32, (idx as usize) % BLOCK_WORDS)
}

fn map(
    m: &mut MachineState,
    h: &mut HypState,
    mon: Option<(&GoldenImage, &Hypercall)>,
    table: BlockRange,
    idx: u32,
    new: Entry,
    is_link: bool,
) -> Result<(), Rejection> {
    let (eb, off) = entry_location(table, idx);
    let cur = new.same_level(hyp_read_guest(m, h, eb, off)?);
    if !cur.is_invalid() {
        return Err(Rejection::EntryInUse { index: idx });
    }
    let ctx = h.policy_ctx(None);
    let checked = match new {
        Entry::L1(w) => ctx.check_l1(w),
        Entry::L2(w) => ctx.check_l2(w),
    };
    checked.map_err(|clause| Rejection::PolicyViolation { index: idx, clause })?;
    if let Some((gi, call)) = mon {
        monitor::monitor_validate(m, h, gi, call)?;
    }
    let grant = new.grant();
    let mut refs = h.refs.clone();
    if let Some(g) = grant {
        let count_links = !(is_link && h.faults.skip_link_refcount);
        apply_grant(&mut refs, &g, true, count_links)?;
    }
    hyp_write_guest(m, h, eb, off, new.word());
    h.refs = refs;
    Ok(())
}

fn unmap(
    m: &mut MachineState,
    h: &mut HypState,
    mon: Option<(&GoldenImage, &Hypercall)>,
    table: BlockRange,
    idx: u32,
    level: Entry,
) -> Result<(), Rejection> {
    if let Some((gi, call)) = mon {
        monitor::monitor_validate(m, h, gi, call)?;
    }
    let (eb, off) = entry_location(table, idx);
    let cur = level.same_level(hyp_read_guest(m, h, eb, off)?);
    if cur.is_invalid() {
        return Ok(());
    }
    let mut refs = h.refs.clone();
    if let Some(g) = cur.grant() {
        apply_grant(&mut refs, &g, false, true)?;
    }
    hyp_write_guest(m, h, eb, off, 0);
    h.refs = refs;
    Ok(())
}

fn create(
    m: &mut MachineState,
    h: &mut HypState,
    mon: Option<(&GoldenImage, &Hypercall)>,
    bl: u32,
    ty: PageType,
) -> Result<(), Rejection> {
    let count = if ty == PageType::L1 { 4 } else { 1 };
    if (ty == PageType::L1 && !bl.is_multiple_of(4)) || bl.saturating_add(count) > h.num_blocks() {
        return Err(Rejection::BadArgument);
    }
    let range = BlockRange::new(bl, bl + count);
    for b in range.iter() {
        if !h.guest_mem.contains(b) {
            return Err(Rejection::OutsideGuestMemory { block: b });
        }
        if h.countermeasure == Countermeasure::Acpt && !h.always_cacheable.contains(b) {
            return Err(Rejection::OutsideAlwaysCacheable { block: b });
        }
        if h.pgtype[b as usize] != PageType::Data {
            return Err(Rejection::TypeMismatch { block: b });
        }
        let r = h.refs[b as usize];
        if r.wt != 0 || r.ptlink != 0 {
            return Err(Rejection::RefNonZero { block: b });
        }
    }
    let mut words = Vec::with_capacity(count as usize * BLOCK_WORDS);
    for b in range.iter() {
        for off in 0..BLOCK_WORDS {
            words.push(hyp_read_guest(m, h, b, off)?);
        }
    }
    let entry = |w| if ty == PageType::L1 { Entry::L1(w) } else { Entry::L2(w) };
    let ctx = h.policy_ctx(Some((range, ty)));
    let checked = if ty == PageType::L1 { ctx.validate_l1(&words) } else { ctx.validate_l2(&words) };
    checked.map_err(|v| Rejection::PolicyViolation { index: v.index, clause: v.clause })?;
    if let Some((gi, call)) = mon {
        monitor::monitor_validate(m, h, gi, call)?;
    }
    let mut refs = h.refs.clone();
    for g in words.iter().filter_map(|&w| entry(w).grant()) {
        apply_grant(&mut refs, &g, true, true)?;
    }
    for b in range.iter() {
        h.pgtype[b as usize] = ty;
    }
    h.refs = refs;
    Ok(())
}

fn free(m: &mut MachineState, h: &mut HypState, bl: u32, ty: PageType) -> Result<(), Rejection> {
    let range = if ty == PageType::L1 { h.l1_table(bl)? } else { h.l2_table(bl)? };
    if ty == PageType::L1 && m.coregs.mmu_enabled && m.coregs.ttbr0.block() == bl {
        return Err(Rejection::ActiveTable);
    }
    for b in range.iter() {
        let r = h.refs[b as usize];
        if r.wt != 0 || r.ptlink != 0 {
            return Err(Rejection::RefNonZero { block: b });
        }
    }
    let mut refs = h.refs.clone();
    for b in range.iter() {
        for off in 0..BLOCK_WORDS {
            let w = hyp_read_guest(m, h, b, off)?;
            let e = if ty == PageType::L1 { Entry::L1(w) } else { Entry::L2(w) };
            if let Some(g) = e.grant() {
                apply_grant(&mut refs, &g, false, true)?;
            }
        }
    }
    for b in range.iter() {
        h.pgtype[b as usize] = PageType::Data;
    }
    h.refs = refs;
    Ok(())
}

/// Validates a full L1 table (4096 words) against `h`'s typing. If `table`
/// names the table's own base block, those blocks are judged as L1.
pub fn validate_l1(h: &HypState, contents: &[u32], table: Option<u32>) -> Result<(), Violation> {
    let pending = table.map(|b| (BlockRange::new(b, b + 4), PageType::L1));
    h.policy_ctx(pending).validate_l1(contents)
}

/// Validates an L2 block (1024 words, four tables).
pub fn validate_l2(h: &HypState, contents: &[u32], table: Option<u32>) -> Result<(), Violation> {
    let pending = table.map(|b| (BlockRange::new(b, b + 1), PageType::L2));
    h.policy_ctx(pending).validate_l2(contents)
}

#[cfg(test)]
mod tests;
