//! W⊕X code-signing monitor: executable-space protection over blocks, code
//! signatures checked against a golden image, and the integrity predicate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::addr::{Mode, BLOCK_WORDS};
use crate::dmmu::{self, hyp_read_guest, l1_grant, l2_grant, BlockRange, Grant, HypState, Hypercall, Rejection};
use crate::error::SimError;
use crate::machine::MachineState;
use crate::mmu::{mmu_view, PermissionMap};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Signature {
    Word(u32),
    Bytes(Vec<u8>),
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signature::Word(w) => write!(f, "{w:08x}"),
            Signature::Bytes(b) => b.iter().try_for_each(|x| write!(f, "{x:02x}")),
        }
    }
}

impl std::str::FromStr for Signature {
    type Err = SimError;

    /// Eight hex digits parse as a word signature, any other even length as bytes.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let s = s.trim();
        let bad = || SimError::Parse(format!("bad signature {s:?}"));
        if s.len() == 8 {
            return u32::from_str_radix(s, 16).map(Signature::Word).map_err(|_| bad());
        }
        if s.is_empty() || !s.len().is_multiple_of(2) {
            return Err(bad());
        }
        (0..s.len())
            .step_by(2)
            .map(|i| s.get(i..i + 2).and_then(|h| u8::from_str_radix(h, 16).ok()))
            .collect::<Option<Vec<u8>>>()
            .map(Signature::Bytes)
            .ok_or_else(bad)
    }
}

/// Maps one block's content to a signature.
pub trait SignatureScheme: Send + Sync {
    fn sign(&self, content: &[u32]) -> Signature;
}

/// XOR of the block's words.
#[derive(Clone, Copy, Debug, Default)]
pub struct XorScheme;

impl SignatureScheme for XorScheme {
    fn sign(&self, content: &[u32]) -> Signature {
        Signature::Word(content.iter().fold(0, |a, &w| a ^ w))
    }
}

/// Signature of `content` under the default scheme.
pub fn sig(content: &[u32]) -> Signature {
    XorScheme.sign(content)
}

/// The signatures of approved executable blocks. Constant during a run.
#[derive(Clone)]
pub struct GoldenImage {
    signatures: BTreeSet<Signature>,
    scheme: Arc<dyn SignatureScheme>,
}

impl fmt::Debug for GoldenImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GoldenImage").field("signatures", &self.signatures).finish_non_exhaustive()
    }
}

impl GoldenImage {
    pub fn new(signatures: impl IntoIterator<Item = Signature>) -> Self {
        Self::with_scheme(signatures, Arc::new(XorScheme))
    }

    pub fn with_scheme(signatures: impl IntoIterator<Item = Signature>, scheme: Arc<dyn SignatureScheme>) -> Self {
        GoldenImage { signatures: signatures.into_iter().collect(), scheme }
    }

    pub fn signatures(&self) -> &BTreeSet<Signature> {
        &self.signatures
    }

    pub fn sign(&self, content: &[u32]) -> Signature {
        self.scheme.sign(content)
    }

    pub fn approves(&self, content: &[u32]) -> bool {
        self.signatures.contains(&self.sign(content))
    }

    /// One hex signature per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let sigs = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::parse)
            .collect::<Result<Vec<Signature>, _>>()?;
        Ok(GoldenImage::new(sigs))
    }

    pub fn to_hex_lines(&self) -> String {
        self.signatures.iter().map(|s| format!("{s}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitorReject {
    /// A block would become both writable and executable.
    Wx { block: u32 },
    /// An executable block's content is not signed.
    BadSignature { block: u32 },
    /// A created table maps one block both writable and executable.
    ConflictingAliases { block: u32 },
    /// The page table being modified is itself executable.
    ExecutablePt { block: u32 },
}

impl MonitorReject {
    pub fn kind(&self) -> &'static str {
        match self {
            MonitorReject::Wx { .. } => "WX",
            MonitorReject::BadSignature { .. } => "BadSignature",
            MonitorReject::ConflictingAliases { .. } => "ConflictingAliases",
            MonitorReject::ExecutablePt { .. } => "ExecutablePT",
        }
    }
}

/// Blocks executable in user mode under the active tables, with their
/// memory-view content.
pub fn working_set(m: &MachineState) -> BTreeMap<u32, Vec<u32>> {
    let pm = PermissionMap::build(&mmu_view(m), Mode::NonPrivileged);
    pm.blocks_with(PermissionMap::EXEC).map(|b| (b, m.memory_view_block(b))).collect()
}

/// Every working-set block carries an approved signature.
pub fn integrity(gi: &GoldenImage, m: &MachineState) -> bool {
    working_set(m).values().all(|c| gi.approves(c))
}

/// Blocks of the working set whose signature is not approved.
pub fn unsigned_blocks(gi: &GoldenImage, m: &MachineState) -> Vec<u32> {
    working_set(m).into_iter().filter(|(_, c)| !gi.approves(c)).map(|(b, _)| b).collect()
}

fn reject(r: MonitorReject) -> Rejection {
    Rejection::Monitor { reject: r }
}

/// ρ_ex of every block of the table is zero.
pub fn check_table_not_executable(h: &HypState, table: BlockRange) -> Result<(), Rejection> {
    match table.iter().find(|&b| h.refs.get(b as usize).is_some_and(|r| r.ex > 0)) {
        Some(block) => Err(reject(MonitorReject::ExecutablePt { block })),
        None => Ok(()),
    }
}

/// sound_W⊕X against the current counters, then sound_S for executable grants.
pub fn check_grant(m: &mut MachineState, h: &mut HypState, gi: &GoldenImage, g: &Grant) -> Result<(), Rejection> {
    let blocks = g.first..(g.first + g.count).min(h.num_blocks());
    if g.wt && g.ex {
        return Err(reject(MonitorReject::Wx { block: g.first }));
    }
    for b in blocks.clone() {
        let r = h.refs[b as usize];
        if (g.ex && r.wt > 0) || (g.wt && r.ex > 0) {
            return Err(reject(MonitorReject::Wx { block: b }));
        }
    }
    if g.ex {
        for b in blocks {
            let content = (0..BLOCK_WORDS).map(|i| hyp_read_guest(m, h, b, i)).collect::<Result<Vec<u32>, _>>()?;
            if !gi.approves(&content) {
                return Err(reject(MonitorReject::BadSignature { block: b }));
            }
        }
    }
    Ok(())
}

/// Per-entry checks of a table about to be created plus the no-conflict
/// condition among its own entries.
pub fn check_create(
    m: &mut MachineState,
    h: &mut HypState,
    gi: &GoldenImage,
    table: BlockRange,
    grants: &[Grant],
) -> Result<(), Rejection> {
    check_table_not_executable(h, table)?;
    let mut writable = BTreeSet::new();
    let mut executable = BTreeSet::new();
    for g in grants {
        if g.wt {
            writable.extend(g.blocks());
        }
        if g.ex {
            executable.extend(g.blocks());
        }
    }
    if let Some(&block) = writable.intersection(&executable).next() {
        return Err(reject(MonitorReject::ConflictingAliases { block }));
    }
    for g in grants {
        check_grant(m, h, gi, g)?;
    }
    Ok(())
}

/// The monitor's policy for one request, evaluated against the current
/// state. Table contents and code are read through the hypervisor's
/// cacheable mapping, so this may change the cache.
pub fn monitor_validate(
    m: &mut MachineState,
    h: &mut HypState,
    gi: &GoldenImage,
    call: &Hypercall,
) -> Result<(), Rejection> {
    match *call {
        Hypercall::Switch { .. } | Hypercall::FreeL1 { .. } | Hypercall::FreeL2 { .. } => Ok(()),
        Hypercall::UnmapL1 { bl, .. } => check_table_not_executable(h, BlockRange::new(bl, bl + 4)),
        Hypercall::UnmapL2 { bl, .. } => check_table_not_executable(h, BlockRange::new(bl, bl + 1)),
        Hypercall::MapL1 { bl, .. } | Hypercall::LinkL1 { bl, .. } => {
            check_table_not_executable(h, BlockRange::new(bl, bl + 4))?;
            match dmmu::requested_descriptor(call).and_then(l1_grant) {
                Some(g) => check_grant(m, h, gi, &g),
                None => Ok(()),
            }
        }
        Hypercall::MapL2 { bl, .. } => {
            check_table_not_executable(h, BlockRange::new(bl, bl + 1))?;
            match dmmu::requested_descriptor(call).and_then(l2_grant) {
                Some(g) => check_grant(m, h, gi, &g),
                None => Ok(()),
            }
        }
        Hypercall::CreateL1 { bl } | Hypercall::CreateL2 { bl } => {
            let (count, grant): (u32, fn(u32) -> Option<Grant>) = match call {
                Hypercall::CreateL1 { .. } => (4, l1_grant),
                _ => (1, l2_grant),
            };
            let table = BlockRange::new(bl, (bl + count).min(h.num_blocks()));
            let mut grants = Vec::new();
            for b in table.iter() {
                for i in 0..BLOCK_WORDS {
                    grants.extend(grant(hyp_read_guest(m, h, b, i)?));
                }
            }
            check_create(m, h, gi, table, &grants)
        }
    }
}
