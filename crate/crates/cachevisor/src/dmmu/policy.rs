//! Page-table validation policy and the reference effects of descriptors.

use serde::{Deserialize, Serialize};

use super::{BlockRange, PageType, RefCounters, Rejection, COUNTER_MAX};
use crate::addr::SECTION_BLOCKS;
use crate::mmu::{L1Descriptor, L2Descriptor};

/// Which rule a descriptor broke.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clause {
    /// Reserved AP encoding.
    Unpredictable,
    /// Guest-accessible mapping with a target block outside guest memory.
    GuestAccessOutsideGuestMemory,
    /// Guest-writable mapping with a target block that is not Data.
    WritableNonData,
    /// Page-table descriptor pointing at a block not typed L2.
    LinkNotL2,
    /// Uncacheable mapping of an always-cacheable block (ACPT only).
    UncacheableAlias,
    /// Target beyond physical memory.
    TargetOutOfRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    /// Entry index inside the validated table.
    pub index: u32,
    pub clause: Clause,
}

/// Typing context a descriptor is judged against.
#[derive(Clone, Copy, Debug)]
pub struct PolicyCtx<'a> {
    pub pgtype: &'a [PageType],
    pub guest_mem: BlockRange,
    /// Set under ACPT: the always-cacheable region.
    pub acpt: Option<BlockRange>,
    /// Blocks being created, judged as if already carrying their new type.
    pub pending: Option<(BlockRange, PageType)>,
}

impl PolicyCtx<'_> {
    fn type_of(&self, b: u32) -> PageType {
        match self.pending {
            Some((r, t)) if r.contains(b) => t,
            _ => self.pgtype[b as usize],
        }
    }

    fn check_target(
        &self,
        first: u32,
        count: u32,
        user_access: bool,
        user_write: bool,
        cacheable: bool,
    ) -> Result<(), Clause> {
        let n = self.pgtype.len() as u32;
        if first.checked_add(count).is_none_or(|end| end > n) {
            return Err(Clause::TargetOutOfRange);
        }
        let blocks = first..first + count;
        if user_access && !blocks.clone().all(|b| self.guest_mem.contains(b)) {
            return Err(Clause::GuestAccessOutsideGuestMemory);
        }
        if user_write && !blocks.clone().all(|b| self.type_of(b) == PageType::Data) {
            return Err(Clause::WritableNonData);
        }
        if let Some(ac) = self.acpt {
            if !cacheable && blocks.clone().any(|b| ac.contains(b)) {
                return Err(Clause::UncacheableAlias);
            }
        }
        Ok(())
    }

    pub fn check_l1(&self, word: u32) -> Result<(), Clause> {
        match L1Descriptor::decode(word) {
            L1Descriptor::Invalid => Ok(()),
            L1Descriptor::Section { base, ap, cacheable, .. } => {
                if ap.is_unpredictable() {
                    return Err(Clause::Unpredictable);
                }
                self.check_target(base.block(), SECTION_BLOCKS, ap.user_read(), ap.user_write(), cacheable)
            }
            L1Descriptor::PageTable { base, .. } => {
                let b = base.block();
                if b as usize >= self.pgtype.len() {
                    Err(Clause::TargetOutOfRange)
                } else if self.type_of(b) != PageType::L2 {
                    Err(Clause::LinkNotL2)
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn check_l2(&self, word: u32) -> Result<(), Clause> {
        match L2Descriptor::decode(word) {
            L2Descriptor::Invalid => Ok(()),
            L2Descriptor::Small { base, ap, cacheable, .. } => {
                if ap.is_unpredictable() {
                    return Err(Clause::Unpredictable);
                }
                self.check_target(base.block(), 1, ap.user_read(), ap.user_write(), cacheable)
            }
        }
    }

    pub fn validate_l1(&self, words: &[u32]) -> Result<(), Violation> {
        for (i, &w) in words.iter().enumerate() {
            self.check_l1(w).map_err(|clause| Violation { index: i as u32, clause })?;
        }
        Ok(())
    }

    pub fn validate_l2(&self, words: &[u32]) -> Result<(), Violation> {
        for (i, &w) in words.iter().enumerate() {
            self.check_l2(w).map_err(|clause| Violation { index: i as u32, clause })?;
        }
        Ok(())
    }
}

/// Rights a single descriptor grants, in reference-counter terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub first: u32,
    pub count: u32,
    pub wt: bool,
    pub ex: bool,
    pub link: bool,
}

impl Grant {
    pub fn blocks(&self) -> std::ops::Range<u32> {
        self.first..self.first + self.count
    }
}

pub fn l1_grant(word: u32) -> Option<Grant> {
    match L1Descriptor::decode(word) {
        L1Descriptor::Section { base, ap, xn, .. } if !ap.is_unpredictable() => Some(Grant {
            first: base.block(),
            count: SECTION_BLOCKS,
            wt: ap.user_write(),
            ex: ap.user_read() && !xn,
            link: false,
        }),
        L1Descriptor::PageTable { base, .. } => {
            Some(Grant { first: base.block(), count: 1, wt: false, ex: false, link: true })
        }
        _ => None,
    }
}

pub fn l2_grant(word: u32) -> Option<Grant> {
    match L2Descriptor::decode(word) {
        L2Descriptor::Small { base, ap, xn, .. } if !ap.is_unpredictable() => {
            Some(Grant { first: base.block(), count: 1, wt: ap.user_write(), ex: ap.user_read() && !xn, link: false })
        }
        _ => None,
    }
}

/// Adds (`add = true`) or removes one descriptor's references.
pub fn apply_grant(refs: &mut [RefCounters], g: &Grant, add: bool, count_links: bool) -> Result<(), Rejection> {
    let n = refs.len() as u32;
    for b in g.first..(g.first + g.count).min(n) {
        let r = &mut refs[b as usize];
        for (on, c) in [(g.wt, &mut r.wt), (g.ex, &mut r.ex), (g.link && count_links, &mut r.ptlink)] {
            if !on {
                continue;
            }
            *c = if add { c.checked_add(1).filter(|&v| v <= COUNTER_MAX) } else { c.checked_sub(1) }
                .ok_or(Rejection::CounterOverflow { block: b })?;
        }
    }
    Ok(())
}
