//! Derivability: the over-approximation of what one non-privileged step may
//! change in memory and cache.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::addr::{Mode, PhysAddr};
use crate::cache::{CacheGeometry, CacheLine, CacheSet};
use crate::machine::MachineState;
use crate::mmu::{mmu_view, PermissionMap};

/// The cache line an address maps to, seen from that address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct WayView {
    hit: bool,
    dirty: bool,
    value: Option<u32>,
}

fn way_of(m: &MachineState, pa: PhysAddr) -> WayView {
    match m.cache.line(pa) {
        Some(l) => WayView { hit: true, dirty: l.dirty, value: Some(l.data[m.cache.geometry().word_index(pa)]) },
        None => WayView { hit: false, dirty: false, value: None },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum DerivClause {
    /// Eviction, possibly writing back a dirty line.
    Empty,
    /// Fill of a readable address from memory.
    Read,
    /// Write of a writable address, cached (dirty) or uncached.
    Write,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DerivabilityWitness {
    pub coregs_unchanged: bool,
    /// One clause per changed address, the first that holds.
    pub verdicts: BTreeMap<PhysAddr, DerivClause>,
    /// First address no clause covers.
    pub violation: Option<PhysAddr>,
}

impl DerivabilityWitness {
    pub fn passed(&self) -> bool {
        self.coregs_unchanged && self.violation.is_none()
    }
}

fn set_lines<'a>(g: &CacheGeometry, s: usize, set: &'a CacheSet) -> Vec<(PhysAddr, &'a CacheLine)> {
    set.slice().map(|(tag, l)| (g.line_base(s, tag), l)).collect()
}

fn find_line<'a>(v: &[(PhysAddr, &'a CacheLine)], base: PhysAddr) -> Option<&'a CacheLine> {
    v.iter().find(|e| e.0 == base).map(|e| e.1)
}

/// Addresses whose memory word or cache line (hit, dirty, value) differs.
fn changed_addresses(pre: &MachineState, post: &MachineState) -> BTreeSet<PhysAddr> {
    let mut out: BTreeSet<PhysAddr> = pre.mem.changed_words(&post.mem).into_iter().collect();
    let g = pre.cache.geometry();
    let words = g.line_words as u32;
    for (s, (a, b)) in pre.cache.sets().iter().zip(post.cache.sets()).enumerate() {
        if a.ways() == b.ways() {
            continue;
        }
        let (x, y) = (set_lines(g, s, a), set_lines(g, s, b));
        for &(base, _) in x.iter().chain(&y) {
            if find_line(&x, base) != find_line(&y, base) {
                out.extend((0..words).map(|i| PhysAddr(base.0 + 4 * i)));
            }
        }
    }
    out
}

/// Evaluates the three clauses for every changed address, with permissions
/// taken from the pre-state. The eviction clause also admits a clean that
/// leaves the line resident.
pub fn check_derivability(pre: &MachineState, post: &MachineState) -> DerivabilityWitness {
    let pm = PermissionMap::build(&mmu_view(pre), Mode::NonPrivileged);
    check_derivability_with(&pm, pre, post)
}

/// [`check_derivability`] with the pre-state's user permissions supplied.
pub fn check_derivability_with(pm: &PermissionMap, pre: &MachineState, post: &MachineState) -> DerivabilityWitness {
    let mut verdicts = BTreeMap::new();
    let mut violation = None;
    for pa in changed_addresses(pre, post) {
        let (m0, m1) = (pre.mem.read(pa), post.mem.read(pa));
        let (w0, w1) = (way_of(pre, pa), way_of(post, pa));
        let flags = pm.flags(pa.block());
        let written_back = w0.dirty && Some(m1) == w0.value;
        // A clean by address is a write-back that keeps the line resident.
        let cleaned = written_back && w1.hit && !w1.dirty && w1.value == w0.value;
        let d_empty =
            (m1 == m0 || written_back) && (w1 == w0 || cleaned || (!w1.hit && (!w0.dirty || Some(m1) == w0.value)));
        let d_rd =
            flags & PermissionMap::READ != 0 && m1 == m0 && (w1 == w0 || (w1.hit && w1.value == Some(m0) && !w0.hit));
        let d_wt = flags & PermissionMap::WRITE != 0
            && (w1 == w0 || w1.dirty)
            && (m1 == m0 || w1.dirty || flags & PermissionMap::WRITE_UNCACHED != 0);
        let clause = if d_empty {
            DerivClause::Empty
        } else if d_rd {
            DerivClause::Read
        } else if d_wt {
            DerivClause::Write
        } else {
            violation.get_or_insert(pa);
            continue;
        };
        verdicts.insert(pa, clause);
    }
    DerivabilityWitness { coregs_unchanged: pre.coregs == post.coregs, verdicts, violation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::VirtAddr;
    use crate::system::{va_uncached, System, SystemConfig};

    fn sys() -> System {
        System::boot(&SystemConfig::default()).unwrap()
    }

    #[test]
    fn identical_states_pass() {
        let s = sys();
        let w = check_derivability(&s.machine, &s.machine);
        assert!(w.passed());
        assert!(w.verdicts.is_empty());
    }

    #[test]
    fn user_write_is_write_derivable() {
        let mut s = sys();
        let pre = s.machine.clone();
        s.write(VirtAddr(0x0030_0008), 5).unwrap();
        let w = check_derivability(&pre, &s.machine);
        assert!(w.passed());
        assert_eq!(w.verdicts[&PhysAddr(0x0030_0008)], DerivClause::Write);
        // Other words of the filled line only count as a fill.
        assert_eq!(w.verdicts[&PhysAddr(0x0030_0004)], DerivClause::Read);

        let pre = s.machine.clone();
        s.write(va_uncached(PhysAddr(0x0030_1000)), 1).unwrap();
        let w = check_derivability(&pre, &s.machine);
        assert!(w.passed());
        assert_eq!(w.verdicts[&PhysAddr(0x0030_1000)], DerivClause::Write);
    }

    #[test]
    fn read_fill_is_read_derivable() {
        let mut s = sys();
        let pre = s.machine.clone();
        s.read(VirtAddr(0x0010_0000)).unwrap();
        let w = check_derivability(&pre, &s.machine);
        assert!(w.passed());
        assert_eq!(w.verdicts[&PhysAddr(0x0010_0000)], DerivClause::Read);
    }

    #[test]
    fn rejects_coregs_change() {
        let s = sys();
        let mut post = s.machine.clone();
        post.coregs.dacr = 3;
        assert!(!check_derivability(&s.machine, &post).passed());
    }

    #[test]
    fn rejects_write_to_read_only_memory() {
        let s = sys();
        let mut post = s.machine.clone();
        post.mem.write(PhysAddr(0x0010_0010), 9);
        let w = check_derivability(&s.machine, &post);
        assert_eq!(w.violation, Some(PhysAddr(0x0010_0010)));
        // Hypervisor memory is not even readable.
        let mut post = s.machine.clone();
        post.mem.write(PhysAddr(0x40), 9);
        assert_eq!(check_derivability(&s.machine, &post).violation, Some(PhysAddr(0x40)));
    }

    #[test]
    fn rejects_clean_line_change_without_fill() {
        let mut s = sys();
        s.read(VirtAddr(0x0010_0000)).unwrap();
        let pre = s.machine.clone();
        let mut post = pre.clone();
        let (set, way) = post.cache.find(PhysAddr(0x0010_0000)).unwrap();
        post.cache.poke(set, way, 0, 0xbad);
        assert_eq!(check_derivability(&pre, &post).violation, Some(PhysAddr(0x0010_0000)));
    }

    #[test]
    fn clean_by_address_is_derivable() {
        let s = sys();
        let mut pre = s.machine.clone();
        let pa = PhysAddr(0x0012_9000);
        pre.cached_write(pa, 4);
        let mut post = pre.clone();
        post.cache.clean_pa(&mut post.mem, pa);
        assert!(post.cache.line(pa).is_some_and(|l| !l.dirty));
        let w = check_derivability(&pre, &post);
        assert!(w.passed(), "{w:?}");
        assert_eq!(w.verdicts[&pa], DerivClause::Empty);

        // Clearing the dirty bit without writing back is not a clean.
        let mut post = pre.clone();
        let (set, way) = post.cache.find(pa).unwrap();
        post.cache.poke_dirty(set, way, false);
        assert_eq!(check_derivability(&pre, &post).violation, Some(pa));
    }

    #[test]
    fn dirty_eviction_is_always_derivable() {
        let s = sys();
        let mut pre = s.machine.clone();
        let pa = PhysAddr(0x0000_0100);
        pre.cached_write(pa, 4);
        let mut post = pre.clone();
        post.cache.invalidate_pa(&mut post.mem, pa);
        let w = check_derivability(&pre, &post);
        assert!(w.passed(), "{w:?}");
        assert_eq!(w.verdicts[&pa], DerivClause::Empty);
    }
}
