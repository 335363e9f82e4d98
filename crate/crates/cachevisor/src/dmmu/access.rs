//! Hypervisor accesses to guest memory, routed through the active
//! countermeasure.

use super::{Countermeasure, HypState, Rejection};
use crate::addr::{PhysAddr, BLOCK_BYTES};
use crate::machine::MachineState;

/// Reads word `off` of guest block `b` on behalf of a handler.
pub fn hyp_read_guest(m: &mut MachineState, h: &mut HypState, b: u32, off: usize) -> Result<u32, Rejection> {
    let pa = PhysAddr::of_block(b, off);
    if h.countermeasure == Countermeasure::Acpt && !h.always_cacheable.contains(b) {
        return Err(Rejection::OutsideAlwaysCacheable { block: b });
    }
    if h.countermeasure == Countermeasure::SelectiveEvict && !h.is_critical(b) && !h.cleaned_history.contains(&b) {
        clean_invalidate_block(m, h, b);
    }
    let coherent = m.coherent([pa]);
    let entry = h.handler_reads.entry(b).or_insert(true);
    *entry &= coherent;
    if h.countermeasure == Countermeasure::IncoherencyDetect {
        // Dirty lines legitimately differ from memory; write them back so
        // that only clean-but-stale lines trip the comparison.
        m.cache.clean_pa(&mut m.mem, pa);
        let cached = m.cached_read(pa);
        if cached != m.mem.read(pa) {
            return Err(Rejection::IncoherentInput { pa });
        }
        return Ok(cached);
    }
    Ok(m.cached_read(pa))
}

pub fn hyp_write_guest(m: &mut MachineState, _h: &mut HypState, b: u32, off: usize, value: u32) {
    m.cached_write(PhysAddr::of_block(b, off), value);
}

/// Cleans and invalidates every line of block `b` and records it.
pub(super) fn clean_invalidate_block(m: &mut MachineState, h: &mut HypState, b: u32) {
    let step = m.cache.geometry().line_bytes();
    let base = PhysAddr::of_block(b, 0).0;
    for off in (0..BLOCK_BYTES).step_by(step as usize) {
        m.cache.invalidate_pa(&mut m.mem, PhysAddr(base + off));
    }
    h.cleaned_history.insert(b);
}
