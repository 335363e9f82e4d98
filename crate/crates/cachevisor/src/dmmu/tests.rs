use super::*;
use crate::addr::VirtAddr;
use crate::monitor::sig;
use crate::system::{scratch_va, System, SystemConfig, BOOT_L1, BOOT_L2, CODE_FIRST, SCRATCH_L2_FIRST};

const X: u32 = 264;

fn boot(cm: Countermeasure, monitor: bool) -> System {
    System::boot(&SystemConfig { countermeasure: cm, monitor, ..SystemConfig::default() }).unwrap()
}

/// Drops the boot mapping of section-1 blocks `first..first+n`.
fn release(sys: &mut System, first: u32, n: u32) {
    for b in first..first + n {
        let v = sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: b - 256 });
        assert!(v.is_accepted(), "{v:?}");
    }
}

fn poke(sys: &mut System, block: u32, word: usize, value: u32) {
    sys.machine.cached_write(PhysAddr::of_block(block, word), value);
}

fn section(block: u32, ap: AccessPerm) -> u32 {
    L1Descriptor::Section { base: PhysAddr::of_block(block, 0), ap, cacheable: true, xn: true, domain: 0 }.encode()
}

fn small(block: u32, ap: AccessPerm) -> u32 {
    L2Descriptor::Small { base: PhysAddr::of_block(block, 0), ap, cacheable: true, xn: true }.encode()
}

fn rejected(v: Verdict) -> Rejection {
    v.rejection().unwrap_or_else(|| panic!("expected rejection"))
}

#[test]
fn l1_create_rejects_writable_section_over_page_table() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 4);
    poke(&mut sys, X, 0, section(512, AccessPerm::USER_RW));
    poke(&mut sys, X, 7, section(256, AccessPerm::USER_RW));
    let v = sys.hypercall(&Hypercall::CreateL1 { bl: X });
    assert_eq!(rejected(v), Rejection::PolicyViolation { index: 7, clause: Clause::WritableNonData });
    assert_eq!(rejected(v).kind(), "PolicyViolation");
}

#[test]
fn l1_create_rejects_section_outside_guest_memory() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 4);
    poke(&mut sys, X, 9, section(0, AccessPerm::USER_RO));
    let v = sys.hypercall(&Hypercall::CreateL1 { bl: X });
    assert_eq!(rejected(v), Rejection::PolicyViolation { index: 9, clause: Clause::GuestAccessOutsideGuestMemory });
    assert_eq!(rejected(v).kind(), "OutsideGuestMemory");
}

#[test]
fn l1_create_rejects_link_to_non_l2() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 4);
    let link = L1Descriptor::PageTable { base: PhysAddr::of_block(300, 0), domain: 0 }.encode();
    poke(&mut sys, X, 3000, link);
    let v = sys.hypercall(&Hypercall::CreateL1 { bl: X });
    assert_eq!(rejected(v), Rejection::PolicyViolation { index: 3000, clause: Clause::LinkNotL2 });
}

#[test]
fn l2_create_rejects_writable_page_table_and_foreign_block() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 1);
    poke(&mut sys, X, 4, small(BOOT_L1, AccessPerm::USER_RW));
    let v = sys.hypercall(&Hypercall::CreateL2 { bl: X });
    assert_eq!(rejected(v), Rejection::PolicyViolation { index: 4, clause: Clause::WritableNonData });

    poke(&mut sys, X, 4, small(BOOT_L1, AccessPerm::USER_RO));
    poke(&mut sys, X, 900, small(3, AccessPerm::USER_RO));
    let v = sys.hypercall(&Hypercall::CreateL2 { bl: X });
    assert_eq!(rejected(v), Rejection::PolicyViolation { index: 900, clause: Clause::GuestAccessOutsideGuestMemory });

    // Privileged-only entries may point anywhere.
    poke(&mut sys, X, 900, small(3, AccessPerm::PRIV_ONLY));
    assert!(sys.hypercall(&Hypercall::CreateL2 { bl: X }).is_accepted());
    assert_eq!(sys.hyp.pgtype[X as usize], PageType::L2);
}

#[test]
fn unpredictable_ap_is_rejected() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 1);
    poke(&mut sys, X, 1, small(300, AccessPerm::UNPREDICTABLE));
    let v = sys.hypercall(&Hypercall::CreateL2 { bl: X });
    assert_eq!(rejected(v).kind(), "Unpredictable");
}

/// The four-block L1 allocation sequence: writable mapping, fill, unmap,
/// create, switch. Returns the counters of the first block after each step.
fn spawn(sys: &mut System) -> Vec<u32> {
    let rc = |s: &System| s.hyp.refs[X as usize].wt + s.hyp.refs[X as usize].ptlink;
    let mut trace = vec![rc(sys)];
    for j in 0..4 {
        let call =
            Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j, target: X + j, rights: Rights::user_rw() };
        assert!(sys.hypercall(&call).is_accepted());
    }
    trace.push(rc(sys));
    for i in 0..4 * BLOCK_WORDS {
        let w = sys.read(VirtAddr(0x0010_0000 + 4 * i as u32)).unwrap();
        sys.write(scratch_va(0, i), w).unwrap();
    }
    for j in 0..4 {
        assert!(sys.hypercall(&Hypercall::UnmapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + j }).is_accepted());
    }
    trace.push(rc(sys));
    let v = sys.hypercall(&Hypercall::CreateL1 { bl: X });
    assert!(v.is_accepted(), "{v:?}");
    let v = sys.hypercall(&Hypercall::Switch { bl: X });
    assert!(v.is_accepted(), "{v:?}");
    trace
}

#[test]
fn spawn_example_runs_end_to_end() {
    for cm in Countermeasure::ALL {
        let mut sys = boot(cm, false);
        release(&mut sys, X, 4);
        let l2_links = sys.hyp.refs[BOOT_L2 as usize].ptlink;
        assert_eq!(spawn(&mut sys), vec![0, 1, 0], "{cm:?}");
        assert_eq!(sys.machine.coregs.ttbr0, PhysAddr::of_block(X, 0));
        assert_eq!((0..4).map(|j| sys.hyp.pgtype[(X + j) as usize]).collect::<Vec<_>>(), vec![PageType::L1; 4]);
        assert_eq!(sys.hyp.refs[BOOT_L2 as usize].ptlink, 2 * l2_links);
        // The copy behaves like the boot table.
        sys.write(VirtAddr(0x0030_0000), 9).unwrap();
        assert_eq!(sys.read(VirtAddr(0x0030_0000)).unwrap(), 9);
        // Old table can go, the active one cannot.
        assert!(sys.hypercall(&Hypercall::FreeL1 { bl: BOOT_L1 }).is_accepted());
        assert_eq!(rejected(sys.hypercall(&Hypercall::FreeL1 { bl: X })), Rejection::ActiveTable);
    }
}

#[test]
fn create_requires_zero_refs_and_data_type() {
    let mut sys = boot(Countermeasure::None, false);
    assert_eq!(rejected(sys.hypercall(&Hypercall::CreateL1 { bl: X })), Rejection::RefNonZero { block: X });
    assert_eq!(
        rejected(sys.hypercall(&Hypercall::CreateL1 { bl: BOOT_L1 })),
        Rejection::TypeMismatch { block: BOOT_L1 }
    );
    assert_eq!(rejected(sys.hypercall(&Hypercall::CreateL1 { bl: 8 })), Rejection::OutsideGuestMemory { block: 8 });
    assert_eq!(rejected(sys.hypercall(&Hypercall::CreateL1 { bl: X + 1 })), Rejection::BadArgument);
}

#[test]
fn acpt_confines_page_tables() {
    let mut sys = boot(Countermeasure::Acpt, false);
    let b = 0x200;
    // Section 2 is mapped writable; drop both of its mappings first.
    for slot in [2, 0x802] {
        assert!(sys.hypercall(&Hypercall::UnmapL1 { bl: BOOT_L1, idx: slot }).is_accepted());
    }
    assert_eq!(rejected(sys.hypercall(&Hypercall::CreateL2 { bl: b })), Rejection::OutsideAlwaysCacheable { block: b });
    let call =
        Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: 300, rights: Rights::user_rw().uncached() };
    let v = rejected(sys.hypercall(&call));
    assert_eq!(v.kind(), "OutsideAlwaysCacheable");
}

#[test]
fn map_needs_free_entry_and_unmap_is_idempotent() {
    let mut sys = boot(Countermeasure::None, false);
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: 40, target: 300, rights: Rights::user_rw() };
    assert_eq!(rejected(sys.hypercall(&call)), Rejection::EntryInUse { index: 40 });
    let un = Hypercall::UnmapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST + 7 };
    assert!(sys.hypercall(&un).is_accepted());
    assert_eq!(
        rejected(sys.hypercall(&Hypercall::MapL1 { bl: BOOT_L1, idx: 4096, target: 0, rights: Rights::user_ro() })),
        Rejection::BadArgument
    );
    assert_eq!(
        rejected(sys.hypercall(&Hypercall::MapL1 { bl: X, idx: 0, target: 0, rights: Rights::user_ro() })),
        Rejection::TypeMismatch { block: X }
    );
}

#[test]
fn rejection_keeps_architectural_state() {
    let mut sys = boot(Countermeasure::None, false);
    release(&mut sys, X, 4);
    poke(&mut sys, X, 0, section(512, AccessPerm::USER_RW));
    poke(&mut sys, X, 1, section(0, AccessPerm::USER_RW));
    let before = sys.clone();
    assert!(!sys.hypercall(&Hypercall::CreateL1 { bl: X }).is_accepted());
    assert_eq!(sys.hyp.pgtype, before.hyp.pgtype);
    assert_eq!(sys.hyp.refs, before.hyp.refs);
    assert_eq!(sys.machine.coregs, before.machine.coregs);
    for b in 0..sys.hyp.num_blocks() {
        for i in (0..BLOCK_WORDS).step_by(97) {
            let pa = PhysAddr::of_block(b, i);
            assert_eq!(sys.machine.memory_view(pa).unwrap(), before.machine.memory_view(pa).unwrap());
        }
    }
}

#[test]
fn counters_saturate_with_rejection() {
    let mut sys = boot(Countermeasure::None, false);
    sys.hyp.refs[300].wt = COUNTER_MAX;
    let un = Hypercall::UnmapL2 { bl: BOOT_L2, idx: 44 };
    assert!(sys.hypercall(&un).is_accepted());
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: 44, target: 300, rights: Rights::user_rw() };
    assert!(sys.hypercall(&call).is_accepted());
    assert_eq!(
        rejected(sys.hypercall(&Hypercall::MapL2 { bl: BOOT_L2, idx: 45, target: 300, rights: Rights::user_rw() })),
        Rejection::EntryInUse { index: 45 }
    );
    let scratch = Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: 300, rights: Rights::user_rw() };
    assert_eq!(rejected(sys.hypercall(&scratch)), Rejection::CounterOverflow { block: 300 });
}

#[test]
fn selective_eviction_cleans_what_create_reads() {
    let mut sys = boot(Countermeasure::SelectiveEvict, false);
    release(&mut sys, X, 4);
    // A clean, stale line of X in the cache.
    let pa = PhysAddr::of_block(X, 5);
    sys.machine.cached_read(pa);
    sys.machine.mem.write(pa, section(0, AccessPerm::USER_RW));
    assert!(sys.hypercall(&Hypercall::CreateL1 { bl: X }).rejection().is_some());
    let expected: std::collections::BTreeSet<u32> = (X..X + 4).collect();
    assert_eq!(sys.hyp.cleaned_history, expected);
    assert!(sys.hyp.handler_reads.values().all(|&c| c));
}

#[test]
fn incoherency_detection_rejects_stale_input() {
    let mut sys = boot(Countermeasure::IncoherencyDetect, false);
    release(&mut sys, X, 4);
    let pa = PhysAddr::of_block(X, 5);
    sys.machine.cached_read(pa);
    sys.machine.mem.write(pa, 0xdead_0002);
    assert_eq!(rejected(sys.hypercall(&Hypercall::CreateL1 { bl: X })), Rejection::IncoherentInput { pa });
    // A dirty line differs from memory without being stale.
    let mut sys = boot(Countermeasure::IncoherencyDetect, false);
    release(&mut sys, X, 4);
    sys.machine.cached_write(pa, 0);
    sys.machine.mem.write(pa, 0xdead_0002);
    assert!(sys.hypercall(&Hypercall::CreateL1 { bl: X }).is_accepted());
}

#[test]
fn full_flush_empties_cache_on_entry() {
    let mut sys = boot(Countermeasure::FullFlush, false);
    sys.write(VirtAddr(0x0030_0000), 1).unwrap();
    sys.hypercall(&Hypercall::Switch { bl: BOOT_L1 });
    assert!(sys.machine.cache.lines().all(|(_, _, base, _)| base.block() == BOOT_L1 || base.block() == BOOT_L2));
    assert_eq!(sys.machine.mem.read(PhysAddr(0x0030_0000)), 1);
}

#[test]
fn link_refcount_fault_injection() {
    let mut sys = boot(Countermeasure::None, false);
    sys.hyp.faults.skip_link_refcount = true;
    let before = sys.hyp.refs[BOOT_L2 as usize].ptlink;
    let call = Hypercall::LinkL1 { bl: BOOT_L1, idx: 0x500, l2_bl: BOOT_L2, l2_slot: 2 };
    assert!(sys.hypercall(&call).is_accepted());
    assert_eq!(sys.hyp.refs[BOOT_L2 as usize].ptlink, before);
}

#[test]
fn monitor_rejects_writable_executable() {
    let mut sys = boot(Countermeasure::None, true);
    let rights = Rights { ap: AccessPerm::USER_RW, cacheable: true, executable: true };
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: CODE_FIRST, rights };
    assert_eq!(rejected(sys.hypercall(&call)).kind(), "WX");
    // Executable alias of a block that is writable elsewhere.
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: 300, rights: Rights::user_rx() };
    assert_eq!(rejected(sys.hypercall(&call)), Rejection::Monitor { reject: MonitorReject::Wx { block: 300 } });
}

#[test]
fn monitor_checks_signatures() {
    let mut sys = boot(Countermeasure::None, true);
    release(&mut sys, 300, 1);
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: 300, rights: Rights::user_rx() };
    assert_eq!(rejected(sys.hypercall(&call)).kind(), "BadSignature");
    let call =
        Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: CODE_FIRST + 1, rights: Rights::user_rx() };
    assert!(sys.hypercall(&call).is_accepted());
    assert_eq!(sys.hyp.refs[(CODE_FIRST + 1) as usize].ex, 2);
    assert_eq!(sys.integrity(), Some(true));
}

#[test]
fn monitor_rejects_updates_of_executable_tables() {
    let mut sys = boot(Countermeasure::None, true);
    release(&mut sys, X, 4);
    assert!(sys.hypercall(&Hypercall::CreateL1 { bl: X }).is_accepted());
    let zero: Vec<u32> = vec![0; BLOCK_WORDS];
    let mut sigs: Vec<_> = sys.golden.as_ref().unwrap().signatures().iter().cloned().collect();
    sigs.push(sig(&zero));
    sys.golden = Some(GoldenImage::new(sigs));
    let call = Hypercall::MapL2 { bl: BOOT_L2, idx: SCRATCH_L2_FIRST, target: X, rights: Rights::user_rx() };
    assert!(sys.hypercall(&call).is_accepted());
    let link = Hypercall::LinkL1 { bl: X, idx: 1, l2_bl: BOOT_L2, l2_slot: 0 };
    assert_eq!(rejected(sys.hypercall(&link)), Rejection::Monitor { reject: MonitorReject::ExecutablePt { block: X } });
    // Without the monitor the same request goes through.
    sys.golden = None;
    assert!(sys.hypercall(&link).is_accepted());
}

#[test]
fn monitor_rejects_conflicting_aliases_in_one_table() {
    let mut sys = boot(Countermeasure::None, true);
    release(&mut sys, X, 1);
    release(&mut sys, 301, 1);
    poke(&mut sys, X, 0, small(301, AccessPerm::USER_RW));
    let rx =
        L2Descriptor::Small { base: PhysAddr::of_block(301, 0), ap: AccessPerm::USER_RO, cacheable: true, xn: false };
    poke(&mut sys, X, 1, rx.encode());
    assert_eq!(
        rejected(sys.hypercall(&Hypercall::CreateL2 { bl: X })),
        Rejection::Monitor { reject: MonitorReject::ConflictingAliases { block: 301 } }
    );
}
