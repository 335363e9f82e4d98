use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;

fn small(ways: usize) -> CacheGeometry {
    CacheGeometry::new(4, ways, 16, Indexing::Physical).unwrap()
}

fn pa(x: u32) -> PhysAddr {
    PhysAddr(x)
}

const V0: VirtAddr = VirtAddr(0);

#[test]
fn geometry_rejects_non_powers() {
    assert!(CacheGeometry::new(3, 4, 64, Indexing::Physical).is_err());
    assert!(CacheGeometry::new(128, 3, 64, Indexing::Physical).is_err());
    assert!(CacheGeometry::new(128, 4, 2, Indexing::Physical).is_err());
    let g = CacheGeometry::default();
    assert_eq!(g.way_bytes(), 8192);
    assert_eq!(g.set_index(V0, pa(0x2040)), 1);
    assert_eq!(g.tag(pa(0x2040)), 1);
    assert_eq!(g.line_base(1, 1), pa(0x2040));
}

#[test]
fn read_miss_on_empty_set() {
    let mut mem = PhysMemory::new(1);
    for i in 0..4 {
        mem.write(pa(0x40 + 4 * i), i + 1);
    }
    let mut c = Cache::new(small(2), ReplacementPolicy::Lru, 0);
    assert_eq!(c.read(&mut mem, V0, pa(0x48)), 3);
    let (s, t) = c.locate(V0, pa(0x48));
    assert_eq!(c.sets()[s].history(), &[Action::Fill(t), Action::TouchR(t)]);
    assert_eq!(c.line(pa(0x40)).unwrap().data, vec![1, 2, 3, 4]);
}

#[test]
fn read_hit_appends_touch_only() {
    let mut mem = PhysMemory::new(1);
    let mut c = Cache::new(small(2), ReplacementPolicy::Lru, 0);
    c.read(&mut mem, V0, pa(0x40));
    let before = mem.clone();
    c.read(&mut mem, V0, pa(0x44));
    let (s, t) = c.locate(V0, pa(0x40));
    assert_eq!(c.sets()[s].history().last(), Some(&Action::TouchR(t)));
    assert_eq!(c.sets()[s].history().len(), 3);
    assert!(mem.changed_words(&before).is_empty());
}

#[test]
fn full_set_victim_follows_history_and_writes_back() {
    let g = small(4);
    let mut mem = PhysMemory::new(1);
    let mut c = Cache::new(g, ReplacementPolicy::Lru, 0);
    // Five lines mapping to set 0 (stride = way bytes).
    let stride = g.way_bytes();
    for i in 0..4 {
        c.write(&mut mem, V0, pa(i * stride), 100 + i);
    }
    c.read(&mut mem, V0, pa(0)); // line 0 becomes most recent
    let hist = c.sets()[0].history().to_vec();
    let expected = evict_select(&hist, 4, g.tag(pa(4 * stride))).unwrap();
    assert_eq!(expected, g.tag(pa(stride)));
    c.read(&mut mem, V0, pa(4 * stride));
    assert!(!c.hit(pa(stride)));
    assert_eq!(mem.read(pa(stride)), 101, "dirty victim written back");
    assert!(c.hit(pa(0)));
}

#[test]
fn write_semantics() {
    let mut mem = PhysMemory::new(1);
    let mut c = Cache::new(small(2), ReplacementPolicy::Lru, 0);
    c.read(&mut mem, V0, pa(0x40));
    c.write(&mut mem, V0, pa(0x40), 9);
    assert!(c.is_dirty(pa(0x40)));
    assert_eq!(mem.read(pa(0x40)), 0);

    mem.write(pa(0x84), 5);
    c.write(&mut mem, V0, pa(0x80), 1);
    assert_eq!(c.line(pa(0x80)).unwrap().data, vec![1, 5, 0, 0]);
    assert_eq!(mem.read(pa(0x80)), 0);
    c.write(&mut mem, V0, pa(0x88), 2);
    let (s, t) = c.locate(V0, pa(0x80));
    let h = c.sets()[s].history();
    assert_eq!(h.iter().filter(|a| **a == Action::Fill(t)).count(), 1);
    assert_eq!(h.iter().filter(|a| **a == Action::TouchW(t)).count(), 2);
}

#[test]
fn clean_invalidate_flush() {
    let mut mem = PhysMemory::new(1);
    let mut c = Cache::new(small(2), ReplacementPolicy::Lru, 0);
    c.write(&mut mem, V0, pa(0x40), 9);
    c.clean(&mut mem, V0, pa(0x40));
    assert_eq!(mem.read(pa(0x40)), 9);
    assert!(c.hit(pa(0x40)) && !c.is_dirty(pa(0x40)));

    let absent = c.clone();
    c.clean(&mut mem, V0, pa(0x100));
    c.invalidate(&mut mem, V0, pa(0x100));
    assert_eq!(c.sets()[0].history(), absent.sets()[0].history());

    c.write(&mut mem, V0, pa(0x80), 7);
    c.invalidate(&mut mem, V0, pa(0x80));
    assert!(!c.hit(pa(0x80)));
    assert_eq!(mem.read(pa(0x80)), 7);

    // Clean stale line: invalidation must not touch memory.
    c.read(&mut mem, V0, pa(0xc0));
    mem.write(pa(0xc0), 1);
    c.invalidate(&mut mem, V0, pa(0xc0));
    assert_eq!(mem.read(pa(0xc0)), 1);

    c.write(&mut mem, V0, pa(0x10), 3);
    c.flush_all(&mut mem);
    assert_eq!(mem.read(pa(0x10)), 3);
    assert_eq!(c.lines().count(), 0);
    assert!(c.sets().iter().all(|s| s.history().is_empty()));
}

#[test]
fn virtual_indexing_evicts_aliases() {
    let g = CacheGeometry::new(4, 2, 16, Indexing::Virtual).unwrap();
    let mut mem = PhysMemory::new(1);
    let mut c = Cache::new(g, ReplacementPolicy::Lru, 0);
    let p = pa(0x40);
    c.write(&mut mem, VirtAddr(0x1040), p, 5);
    let first = c.find(p).unwrap().0;
    c.read(&mut mem, VirtAddr(0x1050), p);
    let second = c.find(p).unwrap().0;
    assert_ne!(first, second);
    assert_eq!(c.lines().filter(|l| l.2 == p).count(), 1);
    assert_eq!(c.cached_word(p), Some(5), "alias written back before refill");
}

#[test]
fn random_policy_is_seeded() {
    let g = small(2);
    let run = |seed| {
        let mut mem = PhysMemory::new(1);
        let mut c = Cache::new(g, ReplacementPolicy::Random, seed);
        for i in 0..40u32 {
            c.read(&mut mem, V0, pa((i * 7 % 9) * g.way_bytes()));
        }
        c.sets()[0].history().to_vec()
    };
    assert_eq!(run(3), run(3));
}

// Reference cache: LRU by timestamps, no histories, keyed by line address.
#[derive(Default)]
struct Naive {
    lines: BTreeMap<u32, (Vec<u32>, bool, u64)>,
    clock: u64,
}

impl Naive {
    fn set_of(g: &CacheGeometry, base: u32) -> usize {
        g.set_index(V0, pa(base))
    }

    fn fill(&mut self, g: &CacheGeometry, mem: &mut PhysMemory, base: u32) {
        self.clock += 1;
        if let Some(l) = self.lines.get_mut(&base) {
            l.2 = self.clock;
            return;
        }
        let s = Self::set_of(g, base);
        let in_set: Vec<u32> = self.lines.keys().copied().filter(|&b| Self::set_of(g, b) == s).collect();
        if in_set.len() == g.ways {
            let victim = *in_set.iter().min_by_key(|b| self.lines[b].2).unwrap();
            self.evict(g, mem, victim);
        }
        let data = (0..g.line_words).map(|i| mem.read(pa(base + 4 * i as u32))).collect();
        self.lines.insert(base, (data, false, self.clock));
    }

    fn evict(&mut self, g: &CacheGeometry, mem: &mut PhysMemory, base: u32) {
        if let Some((data, dirty, _)) = self.lines.remove(&base) {
            if dirty {
                for (i, &w) in data.iter().enumerate().take(g.line_words) {
                    mem.write(pa(base + 4 * i as u32), w);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Read(u32),
    Write(u32, u32),
    Clean(u32),
    Inval(u32),
    Flush,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    // 4 sets * 16 B lines; 12 distinct lines per set keeps the sets busy.
    let addr = (0u32..48, 0u32..4).prop_map(|(line, w)| line * 16 + w * 4);
    prop_oneof![
        4 => addr.clone().prop_map(Op::Read),
        4 => (addr.clone(), any::<u32>()).prop_map(|(a, v)| Op::Write(a, v)),
        1 => addr.clone().prop_map(Op::Clean),
        1 => addr.prop_map(Op::Inval),
        1 => Just(Op::Flush),
    ]
}

proptest! {
    #[test]
    fn replay_matches_naive_reference(ops in prop::collection::vec(op_strategy(), 0..300)) {
        let g = small(4);
        let mut mem = PhysMemory::new(1);
        let mut ref_mem = mem.clone();
        let mut c = Cache::new(g, ReplacementPolicy::Lru, 0);
        let mut naive = Naive::default();
        for op in ops {
            match op {
                Op::Read(a) => {
                    let v = c.read(&mut mem, V0, pa(a));
                    let base = a & !15;
                    naive.fill(&g, &mut ref_mem, base);
                    prop_assert_eq!(v, naive.lines[&base].0[((a >> 2) & 3) as usize]);
                }
                Op::Write(a, v) => {
                    c.write(&mut mem, V0, pa(a), v);
                    let base = a & !15;
                    naive.fill(&g, &mut ref_mem, base);
                    let l = naive.lines.get_mut(&base).unwrap();
                    l.0[((a >> 2) & 3) as usize] = v;
                    l.1 = true;
                }
                Op::Clean(a) => {
                    c.clean(&mut mem, V0, pa(a));
                    let base = a & !15;
                    if let Some(l) = naive.lines.get(&base).cloned() {
                        naive.evict(&g, &mut ref_mem, base);
                        naive.lines.insert(base, (l.0, false, l.2));
                    }
                }
                Op::Inval(a) => {
                    c.invalidate(&mut mem, V0, pa(a));
                    naive.evict(&g, &mut ref_mem, a & !15);
                }
                Op::Flush => {
                    c.flush_all(&mut mem);
                    let bases: Vec<u32> = naive.lines.keys().copied().collect();
                    for b in bases {
                        naive.evict(&g, &mut ref_mem, b);
                    }
                }
            }
            prop_assert!(mem.changed_words(&ref_mem).is_empty());
            let ours: BTreeMap<u32, (Vec<u32>, bool)> = c
                .lines()
                .map(|(_, _, b, l)| (b.0, (l.data.clone(), l.dirty)))
                .collect();
            let theirs: BTreeMap<u32, (Vec<u32>, bool)> =
                naive.lines.iter().map(|(b, l)| (*b, (l.0.clone(), l.1))).collect();
            prop_assert_eq!(ours, theirs);
        }
    }

    #[test]
    fn history_tracks_slice(ops in prop::collection::vec(op_strategy(), 0..300), random in any::<bool>(), limit in prop::option::of(8usize..32)) {
        let g = small(4);
        let policy = if random { ReplacementPolicy::Random } else { ReplacementPolicy::Lru };
        let mut mem = PhysMemory::new(1);
        let mut c = Cache::new(g, policy, 11);
        c.set_history_limit(limit);
        for op in ops {
            match op {
                Op::Read(a) => { c.read(&mut mem, V0, pa(a)); }
                Op::Write(a, v) => c.write(&mut mem, V0, pa(a), v),
                Op::Clean(a) => c.clean(&mut mem, V0, pa(a)),
                Op::Inval(a) => c.invalidate(&mut mem, V0, pa(a)),
                Op::Flush => c.flush_all(&mut mem),
            }
            for set in c.sets() {
                let slice: BTreeSet<u32> = set.slice().map(|(t, _)| t).collect();
                prop_assert!(slice.len() <= g.ways);
                prop_assert_eq!(&present_tags(set.history()), &slice);
                let expect = cons_queue(set.history());
                prop_assert_eq!(set.queue(), expect.as_slice());
            }
        }
    }

    #[test]
    fn uncached_style_reads_never_write_memory_without_victims(addrs in prop::collection::vec(0u32..48, 1..100)) {
        let g = small(4);
        let mut mem = PhysMemory::new(1);
        let mut c = Cache::new(g, ReplacementPolicy::Lru, 0);
        let before = mem.clone();
        for a in addrs {
            c.read(&mut mem, V0, pa(a * 16));
        }
        // No dirty lines ever existed, so no write-back could have happened.
        prop_assert!(mem.changed_words(&before).is_empty());
    }
}
