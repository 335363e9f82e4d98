//! Set-associative write-back data cache with per-set action histories.
//!
//! Every operation is expressed with four primitives on a set: touch (read or
//! write a resident line), fill (load a line from memory), evict (drop a line)
//! and write-back. Each primitive except write-back appends an [`Action`] to
//! the set's history, and the LRU victim is derived from that history.

mod lru;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lru::{apply_cons, cons_queue, evict_select, lru_filter, present_tags, Action};

use crate::addr::{PhysAddr, VirtAddr, WORD_BYTES};
use crate::error::SimError;
use crate::memory::PhysMemory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indexing {
    Physical,
    Virtual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    Lru,
    /// Uniform victim among the ways, drawn from the cache's seeded generator.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheGeometry {
    pub num_sets: usize,
    pub ways: usize,
    pub line_words: usize,
    pub indexing: Indexing,
}

impl Default for CacheGeometry {
    /// 128 sets, 4 ways, 64-byte lines: the Cortex-A7 L1 data cache.
    fn default() -> Self {
        CacheGeometry { num_sets: 128, ways: 4, line_words: 16, indexing: Indexing::Physical }
    }
}

impl CacheGeometry {
    pub fn new(num_sets: usize, ways: usize, line_bytes: usize, indexing: Indexing) -> Result<Self, SimError> {
        let bad = |what: &str, v: usize| SimError::InvalidGeometry(format!("{what} = {v}"));
        if !num_sets.is_power_of_two() {
            return Err(bad("sets must be a power of two, got", num_sets));
        }
        if !ways.is_power_of_two() {
            return Err(bad("ways must be a power of two, got", ways));
        }
        if !line_bytes.is_power_of_two() || line_bytes < WORD_BYTES as usize {
            return Err(bad("line bytes must be a power of two >= 4, got", line_bytes));
        }
        let g = CacheGeometry { num_sets, ways, line_words: line_bytes / 4, indexing };
        if g.offset_bits() + g.set_bits() > 20 {
            return Err(SimError::InvalidGeometry("cache way larger than 1 MB".into()));
        }
        Ok(g)
    }

    pub fn line_bytes(&self) -> u32 {
        self.line_words as u32 * WORD_BYTES
    }

    /// Bytes spanned by one way: addresses this far apart share a set.
    pub fn way_bytes(&self) -> u32 {
        self.line_bytes() * self.num_sets as u32
    }

    fn offset_bits(&self) -> u32 {
        self.line_bytes().trailing_zeros()
    }

    fn set_bits(&self) -> u32 {
        (self.num_sets as u32).trailing_zeros()
    }

    pub fn set_index(&self, va: VirtAddr, pa: PhysAddr) -> usize {
        let a = match self.indexing {
            Indexing::Physical => pa.0,
            Indexing::Virtual => va.0,
        };
        ((a >> self.offset_bits()) as usize) & (self.num_sets - 1)
    }

    /// Physically indexed: the bits above the set index. Virtually indexed:
    /// the whole line address, so a tag identifies a line in any set.
    pub fn tag(&self, pa: PhysAddr) -> u32 {
        match self.indexing {
            Indexing::Physical => pa.0 >> (self.offset_bits() + self.set_bits()),
            Indexing::Virtual => pa.0 >> self.offset_bits(),
        }
    }

    pub fn word_index(&self, pa: PhysAddr) -> usize {
        ((pa.0 >> 2) as usize) & (self.line_words - 1)
    }

    pub fn line_base(&self, set: usize, tag: u32) -> PhysAddr {
        match self.indexing {
            Indexing::Physical => {
                PhysAddr((tag << (self.offset_bits() + self.set_bits())) | ((set as u32) << self.offset_bits()))
            }
            Indexing::Virtual => PhysAddr(tag << self.offset_bits()),
        }
    }

    pub fn line_of(&self, pa: PhysAddr) -> PhysAddr {
        PhysAddr(pa.0 & !(self.line_bytes() - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLine {
    pub data: Vec<u32>,
    pub dirty: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Way {
    pub tag: u32,
    pub line: CacheLine,
}

#[derive(Clone, Debug)]
pub struct CacheSet {
    ways: Vec<Option<Way>>,
    history: Vec<Action>,
    queue: Vec<u32>,
    compact_at: usize,
}

impl CacheSet {
    fn new(ways: usize) -> Self {
        CacheSet { ways: vec![None; ways], history: Vec::new(), queue: Vec::new(), compact_at: 0 }
    }

    pub fn ways(&self) -> &[Option<Way>] {
        &self.ways
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    /// Recency queue kept in step with the history.
    pub fn queue(&self) -> &[u32] {
        &self.queue
    }

    pub fn slice(&self) -> impl Iterator<Item = (u32, &CacheLine)> {
        self.ways.iter().flatten().map(|w| (w.tag, &w.line))
    }

    pub fn way_of(&self, tag: u32) -> Option<usize> {
        self.ways.iter().position(|w| w.as_ref().is_some_and(|w| w.tag == tag))
    }

    pub fn get(&self, tag: u32) -> Option<&CacheLine> {
        self.way_of(tag).and_then(|i| self.ways[i].as_ref()).map(|w| &w.line)
    }

    fn log(&mut self, action: Action, limit: Option<usize>) {
        apply_cons(&mut self.queue, action);
        self.history.push(action);
        if let Some(limit) = limit {
            if self.history.len() > self.compact_at.max(limit) {
                self.history = lru_filter(&self.history);
                self.compact_at = limit.max(2 * self.history.len());
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cache {
    geometry: CacheGeometry,
    policy: ReplacementPolicy,
    sets: Vec<CacheSet>,
    rng: ChaCha8Rng,
    history_limit: Option<usize>,
}

impl Cache {
    pub fn new(geometry: CacheGeometry, policy: ReplacementPolicy, seed: u64) -> Self {
        Cache {
            geometry,
            policy,
            sets: (0..geometry.num_sets).map(|_| CacheSet::new(geometry.ways)).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            history_limit: None,
        }
    }

    /// Bounds history growth: once a set's history exceeds `limit` it is
    /// replaced by its [`lru_filter`], which leaves the recency queue and the
    /// present-tag set unchanged. `None` keeps full histories.
    pub fn set_history_limit(&mut self, limit: Option<usize>) {
        self.history_limit = limit;
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn policy(&self) -> ReplacementPolicy {
        self.policy
    }

    pub fn sets(&self) -> &[CacheSet] {
        &self.sets
    }

    pub fn locate(&self, va: VirtAddr, pa: PhysAddr) -> (usize, u32) {
        (self.geometry.set_index(va, pa), self.geometry.tag(pa))
    }

    /// Set and way holding `pa`, looked up by physical address alone.
    pub fn find(&self, pa: PhysAddr) -> Option<(usize, usize)> {
        let tag = self.geometry.tag(pa);
        match self.geometry.indexing {
            Indexing::Physical => {
                let s = self.geometry.set_index(VirtAddr(0), pa);
                self.sets[s].way_of(tag).map(|w| (s, w))
            }
            Indexing::Virtual => self.sets.iter().enumerate().find_map(|(s, set)| set.way_of(tag).map(|w| (s, w))),
        }
    }

    pub fn line(&self, pa: PhysAddr) -> Option<&CacheLine> {
        self.find(pa).and_then(|(s, w)| self.sets[s].ways[w].as_ref()).map(|w| &w.line)
    }

    pub fn hit(&self, pa: PhysAddr) -> bool {
        self.find(pa).is_some()
    }

    pub fn is_dirty(&self, pa: PhysAddr) -> bool {
        self.line(pa).is_some_and(|l| l.dirty)
    }

    pub fn cached_word(&self, pa: PhysAddr) -> Option<u32> {
        let i = self.geometry.word_index(pa);
        self.line(pa).map(|l| l.data[i])
    }

    /// Every resident line with its set, way and base address.
    pub fn lines(&self) -> impl Iterator<Item = (usize, usize, PhysAddr, &CacheLine)> + '_ {
        self.sets.iter().enumerate().flat_map(move |(s, set)| {
            set.ways.iter().enumerate().filter_map(move |(w, way)| {
                way.as_ref().map(|way| (s, w, self.geometry.line_base(s, way.tag), &way.line))
            })
        })
    }

    /// Overwrites one cached word without recording an action or touching the
    /// dirty bit. Only for building states in checks and tests.
    #[doc(hidden)]
    pub fn poke(&mut self, set: usize, way: usize, word: usize, value: u32) {
        if let Some(w) = self.sets[set].ways[way].as_mut() {
            w.line.data[word] = value;
        }
    }

    #[doc(hidden)]
    pub fn poke_dirty(&mut self, set: usize, way: usize, dirty: bool) {
        if let Some(w) = self.sets[set].ways[way].as_mut() {
            w.line.dirty = dirty;
        }
    }

    pub fn read(&mut self, mem: &mut PhysMemory, va: VirtAddr, pa: PhysAddr) -> u32 {
        let (s, tag) = self.locate(va, pa);
        let w = self.fill_wb(mem, s, tag);
        self.sets[s].log(Action::TouchR(tag), self.history_limit);
        let idx = self.geometry.word_index(pa);
        self.sets[s].ways[w].as_ref().expect("filled").line.data[idx]
    }

    pub fn write(&mut self, mem: &mut PhysMemory, va: VirtAddr, pa: PhysAddr, value: u32) {
        let (s, tag) = self.locate(va, pa);
        let w = self.fill_wb(mem, s, tag);
        let idx = self.geometry.word_index(pa);
        let line = &mut self.sets[s].ways[w].as_mut().expect("filled").line;
        line.data[idx] = value;
        line.dirty = true;
        self.sets[s].log(Action::TouchW(tag), self.history_limit);
    }

    /// Writes back a dirty line and clears its dirty bit; the line stays resident.
    pub fn clean(&mut self, mem: &mut PhysMemory, va: VirtAddr, pa: PhysAddr) {
        let (s, tag) = self.locate(va, pa);
        if let Some(w) = self.sets[s].way_of(tag) {
            self.write_back(mem, s, w);
        }
    }

    /// Evicts the line, writing it back first if dirty.
    pub fn invalidate(&mut self, mem: &mut PhysMemory, va: VirtAddr, pa: PhysAddr) {
        let (s, tag) = self.locate(va, pa);
        if let Some(w) = self.sets[s].way_of(tag) {
            self.evict(mem, s, w);
        }
    }

    /// Clean by physical address, whichever set holds the line.
    pub fn clean_pa(&mut self, mem: &mut PhysMemory, pa: PhysAddr) {
        if let Some((s, w)) = self.find(pa) {
            self.write_back(mem, s, w);
        }
    }

    /// Clean and invalidate by physical address, whichever set holds the line.
    pub fn invalidate_pa(&mut self, mem: &mut PhysMemory, pa: PhysAddr) {
        if let Some((s, w)) = self.find(pa) {
            self.evict(mem, s, w);
        }
    }

    /// Evicts every line with write-back and empties all histories.
    pub fn flush_all(&mut self, mem: &mut PhysMemory) {
        for s in 0..self.sets.len() {
            for w in 0..self.geometry.ways {
                self.write_back(mem, s, w);
            }
            let set = &mut self.sets[s];
            set.ways.iter_mut().for_each(|w| *w = None);
            set.history.clear();
            set.queue.clear();
            set.compact_at = 0;
        }
    }

    fn write_back(&mut self, mem: &mut PhysMemory, s: usize, w: usize) {
        let geometry = self.geometry;
        if let Some(way) = self.sets[s].ways[w].as_mut() {
            if way.line.dirty {
                let base = geometry.line_base(s, way.tag);
                for (i, &v) in way.line.data.iter().enumerate() {
                    mem.write(PhysAddr(base.0 + i as u32 * WORD_BYTES), v);
                }
                way.line.dirty = false;
            }
        }
    }

    fn evict(&mut self, mem: &mut PhysMemory, s: usize, w: usize) {
        self.write_back(mem, s, w);
        if let Some(way) = self.sets[s].ways[w].take() {
            self.sets[s].log(Action::Evict(way.tag), self.history_limit);
        }
    }

    /// Makes `tag` resident in set `s` and returns its way. A miss first
    /// frees a way (policy victim, written back if dirty), evicts an alias
    /// of the line from any other set, then loads the line from memory.
    fn fill_wb(&mut self, mem: &mut PhysMemory, s: usize, tag: u32) -> usize {
        if let Some(w) = self.sets[s].way_of(tag) {
            return w;
        }
        if self.sets[s].ways.iter().all(Option::is_some) {
            let victim = match self.policy {
                ReplacementPolicy::Lru => {
                    let t = *self.sets[s].queue.last().expect("full set has a queue");
                    self.sets[s].way_of(t).expect("queue tracks residents")
                }
                ReplacementPolicy::Random => self.rng.gen_range(0..self.geometry.ways),
            };
            self.evict(mem, s, victim);
        }
        if self.geometry.indexing == Indexing::Virtual {
            let alias = (0..self.sets.len()).filter(|&i| i != s).find_map(|i| self.sets[i].way_of(tag).map(|w| (i, w)));
            if let Some((i, w)) = alias {
                self.evict(mem, i, w);
            }
        }
        let base = self.geometry.line_base(s, tag);
        let data = (0..self.geometry.line_words).map(|i| mem.read(PhysAddr(base.0 + i as u32 * WORD_BYTES))).collect();
        let w = self.sets[s].ways.iter().position(Option::is_none).expect("a way was freed");
        self.sets[s].ways[w] = Some(Way { tag, line: CacheLine { data, dirty: false } });
        self.sets[s].log(Action::Fill(tag), self.history_limit);
        w
    }
}

#[cfg(test)]
mod tests;
