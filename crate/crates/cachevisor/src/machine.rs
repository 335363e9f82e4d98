//! Cache-aware machine state, the two memory views and the guest step.

use serde::{Deserialize, Serialize};

use crate::addr::{AccessReq, Mode, PhysAddr, VirtAddr, BLOCK_WORDS};
use crate::cache::{Cache, CacheGeometry, ReplacementPolicy};
use crate::dmmu::{Hypercall, Verdict};
use crate::error::SimError;
use crate::memory::PhysMemory;
use crate::mmu::{self, Fault};

/// MMU control registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoprocConfig {
    /// Base of the active L1 table, 16 KB aligned.
    pub ttbr0: PhysAddr,
    /// Bit `d` set means domain `d` is checked as a client; clear means no access.
    pub dacr: u16,
    pub mmu_enabled: bool,
}

impl Default for CoprocConfig {
    fn default() -> Self {
        CoprocConfig { ttbr0: PhysAddr(0), dacr: 1, mmu_enabled: false }
    }
}

#[derive(Clone, Debug)]
pub struct MachineState {
    pub regs: [u32; 16],
    pub mode: Mode,
    pub coregs: CoprocConfig,
    pub mem: PhysMemory,
    pub cache: Cache,
}

/// One guest instruction. Only loads, stores, data-cache maintenance by
/// address and the hypercall trap are modelled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GuestOp {
    Read {
        va: VirtAddr,
    },
    Write {
        va: VirtAddr,
        value: u32,
    },
    /// Clean by address. Needs read permission; dirty data is written back.
    Clean {
        va: VirtAddr,
    },
    /// Clean and invalidate by address. Needs read permission.
    Invalidate {
        va: VirtAddr,
    },
    Hypercall {
        call: Hypercall,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "detail", rename_all = "snake_case")]
pub enum StepResult {
    Value(u32),
    Done,
    Fault(Fault),
    Hypercall(Verdict),
}

impl MachineState {
    pub fn new(mem_blocks: usize, geometry: CacheGeometry, policy: ReplacementPolicy, seed: u64) -> Self {
        MachineState {
            regs: [0; 16],
            mode: Mode::NonPrivileged,
            coregs: CoprocConfig::default(),
            mem: PhysMemory::new(mem_blocks),
            cache: Cache::new(geometry, policy, seed),
        }
    }

    /// What the core reads: the cached word on a hit, memory otherwise.
    pub fn core_view(&self, pa: PhysAddr) -> Result<u32, SimError> {
        self.mem.check(pa)?;
        Ok(self.cache.cached_word(pa).unwrap_or_else(|| self.mem.read(pa)))
    }

    /// What memory would hold after evicting: the cached word if dirty.
    pub fn memory_view(&self, pa: PhysAddr) -> Result<u32, SimError> {
        self.mem.check(pa)?;
        Ok(self.memory_view_unchecked(pa))
    }

    pub(crate) fn memory_view_unchecked(&self, pa: PhysAddr) -> u32 {
        match self.cache.line(pa) {
            Some(l) if l.dirty => l.data[self.cache.geometry().word_index(pa)],
            _ => self.mem.read(pa),
        }
    }

    pub(crate) fn core_view_unchecked(&self, pa: PhysAddr) -> u32 {
        self.cache.cached_word(pa).unwrap_or_else(|| self.mem.read(pa))
    }

    /// Core view of `n` consecutive words from `pa`, `None` outside memory.
    /// Looks each cache line up once.
    pub(crate) fn core_view_span(&self, pa: PhysAddr, n: usize) -> Vec<Option<u32>> {
        self.view_span(pa, n, false)
    }

    /// Memory view of a whole block, one cache lookup per line.
    pub(crate) fn memory_view_block(&self, block: u32) -> Vec<u32> {
        self.view_span(PhysAddr::of_block(block, 0), BLOCK_WORDS, true).into_iter().map(|w| w.unwrap_or(0)).collect()
    }

    fn view_span(&self, pa: PhysAddr, n: usize, dirty_only: bool) -> Vec<Option<u32>> {
        let g = self.cache.geometry();
        let mask = !(g.line_bytes() - 1);
        let mut out = Vec::with_capacity(n);
        let mut current = None;
        for i in 0..n as u32 {
            let a = PhysAddr(pa.0.wrapping_add(4 * i));
            if !self.mem.contains(a) {
                out.push(None);
                continue;
            }
            let line = match current {
                Some((base, line)) if base == a.0 & mask => line,
                _ => {
                    let line = self.cache.line(a).filter(|l| l.dirty || !dirty_only);
                    current = Some((a.0 & mask, line));
                    line
                }
            };
            out.push(Some(line.map_or_else(|| self.mem.read(a), |l| l.data[g.word_index(a)])));
        }
        out
    }

    /// Every hit among `addrs` whose cached value differs from memory is dirty.
    pub fn coherent<I: IntoIterator<Item = PhysAddr>>(&self, addrs: I) -> bool {
        addrs.into_iter().all(|pa| match self.cache.line(pa) {
            Some(l) => l.dirty || l.data[self.cache.geometry().word_index(pa)] == self.mem.read(pa),
            None => true,
        })
    }

    /// Coherency of every word of every block accepted by `in_region`.
    pub fn coherent_blocks(&self, in_region: impl Fn(u32) -> bool) -> bool {
        self.incoherent_words().all(|pa| !in_region(pa.block()))
    }

    /// Words held by clean lines that disagree with memory.
    pub fn incoherent_words(&self) -> impl Iterator<Item = PhysAddr> + '_ {
        self.cache.lines().filter(|(_, _, _, l)| !l.dirty).flat_map(move |(_, _, base, l)| {
            l.data.iter().enumerate().filter_map(move |(i, &v)| {
                let pa = PhysAddr(base.0 + 4 * i as u32);
                (v != self.mem.read(pa)).then_some(pa)
            })
        })
    }

    /// Privileged cacheable read through the hypervisor's 1-to-1 mapping.
    pub fn cached_read(&mut self, pa: PhysAddr) -> u32 {
        self.cache.read(&mut self.mem, VirtAddr(pa.0), pa)
    }

    /// Privileged cacheable write through the hypervisor's 1-to-1 mapping.
    pub fn cached_write(&mut self, pa: PhysAddr, value: u32) {
        self.cache.write(&mut self.mem, VirtAddr(pa.0), pa, value)
    }

    /// Executes a non-hypercall guest operation in user mode. Translation
    /// happens before any cache action, so a fault leaves the state unchanged.
    pub fn step_user(&mut self, op: &GuestOp) -> Result<StepResult, SimError> {
        if self.mode != Mode::NonPrivileged {
            return Err(SimError::NotUserMode);
        }
        let (va, req) = match *op {
            GuestOp::Read { va } | GuestOp::Clean { va } | GuestOp::Invalidate { va } => (va, AccessReq::Read),
            GuestOp::Write { va, .. } => (va, AccessReq::Write),
            GuestOp::Hypercall { .. } => {
                return Err(SimError::InvalidConfig("hypercalls are dispatched by System".into()))
            }
        };
        let tr = match mmu::translate(self, va, Mode::NonPrivileged, req) {
            Ok(tr) => tr,
            Err(fault) => return Ok(StepResult::Fault(fault)),
        };
        let pa = tr.pa;
        Ok(match *op {
            GuestOp::Read { .. } => {
                let v = if tr.cacheable { self.cache.read(&mut self.mem, va, pa) } else { self.mem.read(pa) };
                self.regs[0] = v;
                StepResult::Value(v)
            }
            GuestOp::Write { value, .. } => {
                if tr.cacheable {
                    self.cache.write(&mut self.mem, va, pa, value);
                } else {
                    self.mem.write(pa, value);
                }
                StepResult::Done
            }
            GuestOp::Clean { .. } => {
                self.cache.clean(&mut self.mem, va, pa);
                StepResult::Done
            }
            GuestOp::Invalidate { .. } => {
                self.cache.invalidate(&mut self.mem, va, pa);
                StepResult::Done
            }
            GuestOp::Hypercall { .. } => unreachable!(),
        })
    }
}
