use serde::{Deserialize, Serialize};
use std::fmt;

/// Bytes per machine word.
pub const WORD_BYTES: u32 = 4;
/// Bytes per physical block, the unit of typing and reference counting.
pub const BLOCK_BYTES: u32 = 4096;
/// Words per physical block.
pub const BLOCK_WORDS: usize = 1024;
/// Blocks covered by a 1 MB section descriptor.
pub const SECTION_BLOCKS: u32 = 256;

/// Byte address into physical memory. Always word aligned when used for an access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysAddr(pub u32);

impl PhysAddr {
    pub fn block(self) -> u32 {
        self.0 >> 12
    }

    /// Word offset inside the containing block.
    pub fn block_word(self) -> usize {
        ((self.0 & (BLOCK_BYTES - 1)) >> 2) as usize
    }

    pub fn of_block(block: u32, word: usize) -> Self {
        PhysAddr(block * BLOCK_BYTES + (word as u32) * WORD_BYTES)
    }

    pub fn word_aligned(self) -> Self {
        PhysAddr(self.0 & !(WORD_BYTES - 1))
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pa:{:#010x}", self.0)
    }
}

/// 32-bit virtual address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtAddr(pub u32);

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "va:{:#010x}", self.0)
    }
}

/// Processor privilege level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// PL0, the guest.
    NonPrivileged,
    /// PL1, the hypervisor.
    Privileged,
}

/// Kind of memory access checked by the MMU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessReq {
    Read,
    Write,
    Execute,
}
