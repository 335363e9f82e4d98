//! Word-addressed physical memory stored as copy-on-write 4 KB blocks.
//!
//! Cloning a [`PhysMemory`] is cheap: blocks are shared until written. The
//! harness relies on this to snapshot states every step and to diff two
//! snapshots by skipping blocks that are still shared.

use std::sync::Arc;

use crate::addr::{PhysAddr, BLOCK_BYTES, BLOCK_WORDS};
use crate::error::SimError;

pub type BlockData = [u32; BLOCK_WORDS];

#[derive(Clone, Debug)]
pub struct PhysMemory {
    blocks: Vec<Arc<BlockData>>,
}

impl PhysMemory {
    pub fn new(num_blocks: usize) -> Self {
        let zero = Arc::new([0u32; BLOCK_WORDS]);
        PhysMemory { blocks: vec![zero; num_blocks] }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn size_bytes(&self) -> u64 {
        self.blocks.len() as u64 * BLOCK_BYTES as u64
    }

    pub fn contains(&self, pa: PhysAddr) -> bool {
        (pa.block() as usize) < self.blocks.len()
    }

    pub fn check(&self, pa: PhysAddr) -> Result<(), SimError> {
        if self.contains(pa) {
            Ok(())
        } else {
            Err(SimError::AddressOutOfRange(pa))
        }
    }

    /// # Panics
    /// If `pa` is outside memory; use [`PhysMemory::try_read`] for untrusted input.
    pub fn read(&self, pa: PhysAddr) -> u32 {
        self.blocks[pa.block() as usize][pa.block_word()]
    }

    pub fn try_read(&self, pa: PhysAddr) -> Result<u32, SimError> {
        self.check(pa)?;
        Ok(self.read(pa))
    }

    /// # Panics
    /// If `pa` is outside memory.
    pub fn write(&mut self, pa: PhysAddr, value: u32) {
        let blk = &mut self.blocks[pa.block() as usize];
        if blk[pa.block_word()] != value {
            Arc::make_mut(blk)[pa.block_word()] = value;
        }
    }

    pub fn block(&self, block: u32) -> &BlockData {
        &self.blocks[block as usize]
    }

    /// Whether both memories still share the storage of `block`.
    pub fn shares_block(&self, other: &PhysMemory, block: u32) -> bool {
        Arc::ptr_eq(&self.blocks[block as usize], &other.blocks[block as usize])
    }

    /// Blocks whose contents differ between the two memories.
    pub fn changed_blocks<'a>(&'a self, other: &'a PhysMemory) -> impl Iterator<Item = u32> + 'a {
        let n = self.blocks.len().min(other.blocks.len());
        (0..n as u32)
            .filter(move |&b| !self.shares_block(other, b) && self.blocks[b as usize] != other.blocks[b as usize])
    }

    /// Word addresses whose values differ between the two memories.
    pub fn changed_words(&self, other: &PhysMemory) -> Vec<PhysAddr> {
        let mut out = Vec::new();
        for b in self.changed_blocks(other) {
            let (x, y) = (self.block(b), other.block(b));
            for w in 0..BLOCK_WORDS {
                if x[w] != y[w] {
                    out.push(PhysAddr::of_block(b, w));
                }
            }
        }
        out
    }
}
