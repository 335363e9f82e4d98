//! Cache-aware simulator of an ARMv7-flavoured memory subsystem.
//!
//! The crate models a single core with a set-associative write-back data
//! cache, a two-level MMU whose descriptor fetches go through that cache, a
//! direct-paging hypervisor (the DMMU) with pluggable cache countermeasures,
//! and a W⊕X code-signing monitor on top of it. The [`attacks`] module drives
//! the alias-driven storage-channel attacks against this stack and
//! [`harness`] turns the security properties into randomized checks.
//!
//! ```
//! use cachevisor::{GuestOp, System, SystemConfig, VirtAddr, StepResult};
//!
//! let mut sys = System::boot(&SystemConfig::default()).unwrap();
//! let va = VirtAddr(0x0020_0040);
//! sys.step(&GuestOp::Write { va, value: 7 }).unwrap();
//! assert_eq!(sys.step(&GuestOp::Read { va }).unwrap(), StepResult::Value(7));
//! ```

pub mod addr;
pub mod attacks;
pub mod cache;
pub mod dmmu;
pub mod error;
pub mod harness;
pub mod machine;
pub mod memory;
pub mod mmu;
pub mod monitor;
pub mod scenario;
pub mod system;

pub use addr::{AccessReq, Mode, PhysAddr, VirtAddr, BLOCK_BYTES, BLOCK_WORDS, SECTION_BLOCKS};
pub use cache::{Action, Cache, CacheGeometry, CacheLine, CacheSet, Indexing, ReplacementPolicy};
pub use dmmu::{BlockRange, Countermeasure, HypState, Hypercall, PageType, RefCounters, Rejection, Rights, Verdict};
pub use error::SimError;
pub use machine::{CoprocConfig, GuestOp, MachineState, StepResult};
pub use memory::PhysMemory;
pub use mmu::{AccessPerm, Fault, L1Descriptor, L2Descriptor, Translation};
pub use monitor::{GoldenImage, Signature};
pub use system::{System, SystemConfig};
