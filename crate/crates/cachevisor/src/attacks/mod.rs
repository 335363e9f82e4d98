//! Attack scenarios: the alias-driven integrity attack on direct paging, the
//! data-cache storage-channel probe and AES last-round key extraction.

pub mod aes;
pub mod integrity;
pub mod probe;
pub mod recovery;

pub use self::aes::{invert_key_schedule, AesVariant, AesVictim, T4Layout};
pub use integrity::{run_integrity_attack, AttackOutcome, AttackStep};
pub use probe::{prime, probe, ProbeConfig, ProbeStrategy};
pub use recovery::{
    collect_log, extract_with_log, recover_last_round_key, run_aes_extraction, AesExtraction, EvictionLog,
    ExtractionConfig, Recovery, RecoveryConfig,
};
