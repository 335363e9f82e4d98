//! Executable versions of the security properties: derivability, the
//! hypervisor invariant, counter soundness, MMU integrity, no-exfiltration,
//! no-infiltration, the countermeasure obligations and the cache lemmas.
//! Every check is deterministic given its seed.

pub mod cache_lemmas;
pub mod derivability;
pub mod invariant;
pub mod noninterference;
pub mod obligations;
pub mod refcount;
pub mod traces;

pub use cache_lemmas::{check_cache_lemmas, LemmaVerdict};
pub use derivability::{check_derivability, DerivClause, DerivabilityWitness};
pub use invariant::{check_invariant, InvariantViolation};
pub use noninterference::{check_no_exfiltration, check_no_infiltration, InfiltrationVerdict};
pub use obligations::{check_obligations, ObligationVerdict};
pub use refcount::recount_refs;
pub use traces::{run_trace, Checks, InitialState, OpMix, TraceReport, TraceSpec};
