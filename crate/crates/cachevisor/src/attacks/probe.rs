//! Prime and probe over cacheable/uncacheable alias pairs.
//!
//! Everything here goes through guest steps, so the attacker sees only the
//! values its own loads return.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addr::{PhysAddr, VirtAddr};
use crate::error::SimError;
use crate::machine::GuestOp;
use crate::system::{va_cached, va_uncached, System};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStrategy {
    /// Dirty cached 1 over memory 0; an eviction writes the 1 back.
    WriteBackInertia,
    /// Clean cached 0 over memory 1; an eviction makes the 1 visible.
    #[default]
    EvictionRobust,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub target_sets: BTreeSet<usize>,
    /// Per set, one `(va_c, va_nc)` pair per way.
    pub aliases: BTreeMap<usize, Vec<(VirtAddr, VirtAddr)>>,
    pub strategy: ProbeStrategy,
}

/// Default probe buffer, in section 4.
pub const PROBE_BUFFER: PhysAddr = PhysAddr(0x0040_0000);

/// Priming rounds before giving up on a set the policy keeps disturbing.
const MAX_PRIME_ROUNDS: usize = 64;

impl ProbeConfig {
    /// One alias pair per way of each target set, carved out of a buffer of
    /// `ways` cache-way-sized chunks starting at `buffer`. The buffer must
    /// be way-aligned and lie in a section with an uncacheable alias.
    pub fn new(
        sys: &System,
        sets: impl IntoIterator<Item = usize>,
        buffer: PhysAddr,
        strategy: ProbeStrategy,
    ) -> Result<Self, SimError> {
        let g = *sys.machine.cache.geometry();
        if !buffer.0.is_multiple_of(g.way_bytes()) || buffer.0 < 2 << 20 {
            return Err(SimError::InvalidConfig(format!(
                "probe buffer {buffer} must be way-aligned and above section 1"
            )));
        }
        let target_sets: BTreeSet<usize> = sets.into_iter().collect();
        let aliases = target_sets
            .iter()
            .map(|&s| {
                let pairs = (0..g.ways as u32)
                    .map(|w| {
                        let pa = PhysAddr(buffer.0 + w * g.way_bytes() + s as u32 * g.line_bytes());
                        (va_cached(pa), va_uncached(pa))
                    })
                    .collect();
                (s, pairs)
            })
            .collect();
        Ok(ProbeConfig { target_sets, aliases, strategy })
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize, VirtAddr, VirtAddr)> + '_ {
        self.aliases.iter().flat_map(|(&s, v)| v.iter().enumerate().map(move |(w, &(c, nc))| (s, w, c, nc)))
    }
}

fn read(sys: &mut System, va: VirtAddr) -> Result<u32, SimError> {
    sys.read(va)
}

fn prime_one(sys: &mut System, strategy: ProbeStrategy, c: VirtAddr, nc: VirtAddr) -> Result<(), SimError> {
    match strategy {
        ProbeStrategy::EvictionRobust => {
            sys.step(&GuestOp::Invalidate { va: c })?;
            sys.write(nc, 0)?;
            read(sys, c)?;
            sys.write(nc, 1)
        }
        ProbeStrategy::WriteBackInertia => {
            sys.write(nc, 0)?;
            sys.write(c, 1)
        }
    }
}

/// Still primed, as far as the attacker can tell from its own loads.
fn primed(sys: &mut System, strategy: ProbeStrategy, c: VirtAddr, nc: VirtAddr) -> Result<bool, SimError> {
    Ok(match strategy {
        ProbeStrategy::EvictionRobust => read(sys, c)? == 0,
        ProbeStrategy::WriteBackInertia => read(sys, nc)? == 0,
    })
}

/// Fills every way of every target set with probe data, re-priming pairs
/// that a later fill pushed out.
pub fn prime(sys: &mut System, cfg: &ProbeConfig) -> Result<(), SimError> {
    let pairs: Vec<_> = cfg.pairs().collect();
    for &(_, _, c, nc) in &pairs {
        prime_one(sys, cfg.strategy, c, nc)?;
    }
    for _ in 0..MAX_PRIME_ROUNDS {
        let mut again = false;
        for &(_, _, c, nc) in &pairs {
            if !primed(sys, cfg.strategy, c, nc)? {
                prime_one(sys, cfg.strategy, c, nc)?;
                again = true;
            }
        }
        if !again {
            break;
        }
    }
    Ok(())
}

/// The `(set, way slot)` pairs whose probe data was evicted since `prime`.
pub fn probe(sys: &mut System, cfg: &ProbeConfig) -> Result<BTreeSet<(usize, usize)>, SimError> {
    let mut out = BTreeSet::new();
    for (s, w, c, nc) in cfg.pairs() {
        let v = match cfg.strategy {
            ProbeStrategy::EvictionRobust => read(sys, c)?,
            ProbeStrategy::WriteBackInertia => read(sys, nc)?,
        };
        if v == 1 {
            out.insert((s, w));
        }
    }
    Ok(out)
}
