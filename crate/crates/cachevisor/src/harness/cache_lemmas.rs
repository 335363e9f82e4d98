//! Randomized checks of the LRU history lemmas.

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache::{cons_queue, evict_select, lru_filter, present_tags, Action};

/// A legal history for a `ways`-way set: touches and evictions only on
/// present tags, fills only of absent tags into a set with room. Also
/// returns the resident tags obtained by simulating the slice.
pub fn legal_history(rng: &mut impl Rng, len: usize, ways: usize, tags: u32) -> (Vec<Action>, Vec<u32>) {
    let mut resident: Vec<u32> = Vec::new();
    let mut h = Vec::with_capacity(len);
    while h.len() < len {
        let roll = rng.gen_range(0..10);
        let absent = (0..tags).filter(|t| !resident.contains(t)).choose(rng);
        let present = resident.iter().copied().choose(rng);
        let a = match (roll, present, absent) {
            (0..=3, Some(t), _) => Action::TouchR(t),
            (4..=5, Some(t), _) => Action::TouchW(t),
            (6, Some(t), _) => Action::Evict(t),
            (_, _, Some(t)) if resident.len() < ways => Action::Fill(t),
            (_, _, Some(t)) => {
                // Full set: evict the LRU victim first, as the cache does.
                let v = evict_select(&h, ways, t).expect("full set");
                h.push(Action::Evict(v));
                resident.retain(|&x| x != v);
                Action::Fill(t)
            }
            (_, Some(t), None) => Action::TouchR(t),
            (_, None, None) => unreachable!("tags > 0"),
        };
        match a {
            Action::Fill(t) => resident.push(t),
            Action::Evict(t) => resident.retain(|&x| x != t),
            _ => {}
        }
        h.push(a);
    }
    h.truncate(len);
    let resident = present_tags(&h).into_iter().collect();
    (h, resident)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LemmaVerdict {
    Pass { histories: usize },
    Fail { history: usize, lemma: &'static str },
}

impl LemmaVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, LemmaVerdict::Pass { .. })
    }
}

/// Checks `Cons(h) = Cons(filter(h))`, `evict?(h, t) = evict?(filter(h), t)`
/// and that the present tags of the history match a slice simulation, for
/// `n` random histories of length at most `max_len`.
pub fn check_cache_lemmas_with(
    seed: u64,
    n: usize,
    max_len: usize,
    filter: impl Fn(&[Action]) -> Vec<Action>,
) -> LemmaVerdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let ways = [1, 2, 4, 8][rng.gen_range(0..4)];
        let tags = rng.gen_range(1..3 * ways as u32 + 2);
        let len = rng.gen_range(0..=max_len);
        let (h, _) = legal_history(&mut rng, len, ways, tags);
        let f = filter(&h);
        if cons_queue(&h) != cons_queue(&f) {
            return LemmaVerdict::Fail { history: i, lemma: "cons_filter" };
        }
        for t in 0..tags + 1 {
            if evict_select(&h, ways, t) != evict_select(&f, ways, t) {
                return LemmaVerdict::Fail { history: i, lemma: "evict_filter" };
            }
        }
        // Replay on an explicit slice and compare with the history's view.
        let mut slice: Vec<u32> = Vec::new();
        for a in &h {
            match *a {
                Action::Fill(t) => slice.push(t),
                Action::Evict(t) => slice.retain(|&x| x != t),
                _ => {}
            }
        }
        slice.sort_unstable();
        let tagged: Vec<u32> = present_tags(&h).into_iter().collect();
        if slice != tagged || slice.len() > ways {
            return LemmaVerdict::Fail { history: i, lemma: "tag_history" };
        }
    }
    LemmaVerdict::Pass { histories: n }
}

pub fn check_cache_lemmas(seed: u64, n: usize) -> LemmaVerdict {
    check_cache_lemmas_with(seed, n, 1000, lru_filter)
}

/// `lru_filter` with a planted bug: the last read touch is dropped.
pub fn mutated_filter(h: &[Action]) -> Vec<Action> {
    let mut f = lru_filter(h);
    if let Some(i) = f.iter().rposition(|a| matches!(a, Action::TouchR(_))) {
        f.remove(i);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_histories_pass() {
        assert_eq!(check_cache_lemmas(0, 0), LemmaVerdict::Pass { histories: 0 });
    }

    #[test]
    fn lemmas_hold() {
        assert!(check_cache_lemmas(5, 300).passed());
    }

    #[test]
    fn mutation_is_caught() {
        assert!(!check_cache_lemmas_with(5, 300, 1000, mutated_filter).passed());
    }

    #[test]
    fn generated_histories_are_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (h, resident) = legal_history(&mut rng, 200, 4, 9);
            assert!(resident.len() <= 4);
            let mut live = std::collections::BTreeSet::new();
            for a in h {
                match a {
                    Action::Fill(t) => assert!(live.insert(t)),
                    Action::Evict(t) | Action::TouchR(t) | Action::TouchW(t) => assert!(live.contains(&t)),
                }
                if let Action::Evict(t) = a {
                    live.remove(&t);
                }
            }
        }
    }
}
