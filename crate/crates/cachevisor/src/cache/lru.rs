//! Action histories and the LRU decision queue.
//!
//! A set's replacement state is never stored directly: it is a function of the
//! set's action history. `cons_queue` rebuilds the recency queue from a
//! history and `lru_filter` drops every action that cannot influence it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// One entry of a per-set action history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TouchR(u32),
    TouchW(u32),
    Evict(u32),
    Fill(u32),
}

impl Action {
    pub fn tag(self) -> u32 {
        match self {
            Action::TouchR(t) | Action::TouchW(t) | Action::Evict(t) | Action::Fill(t) => t,
        }
    }
}

/// Applies one action to a recency queue (front = most recently used).
pub fn apply_cons(queue: &mut Vec<u32>, action: Action) {
    let t = action.tag();
    if let Some(pos) = queue.iter().position(|&x| x == t) {
        queue.remove(pos);
    }
    match action {
        Action::Evict(_) => {}
        Action::Fill(_) | Action::TouchR(_) | Action::TouchW(_) => queue.insert(0, t),
    }
}

/// Recency queue of a history, most recently used first.
pub fn cons_queue(history: &[Action]) -> Vec<u32> {
    let mut q = Vec::new();
    for &a in history {
        apply_cons(&mut q, a);
    }
    q
}

/// LRU victim for a `ways`-way set when filling `_tag`: the back of the
/// queue, or `None` while the set still has room.
pub fn evict_select(history: &[Action], ways: usize, _tag: u32) -> Option<u32> {
    let q = cons_queue(history);
    if q.len() < ways {
        None
    } else {
        q.get(ways - 1).copied()
    }
}

/// Tags whose last action in `history` is not an eviction.
pub fn present_tags(history: &[Action]) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    let mut present = BTreeSet::new();
    for a in history.iter().rev() {
        if seen.insert(a.tag()) && !matches!(a, Action::Evict(_)) {
            present.insert(a.tag());
        }
    }
    present
}

/// Keeps, for every present tag, its last fill and the touches after it.
pub fn lru_filter(history: &[Action]) -> Vec<Action> {
    let mut live = present_tags(history);
    let mut kept = Vec::new();
    for &a in history.iter().rev() {
        if live.is_empty() {
            break;
        }
        match a {
            Action::TouchR(t) | Action::TouchW(t) if live.contains(&t) => kept.push(a),
            Action::Fill(t) if live.contains(&t) => {
                kept.push(a);
                live.remove(&t);
            }
            _ => {}
        }
    }
    kept.reverse();
    kept
}

#[cfg(test)]
mod tests {
    use super::Action::*;
    use super::*;

    // Timestamp-based LRU written independently of the queue.
    fn lru_oracle(history: &[Action], ways: usize) -> Option<u32> {
        let mut stamp: std::collections::HashMap<u32, usize> = Default::default();
        for (i, a) in history.iter().enumerate() {
            match a {
                Evict(t) => {
                    stamp.remove(t);
                }
                _ => {
                    stamp.insert(a.tag(), i);
                }
            }
        }
        if stamp.len() < ways {
            return None;
        }
        stamp.into_iter().min_by_key(|&(_, s)| s).map(|(t, _)| t)
    }

    #[test]
    fn queue_examples() {
        assert_eq!(cons_queue(&[Fill(1)]), vec![1]);
        assert_eq!(cons_queue(&[Fill(1), Fill(2)]), vec![2, 1]);
        assert_eq!(cons_queue(&[Fill(1), Fill(2), TouchW(1)]), vec![1, 2]);
        assert_eq!(cons_queue(&[Fill(1), Fill(2), Evict(2)]), vec![1]);
    }

    #[test]
    fn victim_examples() {
        let h = [Fill(0xa), Fill(0xb)];
        assert_eq!(evict_select(&h, 2, 0xc), Some(0xa));
        assert_eq!(evict_select(&h, 2, 0xc), lru_oracle(&h, 2));
        let h = [Fill(0xa), Fill(0xb), TouchR(0xa)];
        assert_eq!(evict_select(&h, 2, 0xc), Some(0xb));
        assert_eq!(evict_select(&h, 2, 0xc), lru_oracle(&h, 2));
        assert_eq!(evict_select(&[Fill(0xa)], 2, 0xc), None);
    }

    #[test]
    fn filter_examples() {
        assert!(lru_filter(&[]).is_empty());
        assert!(lru_filter(&[Fill(1), Evict(1)]).is_empty());
        let h = [Fill(1), TouchR(1), Fill(2), Evict(1), Fill(1), TouchW(2), TouchR(1)];
        assert_eq!(lru_filter(&h), vec![Fill(2), Fill(1), TouchW(2), TouchR(1)]);
    }

    #[test]
    fn present_tags_example() {
        let h = [Fill(1), Fill(2), Evict(1), TouchR(2), Fill(3)];
        assert_eq!(present_tags(&h).into_iter().collect::<Vec<_>>(), vec![2, 3]);
    }
}
