//! Exact n-shortest accepting paths over the tropical semiring.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Fst, Label, SemiringKind, StateId, EPSILON};

#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPathEntry {
    /// Non-epsilon input labels along the path.
    pub ilabels: Vec<Label>,
    /// Non-epsilon output labels along the path.
    pub olabels: Vec<Label>,
    /// Tropical path weight including the final weight.
    pub weight: f64,
}

#[derive(Debug)]
struct Item {
    est: f64,
    olabels: Vec<Label>,
    ilabels: Vec<Label>,
    g: f64,
    state: Option<StateId>, // None = completed path
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse so the smallest comes out first.
        other
            .est
            .total_cmp(&self.est)
            .then_with(|| other.olabels.cmp(&self.olabels))
            .then_with(|| other.ilabels.cmp(&self.ilabels))
    }
}

/// Tropical shortest distance from every state to a final state.
fn backward_distances(f: &Fst) -> Vec<f64> {
    let n = f.num_states();
    let mut dist = vec![f64::INFINITY; n];
    let mut rev: Vec<Vec<(StateId, f64)>> = vec![Vec::new(); n];
    for s in f.states() {
        for arc in f.arcs(s) {
            rev[arc.nextstate].push((s, arc.weight));
        }
    }
    let mut queue: Vec<StateId> = Vec::new();
    let mut in_queue = vec![false; n];
    for s in f.states() {
        if f.is_final(s) {
            dist[s] = f.final_weight(s);
            queue.push(s);
            in_queue[s] = true;
        }
    }
    while let Some(s) = queue.pop() {
        in_queue[s] = false;
        for &(p, w) in &rev[s] {
            let cand = w + dist[s];
            if cand < dist[p] - 1e-15 {
                dist[p] = cand;
                if !in_queue[p] {
                    queue.push(p);
                    in_queue[p] = true;
                }
            }
        }
    }
    dist
}

/// The `n` lowest-weight accepting paths, ties broken by lexicographic output
/// then input label sequence. Requires the tropical semiring and no
/// negative-weight cycles; returns an empty list when nothing accepts.
pub fn shortest_path(f: &Fst, n: usize) -> Vec<ShortestPathEntry> {
    assert_eq!(
        f.semiring,
        SemiringKind::Tropical,
        "shortest_path requires the tropical semiring"
    );
    let mut results = Vec::new();
    if n == 0 {
        return results;
    }
    let start = match f.start() {
        Some(s) => s,
        None => return results,
    };
    let phi = backward_distances(f);
    if phi[start] == f64::INFINITY {
        return results;
    }

    let mut heap: BinaryHeap<Item> = BinaryHeap::new();
    let mut pops = vec![0usize; f.num_states()];
    heap.push(Item {
        est: phi[start],
        olabels: Vec::new(),
        ilabels: Vec::new(),
        g: 0.0,
        state: Some(start),
    });
    // Safety valve against pathological zero-weight cycles.
    let budget = 64 * (f.num_states() + 2) * n.max(1) + 100_000;
    let mut spent = 0usize;

    while let Some(item) = heap.pop() {
        spent += 1;
        if spent > budget {
            break;
        }
        let s = match item.state {
            None => {
                results.push(ShortestPathEntry {
                    ilabels: item.ilabels,
                    olabels: item.olabels,
                    weight: item.g,
                });
                if results.len() >= n {
                    break;
                }
                continue;
            }
            Some(s) => s,
        };
        if pops[s] >= n {
            continue;
        }
        pops[s] += 1;
        if f.is_final(s) {
            heap.push(Item {
                est: item.g + f.final_weight(s),
                olabels: item.olabels.clone(),
                ilabels: item.ilabels.clone(),
                g: item.g + f.final_weight(s),
                state: None,
            });
        }
        for arc in f.arcs(s) {
            let g = item.g + arc.weight;
            let est = g + phi[arc.nextstate];
            if est == f64::INFINITY {
                continue;
            }
            let mut olabels = item.olabels.clone();
            if arc.olabel != EPSILON {
                olabels.push(arc.olabel);
            }
            let mut ilabels = item.ilabels.clone();
            if arc.ilabel != EPSILON {
                ilabels.push(arc.ilabel);
            }
            heap.push(Item {
                est,
                olabels,
                ilabels,
                g,
                state: Some(arc.nextstate),
            });
        }
    }
    results
}
