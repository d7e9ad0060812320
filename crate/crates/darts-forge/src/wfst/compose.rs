//! Composition with the three-state epsilon-sequencing filter.

use std::collections::HashMap;

use super::{Arc, Fst, FstError, StateId, EPSILON};

/// Filter state: 0 = free, 1 = only left-alone epsilon moves, 2 = only
/// right-alone epsilon moves. Joint epsilon moves are restricted to state 0 so
/// each epsilon interleaving is counted exactly once.
type Triple = (StateId, StateId, u8);

/// Compose two transducers over the same semiring. Path weights are the
/// semiring product of the component path weights; duplicate epsilon paths are
/// suppressed by the filter.
pub fn compose(a: &Fst, b: &Fst) -> Result<Fst, FstError> {
    if a.semiring != b.semiring {
        return Err(FstError::SemiringMismatch(a.semiring, b.semiring));
    }
    let sr = a.semiring;
    let mut out = Fst::new(sr);
    let (sa, sb) = match (a.start(), b.start()) {
        (Some(sa), Some(sb)) => (sa, sb),
        _ => return Ok(out),
    };

    let mut index: HashMap<Triple, StateId> = HashMap::new();
    let mut queue: Vec<Triple> = Vec::new();
    let start = (sa, sb, 0u8);
    index.insert(start, out.add_state());
    out.set_start(0);
    queue.push(start);

    while let Some(triple) = queue.pop() {
        let (qa, qb, f) = triple;
        let src = index[&triple];
        let push = |out: &mut Fst,
                        index: &mut HashMap<Triple, StateId>,
                        queue: &mut Vec<Triple>,
                        dest: Triple,
                        arc: (u32, u32, f64)| {
            let dst = *index.entry(dest).or_insert_with(|| {
                queue.push(dest);
                out.add_state()
            });
            out.add_arc(
                src,
                Arc {
                    ilabel: arc.0,
                    olabel: arc.1,
                    weight: arc.2,
                    nextstate: dst,
                },
            );
        };

        for arc_a in a.arcs(qa) {
            if arc_a.olabel == EPSILON {
                // Left moves alone.
                if f == 0 || f == 1 {
                    push(
                        &mut out,
                        &mut index,
                        &mut queue,
                        (arc_a.nextstate, qb, 1),
                        (arc_a.ilabel, EPSILON, arc_a.weight),
                    );
                }
                // Joint epsilon move.
                if f == 0 {
                    for arc_b in b.arcs(qb) {
                        if arc_b.ilabel == EPSILON {
                            push(
                                &mut out,
                                &mut index,
                                &mut queue,
                                (arc_a.nextstate, arc_b.nextstate, 0),
                                (
                                    arc_a.ilabel,
                                    arc_b.olabel,
                                    sr.times(arc_a.weight, arc_b.weight),
                                ),
                            );
                        }
                    }
                }
            } else {
                for arc_b in b.arcs(qb) {
                    if arc_b.ilabel == arc_a.olabel {
                        push(
                            &mut out,
                            &mut index,
                            &mut queue,
                            (arc_a.nextstate, arc_b.nextstate, 0),
                            (
                                arc_a.ilabel,
                                arc_b.olabel,
                                sr.times(arc_a.weight, arc_b.weight),
                            ),
                        );
                    }
                }
            }
        }
        // Right moves alone.
        if f == 0 || f == 2 {
            for arc_b in b.arcs(qb) {
                if arc_b.ilabel == EPSILON {
                    push(
                        &mut out,
                        &mut index,
                        &mut queue,
                        (qa, arc_b.nextstate, 2),
                        (EPSILON, arc_b.olabel, arc_b.weight),
                    );
                }
            }
        }
        if a.is_final(qa) && b.is_final(qb) {
            out.set_final(src, sr.times(a.final_weight(qa), b.final_weight(qb)));
        }
    }
    Ok(out)
}
