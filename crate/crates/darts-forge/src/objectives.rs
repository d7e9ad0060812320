//! Training criteria: cross-entropy, (LF-)MMI via graph forward-backward,
//! their multitask combination, and the semi-supervised numerator built
//! from decoding lattices.
//!
//! Graphs live in the log semiring: arc weights are negated natural-log
//! probabilities; per-frame acoustic log-scores are folded in along
//! non-epsilon arcs.

use ndarray::Array2;
use thiserror::Error;

use crate::wfst::{Fst, EPSILON};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("graph/utterance length mismatch")]
    LengthMismatch,
    #[error("graph has no start state")]
    NoStart,
    #[error("graph input label {0} exceeds the {1} tied states")]
    BadLabel(u32, usize),
    #[error("epsilon cycle in objective graph")]
    EpsilonCycle,
    #[error("alignment has {alignment} frames but scores have {scores}")]
    AlignmentLength { alignment: usize, scores: usize },
    #[error("alignment state {0} out of range for {1} tied states")]
    BadAlignmentState(u32, usize),
    #[error("multitask weights must be non-negative, got ({0}, {1})")]
    NegativeWeight(f64, f64),
}

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Topological order of the epsilon-only subgraph (Kahn's algorithm).
fn epsilon_topo_order(graph: &Fst) -> Result<Vec<usize>, ObjectiveError> {
    let n = graph.num_states();
    let mut indeg = vec![0usize; n];
    for q in graph.states() {
        for arc in graph.arcs(q) {
            if arc.ilabel == EPSILON {
                indeg[arc.nextstate] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&q| indeg[q] == 0).collect();
    let mut order = Vec::with_capacity(n);
    let mut head = 0;
    while head < queue.len() {
        let q = queue[head];
        head += 1;
        order.push(q);
        for arc in graph.arcs(q) {
            if arc.ilabel == EPSILON {
                indeg[arc.nextstate] -= 1;
                if indeg[arc.nextstate] == 0 {
                    queue.push(arc.nextstate);
                }
            }
        }
    }
    if order.len() != n {
        return Err(ObjectiveError::EpsilonCycle);
    }
    Ok(order)
}

/// Exact forward-backward over a log-semiring graph with per-frame acoustic
/// scores. Returns the total log-probability and the per-frame tied-state
/// occupancy table (each row sums to one).
pub fn forward_backward(
    graph: &Fst,
    scores: &Array2<f64>,
    acoustic_scale: f64,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let start = graph.start().ok_or(ObjectiveError::NoStart)?;
    let t_len = scores.nrows();
    let k = scores.ncols();
    let n = graph.num_states();
    for q in graph.states() {
        for arc in graph.arcs(q) {
            if arc.ilabel != EPSILON && arc.ilabel as usize > k {
                return Err(ObjectiveError::BadLabel(arc.ilabel, k));
            }
        }
    }
    let topo = epsilon_topo_order(graph)?;

    // alpha[t][q]: log-probability of reaching q having consumed t frames.
    let mut alpha = vec![vec![NEG_INF; n]; t_len + 1];
    alpha[0][start] = 0.0;
    for t in 0..=t_len {
        for &q in &topo {
            let a = alpha[t][q];
            if a == NEG_INF {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel == EPSILON {
                    let w = log_add(alpha[t][arc.nextstate], a - arc.weight);
                    alpha[t][arc.nextstate] = w;
                }
            }
        }
        if t == t_len {
            break;
        }
        for q in 0..n {
            let a = alpha[t][q];
            if a == NEG_INF {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel != EPSILON {
                    let s = acoustic_scale * scores[[t, arc.ilabel as usize - 1]];
                    let w = log_add(alpha[t + 1][arc.nextstate], a - arc.weight + s);
                    alpha[t + 1][arc.nextstate] = w;
                }
            }
        }
    }
    let mut log_z = NEG_INF;
    for q in graph.states() {
        if graph.is_final(q) {
            log_z = log_add(log_z, alpha[t_len][q] - graph.final_weight(q));
        }
    }
    if log_z == NEG_INF {
        return Err(ObjectiveError::LengthMismatch);
    }

    // beta[t][q]: log-probability of finishing from q with t frames consumed.
    let mut beta = vec![vec![NEG_INF; n]; t_len + 1];
    for q in graph.states() {
        if graph.is_final(q) {
            beta[t_len][q] = -graph.final_weight(q);
        }
    }
    for t in (0..=t_len).rev() {
        if t < t_len {
            for q in 0..n {
                for arc in graph.arcs(q) {
                    if arc.ilabel != EPSILON {
                        let s = acoustic_scale * scores[[t, arc.ilabel as usize - 1]];
                        let w = log_add(beta[t][q], -arc.weight + s + beta[t + 1][arc.nextstate]);
                        beta[t][q] = w;
                    }
                }
            }
        }
        for &q in topo.iter().rev() {
            for arc in graph.arcs(q) {
                if arc.ilabel == EPSILON {
                    let w = log_add(beta[t][q], -arc.weight + beta[t][arc.nextstate]);
                    beta[t][q] = w;
                }
            }
        }
    }

    let mut gamma = Array2::<f64>::zeros((t_len, k));
    for t in 0..t_len {
        for q in 0..n {
            let a = alpha[t][q];
            if a == NEG_INF {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel != EPSILON {
                    let s = acoustic_scale * scores[[t, arc.ilabel as usize - 1]];
                    let occ = a - arc.weight + s + beta[t + 1][arc.nextstate] - log_z;
                    if occ > NEG_INF {
                        gamma[[t, arc.ilabel as usize - 1]] += occ.exp();
                    }
                }
            }
        }
    }
    Ok((log_z, gamma))
}

/// MMI objective: numerator log-probability minus denominator
/// log-probability, with the gradient with respect to the frame scores.
/// Supplying a clamped alignment numerator and an n-gram denominator graph
/// makes this lattice-free MMI; supplying lattices makes it classical MMI.
pub fn mmi_objective(
    scores: &Array2<f64>,
    numerator: &Fst,
    denominator: &Fst,
    acoustic_scale: f64,
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let (z_num, g_num) = forward_backward(numerator, scores, acoustic_scale)?;
    let (z_den, g_den) = forward_backward(denominator, scores, acoustic_scale)?;
    let grad = (&g_num - &g_den) * acoustic_scale;
    Ok((z_num - z_den, grad))
}

/// Mean negative log-probability of the aligned states under the CE head.
/// The gradient is with respect to the pre-softmax logits: per frame,
/// (softmax - one-hot) / T.
pub fn ce_loss(
    ce_logprobs: &Array2<f64>,
    alignment: &[u32],
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let t_len = ce_logprobs.nrows();
    let k = ce_logprobs.ncols();
    if alignment.len() != t_len {
        return Err(ObjectiveError::AlignmentLength {
            alignment: alignment.len(),
            scores: t_len,
        });
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((t_len, k));
    for (t, &s) in alignment.iter().enumerate() {
        let s = s as usize;
        if s >= k {
            return Err(ObjectiveError::BadAlignmentState(s as u32, k));
        }
        loss -= ce_logprobs[[t, s]];
        for j in 0..k {
            grad[[t, j]] = ce_logprobs[[t, j]].exp() / t_len as f64;
        }
        grad[[t, s]] -= 1.0 / t_len as f64;
    }
    Ok((loss / t_len as f64, grad))
}

pub struct MultitaskResult {
    /// Combined scalar to minimize: w_mmi * (-MMI) + w_ce * CE.
    pub value: f64,
    /// Gradient for the LF-MMI head scores (minimize convention).
    pub grad_mmi: Array2<f64>,
    /// Gradient for the CE head logits.
    pub grad_ce: Array2<f64>,
}

/// Combine the two criteria under a uniform minimize convention. The MMI
/// gradient flips sign because MMI itself is maximized.
pub fn multitask(
    mmi: (f64, &Array2<f64>),
    ce: (f64, &Array2<f64>),
    w_mmi: f64,
    w_ce: f64,
) -> Result<MultitaskResult, ObjectiveError> {
    if w_mmi < 0.0 || w_ce < 0.0 {
        return Err(ObjectiveError::NegativeWeight(w_mmi, w_ce));
    }
    Ok(MultitaskResult {
        value: w_mmi * (-mmi.0) + w_ce * ce.0,
        grad_mmi: mmi.1 * (-w_mmi),
        grad_ce: ce.1 * w_ce,
    })
}

/// Build a numerator graph for semi-supervised training from a decoding
/// lattice: one graph state per lattice node, one arc per lattice arc
/// carrying the tied-state label and the lattice's graph/LM cost scaled by
/// `lattice_scale`. Acoustic costs are dropped — they get re-added from the
/// current model's scores inside the forward-backward. Returns `None` (with
/// a warning) for an empty lattice, which callers should skip.
pub fn semisup_numerator(lattice: &crate::decoder::Lattice, lattice_scale: f64) -> Option<Fst> {
    if lattice.nodes.is_empty() || lattice.arcs.is_empty() {
        eprintln!(
            "semisup_numerator: empty lattice for utterance '{}', skipping",
            lattice.id
        );
        return None;
    }
    let mut fst = Fst::new(crate::wfst::SemiringKind::Log);
    for _ in &lattice.nodes {
        fst.add_state();
    }
    fst.set_start(0);
    for arc in &lattice.arcs {
        fst.add_arc(
            arc.from,
            crate::wfst::Arc {
                ilabel: arc.state,
                olabel: arc.state,
                weight: lattice_scale * arc.lm,
                nextstate: arc.to,
            },
        );
    }
    for s in lattice.final_nodes() {
        fst.set_final(s, 0.0);
    }
    Some(fst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wfst::{Arc, SemiringKind};
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_scores(rng: &mut StdRng, t: usize, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, k), |_| rng.gen_range(-2.0..2.0))
    }

    /// Random small log-semiring acceptor over `k` labels; epsilon arcs only
    /// go forward in state order, so no epsilon cycles arise.
    fn random_graph(rng: &mut StdRng, k: usize) -> Fst {
        let n = rng.gen_range(2..=5);
        let mut fst = Fst::new(SemiringKind::Log);
        for _ in 0..n {
            fst.add_state();
        }
        fst.set_start(0);
        for q in 0..n {
            let arcs = rng.gen_range(1..=3);
            for _ in 0..arcs {
                let next = rng.gen_range(0..n);
                let eps_ok = next > q;
                let label = if eps_ok && rng.gen_bool(0.25) {
                    EPSILON
                } else {
                    rng.gen_range(1..=k as u32)
                };
                fst.add_arc(
                    q,
                    Arc {
                        ilabel: label,
                        olabel: label,
                        weight: rng.gen_range(0.1..2.0),
                        nextstate: next,
                    },
                );
            }
            if rng.gen_bool(0.5) {
                fst.set_final(q, rng.gen_range(0.0..1.0));
            }
        }
        // Always have at least one final state.
        fst.set_final(n - 1, 0.0);
        fst
    }

    /// Enumerate every length-T path and logsumexp their weights; also
    /// accumulate exact label occupancies.
    fn brute_force(
        graph: &Fst,
        scores: &Array2<f64>,
        scale: f64,
    ) -> (f64, Array2<f64>) {
        let t_len = scores.nrows();
        let k = scores.ncols();
        let mut total = NEG_INF;
        let mut occ = Array2::<f64>::zeros((t_len, k));
        // DFS over (state, frames consumed, logp, labels so far).
        let mut stack = vec![(graph.start().unwrap(), 0usize, 0.0f64, Vec::<(usize, usize)>::new(), 0usize)];
        let mut paths = Vec::new();
        while let Some((q, t, logp, labels, eps_run)) = stack.pop() {
            if t == t_len && graph.is_final(q) {
                paths.push((logp - graph.final_weight(q), labels.clone()));
            }
            // Epsilon chains are acyclic but bound the run length anyway.
            if eps_run > graph.num_states() {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel == EPSILON {
                    stack.push((arc.nextstate, t, logp - arc.weight, labels.clone(), eps_run + 1));
                } else if t < t_len {
                    let mut l2 = labels.clone();
                    l2.push((t, arc.ilabel as usize - 1));
                    stack.push((
                        arc.nextstate,
                        t + 1,
                        logp - arc.weight + scale * scores[[t, arc.ilabel as usize - 1]],
                        l2,
                        0,
                    ));
                }
            }
        }
        for (lp, _) in &paths {
            total = log_add(total, *lp);
        }
        for (lp, labels) in &paths {
            for &(t, j) in labels {
                occ[[t, j]] += (lp - total).exp();
            }
        }
        (total, occ)
    }

    #[test]
    fn logz_matches_path_enumeration() {
        let mut rng = StdRng::seed_from_u64(41);
        let mut checked = 0;
        for _ in 0..60 {
            let k = rng.gen_range(2..=4);
            let graph = random_graph(&mut rng, k);
            let t = rng.gen_range(1..=6);
            let scores = rand_scores(&mut rng, t, k);
            let scale = [0.5, 1.0][rng.gen_range(0..2)];
            let brute = brute_force(&graph, &scores, scale);
            match forward_backward(&graph, &scores, scale) {
                Ok((z, gamma)) => {
                    assert!(brute.0.is_finite());
                    assert!((z - brute.0).abs() < 1e-8, "logZ {z} vs brute {}", brute.0);
                    for (a, b) in gamma.iter().zip(brute.1.iter()) {
                        assert!((a - b).abs() < 1e-8);
                    }
                    checked += 1;
                }
                Err(ObjectiveError::LengthMismatch) => {
                    assert_eq!(brute.0, NEG_INF);
                }
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(checked >= 20, "only {checked} graphs had length-T paths");
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..40 {
            let k = rng.gen_range(2..=4);
            let graph = random_graph(&mut rng, k);
            let t = rng.gen_range(1..=6);
            let scores = rand_scores(&mut rng, t, k);
            if let Ok((_, gamma)) = forward_backward(&graph, &scores, 1.0) {
                for row in gamma.rows() {
                    let s: f64 = row.sum();
                    assert!((s - 1.0).abs() < 1e-8, "row sums to {s}");
                }
            }
        }
    }

    #[test]
    fn single_path_graph_gives_one_hot_posteriors() {
        // Linear graph forcing labels 1, 3, 2.
        let mut fst = Fst::new(SemiringKind::Log);
        for _ in 0..4 {
            fst.add_state();
        }
        fst.set_start(0);
        for (i, lab) in [1u32, 3, 2].iter().enumerate() {
            fst.add_arc(
                i,
                Arc {
                    ilabel: *lab,
                    olabel: *lab,
                    weight: 0.3,
                    nextstate: i + 1,
                },
            );
        }
        fst.set_final(3, 0.0);
        let mut rng = StdRng::seed_from_u64(43);
        let scores = rand_scores(&mut rng, 3, 3);
        let (_, gamma) = forward_backward(&fst, &scores, 1.0).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        for t in 0..3 {
            for j in 0..3 {
                assert!((gamma[[t, j]] - expect[t][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut fst = Fst::new(SemiringKind::Log);
        let a = fst.add_state();
        let b = fst.add_state();
        fst.set_start(a);
        fst.add_arc(
            a,
            Arc {
                ilabel: 1,
                olabel: 1,
                weight: 0.0,
                nextstate: b,
            },
        );
        fst.set_final(b, 0.0);
        // Graph only accepts exactly one frame.
        let scores = Array2::zeros((3, 2));
        assert!(matches!(
            forward_backward(&fst, &scores, 1.0),
            Err(ObjectiveError::LengthMismatch)
        ));
        let err = forward_backward(&fst, &scores, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "graph/utterance length mismatch");
    }

    #[test]
    fn logz_gradient_is_scaled_posterior() {
        // d logZ / d scores[t,k] = acoustic_scale * gamma[t,k].
        let mut rng = StdRng::seed_from_u64(44);
        for _ in 0..10 {
            let k = 3;
            let graph = random_graph(&mut rng, k);
            let t = 4;
            let scores = rand_scores(&mut rng, t, k);
            let scale = 0.7;
            let Ok((_, gamma)) = forward_backward(&graph, &scores, scale) else {
                continue;
            };
            let eps = 1e-6;
            for ti in 0..t {
                for j in 0..k {
                    let mut plus = scores.clone();
                    plus[[ti, j]] += eps;
                    let mut minus = scores.clone();
                    minus[[ti, j]] -= eps;
                    let zp = forward_backward(&graph, &plus, scale).unwrap().0;
                    let zm = forward_backward(&graph, &minus, scale).unwrap().0;
                    let numeric = (zp - zm) / (2.0 * eps);
                    let analytic = scale * gamma[[ti, j]];
                    let denom = analytic.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-5,
                        "analytic {analytic}, numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn mmi_identical_graphs_give_zero() {
        let mut rng = StdRng::seed_from_u64(45);
        let graph = random_graph(&mut rng, 3);
        let scores = rand_scores(&mut rng, 4, 3);
        if let Ok((v, g)) = mmi_objective(&scores, &graph, &graph, 1.0) {
            assert!(v.abs() < 1e-12);
            assert!(g.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn mmi_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(46);
        let mut checked = 0;
        while checked < 5 {
            let k = 3;
            let num = random_graph(&mut rng, k);
            let den = random_graph(&mut rng, k);
            let t = 4;
            let scores = rand_scores(&mut rng, t, k);
            let scale = 0.9;
            let Ok((_, grad)) = mmi_objective(&scores, &num, &den, scale) else {
                continue;
            };
            let eps = 1e-6;
            for ti in 0..t {
                for j in 0..k {
                    let mut plus = scores.clone();
                    plus[[ti, j]] += eps;
                    let mut minus = scores.clone();
                    minus[[ti, j]] -= eps;
                    let vp = mmi_objective(&plus, &num, &den, scale).unwrap().0;
                    let vm = mmi_objective(&minus, &num, &den, scale).unwrap().0;
                    let numeric = (vp - vm) / (2.0 * eps);
                    let a = grad[[ti, j]];
                    let denom = a.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (a - numeric).abs() / denom < 1e-5,
                        "analytic {a}, numeric {numeric}"
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn mmi_nonpositive_when_numerator_is_subset() {
        // Numerator: one fixed path. Denominator: that path plus others.
        let mut num = Fst::new(SemiringKind::Log);
        for _ in 0..3 {
            num.add_state();
        }
        num.set_start(0);
        for (i, lab) in [1u32, 2].iter().enumerate() {
            num.add_arc(
                i,
                Arc {
                    ilabel: *lab,
                    olabel: *lab,
                    weight: 0.5,
                    nextstate: i + 1,
                },
            );
        }
        num.set_final(2, 0.0);
        let mut den = num.clone();
        // Extra alternative with identical weights: label 2 then 1.
        let a = den.add_state();
        den.add_arc(
            0,
            Arc {
                ilabel: 2,
                olabel: 2,
                weight: 0.5,
                nextstate: a,
            },
        );
        den.add_arc(
            a,
            Arc {
                ilabel: 1,
                olabel: 1,
                weight: 0.5,
                nextstate: 2,
            },
        );
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..20 {
            let scores = rand_scores(&mut rng, 2, 2);
            let (v, _) = mmi_objective(&scores, &num, &den, 1.0).unwrap();
            assert!(v <= 1e-12, "MMI value {v} > 0 for subset numerator");
        }
    }

    #[test]
    fn boosting_correct_path_increases_mmi() {
        let mut rng = StdRng::seed_from_u64(48);
        // Same subset construction as above.
        let mut num = Fst::new(SemiringKind::Log);
        for _ in 0..3 {
            num.add_state();
        }
        num.set_start(0);
        for (i, lab) in [1u32, 2].iter().enumerate() {
            num.add_arc(
                i,
                Arc {
                    ilabel: *lab,
                    olabel: *lab,
                    weight: 0.5,
                    nextstate: i + 1,
                },
            );
        }
        num.set_final(2, 0.0);
        let mut den = num.clone();
        let a = den.add_state();
        den.add_arc(
            0,
            Arc {
                ilabel: 2,
                olabel: 2,
                weight: 0.5,
                nextstate: a,
            },
        );
        den.add_arc(
            a,
            Arc {
                ilabel: 1,
                olabel: 1,
                weight: 0.5,
                nextstate: 2,
            },
        );
        let base = rand_scores(&mut rng, 2, 2);
        let mut prev = f64::NEG_INFINITY;
        for c in [0.0, 0.5, 1.0, 2.0] {
            let mut s = base.clone();
            // Boost the numerator path's frame scores: label 1 at t=0, 2 at t=1.
            s[[0, 0]] += c;
            s[[1, 1]] += c;
            let (v, _) = mmi_objective(&s, &num, &den, 1.0).unwrap();
            assert!(v >= prev - 1e-12, "value decreased: {prev} -> {v}");
            prev = v;
        }
    }

    #[test]
    fn ce_loss_known_values() {
        // Perfect one-hot predictions: loss 0.
        let mut lp = Array2::from_elem((2, 3), -1e9f64);
        lp[[0, 1]] = 0.0;
        lp[[1, 2]] = 0.0;
        let (v, _) = ce_loss(&lp, &[1, 2]).unwrap();
        assert!(v.abs() < 1e-12);
        // Uniform predictions: loss = ln K.
        let uni = Array2::from_elem((4, 5), (1.0f64 / 5.0).ln());
        let (v, _) = ce_loss(&uni, &[0, 1, 2, 3]).unwrap();
        assert!((v - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        // Loss as a function of pre-softmax logits; grad should be
        // (softmax - one-hot)/T.
        let mut rng = StdRng::seed_from_u64(49);
        let t = 3;
        let k = 4;
        let logits = rand_scores(&mut rng, t, k);
        let align = [2u32, 0, 3];
        let loss_of = |logits: &Array2<f64>| -> f64 {
            let mut lp = logits.clone();
            for mut row in lp.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                row.mapv_inplace(|x| x - z);
            }
            ce_loss(&lp, &align).unwrap().0
        };
        let mut lp = logits.clone();
        for mut row in lp.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - z);
        }
        let (_, grad) = ce_loss(&lp, &align).unwrap();
        let eps = 1e-6;
        for ti in 0..t {
            for j in 0..k {
                let mut plus = logits.clone();
                plus[[ti, j]] += eps;
                let mut minus = logits.clone();
                minus[[ti, j]] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = grad[[ti, j]];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < 1e-6,
                    "analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn ce_length_mismatch_errors() {
        let lp = Array2::from_elem((3, 2), (0.5f64).ln());
        assert!(matches!(
            ce_loss(&lp, &[0, 1]),
            Err(ObjectiveError::AlignmentLength { .. })
        ));
        assert!(matches!(
            ce_loss(&lp, &[0, 1, 5]),
            Err(ObjectiveError::BadAlignmentState(5, 2))
        ));
    }

    #[test]
    fn multitask_combines_linearly() {
        let mut rng = StdRng::seed_from_u64(50);
        let gm = rand_scores(&mut rng, 3, 2);
        let gc = rand_scores(&mut rng, 3, 2);
        let r = multitask((-1.5, &gm), (0.8, &gc), 0.3, 0.7).unwrap();
        assert!((r.value - (0.3 * 1.5 + 0.7 * 0.8)).abs() < 1e-12);
        for (a, b) in r.grad_mmi.iter().zip(gm.iter()) {
            assert_eq!(*a, -0.3 * b);
        }
        for (a, b) in r.grad_ce.iter().zip(gc.iter()) {
            assert_eq!(*a, 0.7 * b);
        }
        // Pure modes.
        let pure_mmi = multitask((-1.5, &gm), (0.8, &gc), 1.0, 0.0).unwrap();
        assert!(pure_mmi.grad_ce.iter().all(|x| *x == 0.0));
        let pure_ce = multitask((-1.5, &gm), (0.8, &gc), 0.0, 1.0).unwrap();
        assert!(pure_ce.grad_mmi.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn multitask_rejects_negative_weights() {
        let g = Array2::zeros((1, 1));
        assert!(matches!(
            multitask((0.0, &g), (0.0, &g), -0.1, 1.0),
            Err(ObjectiveError::NegativeWeight(..))
        ));
    }

    #[test]
    fn epsilon_cycle_detected() {
        let mut fst = Fst::new(SemiringKind::Log);
        let a = fst.add_state();
        let b = fst.add_state();
        fst.set_start(a);
        fst.add_arc(
            a,
            Arc {
                ilabel: EPSILON,
                olabel: EPSILON,
                weight: 0.1,
                nextstate: b,
            },
        );
        fst.add_arc(
            b,
            Arc {
                ilabel: EPSILON,
                olabel: EPSILON,
                weight: 0.1,
                nextstate: a,
            },
        );
        fst.set_final(b, 0.0);
        let scores = Array2::zeros((1, 1));
        assert!(matches!(
            forward_backward(&fst, &scores, 1.0),
            Err(ObjectiveError::EpsilonCycle)
        ));
    }

    use crate::decoder::{Lattice, LatticeArc, LatticeNode};

    /// Lattice from (from, to, state, lm) arc tuples; state 0 means epsilon.
    fn mk_lattice(num_nodes: usize, num_frames: usize, arcs: &[(usize, usize, u32, f64)]) -> Lattice {
        Lattice {
            id: "utt".to_string(),
            num_frames,
            nodes: (0..num_nodes).map(|_| LatticeNode { frame: 0 }).collect(),
            arcs: arcs
                .iter()
                .map(|&(from, to, state, lm)| LatticeArc {
                    from,
                    to,
                    word: None,
                    state,
                    am: 0.0,
                    lm,
                })
                .collect(),
        }
    }

    #[test]
    fn semisup_degenerate_lattice_matches_supervised() {
        // A lattice holding exactly the ground-truth state sequence with zero
        // graph costs must reproduce the supervised numerator.
        let align: [u32; 4] = [1, 2, 2, 3];
        let k = 3;
        let lat = mk_lattice(
            6,
            4,
            &[
                (0, 1, align[0], 0.0),
                (1, 2, align[1], 0.0),
                (2, 3, align[2], 0.0),
                (3, 4, align[3], 0.0),
                (4, 5, EPSILON, 0.0),
            ],
        );
        let num_lat = semisup_numerator(&lat, 1.0).unwrap();

        let mut num_sup = Fst::new(SemiringKind::Log);
        for _ in 0..=align.len() {
            num_sup.add_state();
        }
        num_sup.set_start(0);
        for (t, &s) in align.iter().enumerate() {
            num_sup.add_arc(
                t,
                Arc {
                    ilabel: s,
                    olabel: s,
                    weight: 0.0,
                    nextstate: t + 1,
                },
            );
        }
        num_sup.set_final(align.len(), 0.0);

        let mut rng = StdRng::seed_from_u64(91);
        let den = random_graph(&mut rng, k);
        let scores = rand_scores(&mut rng, 4, k);
        let (v_lat, g_lat) = mmi_objective(&scores, &num_lat, &den, 1.0).unwrap();
        let (v_sup, g_sup) = mmi_objective(&scores, &num_sup, &den, 1.0).unwrap();
        assert!((v_lat - v_sup).abs() < 1e-10, "{v_lat} vs {v_sup}");
        for (a, b) in g_lat.iter().zip(g_sup.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn semisup_logz_matches_hypothesis_enumeration() {
        // Diamond lattice with three hypotheses; logZ of the numerator must
        // equal the logsumexp of the per-path weights computed by hand.
        let ls = 0.7;
        let lat = mk_lattice(
            5,
            2,
            &[
                (0, 1, 1, 0.3),
                (0, 2, 2, 0.5),
                (1, 3, 3, 0.2),
                (2, 3, 1, 0.1),
                (2, 3, 3, 0.4),
                (3, 4, EPSILON, 0.6),
            ],
        );
        let num = semisup_numerator(&lat, ls).unwrap();
        let mut rng = StdRng::seed_from_u64(92);
        let scores = rand_scores(&mut rng, 2, 3);
        let (z, _) = forward_backward(&num, &scores, 1.0).unwrap();
        // Paths as (labels, summed lattice cost).
        let paths: [(&[usize], f64); 3] = [
            (&[1, 3], 0.3 + 0.2 + 0.6),
            (&[2, 1], 0.5 + 0.1 + 0.6),
            (&[2, 3], 0.5 + 0.4 + 0.6),
        ];
        let mut expect = NEG_INF;
        for (labels, cost) in paths {
            let mut lp = -ls * cost;
            for (t, &s) in labels.iter().enumerate() {
                lp += scores[[t, s - 1]];
            }
            expect = log_add(expect, lp);
        }
        assert!((z - expect).abs() < 1e-10, "{z} vs {expect}");
    }

    #[test]
    fn semisup_invariant_to_weight_split_along_paths() {
        // Only the total cost along each path matters, not how it is spread
        // over the arcs.
        let a = mk_lattice(
            4,
            2,
            &[
                (0, 1, 1, 0.9),
                (0, 1, 2, 0.6),
                (1, 2, 2, 0.0),
                (2, 3, EPSILON, 0.0),
            ],
        );
        let b = mk_lattice(
            4,
            2,
            &[
                (0, 1, 1, 0.2),
                (0, 1, 2, -0.1),
                (1, 2, 2, 0.3),
                (2, 3, EPSILON, 0.4),
            ],
        );
        let mut rng = StdRng::seed_from_u64(93);
        let scores = rand_scores(&mut rng, 2, 2);
        let za = forward_backward(&semisup_numerator(&a, 0.5).unwrap(), &scores, 1.0)
            .unwrap()
            .0;
        let zb = forward_backward(&semisup_numerator(&b, 0.5).unwrap(), &scores, 1.0)
            .unwrap()
            .0;
        assert!((za - zb).abs() < 1e-8, "{za} vs {zb}");
    }

    #[test]
    fn semisup_empty_lattice_is_none() {
        let lat = Lattice::default();
        assert!(semisup_numerator(&lat, 1.0).is_none());
    }
}
