//! Construction of the speech transducers: H (HMM topology), L (lexicon),
//! G (grammar), the combined decoding graph, and the LF-MMI numerator and
//! denominator graphs.

use std::collections::{BTreeMap, HashMap};

use super::{Arc, Fst, FstError, Label, SemiringKind, StateId, SymbolTable, EPSILON};
use crate::corpus::{Lexicon, SILENCE};
use crate::hmm::{Alignment, StateInventory};
use crate::lm::{ArpaLm, Gram, BOS, EOS};

const LN_10: f64 = std::f64::consts::LN_10;

/// Grapheme-side symbol table: real graphemes, then silence, then
/// disambiguation symbols.
pub fn grapheme_symbols(lexicon: &Lexicon) -> SymbolTable {
    let mut t = SymbolTable::new();
    for g in &lexicon.grapheme_inventory {
        t.insert(g);
    }
    t.insert(SILENCE);
    for d in lexicon.disambig_symbols() {
        t.insert(&d);
    }
    t
}

pub fn word_symbols(lexicon: &Lexicon) -> SymbolTable {
    let mut t = SymbolTable::new();
    for w in lexicon.entries.keys() {
        t.insert(w);
    }
    t
}

/// Input symbol table of H: one label per tied state (`s<id>`), then the
/// disambiguation pass-through copies.
pub fn hmm_input_symbols(inventory: &StateInventory, lexicon: &Lexicon) -> SymbolTable {
    let mut t = SymbolTable::new();
    for s in 0..inventory.num_states() {
        t.insert(&format!("s{s}"));
    }
    for d in lexicon.disambig_symbols() {
        t.insert(&d);
    }
    t
}

/// Dense tied-state id to FST input label (0 is epsilon).
pub fn state_label(s: u32) -> Label {
    s + 1
}

pub fn label_state(l: Label) -> u32 {
    debug_assert!(l != EPSILON);
    l - 1
}

/// First input label of H that is a disambiguation symbol rather than a
/// tied state.
pub fn first_disambig_label(inventory: &StateInventory) -> Label {
    inventory.num_states() as Label + 1
}

/// Closed-loop lexicon transducer graphemes -> words with optional silence
/// between words and disambiguation symbols on duplicate pronunciations.
#[allow(non_snake_case)]
pub fn build_L(lexicon: &Lexicon, silence_prob: f64) -> Result<Fst, FstError> {
    if lexicon.entries.is_empty() {
        return Err(FstError::EmptyLexicon);
    }
    let graphemes = grapheme_symbols(lexicon);
    let words = word_symbols(lexicon);
    let sil = graphemes.id(SILENCE).expect("silence symbol");
    let mut f = Fst::new(SemiringKind::Tropical);
    let start = f.add_state();
    let loop_state = f.add_state();
    f.set_start(start);
    f.set_final(loop_state, 0.0);
    // Entry into the loop, with optional leading silence.
    let connect = |f: &mut Fst, from: StateId, to: StateId| {
        if silence_prob > 0.0 {
            f.add_arc(
                from,
                Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: -(1.0 - silence_prob).ln(),
                    nextstate: to,
                },
            );
            f.add_arc(
                from,
                Arc {
                    ilabel: sil,
                    olabel: EPSILON,
                    weight: -silence_prob.ln(),
                    nextstate: to,
                },
            );
        } else {
            f.add_arc(
                from,
                Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: 0.0,
                    nextstate: to,
                },
            );
        }
    };
    connect(&mut f, start, loop_state);
    for entry in lexicon.entries.values() {
        let word_label = words.id(&entry.word).expect("word symbol");
        let mut cur = loop_state;
        for (i, g) in entry.graphemes.iter().enumerate() {
            let next = f.add_state();
            f.add_arc(
                cur,
                Arc {
                    ilabel: graphemes
                        .id(g)
                        .ok_or_else(|| FstError::MalformedModel(format!("grapheme `{g}`")))?,
                    olabel: if i == 0 { word_label } else { EPSILON },
                    weight: 0.0,
                    nextstate: next,
                },
            );
            cur = next;
        }
        if let Some(k) = entry.disambig {
            let next = f.add_state();
            let d = graphemes.id(&format!("#{k}")).expect("disambig symbol");
            f.add_arc(
                cur,
                Arc {
                    ilabel: d,
                    olabel: EPSILON,
                    weight: 0.0,
                    nextstate: next,
                },
            );
            cur = next;
        }
        connect(&mut f, cur, loop_state);
    }
    Ok(f)
}

/// Standard backoff grammar acceptor: one state per history, word arcs
/// weighted -ln P, epsilon backoff arcs weighted -ln(backoff weight),
/// end-of-sentence probability folded into final weights.
#[allow(non_snake_case)]
pub fn build_G(lm: &ArpaLm, words: &SymbolTable) -> Result<Fst, FstError> {
    if lm.order == 0 || lm.tables.iter().all(|t| t.is_empty()) {
        return Err(FstError::MalformedModel("empty language model".into()));
    }
    let mut f = Fst::new(SemiringKind::Tropical);
    // History states: the empty history plus every stored n-gram of order
    // below the model order.
    let mut state_of: HashMap<Gram, StateId> = HashMap::new();
    let empty = f.add_state();
    state_of.insert(Vec::new(), empty);
    for n in 1..lm.order {
        for gram in lm.tables[n - 1].keys() {
            let s = f.add_state();
            state_of.insert(gram.clone(), s);
        }
    }
    let resolve = |state_of: &HashMap<Gram, StateId>, mut h: Gram| -> StateId {
        loop {
            if let Some(&s) = state_of.get(&h) {
                return s;
            }
            h.remove(0);
        }
    };
    for n in 1..=lm.order {
        for (gram, entry) in &lm.tables[n - 1] {
            let hist = gram[..n - 1].to_vec();
            let word = &gram[n - 1];
            let from = match state_of.get(&hist) {
                Some(&s) => s,
                // Histories of stored n-grams are stored themselves in any
                // well-formed backoff model.
                None => {
                    return Err(FstError::MalformedModel(format!(
                        "history {hist:?} missing for n-gram {gram:?}"
                    )))
                }
            };
            if word == EOS {
                f.set_final(from, -entry.logp * LN_10);
            } else if word != BOS {
                if let Some(label) = words.id(word) {
                    let to = resolve(&state_of, gram.clone());
                    f.add_arc(
                        from,
                        Arc {
                            ilabel: label,
                            olabel: label,
                            weight: -entry.logp * LN_10,
                            nextstate: to,
                        },
                    );
                }
            }
            // Backoff arc out of this n-gram's own history state.
            if n < lm.order {
                if let Some(bo) = entry.backoff {
                    let s = state_of[gram];
                    let lower = resolve(&state_of, gram[1..].to_vec());
                    f.add_arc(
                        s,
                        Arc {
                            ilabel: EPSILON,
                            olabel: EPSILON,
                            weight: -bo * LN_10,
                            nextstate: lower,
                        },
                    );
                }
            }
        }
    }
    // States whose history lacks a stored backoff still need an escape route
    // (implicit backoff weight 1).
    for (gram, &s) in &state_of {
        if gram.is_empty() {
            continue;
        }
        let has_backoff = lm.tables[gram.len() - 1]
            .get(gram)
            .map(|e| e.backoff.is_some())
            .unwrap_or(false);
        if !has_backoff {
            let lower = resolve(&state_of, gram[1..].to_vec());
            f.add_arc(
                s,
                Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: 0.0,
                    nextstate: lower,
                },
            );
        }
    }
    let start = state_of
        .get(&vec![BOS.to_string()])
        .copied()
        .unwrap_or(empty);
    f.set_start(start);
    Ok(f)
}

/// HMM topology transducer: tied-state labels -> graphemes, one left-to-right
/// chain with self-loops per unit, closed into a loop. Disambiguation symbols
/// pass through at the loop state.
#[allow(non_snake_case)]
pub fn build_H(
    inventory: &StateInventory,
    lexicon: &Lexicon,
    self_loop_prob: f64,
    semiring: SemiringKind,
) -> Fst {
    let graphemes = grapheme_symbols(lexicon);
    let q = self_loop_prob.clamp(1e-6, 1.0 - 1e-6);
    let w_self = -q.ln();
    let w_adv = -(1.0 - q).ln();
    let mut f = Fst::new(semiring);
    let loop_state = f.add_state();
    f.set_start(loop_state);
    f.set_final(loop_state, 0.0);
    for ((center, _, _), states) in &inventory.units {
        let olabel = match graphemes.id(center) {
            Some(l) => l,
            None => continue,
        };
        let mut cur = loop_state;
        for (i, &s) in states.iter().enumerate() {
            let next = f.add_state();
            f.add_arc(
                cur,
                Arc {
                    ilabel: state_label(s),
                    olabel: if i == 0 { olabel } else { EPSILON },
                    // First frame of the unit carries no transition cost.
                    weight: if i == 0 { 0.0 } else { w_adv },
                    nextstate: next,
                },
            );
            f.add_arc(
                next,
                Arc {
                    ilabel: state_label(s),
                    olabel: EPSILON,
                    weight: w_self,
                    nextstate: next,
                },
            );
            cur = next;
        }
        f.add_arc(
            cur,
            Arc {
                ilabel: EPSILON,
                olabel: EPSILON,
                weight: w_adv,
                nextstate: loop_state,
            },
        );
    }
    // Disambiguation pass-throughs.
    let first_dis = first_disambig_label(inventory);
    for k in 1..=lexicon.disambiguation_count {
        if let Some(g) = graphemes.id(&format!("#{k}")) {
            f.add_arc(
                loop_state,
                Arc {
                    ilabel: first_dis + (k - 1),
                    olabel: g,
                    weight: 0.0,
                    nextstate: loop_state,
                },
            );
        }
    }
    f
}

/// States both forward-reachable from the start and backward-reachable from a
/// final state.
fn has_accepting_path(f: &Fst) -> bool {
    let start = match f.start() {
        Some(s) => s,
        None => return false,
    };
    let n = f.num_states();
    let mut fwd = vec![false; n];
    let mut stack = vec![start];
    fwd[start] = true;
    while let Some(s) = stack.pop() {
        if f.is_final(s) {
            return true;
        }
        for arc in f.arcs(s) {
            if !fwd[arc.nextstate] {
                fwd[arc.nextstate] = true;
                stack.push(arc.nextstate);
            }
        }
    }
    false
}

/// H ∘ (L ∘ G) with disambiguation symbols erased from the input side.
pub fn build_decoding_graph(
    h: &Fst,
    l: &Fst,
    g: &Fst,
    first_disambig: Label,
) -> Result<Fst, FstError> {
    let lg = super::compose(l, g)?;
    let mut hlg = super::compose(h, &lg)?;
    hlg.map_ilabels(|il| if il >= first_disambig { EPSILON } else { il });
    if !has_accepting_path(&hlg) {
        return Err(FstError::EmptyGraph);
    }
    Ok(hlg)
}

/// Collapse an alignment to its unit-level (state-run) sequence.
fn grapheme_runs(alignment: &Alignment) -> Vec<(String, usize, usize)> {
    let mut runs: Vec<(String, usize, usize)> = Vec::new();
    for (t, g) in alignment.graphemes.iter().enumerate() {
        match runs.last_mut() {
            Some(last) if last.0 == *g => last.2 = t + 1,
            _ => runs.push((g.clone(), t, t + 1)),
        }
    }
    runs
}

/// Grapheme-level n-gram denominator: Witten-Bell-smoothed maximum-likelihood
/// estimates with epsilon backoff to lower orders, composed with H down to
/// tied states. Log semiring.
pub fn build_denominator_graph(
    alignments: &[Alignment],
    inventory: &StateInventory,
    lexicon: &Lexicon,
    order: usize,
    self_loop_prob: f64,
) -> Result<Fst, FstError> {
    if alignments.is_empty() {
        return Err(FstError::MalformedModel("no alignments".into()));
    }
    let order = order.max(1);
    let graphemes = grapheme_symbols(lexicon);
    // Counts over grapheme run sequences, with an end-of-sequence event.
    let mut counts: Vec<HashMap<Gram, u64>> = vec![HashMap::new(); order];
    let mut ends: HashMap<Gram, u64> = HashMap::new();
    for a in alignments {
        let seq: Vec<String> = grapheme_runs(a).into_iter().map(|(g, _, _)| g).collect();
        for n in 1..=order {
            for win in seq.windows(n) {
                *counts[n - 1].entry(win.to_vec()).or_insert(0) += 1;
            }
        }
        let h_start = seq.len().saturating_sub(order - 1);
        *ends.entry(seq[h_start..].to_vec()).or_insert(0) += 1;
    }
    // Backoff grammar over graphemes (log semiring).
    let mut g = Fst::new(SemiringKind::Log);
    let mut state_of: BTreeMap<Gram, StateId> = BTreeMap::new();
    let empty = g.add_state();
    state_of.insert(Vec::new(), empty);
    for n in 1..order {
        for gram in counts[n - 1].keys() {
            let gram = gram.clone();
            let s = g.add_state();
            state_of.insert(gram, s);
        }
    }
    g.set_start(empty);
    let resolve = |state_of: &BTreeMap<Gram, StateId>, full: &[String]| -> StateId {
        let mut h = full.to_vec();
        let keep = (order - 1).min(h.len());
        h = h[h.len() - keep..].to_vec();
        loop {
            if let Some(&s) = state_of.get(&h) {
                return s;
            }
            h.remove(0);
        }
    };
    let hists: Vec<Gram> = state_of.keys().cloned().collect();
    for hist in hists {
        let n = hist.len() + 1;
        let s = state_of[&hist];
        // Successor counts at this history.
        let mut succ: Vec<(&Gram, u64)> = counts[n - 1]
            .iter()
            .filter(|(g2, _)| g2[..n - 1] == hist[..])
            .map(|(g2, &c)| (g2, c))
            .collect();
        succ.sort_by(|a, b| a.0.cmp(b.0));
        let end_count = ends.get(&hist).copied().unwrap_or(0);
        let total: u64 = succ.iter().map(|(_, c)| *c).sum::<u64>() + end_count;
        let distinct = succ.len() as u64 + u64::from(end_count > 0) + 1;
        let denom = (total + distinct) as f64;
        if hist.is_empty() {
            // Unigram state: also give escape-free mass to every grapheme so
            // any sequence is accepted.
            let v = graphemes
                .iter()
                .filter(|(l, sym)| *l != EPSILON && !sym.starts_with('#'))
                .count() as f64;
            let escape = distinct as f64 / denom;
            for (label, sym) in graphemes.iter() {
                if label == EPSILON || sym.starts_with('#') {
                    continue;
                }
                let gram = vec![sym.to_string()];
                let c = counts[0].get(&gram).copied().unwrap_or(0) as f64;
                let p = c / denom + escape * 0.5 / v;
                let to = resolve(&state_of, &gram);
                g.add_arc(
                    s,
                    Arc {
                        ilabel: label,
                        olabel: label,
                        weight: -p.ln(),
                        nextstate: to,
                    },
                );
            }
            let p_end = end_count as f64 / denom + escape * 0.5;
            g.set_final(s, -p_end.ln());
        } else {
            for (gram, c) in succ {
                let label = match graphemes.id(&gram[n - 1]) {
                    Some(l) => l,
                    None => continue,
                };
                let to = resolve(&state_of, gram);
                g.add_arc(
                    s,
                    Arc {
                        ilabel: label,
                        olabel: label,
                        weight: -((c as f64) / denom).ln(),
                        nextstate: to,
                    },
                );
            }
            if end_count > 0 {
                g.set_final(s, -((end_count as f64) / denom).ln());
            }
            // Escape to the lower-order history.
            let lower = resolve(&state_of, &hist[1..]);
            g.add_arc(
                s,
                Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: -((distinct as f64) / denom).ln(),
                    nextstate: lower,
                },
            );
        }
    }
    let h = build_H(inventory, lexicon, self_loop_prob, SemiringKind::Log);
    let den = super::compose(&h, &g)?;
    if !has_accepting_path(&den) {
        return Err(FstError::EmptyGraph);
    }
    Ok(den)
}

/// Numerator acceptor over tied states: each segment boundary of the
/// alignment may shift by at most `tolerance` frames. Log semiring, weights
/// zero. `tolerance = 0` yields the single linear path.
pub fn build_numerator_graph(alignment: &Alignment, tolerance: usize) -> Fst {
    let t_len = alignment.states.len();
    let mut segs: Vec<(u32, usize, usize)> = Vec::new();
    for (t, &s) in alignment.states.iter().enumerate() {
        match segs.last_mut() {
            Some(last) if last.0 == s => last.2 = t + 1,
            _ => segs.push((s, t, t + 1)),
        }
    }
    let tol = tolerance as i64;
    let n_seg = segs.len();
    let mut f = Fst::new(SemiringKind::Log);
    // State per (frame, segment) pair within the tolerance window, plus a
    // super-start at frame -1.
    let mut ids: HashMap<(usize, usize), StateId> = HashMap::new();
    let start = f.add_state();
    f.set_start(start);
    let allowed = |t: usize, i: usize| -> bool {
        let (_, b, e) = segs[i];
        let t = t as i64;
        t >= b as i64 - tol && t < e as i64 + tol
    };
    for t in 0..t_len {
        for i in 0..n_seg {
            if allowed(t, i) {
                let s = f.add_state();
                ids.insert((t, i), s);
            }
        }
    }
    // Entry: frame 0 must sit in segment 0 (boundaries shift, segments are
    // never skipped).
    if let Some(&s0) = ids.get(&(0, 0)) {
        f.add_arc(
            start,
            Arc {
                ilabel: state_label(segs[0].0),
                olabel: state_label(segs[0].0),
                weight: 0.0,
                nextstate: s0,
            },
        );
    }
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..n_seg {
            let from = match ids.get(&(t, i)) {
                Some(&s) => s,
                None => continue,
            };
            // Stay in the segment.
            if let Some(&to) = ids.get(&(t + 1, i)) {
                f.add_arc(
                    from,
                    Arc {
                        ilabel: state_label(segs[i].0),
                        olabel: state_label(segs[i].0),
                        weight: 0.0,
                        nextstate: to,
                    },
                );
            }
            // Advance to the next segment.
            if i + 1 < n_seg {
                if let Some(&to) = ids.get(&(t + 1, i + 1)) {
                    f.add_arc(
                        from,
                        Arc {
                            ilabel: state_label(segs[i + 1].0),
                            olabel: state_label(segs[i + 1].0),
                            weight: 0.0,
                            nextstate: to,
                        },
                    );
                }
            }
        }
    }
    if let Some(&last) = ids.get(&(t_len - 1, n_seg - 1)) {
        f.set_final(last, 0.0);
    }
    f
}
