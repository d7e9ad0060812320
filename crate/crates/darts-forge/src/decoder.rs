//! Time-synchronous beam-search decoding over the decoding graph, lattice
//! generation, N-best extraction, and language-model rescoring of N-best
//! lists.
//!
//! Arc costs combine the graph weight with the scaled acoustic score:
//! `graph_weight - acoustic_scale * scores[t][ilabel]`. Lattices are DAGs
//! of `(frame, graph state)` nodes; final nodes are the ones without
//! outgoing arcs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::eval::edit_counts;
use crate::wfst::{Fst, SymbolTable, EPSILON};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam too tight")]
    BeamTooTight,
    #[error("graph/utterance length mismatch")]
    LengthMismatch,
    #[error("graph has no start state")]
    NoStart,
    #[error("epsilon cycle in decoding graph")]
    EpsilonCycle,
    #[error("empty tuning grid")]
    EmptyGrid,
    #[error("lattice parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: f64,
    pub max_active: usize,
    pub lattice_beam: f64,
    pub acoustic_scale: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 16.0,
            max_active: 7000,
            lattice_beam: 8.0,
            acoustic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatticeNode {
    pub frame: usize,
}

#[derive(Debug, Clone)]
pub struct LatticeArc {
    pub from: usize,
    pub to: usize,
    /// None for epsilon (no word emitted on this arc).
    pub word: Option<String>,
    /// Tied-state input label consumed on this arc (EPSILON when the arc
    /// consumes no frame). Kept in memory for semi-supervised training;
    /// not part of the text format.
    pub state: crate::wfst::Label,
    /// Acoustic cost (already scaled).
    pub am: f64,
    /// Graph/LM cost.
    pub lm: f64,
}

/// Acyclic word lattice over `(frame, graph state)` nodes. Node 0 is the
/// start; final nodes have no outgoing arcs.
#[derive(Debug, Clone, Default)]
pub struct Lattice {
    pub id: String,
    pub num_frames: usize,
    pub nodes: Vec<LatticeNode>,
    pub arcs: Vec<LatticeArc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub words: Vec<String>,
    pub am: f64,
    pub lm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NBestList {
    pub id: String,
    pub entries: Vec<NBestEntry>,
}

/// Anything that can assign a natural-log probability to a sentence; used
/// for N-best rescoring.
pub trait SentenceScorer {
    fn sentence_logprob(&self, words: &[String]) -> f64;
}

impl SentenceScorer for crate::lm::ArpaLm {
    fn sentence_logprob(&self, words: &[String]) -> f64 {
        crate::lm::sentence_logprob(self, words)
    }
}

/// Topological order over the epsilon-input subgraph, ignoring self-loops
/// (which can never improve a tropical cost).
fn eps_topo_order(graph: &Fst) -> Result<Vec<usize>, DecodeError> {
    let n = graph.num_states();
    let mut indeg = vec![0usize; n];
    for q in graph.states() {
        for arc in graph.arcs(q) {
            if arc.ilabel == EPSILON && arc.nextstate != q {
                indeg[arc.nextstate] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&q| indeg[q] == 0).collect();
    let mut head = 0;
    let mut order = Vec::with_capacity(n);
    while head < queue.len() {
        let q = queue[head];
        head += 1;
        order.push(q);
        for arc in graph.arcs(q) {
            if arc.ilabel == EPSILON && arc.nextstate != q {
                indeg[arc.nextstate] -= 1;
                if indeg[arc.nextstate] == 0 {
                    queue.push(arc.nextstate);
                }
            }
        }
    }
    if order.len() != n {
        return Err(DecodeError::EpsilonCycle);
    }
    Ok(order)
}

/// Token-passing Viterbi beam search producing a pruned lattice.
pub fn decode(
    graph: &Fst,
    scores: &Array2<f64>,
    words: &SymbolTable,
    id: &str,
    cfg: &DecodeConfig,
) -> Result<Lattice, DecodeError> {
    let start = graph.start().ok_or(DecodeError::NoStart)?;
    let t_len = scores.nrows();
    let n = graph.num_states();
    let topo = eps_topo_order(graph)?;
    let inf = f64::INFINITY;

    // cost[t][q]: best cost of reaching q with t frames consumed, after
    // epsilon closure and pruning at level t.
    let mut cost = vec![vec![inf; n]; t_len + 1];
    cost[0][start] = 0.0;
    let mut ever_pruned = false;
    for t in 0..=t_len {
        // Epsilon closure in topological order.
        for &q in &topo {
            let c = cost[t][q];
            if c == inf {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel == EPSILON && arc.nextstate != q {
                    let nc = c + arc.weight;
                    if nc < cost[t][arc.nextstate] {
                        cost[t][arc.nextstate] = nc;
                    }
                }
            }
        }
        // Beam and max_active pruning.
        let best = cost[t].iter().cloned().fold(inf, f64::min);
        if best == inf {
            return Err(if ever_pruned {
                DecodeError::BeamTooTight
            } else {
                DecodeError::LengthMismatch
            });
        }
        let mut survivors: Vec<usize> = (0..n).filter(|&q| cost[t][q] <= best + cfg.beam).collect();
        if survivors.len() < (0..n).filter(|&q| cost[t][q] < inf).count() {
            ever_pruned = true;
        }
        if survivors.len() > cfg.max_active {
            survivors.sort_by(|&a, &b| cost[t][a].partial_cmp(&cost[t][b]).unwrap());
            survivors.truncate(cfg.max_active);
            ever_pruned = true;
        }
        let keep: Vec<bool> = {
            let mut k = vec![false; n];
            for &q in &survivors {
                k[q] = true;
            }
            k
        };
        for q in 0..n {
            if !keep[q] {
                cost[t][q] = inf;
            }
        }
        if t == t_len {
            break;
        }
        // Emission step into level t+1.
        for q in 0..n {
            let c = cost[t][q];
            if c == inf {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel != EPSILON {
                    let am = -cfg.acoustic_scale * scores[[t, arc.ilabel as usize - 1]];
                    let nc = c + arc.weight + am;
                    if nc < cost[t + 1][arc.nextstate] {
                        cost[t + 1][arc.nextstate] = nc;
                    }
                }
            }
        }
    }
    let best_final = (0..n)
        .filter(|&q| graph.is_final(q))
        .map(|q| cost[t_len][q] + graph.final_weight(q))
        .fold(inf, f64::min);
    if best_final == inf {
        return Err(if ever_pruned {
            DecodeError::BeamTooTight
        } else {
            DecodeError::LengthMismatch
        });
    }

    // Collect lattice arcs among surviving states within the lattice beam.
    let word_of = |olabel| {
        if olabel == EPSILON {
            None
        } else {
            words.symbol(olabel).map(|s| s.to_string())
        }
    };
    let mut node_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut nodes = Vec::new();
    let mut arcs: Vec<LatticeArc> = Vec::new();
    let mut get_node = |t: usize, q: usize, nodes: &mut Vec<LatticeNode>| -> usize {
        *node_index
            .entry((t, q))
            .or_insert_with(|| {
                nodes.push(LatticeNode { frame: t });
                nodes.len() - 1
            })
    };
    // Node 0 must be the start.
    let _ = get_node(0, start, &mut nodes);
    for t in 0..=t_len {
        for q in 0..n {
            let c = cost[t][q];
            if c == inf {
                continue;
            }
            for arc in graph.arcs(q) {
                if arc.ilabel == EPSILON {
                    if arc.nextstate == q {
                        continue;
                    }
                    let through = c + arc.weight;
                    if cost[t][arc.nextstate] < inf
                        && through <= cost[t][arc.nextstate] + cfg.lattice_beam
                    {
                        let from = get_node(t, q, &mut nodes);
                        let to = get_node(t, arc.nextstate, &mut nodes);
                        arcs.push(LatticeArc {
                            from,
                            to,
                            word: word_of(arc.olabel),
                            state: EPSILON,
                            am: 0.0,
                            lm: arc.weight,
                        });
                    }
                } else if t < t_len {
                    let am = -cfg.acoustic_scale * scores[[t, arc.ilabel as usize - 1]];
                    let through = c + arc.weight + am;
                    if cost[t + 1][arc.nextstate] < inf
                        && through <= cost[t + 1][arc.nextstate] + cfg.lattice_beam
                    {
                        let from = get_node(t, q, &mut nodes);
                        let to = get_node(t + 1, arc.nextstate, &mut nodes);
                        arcs.push(LatticeArc {
                            from,
                            to,
                            word: word_of(arc.olabel),
                            state: arc.ilabel,
                            am,
                            lm: arc.weight,
                        });
                    }
                }
            }
            // Final-weight arcs go to a shared super-final node.
            if t == t_len && graph.is_final(q) {
                let through = c + graph.final_weight(q);
                if through <= best_final + cfg.lattice_beam {
                    let from = get_node(t_len, q, &mut nodes);
                    let to = get_node(t_len, n, &mut nodes); // state id n = super-final
                    arcs.push(LatticeArc {
                        from,
                        to,
                        word: None,
                        state: EPSILON,
                        am: 0.0,
                        lm: graph.final_weight(q),
                    });
                }
            }
        }
    }
    let super_final = node_index[&(t_len, n)];
    let mut lat = Lattice {
        id: id.to_string(),
        num_frames: t_len,
        nodes,
        arcs,
    };
    lat.trim_to(&[super_final]);
    Ok(lat)
}

impl Lattice {
    pub fn final_nodes(&self) -> Vec<usize> {
        let mut has_out = vec![false; self.nodes.len()];
        for a in &self.arcs {
            has_out[a.from] = true;
        }
        (0..self.nodes.len())
            .filter(|&i| !has_out[i] && (self.used(i) || self.nodes.len() == 1))
            .collect()
    }

    fn used(&self, node: usize) -> bool {
        self.arcs.iter().any(|a| a.from == node || a.to == node)
    }

    /// Drop nodes that are not on a start-to-final path, renumbering. The
    /// sinks of the trimmed lattice are exactly the surviving finals, so
    /// the "no outgoing arcs" convention holds afterwards.
    pub fn trim(&mut self) {
        let finals = self.final_nodes();
        self.trim_to(&finals);
    }

    fn trim_to(&mut self, finals: &[usize]) {
        let n = self.nodes.len();
        let mut fwd = vec![false; n];
        let mut out_arcs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut in_arcs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, a) in self.arcs.iter().enumerate() {
            out_arcs[a.from].push(i);
            in_arcs[a.to].push(i);
        }
        // Forward reachability from node 0.
        let mut stack = vec![0usize];
        while let Some(q) = stack.pop() {
            if fwd[q] {
                continue;
            }
            fwd[q] = true;
            for &i in &out_arcs[q] {
                stack.push(self.arcs[i].to);
            }
        }
        // Backward reachability from the designated final nodes.
        let mut bwd = vec![false; n];
        let mut stack: Vec<usize> = finals.iter().copied().filter(|&q| fwd[q]).collect();
        while let Some(q) = stack.pop() {
            if bwd[q] {
                continue;
            }
            bwd[q] = true;
            for &i in &in_arcs[q] {
                stack.push(self.arcs[i].from);
            }
        }
        let alive: Vec<bool> = (0..n).map(|q| fwd[q] && bwd[q]).collect();
        let mut remap = vec![usize::MAX; n];
        let mut new_nodes = Vec::new();
        for q in 0..n {
            if alive[q] {
                remap[q] = new_nodes.len();
                new_nodes.push(self.nodes[q].clone());
            }
        }
        self.arcs.retain(|a| alive[a.from] && alive[a.to]);
        for a in &mut self.arcs {
            a.from = remap[a.from];
            a.to = remap[a.to];
        }
        self.nodes = new_nodes;
    }

    /// Best (lowest-cost) path: word sequence plus its score split.
    pub fn best_path(&self) -> Option<NBestEntry> {
        let mut nb = nbest(self, 1);
        if nb.entries.is_empty() {
            None
        } else {
            Some(nb.entries.remove(0))
        }
    }

    /// Minimum achievable WER over all lattice paths against a reference
    /// (the lattice "oracle").
    pub fn oracle_wer(&self, reference: &[String]) -> Option<f64> {
        // Enumerate up to a generous number of distinct hypotheses.
        let nb = nbest(self, 2000);
        nb.entries
            .iter()
            .map(|e| edit_counts(reference, &e.words).wer_percent())
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    pub fn write_text(&self, path: &Path) -> Result<(), DecodeError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("UTT {} {}\n", self.id, self.num_frames);
        for a in &self.arcs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                a.from,
                a.to,
                a.word.as_deref().unwrap_or("<eps>"),
                a.am,
                a.lm
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Lattice, DecodeError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DecodeError::Parse {
            line: 1,
            msg: "empty lattice text".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "UTT" {
            return Err(DecodeError::Parse {
                line: 1,
                msg: "expected 'UTT id T' header".into(),
            });
        }
        let id = parts[1].to_string();
        let num_frames: usize = parts[2].parse().map_err(|_| DecodeError::Parse {
            line: 1,
            msg: "bad frame count".into(),
        })?;
        let mut arcs = Vec::new();
        let mut max_node = 0usize;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(DecodeError::Parse {
                    line: i + 1,
                    msg: "expected from\\tto\\tword\\tam\\tlm".into(),
                });
            }
            let parse_n = |s: &str| -> Result<usize, DecodeError> {
                s.parse().map_err(|_| DecodeError::Parse {
                    line: i + 1,
                    msg: format!("bad node id '{s}'"),
                })
            };
            let parse_f = |s: &str| -> Result<f64, DecodeError> {
                s.parse().map_err(|_| DecodeError::Parse {
                    line: i + 1,
                    msg: format!("bad score '{s}'"),
                })
            };
            let from = parse_n(f[0])?;
            let to = parse_n(f[1])?;
            max_node = max_node.max(from).max(to);
            arcs.push(LatticeArc {
                from,
                to,
                word: if f[2] == "<eps>" {
                    None
                } else {
                    Some(f[2].to_string())
                },
                state: crate::wfst::EPSILON,
                am: parse_f(f[3])?,
                lm: parse_f(f[4])?,
            });
        }
        // Frames are not stored per node in the text format; reconstruct a
        // consistent topological labeling from arc structure (frame index 0
        // for all is acceptable for rescoring purposes).
        let nodes = (0..=max_node).map(|_| LatticeNode { frame: 0 }).collect();
        Ok(Lattice {
            id,
            num_frames,
            nodes,
            arcs,
        })
    }
}

#[derive(Debug)]
struct NbItem {
    est: f64,
    node: usize,
    g_am: f64,
    g_lm: f64,
    words: Vec<String>,
}

impl PartialEq for NbItem {
    fn eq(&self, other: &Self) -> bool {
        self.est == other.est
    }
}
impl Eq for NbItem {}
impl PartialOrd for NbItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for NbItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on estimated total cost.
        other
            .est
            .partial_cmp(&self.est)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.words.cmp(&self.words))
    }
}

/// N best distinct word sequences by total cost. Duplicate word sequences
/// are merged keeping the best-scoring path.
pub fn nbest(lattice: &Lattice, n: usize) -> NBestList {
    let mut list = NBestList {
        id: lattice.id.clone(),
        entries: Vec::new(),
    };
    if n == 0 || lattice.nodes.is_empty() {
        return list;
    }
    let nn = lattice.nodes.len();
    let mut out_arcs: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for (i, a) in lattice.arcs.iter().enumerate() {
        out_arcs[a.from].push(i);
    }
    let finals: Vec<usize> = (0..nn).filter(|&q| out_arcs[q].is_empty()).collect();
    // Backward best-cost-to-final potential, exact A* heuristic on a DAG.
    let mut potential = vec![f64::INFINITY; nn];
    for &f in &finals {
        potential[f] = 0.0;
    }
    // Relax in reverse topological order via repeated sweeps (the lattice is
    // a DAG; node count sweeps suffice and arcs are few at desk scale).
    let order = dag_topo_order(lattice);
    for &q in order.iter().rev() {
        for &i in &out_arcs[q] {
            let a = &lattice.arcs[i];
            let c = a.am + a.lm + potential[a.to];
            if c < potential[q] {
                potential[q] = c;
            }
        }
    }
    if potential[0] == f64::INFINITY {
        return list;
    }
    let mut heap = BinaryHeap::new();
    heap.push(NbItem {
        est: potential[0],
        node: 0,
        g_am: 0.0,
        g_lm: 0.0,
        words: Vec::new(),
    });
    let mut seen: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let budget = 200_000usize;
    let mut pops = 0usize;
    while let Some(item) = heap.pop() {
        pops += 1;
        if pops > budget {
            break;
        }
        if out_arcs[item.node].is_empty() {
            if !seen.contains_key(&item.words) {
                seen.insert(item.words.clone(), list.entries.len());
                list.entries.push(NBestEntry {
                    words: item.words.clone(),
                    am: item.g_am,
                    lm: item.g_lm,
                    total: item.g_am + item.g_lm,
                });
                if list.entries.len() >= n {
                    break;
                }
            }
            continue;
        }
        for &i in &out_arcs[item.node] {
            let a = &lattice.arcs[i];
            if potential[a.to] == f64::INFINITY {
                continue;
            }
            let g_am = item.g_am + a.am;
            let g_lm = item.g_lm + a.lm;
            let mut words = item.words.clone();
            if let Some(w) = &a.word {
                words.push(w.clone());
            }
            heap.push(NbItem {
                est: g_am + g_lm + potential[a.to],
                node: a.to,
                g_am,
                g_lm,
                words,
            });
        }
    }
    list
}

fn dag_topo_order(lattice: &Lattice) -> Vec<usize> {
    let nn = lattice.nodes.len();
    let mut indeg = vec![0usize; nn];
    for a in &lattice.arcs {
        indeg[a.to] += 1;
    }
    let mut queue: Vec<usize> = (0..nn).filter(|&q| indeg[q] == 0).collect();
    let mut head = 0;
    let mut order = Vec::with_capacity(nn);
    while head < queue.len() {
        let q = queue[head];
        head += 1;
        order.push(q);
        for a in lattice.arcs.iter().filter(|a| a.from == q) {
            indeg[a.to] -= 1;
            if indeg[a.to] == 0 {
                queue.push(a.to);
            }
        }
    }
    debug_assert_eq!(order.len(), nn, "lattice must be acyclic");
    order
}

/// Re-rank an N-best list with extra language models. The new total cost is
/// `am_weight * am + lm + sum_i w_i * (-log P_i(words)) + word_penalty * |words|`,
/// keeping the lattice LM score so zero weights leave the ranking unchanged.
pub fn rescore_nbest(
    list: &NBestList,
    lms: &[(&dyn SentenceScorer, f64)],
    am_weight: f64,
    word_penalty: f64,
) -> NBestList {
    let mut entries: Vec<NBestEntry> = list
        .entries
        .iter()
        .map(|e| {
            let mut total = am_weight * e.am + e.lm + word_penalty * e.words.len() as f64;
            for (lm, w) in lms {
                total += w * -lm.sentence_logprob(&e.words);
            }
            NBestEntry {
                words: e.words.clone(),
                am: e.am,
                lm: e.lm,
                total,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        a.total
            .partial_cmp(&b.total)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.words.cmp(&b.words))
    });
    NBestList {
        id: list.id.clone(),
        entries,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunedWeights {
    pub am_weight: f64,
    pub lm_weight: f64,
    pub word_penalty: f64,
}

/// Exhaustive grid search minimizing dev WER; ties break toward smaller
/// weights (the grids are scanned in ascending order and only strict
/// improvements are kept).
pub fn tune_weights(
    dev: &[(NBestList, Vec<String>)],
    lms: &[(&dyn SentenceScorer, f64)],
    am_grid: &[f64],
    lm_grid: &[f64],
    penalty_grid: &[f64],
) -> Result<TunedWeights, DecodeError> {
    if am_grid.is_empty() || lm_grid.is_empty() || penalty_grid.is_empty() {
        return Err(DecodeError::EmptyGrid);
    }
    let mut best: Option<(f64, TunedWeights)> = None;
    for &am_w in am_grid {
        for &lm_w in lm_grid {
            for &pen in penalty_grid {
                let scaled: Vec<(&dyn SentenceScorer, f64)> =
                    lms.iter().map(|(l, w)| (*l, w * lm_w)).collect();
                let mut edits = 0usize;
                let mut refs = 0usize;
                for (list, reference) in dev {
                    let rescored = rescore_nbest(list, &scaled, am_w, pen);
                    let hyp = rescored
                        .entries
                        .first()
                        .map(|e| e.words.clone())
                        .unwrap_or_default();
                    let c = edit_counts(reference, &hyp);
                    edits += c.total_edits();
                    refs += c.num_ref;
                }
                let wer = 100.0 * edits as f64 / refs.max(1) as f64;
                if best.as_ref().map(|(b, _)| wer < *b).unwrap_or(true) {
                    best = Some((
                        wer,
                        TunedWeights {
                            am_weight: am_w,
                            lm_weight: lm_w,
                            word_penalty: pen,
                        },
                    ));
                }
            }
        }
    }
    Ok(best.unwrap().1)
}

pub fn write_nbest(path: &Path, lists: &[NBestList]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for list in lists {
        for (rank, e) in list.entries.iter().enumerate() {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                list.id,
                rank + 1,
                e.total,
                e.am,
                e.lm,
                e.words.join(" ")
            )?;
        }
    }
    Ok(())
}
