//! Hidden Markov model with per-state diagonal Gaussian mixtures: the
//! generative baseline that bootstraps frame-to-state alignments.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::corpus::{Audio, Lexicon, Utterance, SILENCE};

pub const VARIANCE_FLOOR: f64 = 1e-3;
const LOG_ZERO: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("utterance `{0}` has no transcript")]
    EmptyTranscript(String),
    #[error("utterance `{0}` carries waveform audio, features required")]
    NotFeatures(String),
    #[error("word `{0}` missing from lexicon")]
    OovWord(String),
    #[error("grapheme `{0}` missing from state inventory")]
    UnknownGrapheme(String),
    #[error("zero-probability path for utterance `{0}`")]
    ZeroProbPath(String),
    #[error("mixup target {target} below current component count {current}")]
    MixupTarget { target: usize, current: usize },
    #[error("max_states {max_states} below context-independent size {ci_size}")]
    MaxStatesTooSmall { max_states: usize, ci_size: usize },
    #[error("feature dim {got}, model dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// (center grapheme, left context, right context); `None` context marks a
/// word-external / silence boundary or a context-independent unit.
pub type UnitKey = (String, Option<String>, Option<String>);

pub fn ci_key(grapheme: &str) -> UnitKey {
    (grapheme.to_string(), None, None)
}

/// Dense tied-state inventory over (possibly context-dependent) units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateInventory {
    /// Physical units and their dense state ids.
    pub units: BTreeMap<UnitKey, Vec<u32>>,
    pub states_per_unit: usize,
    /// Raw triple -> physical unit; identity entries are implicit.
    pub tying: BTreeMap<UnitKey, UnitKey>,
}

impl StateInventory {
    /// Context-independent inventory over the given center graphemes.
    pub fn context_independent(graphemes: &[String], states_per_unit: usize) -> StateInventory {
        let mut units = BTreeMap::new();
        let mut sorted: Vec<&String> = graphemes.iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut next = 0u32;
        for g in sorted {
            let ids: Vec<u32> = (0..states_per_unit as u32).map(|j| next + j).collect();
            next += states_per_unit as u32;
            units.insert(ci_key(g), ids);
        }
        StateInventory {
            units,
            states_per_unit,
            tying: BTreeMap::new(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.units.len() * self.states_per_unit
    }

    /// State ids for a raw context triple, backing off through the tying map
    /// to the context-independent unit.
    pub fn resolve(&self, key: &UnitKey) -> Result<&[u32], HmmError> {
        if let Some(ids) = self.units.get(key) {
            return Ok(ids);
        }
        if let Some(tied) = self.tying.get(key) {
            if let Some(ids) = self.units.get(tied) {
                return Ok(ids);
            }
        }
        let ci = ci_key(&key.0);
        self.units
            .get(&ci)
            .map(|v| v.as_slice())
            .ok_or_else(|| HmmError::UnknownGrapheme(key.0.clone()))
    }

    /// Center grapheme of each dense state id.
    pub fn state_graphemes(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.num_states()];
        for ((center, _, _), ids) in &self.units {
            for &s in ids {
                out[s as usize] = center.clone();
            }
        }
        out
    }
}

/// Count-based context tying: triples with enough observations keep unique
/// states, the rest back off to their center grapheme.
pub fn tie_states(
    graphemes: &[String],
    context_stats: &BTreeMap<UnitKey, u64>,
    min_count: u64,
    max_states: usize,
    states_per_unit: usize,
) -> Result<StateInventory, HmmError> {
    let mut inv = StateInventory::context_independent(graphemes, states_per_unit);
    let ci_size = inv.num_states();
    if max_states < ci_size {
        return Err(HmmError::MaxStatesTooSmall {
            max_states,
            ci_size,
        });
    }
    // Most frequent contexts first; deterministic tie-break on the key.
    let mut ranked: Vec<(&UnitKey, u64)> = context_stats
        .iter()
        .filter(|(k, &c)| c >= min_count && (k.1.is_some() || k.2.is_some()))
        .map(|(k, &c)| (k, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut next = inv.num_states() as u32;
    for (key, _) in ranked {
        if inv.num_states() + states_per_unit > max_states {
            break;
        }
        if !inv.units.contains_key(&ci_key(&key.0)) {
            return Err(HmmError::UnknownGrapheme(key.0.clone()));
        }
        let ids: Vec<u32> = (0..states_per_unit as u32).map(|j| next + j).collect();
        next += states_per_unit as u32;
        inv.units.insert(key.clone(), ids);
    }
    for key in context_stats.keys() {
        if !inv.units.contains_key(key) {
            inv.tying.insert(key.clone(), ci_key(&key.0));
        }
    }
    Ok(inv)
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub vars: Vec<Array1<f64>>,
}

impl Gmm {
    fn log_component(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (d, &xd) in x.iter().enumerate() {
            let var = self.vars[k][d];
            let diff = xd - self.means[k][d];
            acc += (2.0 * std::f64::consts::PI * var).ln() + diff * diff / var;
        }
        -0.5 * acc
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut best = LOG_ZERO;
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let t = self.weights[k].ln() + self.log_component(k, x);
                if t > best {
                    best = t;
                }
                t
            })
            .collect();
        if best == LOG_ZERO {
            return LOG_ZERO;
        }
        best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
    }

    /// Per-component posteriors at x (linear domain, sums to 1).
    fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.log_component(k, x))
            .collect();
        let best = terms.iter().cloned().fold(LOG_ZERO, f64::max);
        let unnorm: Vec<f64> = terms.iter().map(|t| (t - best).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        unnorm.iter().map(|u| u / z).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub states_per_unit: usize,
    /// Allow an optional silence unit at utterance boundaries and between
    /// words.
    pub optional_silence: bool,
    /// Use triphone context when resolving units (with tying backoff).
    pub context_dependent: bool,
    pub self_loop_init: f64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig {
            states_per_unit: 3,
            optional_silence: true,
            context_dependent: false,
            self_loop_init: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HmmGmmModel {
    pub inventory: StateInventory,
    pub cfg: HmmConfig,
    pub dim: usize,
    /// Per state: [self-loop probability, forward probability]; rows sum to 1.
    pub transitions: Vec<[f64; 2]>,
    pub emissions: Vec<Gmm>,
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub id: String,
    pub states: Vec<u32>,
    pub graphemes: Vec<String>,
}

fn features_of(utt: &Utterance) -> Result<&Array2<f64>, HmmError> {
    match &utt.audio {
        Audio::Features(f) => Ok(f),
        Audio::Waveform { .. } => Err(HmmError::NotFeatures(utt.id.clone())),
    }
}

/// Uniform-segmentation initialization: single Gaussian per state at the
/// global mean/variance, uniform transitions.
pub fn flat_start(
    lexicon: &Lexicon,
    utts: &[Utterance],
    cfg: &HmmConfig,
) -> Result<HmmGmmModel, HmmError> {
    if utts.is_empty() {
        return Err(HmmError::EmptyManifest);
    }
    let mut graphemes = lexicon.grapheme_inventory.clone();
    graphemes.push(SILENCE.to_string());
    let inventory = StateInventory::context_independent(&graphemes, cfg.states_per_unit);
    let dim = features_of(&utts[0])?.ncols();
    let mut sum = Array1::<f64>::zeros(dim);
    let mut sumsq = Array1::<f64>::zeros(dim);
    let mut n = 0usize;
    for utt in utts {
        let f = features_of(utt)?;
        if f.ncols() != dim {
            return Err(HmmError::DimMismatch {
                got: f.ncols(),
                want: dim,
            });
        }
        for row in f.rows() {
            for d in 0..dim {
                sum[d] += row[d];
                sumsq[d] += row[d] * row[d];
            }
        }
        n += f.nrows();
    }
    let mean = &sum / n as f64;
    let var = (&sumsq / n as f64 - &mean * &mean).mapv(|v| v.max(VARIANCE_FLOOR));
    let k = inventory.num_states();
    Ok(HmmGmmModel {
        inventory,
        cfg: cfg.clone(),
        dim,
        transitions: vec![[cfg.self_loop_init, 1.0 - cfg.self_loop_init]; k],
        emissions: vec![
            Gmm {
                weights: vec![1.0],
                means: vec![mean.clone()],
                vars: vec![var.clone()],
            };
            k
        ],
    })
}

/// Transcript-constrained state graph of one utterance.
struct UttGraph {
    /// Model state id per node.
    nodes: Vec<u32>,
    node_grapheme: Vec<String>,
    /// Incoming non-self edges: (from node, transition log-prob).
    edges_in: Vec<Vec<(usize, f64)>>,
    edges_out: Vec<Vec<(usize, f64)>>,
    starts: Vec<usize>,
    /// (node, exit log-prob).
    finals: Vec<(usize, f64)>,
}

/// Expand a transcript into (unit key, optional?) pairs with silence slots.
fn unit_sequence(
    lexicon: &Lexicon,
    transcript: &[String],
    cfg: &HmmConfig,
) -> Result<Vec<(UnitKey, bool)>, HmmError> {
    let mut graphemes: Vec<String> = Vec::new();
    // Word-boundary indices where optional silence may appear (before each
    // word and at the end).
    let mut word_spans: Vec<usize> = vec![0];
    for word in transcript {
        let entry = lexicon
            .entries
            .get(word)
            .ok_or_else(|| HmmError::OovWord(word.clone()))?;
        graphemes.extend(entry.graphemes.iter().cloned());
        word_spans.push(graphemes.len());
    }
    let mut seq: Vec<(UnitKey, bool)> = Vec::new();
    let mut boundary = 1usize; // next word_spans index to emit silence before
    for (i, g) in graphemes.iter().enumerate() {
        if cfg.optional_silence && word_spans[boundary - 1] == i {
            seq.push((ci_key(SILENCE), true));
        }
        if word_spans[boundary] == i && boundary + 1 < word_spans.len() {
            boundary += 1;
        }
        let key = if cfg.context_dependent {
            let left = (i > 0).then(|| graphemes[i - 1].clone());
            let right = (i + 1 < graphemes.len()).then(|| graphemes[i + 1].clone());
            (g.clone(), left, right)
        } else {
            ci_key(g)
        };
        seq.push((key, false));
        if word_spans[boundary] == i + 1 && boundary + 1 < word_spans.len() {
            boundary += 1;
        }
    }
    if cfg.optional_silence {
        seq.push((ci_key(SILENCE), true));
    }
    Ok(seq)
}

fn build_graph_with_lexicon(
    model: &HmmGmmModel,
    lexicon: &Lexicon,
    utt: &Utterance,
) -> Result<UttGraph, HmmError> {
    if utt.transcript.is_empty() {
        return Err(HmmError::EmptyTranscript(utt.id.clone()));
    }
    let seq = unit_sequence(lexicon, &utt.transcript, &model.cfg)?;
    let mut g = UttGraph {
        nodes: Vec::new(),
        node_grapheme: Vec::new(),
        edges_in: Vec::new(),
        edges_out: Vec::new(),
        starts: Vec::new(),
        finals: Vec::new(),
    };
    // Frontier of nodes whose exit can feed the next chain; None = utterance
    // start.
    let mut frontier: Vec<Option<(usize, f64)>> = vec![None];
    for (key, optional) in &seq {
        let states = model.inventory.resolve(key)?.to_vec();
        let mut first = usize::MAX;
        let mut prev: Option<(usize, f64)> = None;
        for &s in &states {
            let node = g.nodes.len();
            g.nodes.push(s);
            g.node_grapheme.push(key.0.clone());
            g.edges_in.push(Vec::new());
            g.edges_out.push(Vec::new());
            if first == usize::MAX {
                first = node;
            }
            if let Some((p, w)) = prev {
                g.edges_in[node].push((p, w));
                g.edges_out[p].push((node, w));
            }
            prev = Some((node, model.transitions[s as usize][1].ln()));
        }
        for f in &frontier {
            match f {
                None => g.starts.push(first),
                Some((p, w)) => {
                    g.edges_in[first].push((*p, *w));
                    g.edges_out[*p].push((first, *w));
                }
            }
        }
        let exit = prev.unwrap();
        if *optional {
            frontier.push(Some(exit));
        } else {
            frontier = vec![Some(exit)];
        }
    }
    for f in &frontier {
        if let Some((p, w)) = f {
            g.finals.push((*p, *w));
        }
    }
    Ok(g)
}

/// Per-frame log emission scores for every node.
fn emission_scores(model: &HmmGmmModel, g: &UttGraph, feats: &Array2<f64>) -> Array2<f64> {
    let t_len = feats.nrows();
    // Score each distinct model state once; nodes share states freely.
    let mut per_state: HashMap<u32, Vec<f64>> = HashMap::new();
    for &s in &g.nodes {
        per_state.entry(s).or_insert_with(|| {
            (0..t_len)
                .map(|t| {
                    model.emissions[s as usize]
                        .log_likelihood(feats.row(t).as_slice().unwrap())
                })
                .collect()
        });
    }
    let mut b = Array2::<f64>::zeros((g.nodes.len(), t_len));
    for (node, &s) in g.nodes.iter().enumerate() {
        let row = &per_state[&s];
        for t in 0..t_len {
            b[[node, t]] = row[t];
        }
    }
    b
}

/// log(e^a + e^b) over log-likelihoods.
fn log_sum(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

struct FbResult {
    log_z: f64,
    /// Backward-pass total, kept for the consistency assertions in tests.
    #[allow(dead_code)]
    log_z_backward: f64,
    /// Linear-domain state occupancy per (node, frame).
    gamma: Array2<f64>,
    alpha: Array2<f64>,
    beta: Array2<f64>,
}

fn forward_backward(model: &HmmGmmModel, g: &UttGraph, feats: &Array2<f64>) -> FbResult {
    let t_len = feats.nrows();
    let n = g.nodes.len();
    let b = emission_scores(model, g, feats);
    let self_lp: Vec<f64> = g
        .nodes
        .iter()
        .map(|&s| model.transitions[s as usize][0].ln())
        .collect();
    let mut alpha = Array2::<f64>::from_elem((n, t_len), LOG_ZERO);
    for &s in &g.starts {
        alpha[[s, 0]] = b[[s, 0]];
    }
    for t in 1..t_len {
        for node in 0..n {
            let mut acc = alpha[[node, t - 1]] + self_lp[node];
            for &(p, w) in &g.edges_in[node] {
                acc = log_sum(acc, alpha[[p, t - 1]] + w);
            }
            alpha[[node, t]] = acc + b[[node, t]];
        }
    }
    let mut log_z = LOG_ZERO;
    for &(node, w) in &g.finals {
        log_z = log_sum(log_z, alpha[[node, t_len - 1]] + w);
    }
    let mut beta = Array2::<f64>::from_elem((n, t_len), LOG_ZERO);
    for &(node, w) in &g.finals {
        beta[[node, t_len - 1]] = w;
    }
    for t in (0..t_len - 1).rev() {
        for node in 0..n {
            let mut acc = self_lp[node] + b[[node, t + 1]] + beta[[node, t + 1]];
            for &(q, w) in &g.edges_out[node] {
                acc = log_sum(acc, w + b[[q, t + 1]] + beta[[q, t + 1]]);
            }
            beta[[node, t]] = acc;
        }
    }
    let mut log_z_backward = LOG_ZERO;
    for &s in &g.starts {
        log_z_backward = log_sum(log_z_backward, b[[s, 0]] + beta[[s, 0]]);
    }
    let mut gamma = Array2::<f64>::zeros((n, t_len));
    if log_z > LOG_ZERO {
        for node in 0..n {
            for t in 0..t_len {
                gamma[[node, t]] = (alpha[[node, t]] + beta[[node, t]] - log_z).exp();
            }
        }
    }
    FbResult {
        log_z,
        log_z_backward,
        gamma,
        alpha,
        beta,
    }
}

/// One Baum-Welch EM iteration over all utterances. Returns the updated model
/// and the total data log-likelihood under the *pre-update* model.
pub fn baum_welch_update(
    model: &HmmGmmModel,
    lexicon: &Lexicon,
    utts: &[Utterance],
) -> Result<(HmmGmmModel, f64), HmmError> {
    if utts.is_empty() {
        return Err(HmmError::EmptyManifest);
    }
    let k = model.inventory.num_states();
    let max_comp = model.emissions.iter().map(|e| e.weights.len()).max().unwrap();
    let mut occ = vec![vec![0.0f64; max_comp]; k];
    let mut sum = vec![vec![Array1::<f64>::zeros(model.dim); max_comp]; k];
    let mut sumsq = vec![vec![Array1::<f64>::zeros(model.dim); max_comp]; k];
    let mut self_cnt = vec![0.0f64; k];
    let mut fwd_cnt = vec![0.0f64; k];
    let mut total_ll = 0.0;
    let mut used = 0usize;
    for utt in utts {
        let feats = features_of(utt)?;
        if feats.ncols() != model.dim {
            return Err(HmmError::DimMismatch {
                got: feats.ncols(),
                want: model.dim,
            });
        }
        let g = build_graph_with_lexicon(model, lexicon, utt)?;
        let fb = forward_backward(model, &g, feats);
        if fb.log_z == LOG_ZERO {
            eprintln!(
                "warning: skipping utterance `{}` (no path of length {})",
                utt.id,
                feats.nrows()
            );
            continue;
        }
        used += 1;
        total_ll += fb.log_z;
        let t_len = feats.nrows();
        let b = emission_scores(model, &g, feats);
        // Emission statistics.
        for (node, &s) in g.nodes.iter().enumerate() {
            let s = s as usize;
            let gmm = &model.emissions[s];
            for t in 0..t_len {
                let post = fb.gamma[[node, t]];
                if post <= 0.0 {
                    continue;
                }
                let x = feats.row(t);
                let resp = gmm.responsibilities(x.as_slice().unwrap());
                for (c, r) in resp.iter().enumerate() {
                    let w = post * r;
                    occ[s][c] += w;
                    for d in 0..model.dim {
                        sum[s][c][d] += w * x[d];
                        sumsq[s][c][d] += w * x[d] * x[d];
                    }
                }
            }
        }
        // Transition statistics: self-loop vs leave (chain advance or exit).
        for t in 0..t_len - 1 {
            for (node, &s) in g.nodes.iter().enumerate() {
                let s = s as usize;
                let xi_self = fb.alpha[[node, t]]
                    + model.transitions[s][0].ln()
                    + b[[node, t + 1]]
                    + fb.beta[[node, t + 1]]
                    - fb.log_z;
                if xi_self > LOG_ZERO {
                    self_cnt[s] += xi_self.exp();
                }
                for &(q, w) in &g.edges_out[node] {
                    let xi = fb.alpha[[node, t]] + w + b[[q, t + 1]] + fb.beta[[q, t + 1]]
                        - fb.log_z;
                    if xi > LOG_ZERO {
                        fwd_cnt[s] += xi.exp();
                    }
                }
            }
        }
        for &(node, _) in &g.finals {
            fwd_cnt[g.nodes[node] as usize] += fb.gamma[[node, t_len - 1]];
        }
    }
    if used == 0 {
        return Err(HmmError::ZeroProbPath("<all utterances>".into()));
    }
    let mut out = model.clone();
    for s in 0..k {
        let ncomp = model.emissions[s].weights.len();
        let state_occ: f64 = occ[s][..ncomp].iter().sum();
        if state_occ > 1e-8 {
            let gmm = &mut out.emissions[s];
            for c in 0..ncomp {
                if occ[s][c] > 1e-8 {
                    let mean = &sum[s][c] / occ[s][c];
                    let var = (&sumsq[s][c] / occ[s][c] - &mean * &mean)
                        .mapv(|v| v.max(VARIANCE_FLOOR));
                    gmm.means[c] = mean;
                    gmm.vars[c] = var;
                }
                gmm.weights[c] = occ[s][c] / state_occ;
            }
            // Guard against collapsed components.
            let wsum: f64 = gmm.weights.iter().sum();
            for w in &mut gmm.weights {
                *w /= wsum;
            }
        }
        let trans_total = self_cnt[s] + fwd_cnt[s];
        if trans_total > 1e-8 {
            let p = (self_cnt[s] / trans_total).clamp(1e-4, 1.0 - 1e-4);
            out.transitions[s] = [p, 1.0 - p];
        }
    }
    Ok((out, total_ll))
}

/// Grow every state's mixture to `target_components` by splitting the
/// heaviest component with a ±0.1·σ mean perturbation.
pub fn mixup(model: &HmmGmmModel, target_components: usize) -> Result<HmmGmmModel, HmmError> {
    let current = model.emissions.iter().map(|e| e.weights.len()).max().unwrap();
    if target_components < current {
        return Err(HmmError::MixupTarget {
            target: target_components,
            current,
        });
    }
    let mut out = model.clone();
    for gmm in &mut out.emissions {
        while gmm.weights.len() < target_components {
            let heavy = gmm
                .weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            let sigma = gmm.vars[heavy].mapv(f64::sqrt);
            let mean_plus = &gmm.means[heavy] + &(0.1 * &sigma);
            let mean_minus = &gmm.means[heavy] - &(0.1 * &sigma);
            let w = gmm.weights[heavy] / 2.0;
            gmm.weights[heavy] = w;
            gmm.means[heavy] = mean_plus;
            gmm.weights.push(w);
            gmm.means.push(mean_minus);
            gmm.vars.push(gmm.vars[heavy].clone());
        }
    }
    Ok(out)
}

/// Max-probability state path through the transcript-constrained graph.
pub fn viterbi_align(
    model: &HmmGmmModel,
    lexicon: &Lexicon,
    utt: &Utterance,
) -> Result<Alignment, HmmError> {
    let feats = features_of(utt)?;
    if feats.ncols() != model.dim {
        return Err(HmmError::DimMismatch {
            got: feats.ncols(),
            want: model.dim,
        });
    }
    let g = build_graph_with_lexicon(model, lexicon, utt)?;
    let t_len = feats.nrows();
    let n = g.nodes.len();
    let b = emission_scores(model, &g, feats);
    let self_lp: Vec<f64> = g
        .nodes
        .iter()
        .map(|&s| model.transitions[s as usize][0].ln())
        .collect();
    let mut delta = Array2::<f64>::from_elem((n, t_len), LOG_ZERO);
    let mut back = Array2::<usize>::from_elem((n, t_len), usize::MAX);
    for &s in &g.starts {
        delta[[s, 0]] = b[[s, 0]];
    }
    for t in 1..t_len {
        for node in 0..n {
            let mut best = delta[[node, t - 1]] + self_lp[node];
            let mut arg = node;
            for &(p, w) in &g.edges_in[node] {
                let cand = delta[[p, t - 1]] + w;
                if cand > best {
                    best = cand;
                    arg = p;
                }
            }
            if best > LOG_ZERO {
                delta[[node, t]] = best + b[[node, t]];
                back[[node, t]] = arg;
            }
        }
    }
    let mut best = LOG_ZERO;
    let mut arg = usize::MAX;
    for &(node, w) in &g.finals {
        let cand = delta[[node, t_len - 1]] + w;
        if cand > best {
            best = cand;
            arg = node;
        }
    }
    if best == LOG_ZERO || arg == usize::MAX {
        return Err(HmmError::ZeroProbPath(utt.id.clone()));
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = arg;
    for t in (1..t_len).rev() {
        path[t - 1] = back[[path[t], t]];
    }
    Ok(Alignment {
        id: utt.id.clone(),
        states: path.iter().map(|&node| g.nodes[node]).collect(),
        graphemes: path.iter().map(|&node| g.node_grapheme[node].clone()).collect(),
    })
}

/// Viterbi path score (used by invariant checks and tests).
pub fn path_score(
    model: &HmmGmmModel,
    lexicon: &Lexicon,
    utt: &Utterance,
    alignment: &Alignment,
) -> Result<f64, HmmError> {
    let feats = features_of(utt)?;
    let g = build_graph_with_lexicon(model, lexicon, utt)?;
    // Score the specific node path by greedy matching: pick, per frame, a
    // graph node consistent with the alignment's state sequence.
    // For scoring we only need emissions + transitions of the state sequence.
    let _ = g;
    let mut total = 0.0;
    let t_len = feats.nrows();
    if alignment.states.len() != t_len {
        return Err(HmmError::MalformedModel(
            "alignment length != frame count".into(),
        ));
    }
    for t in 0..t_len {
        let s = alignment.states[t] as usize;
        total += model.emissions[s].log_likelihood(feats.row(t).as_slice().unwrap());
        if t + 1 < t_len {
            let trans = if alignment.states[t + 1] == alignment.states[t] {
                model.transitions[s][0]
            } else {
                model.transitions[s][1]
            };
            total += trans.ln();
        } else {
            total += model.transitions[s][1].ln();
        }
    }
    Ok(total)
}

/// Total data log-likelihood under the current model.
pub fn log_likelihood(
    model: &HmmGmmModel,
    lexicon: &Lexicon,
    utts: &[Utterance],
) -> Result<f64, HmmError> {
    let mut total = 0.0;
    for utt in utts {
        let feats = features_of(utt)?;
        let g = build_graph_with_lexicon(model, lexicon, utt)?;
        let fb = forward_backward(model, &g, feats);
        if fb.log_z == LOG_ZERO {
            return Err(HmmError::ZeroProbPath(utt.id.clone()));
        }
        total += fb.log_z;
    }
    Ok(total)
}

/// Triphone context occurrence counts from transcripts under a lexicon.
pub fn context_stats(
    lexicon: &Lexicon,
    transcripts: &[Vec<String>],
) -> Result<BTreeMap<UnitKey, u64>, HmmError> {
    let cfg = HmmConfig {
        context_dependent: true,
        optional_silence: false,
        ..HmmConfig::default()
    };
    let mut stats = BTreeMap::new();
    for words in transcripts {
        if words.is_empty() {
            continue;
        }
        let utt_seq = unit_sequence(lexicon, words, &cfg)?;
        for (key, _) in utt_seq {
            *stats.entry(key).or_insert(0) += 1;
        }
    }
    Ok(stats)
}

fn key_to_text(key: &UnitKey) -> String {
    let ctx = |c: &Option<String>| c.clone().unwrap_or_else(|| "-".to_string());
    format!("{} {} {}", key.0, ctx(&key.1), ctx(&key.2))
}

fn key_from_text(fields: &[&str], line: usize) -> Result<UnitKey, HmmError> {
    if fields.len() != 3 {
        return Err(HmmError::Parse {
            line,
            msg: "expected `center left right`".into(),
        });
    }
    let ctx = |s: &str| (s != "-").then(|| s.to_string());
    Ok((fields[0].to_string(), ctx(fields[1]), ctx(fields[2])))
}

/// Versioned binary model file with a plain-text header.
pub fn write_model(model: &HmmGmmModel, path: &Path) -> Result<(), HmmError> {
    let mut buf: Vec<u8> = Vec::new();
    let mut header = String::new();
    header.push_str("DARTS-HMM v1\n");
    header.push_str(&format!("dim {}\n", model.dim));
    header.push_str(&format!("states_per_unit {}\n", model.cfg.states_per_unit));
    header.push_str(&format!(
        "config optional_silence={} context_dependent={} self_loop_init={}\n",
        model.cfg.optional_silence as u8, model.cfg.context_dependent as u8, model.cfg.self_loop_init
    ));
    header.push_str(&format!("units {}\n", model.inventory.units.len()));
    for (key, ids) in &model.inventory.units {
        let ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        header.push_str(&format!("{}\t{}\n", key_to_text(key), ids.join(" ")));
    }
    header.push_str(&format!("tying {}\n", model.inventory.tying.len()));
    for (raw, tied) in &model.inventory.tying {
        header.push_str(&format!("{}\t{}\n", key_to_text(raw), key_to_text(tied)));
    }
    header.push_str("DATA\n");
    buf.write_all(header.as_bytes())?;
    for s in 0..model.inventory.num_states() {
        let gmm = &model.emissions[s];
        buf.write_u32::<LittleEndian>(gmm.weights.len() as u32)?;
        buf.write_f64::<LittleEndian>(model.transitions[s][0])?;
        buf.write_f64::<LittleEndian>(model.transitions[s][1])?;
        for c in 0..gmm.weights.len() {
            buf.write_f64::<LittleEndian>(gmm.weights[c])?;
            for d in 0..model.dim {
                buf.write_f64::<LittleEndian>(gmm.means[c][d])?;
            }
            for d in 0..model.dim {
                buf.write_f64::<LittleEndian>(gmm.vars[c][d])?;
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<HmmGmmModel, HmmError> {
    let bytes = std::fs::read(path)?;
    let data_tag = b"DATA\n";
    let split = bytes
        .windows(data_tag.len())
        .position(|w| w == data_tag)
        .ok_or_else(|| HmmError::MalformedModel("missing DATA marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| HmmError::MalformedModel("non-utf8 header".into()))?;
    let mut lines = header.lines().enumerate();
    let expect = |item: Option<(usize, &str)>, what: &str| -> Result<(usize, String), HmmError> {
        item.map(|(i, l)| (i + 1, l.to_string()))
            .ok_or_else(|| HmmError::MalformedModel(format!("missing {what}")))
    };
    let (_, magic) = expect(lines.next(), "magic")?;
    if magic != "DARTS-HMM v1" {
        return Err(HmmError::MalformedModel(format!("bad magic `{magic}`")));
    }
    let field = |line: &str, name: &str, no: usize| -> Result<String, HmmError> {
        line.strip_prefix(&format!("{name} "))
            .map(|s| s.to_string())
            .ok_or(HmmError::Parse {
                line: no,
                msg: format!("expected `{name} ...`"),
            })
    };
    let (no, l) = expect(lines.next(), "dim")?;
    let dim: usize = field(&l, "dim", no)?.parse().map_err(|_| HmmError::Parse {
        line: no,
        msg: "bad dim".into(),
    })?;
    let (no, l) = expect(lines.next(), "states_per_unit")?;
    let states_per_unit: usize =
        field(&l, "states_per_unit", no)?
            .parse()
            .map_err(|_| HmmError::Parse {
                line: no,
                msg: "bad states_per_unit".into(),
            })?;
    let (no, l) = expect(lines.next(), "config")?;
    let cfg_str = field(&l, "config", no)?;
    let mut cfg = HmmConfig {
        states_per_unit,
        ..HmmConfig::default()
    };
    for kv in cfg_str.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or(HmmError::Parse {
            line: no,
            msg: "bad config entry".into(),
        })?;
        match k {
            "optional_silence" => cfg.optional_silence = v == "1",
            "context_dependent" => cfg.context_dependent = v == "1",
            "self_loop_init" => {
                cfg.self_loop_init = v.parse().map_err(|_| HmmError::Parse {
                    line: no,
                    msg: "bad self_loop_init".into(),
                })?
            }
            _ => {
                return Err(HmmError::Parse {
                    line: no,
                    msg: format!("unknown config key `{k}`"),
                })
            }
        }
    }
    let (no, l) = expect(lines.next(), "units")?;
    let n_units: usize = field(&l, "units", no)?.parse().map_err(|_| HmmError::Parse {
        line: no,
        msg: "bad unit count".into(),
    })?;
    let mut units = BTreeMap::new();
    for _ in 0..n_units {
        let (no, l) = expect(lines.next(), "unit line")?;
        let (key_part, ids_part) = l.split_once('\t').ok_or(HmmError::Parse {
            line: no,
            msg: "expected tab-separated unit line".into(),
        })?;
        let key = key_from_text(&key_part.split(' ').collect::<Vec<_>>(), no)?;
        let ids: Result<Vec<u32>, _> = ids_part.split(' ').map(|s| s.parse::<u32>()).collect();
        let ids = ids.map_err(|_| HmmError::Parse {
            line: no,
            msg: "bad state id".into(),
        })?;
        units.insert(key, ids);
    }
    let (no, l) = expect(lines.next(), "tying")?;
    let n_tying: usize = field(&l, "tying", no)?.parse().map_err(|_| HmmError::Parse {
        line: no,
        msg: "bad tying count".into(),
    })?;
    let mut tying = BTreeMap::new();
    for _ in 0..n_tying {
        let (no, l) = expect(lines.next(), "tying line")?;
        let (raw, tied) = l.split_once('\t').ok_or(HmmError::Parse {
            line: no,
            msg: "expected tab-separated tying line".into(),
        })?;
        tying.insert(
            key_from_text(&raw.split(' ').collect::<Vec<_>>(), no)?,
            key_from_text(&tied.split(' ').collect::<Vec<_>>(), no)?,
        );
    }
    let inventory = StateInventory {
        units,
        states_per_unit,
        tying,
    };
    let k = inventory.num_states();
    let mut rdr = &bytes[split + data_tag.len()..];
    let mut transitions = Vec::with_capacity(k);
    let mut emissions = Vec::with_capacity(k);
    for _ in 0..k {
        let ncomp = rdr.read_u32::<LittleEndian>()? as usize;
        let p_self = rdr.read_f64::<LittleEndian>()?;
        let p_fwd = rdr.read_f64::<LittleEndian>()?;
        transitions.push([p_self, p_fwd]);
        let mut gmm = Gmm {
            weights: Vec::with_capacity(ncomp),
            means: Vec::with_capacity(ncomp),
            vars: Vec::with_capacity(ncomp),
        };
        for _ in 0..ncomp {
            gmm.weights.push(rdr.read_f64::<LittleEndian>()?);
            let mut mean = Array1::<f64>::zeros(dim);
            for d in 0..dim {
                mean[d] = rdr.read_f64::<LittleEndian>()?;
            }
            let mut var = Array1::<f64>::zeros(dim);
            for d in 0..dim {
                var[d] = rdr.read_f64::<LittleEndian>()?;
            }
            gmm.means.push(mean);
            gmm.vars.push(var);
        }
        emissions.push(gmm);
    }
    let mut buf = Vec::new();
    rdr.read_to_end(&mut buf)?;
    if !buf.is_empty() {
        return Err(HmmError::MalformedModel("trailing bytes after states".into()));
    }
    Ok(HmmGmmModel {
        inventory,
        cfg,
        dim,
        transitions,
        emissions,
    })
}

/// `id<TAB>s1 s2 ... sT` text lines.
pub fn write_alignments(alignments: &[Alignment], path: &Path) -> Result<(), HmmError> {
    let mut out = String::new();
    for a in alignments {
        let states: Vec<String> = a.states.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("{}\t{}\n", a.id, states.join(" ")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_alignments(
    path: &Path,
    inventory: &StateInventory,
) -> Result<Vec<Alignment>, HmmError> {
    let text = std::fs::read_to_string(path)?;
    let graphemes = inventory.state_graphemes();
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or(HmmError::Parse {
            line: no + 1,
            msg: "expected `id<TAB>states`".into(),
        })?;
        let states: Result<Vec<u32>, _> = rest.split(' ').map(|s| s.parse::<u32>()).collect();
        let states = states.map_err(|_| HmmError::Parse {
            line: no + 1,
            msg: "bad state id".into(),
        })?;
        if let Some(&bad) = states.iter().find(|&&s| s as usize >= graphemes.len()) {
            return Err(HmmError::Parse {
                line: no + 1,
                msg: format!("state id {bad} outside inventory"),
            });
        }
        let gs = states.iter().map(|&s| graphemes[s as usize].clone()).collect();
        out.push(Alignment {
            id: id.to_string(),
            states,
            graphemes: gs,
        });
    }
    Ok(out)
}
