//! Weighted finite-state machinery: semirings, transducers, composition,
//! n-shortest paths, and the graph builders (H, L, G, decoding, numerator,
//! denominator) used throughout training and decoding.

mod compose;
pub mod graphs;
mod shortest;

pub use compose::compose;
pub use shortest::{shortest_path, ShortestPathEntry};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Dense integer label; 0 is reserved for epsilon.
pub type Label = u32;
pub const EPSILON: Label = 0;

pub type StateId = usize;

#[derive(Debug, Error)]
pub enum FstError {
    #[error("semiring mismatch: {0:?} vs {1:?}")]
    SemiringMismatch(SemiringKind, SemiringKind),
    #[error("alphabet mismatch: output symbols of left operand differ from input symbols of right operand")]
    AlphabetMismatch,
    #[error("graph has no paths")]
    EmptyGraph,
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Weights are stored as non-negative "costs" (negated log-probabilities).
/// Tropical: plus = min, times = +. Log: plus = -log(e^-a + e^-b), times = +.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemiringKind {
    Tropical,
    Log,
}

impl SemiringKind {
    pub fn zero(self) -> f64 {
        f64::INFINITY
    }

    pub fn one(self) -> f64 {
        0.0
    }

    pub fn plus(self, a: f64, b: f64) -> f64 {
        match self {
            SemiringKind::Tropical => a.min(b),
            SemiringKind::Log => log_plus(a, b),
        }
    }

    pub fn times(self, a: f64, b: f64) -> f64 {
        a + b
    }
}

/// Stable -log(e^-a + e^-b) in the cost domain.
pub fn log_plus(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY {
        return b;
    }
    if b == f64::INFINITY {
        return a;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    lo - (-(hi - lo)).exp().ln_1p()
}

/// Bidirectional symbol <-> dense id map. Id 0 is always `<eps>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    ids: HashMap<String, Label>,
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut t = SymbolTable {
            symbols: Vec::new(),
            ids: HashMap::new(),
        };
        t.insert("<eps>");
        t
    }

    /// Insert a symbol, returning its id (existing id if already present).
    pub fn insert(&mut self, symbol: &str) -> Label {
        if let Some(&id) = self.ids.get(symbol) {
            return id;
        }
        let id = self.symbols.len() as Label;
        self.symbols.push(symbol.to_string());
        self.ids.insert(symbol.to_string(), id);
        id
    }

    pub fn id(&self, symbol: &str) -> Option<Label> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: Label) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &str)> {
        self.symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (i as Label, s.as_str()))
    }

    /// `symbol<TAB>id` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, sym) in self.iter() {
            writeln!(out, "{sym}\t{id}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FstError> {
        let mut symbols: Vec<(String, Label)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let sym = parts.next().unwrap_or("");
            let id = parts
                .next()
                .and_then(|v| v.parse::<Label>().ok())
                .ok_or_else(|| FstError::Parse {
                    line: lineno + 1,
                    msg: "expected `symbol<TAB>id`".into(),
                })?;
            symbols.push((sym.to_string(), id));
        }
        symbols.sort_by_key(|&(_, id)| id);
        let mut table = SymbolTable {
            symbols: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, (sym, id)) in symbols.into_iter().enumerate() {
            if id as usize != i {
                return Err(FstError::Parse {
                    line: 0,
                    msg: format!("symbol ids not dense at id {id}"),
                });
            }
            table.ids.insert(sym.clone(), id);
            table.symbols.push(sym);
        }
        if table.symbols.is_empty() {
            return Err(FstError::Parse {
                line: 0,
                msg: "empty symbol table".into(),
            });
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    pub nextstate: StateId,
}

/// Weighted finite-state transducer over a configurable semiring.
///
/// Immutable after construction by convention; all algorithms take `&Fst`.
#[derive(Debug, Clone)]
pub struct Fst {
    pub semiring: SemiringKind,
    arcs: Vec<Vec<Arc>>,
    start: Option<StateId>,
    finals: Vec<f64>,
}

impl Fst {
    pub fn new(semiring: SemiringKind) -> Self {
        Fst {
            semiring,
            arcs: Vec::new(),
            start: None,
            finals: Vec::new(),
        }
    }

    pub fn add_state(&mut self) -> StateId {
        self.arcs.push(Vec::new());
        self.finals.push(self.semiring.zero());
        self.arcs.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.arcs.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(|a| a.len()).sum()
    }

    pub fn set_start(&mut self, s: StateId) {
        self.start = Some(s);
    }

    pub fn start(&self) -> Option<StateId> {
        self.start
    }

    pub fn set_final(&mut self, s: StateId, weight: f64) {
        self.finals[s] = weight;
    }

    pub fn final_weight(&self, s: StateId) -> f64 {
        self.finals[s]
    }

    pub fn is_final(&self, s: StateId) -> bool {
        self.finals[s] != self.semiring.zero()
    }

    pub fn add_arc(&mut self, s: StateId, arc: Arc) {
        self.arcs[s].push(arc);
    }

    pub fn arcs(&self, s: StateId) -> &[Arc] {
        &self.arcs[s]
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        0..self.arcs.len()
    }

    /// Relabel arcs in place (used to strip disambiguation symbols).
    pub fn map_ilabels(&mut self, f: impl Fn(Label) -> Label) {
        for arcs in &mut self.arcs {
            for arc in arcs {
                arc.ilabel = f(arc.ilabel);
            }
        }
    }

    /// Text format: arc lines `src<TAB>dst<TAB>ilabel<TAB>olabel<TAB>weight`,
    /// final lines `state<TAB>weight`. The first mentioned state is the start.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let start = match self.start {
            Some(s) => s,
            None => return out,
        };
        // Emit start state's arcs first so readers recover the start state.
        let order: Vec<StateId> = std::iter::once(start)
            .chain(self.states().filter(|&s| s != start))
            .collect();
        for &s in &order {
            for arc in &self.arcs[s] {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    s, arc.nextstate, arc.ilabel, arc.olabel, arc.weight
                )
                .unwrap();
            }
        }
        for &s in &order {
            if self.is_final(s) {
                writeln!(out, "{}\t{}", s, self.finals[s]).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, semiring: SemiringKind) -> Result<Self, FstError> {
        let mut fst = Fst::new(semiring);
        let ensure = |fst: &mut Fst, s: StateId| {
            while fst.num_states() <= s {
                fst.add_state();
            }
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |msg: &str| FstError::Parse {
                line: lineno + 1,
                msg: msg.into(),
            };
            match fields.len() {
                5 => {
                    let src: StateId = fields[0].parse().map_err(|_| parse_err("bad src"))?;
                    let dst: StateId = fields[1].parse().map_err(|_| parse_err("bad dst"))?;
                    let il: Label = fields[2].parse().map_err(|_| parse_err("bad ilabel"))?;
                    let ol: Label = fields[3].parse().map_err(|_| parse_err("bad olabel"))?;
                    let w: f64 = fields[4].parse().map_err(|_| parse_err("bad weight"))?;
                    ensure(&mut fst, src.max(dst));
                    if fst.start.is_none() {
                        fst.start = Some(src);
                    }
                    fst.add_arc(
                        src,
                        Arc {
                            ilabel: il,
                            olabel: ol,
                            weight: w,
                            nextstate: dst,
                        },
                    );
                }
                2 => {
                    let s: StateId = fields[0].parse().map_err(|_| parse_err("bad state"))?;
                    let w: f64 = fields[1].parse().map_err(|_| parse_err("bad weight"))?;
                    ensure(&mut fst, s);
                    if fst.start.is_none() {
                        fst.start = Some(s);
                    }
                    fst.set_final(s, w);
                }
                _ => return Err(parse_err("expected 5 (arc) or 2 (final) fields")),
            }
        }
        Ok(fst)
    }

    pub fn write_text(&self, path: &Path) -> Result<(), FstError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_text(path: &Path, semiring: SemiringKind) -> Result<Self, FstError> {
        Fst::from_text(&std::fs::read_to_string(path)?, semiring)
    }
}
