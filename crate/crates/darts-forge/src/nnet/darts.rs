//! The DARTS acoustic architecture: a five-layer CNN front end, an 18-layer
//! TDNN block with cross-layer concatenations, and a four-repetition
//! recurrent block of projected LSTMs, feeding two parallel output heads
//! (log-softmax for cross-entropy, linear for lattice-free MMI).
//!
//! A layer table is plain text, one layer per line:
//!
//! ```text
//! 1l  tdnn    {-1, 0, 1}   1280
//! 2l  linear  {-1, 0}      256
//! 10l tdnn    {0, 6l, 3l}  1280
//! 1r  lstmp   -            1024,256,128
//! c3  conv-s2 -            32
//! ```
//!
//! Offsets may mix relative frame offsets with references to earlier layer
//! ids; a reference concatenates that layer's time-aligned output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::tensor::{NodeId, Tape, TapeError};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("layer {layer} references unknown or later layer '{reference}'")]
    DanglingReference { layer: String, reference: String },
    #[error("input has {got} frames but the receptive field needs {need}")]
    InputTooShort { need: usize, got: usize },
    #[error("input dim {got} does not match network input dim {want}")]
    InputDimMismatch { want: usize, got: usize },
    #[error("network has {expected} output states, task needs {got}; re-initialize the heads")]
    StateCountMismatch { expected: usize, got: usize },
    #[error("layer table parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OffsetRef {
    /// Relative frame offset into the preceding layer's output.
    Rel(i64),
    /// Offset-0 output of an earlier layer, concatenated in.
    Layer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution, stride 1 in time; `stride_f` 2 for the subsampling
    /// layer. `dim` holds the filter count.
    Conv { stride_f: usize },
    /// Spliced affine followed by ReLU and batch normalization.
    Tdnn,
    /// Spliced affine with no nonlinearity.
    Linear,
    /// Projected LSTM; dims are (cell, hidden, projection). Offsets are
    /// accepted in the table but ignored (they are ambiguous for a
    /// recurrent layer).
    Lstmp { cell: usize, hidden: usize, proj: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub offsets: Vec<OffsetRef>,
    pub dim: usize,
}

/// Everything produced by one forward pass: the tape (for backward), node
/// ids for the parameters and both heads, and the batch statistics gathered
/// by train-mode batch normalization.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_nodes: BTreeMap<String, NodeId>,
    /// Trunk output before the heads.
    pub trunk: NodeId,
    /// Pre-softmax CE head activations.
    pub ce_logits: NodeId,
    /// Row-wise log-probabilities.
    pub ce_logprobs: NodeId,
    /// Linear LF-MMI head scores.
    pub mmi_scores: NodeId,
    /// (bn name, batch mean, batch var) per batch-norm layer, train mode only.
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub specs: Vec<LayerSpec>,
    pub input_dim: usize,
    pub num_states: usize,
    pub use_blstm: bool,
    pub params: BTreeMap<String, ArrayD<f64>>,
    /// Running (mean, var) per batch-norm layer for inference mode.
    pub bn_running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct DartsConfig {
    pub width_scale: f64,
    pub use_blstm: bool,
    /// Restore the regular repetition pattern in the third recurrent
    /// repetition (whose TDNN/linear dims look transposed in the reference
    /// table).
    pub swap_6r_7r: bool,
}

impl Default for DartsConfig {
    fn default() -> Self {
        DartsConfig {
            width_scale: 1.0 / 16.0,
            use_blstm: false,
            swap_6r_7r: false,
        }
    }
}

fn scale_dim(d: usize, ws: f64) -> usize {
    ((d as f64 * ws).round() as usize).max(1)
}

/// The stock layer table: CNN front end, TDNN block, recurrent block.
pub fn default_layer_table(cfg: &DartsConfig) -> Vec<LayerSpec> {
    let ws = cfg.width_scale;
    let conv = |id: &str, stride_f: usize| LayerSpec {
        id: id.to_string(),
        kind: LayerKind::Conv { stride_f },
        offsets: Vec::new(),
        dim: scale_dim(32, ws),
    };
    let rel = |ks: &[i64]| ks.iter().map(|&k| OffsetRef::Rel(k)).collect::<Vec<_>>();
    let tdnn = |id: &str, offsets: Vec<OffsetRef>, dim: usize| LayerSpec {
        id: id.to_string(),
        kind: LayerKind::Tdnn,
        offsets,
        dim: scale_dim(dim, ws),
    };
    let linear = |id: &str, offsets: Vec<OffsetRef>, dim: usize| LayerSpec {
        id: id.to_string(),
        kind: LayerKind::Linear,
        offsets,
        dim: scale_dim(dim, ws),
    };
    let lstmp = |id: &str, offsets: Vec<OffsetRef>| LayerSpec {
        id: id.to_string(),
        kind: LayerKind::Lstmp {
            cell: scale_dim(1024, ws),
            hidden: scale_dim(256, ws),
            proj: scale_dim(128, ws),
        },
        offsets,
        dim: scale_dim(128, ws),
    };
    let layer = |id: &str| OffsetRef::Layer(id.to_string());

    let mut t = vec![
        conv("c1", 1),
        conv("c2", 1),
        conv("c3", 2),
        conv("c4", 1),
        conv("c5", 1),
        tdnn("1l", rel(&[-1, 0, 1]), 1280),
        linear("2l", rel(&[-1, 0]), 256),
        linear("3l", rel(&[-1, 0]), 256),
        tdnn("4l", rel(&[0, 1]), 1280),
        linear("5l", rel(&[-1, 0]), 256),
        linear("6l", rel(&[-1, 0]), 256),
        tdnn("7l", rel(&[0, 1]), 1280),
        linear("8l", rel(&[-1, 0]), 256),
        linear("9l", rel(&[-1, 0]), 256),
        tdnn("10l", vec![OffsetRef::Rel(0), layer("6l"), layer("3l")], 1280),
        linear("11l", rel(&[-3, 0]), 256),
        linear("12l", rel(&[-3, 0]), 256),
        tdnn("13l", rel(&[0, 3]), 1280),
        linear("14l", rel(&[-3, 0]), 256),
        linear("15l", rel(&[0, 3]), 256),
        tdnn(
            "16l",
            vec![OffsetRef::Rel(0), layer("9l"), layer("6l"), layer("3l")],
            1280,
        ),
        linear("17l", rel(&[-3, 0]), 256),
        linear("18l", rel(&[0, 3]), 256),
        lstmp("1r", Vec::new()),
        tdnn("2r", rel(&[0, 3]), 1280),
        linear("3r", rel(&[-3, 0]), 256),
        linear("4r", rel(&[-3, 0]), 256),
        lstmp("5r", Vec::new()),
        tdnn(
            "6r",
            vec![OffsetRef::Rel(0), layer("15l"), layer("12l"), layer("9l")],
            256,
        ),
        linear("7r", rel(&[0, 3]), 1280),
        linear("8r", rel(&[-3, 0]), 256),
        lstmp("9r", Vec::new()),
        tdnn(
            "10r",
            vec![OffsetRef::Rel(0), layer("8r"), layer("4r"), layer("18l")],
            1280,
        ),
        linear("11r", rel(&[-3, 0]), 256),
        linear("12r", rel(&[0, 3]), 256),
        lstmp("13r", rel(&[0, 3])),
    ];
    if cfg.swap_6r_7r {
        let (a, b) = (
            t.iter().position(|s| s.id == "6r").unwrap(),
            t.iter().position(|s| s.id == "7r").unwrap(),
        );
        let d = t[a].dim;
        t[a].dim = t[b].dim;
        t[b].dim = d;
    }
    t
}

fn format_offsets(offsets: &[OffsetRef]) -> String {
    if offsets.is_empty() {
        return "-".to_string();
    }
    let items: Vec<String> = offsets
        .iter()
        .map(|o| match o {
            OffsetRef::Rel(k) => k.to_string(),
            OffsetRef::Layer(id) => id.clone(),
        })
        .collect();
    format!("{{{}}}", items.join(", "))
}

pub fn format_layer_table(specs: &[LayerSpec]) -> String {
    let mut out = String::new();
    for s in specs {
        let (kind, dim) = match &s.kind {
            LayerKind::Conv { stride_f: 1 } => ("conv".to_string(), s.dim.to_string()),
            LayerKind::Conv { .. } => ("conv-s2".to_string(), s.dim.to_string()),
            LayerKind::Tdnn => ("tdnn".to_string(), s.dim.to_string()),
            LayerKind::Linear => ("linear".to_string(), s.dim.to_string()),
            LayerKind::Lstmp { cell, hidden, proj } => {
                ("lstmp".to_string(), format!("{cell},{hidden},{proj}"))
            }
        };
        writeln!(out, "{}\t{}\t{}\t{}", s.id, kind, format_offsets(&s.offsets), dim).unwrap();
    }
    out
}

pub fn parse_layer_table(text: &str) -> Result<Vec<LayerSpec>, NnetError> {
    let mut specs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| NnetError::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        // Offsets contain spaces, so split on the braces rather than on
        // whitespace alone.
        let (head, rest) = match line.find('{') {
            Some(open) => {
                let close = line[open..]
                    .find('}')
                    .ok_or_else(|| err("unclosed offset list"))?
                    + open;
                let mut parts: Vec<&str> = line[..open].split_whitespace().collect();
                parts.push(&line[open..=close]);
                parts.extend(line[close + 1..].split_whitespace());
                (parts, ())
            }
            None => (line.split_whitespace().collect::<Vec<_>>(), ()),
        };
        let parts = head;
        let _ = rest;
        if parts.len() != 4 {
            return Err(err("expected: id kind offsets dim"));
        }
        let id = parts[0].to_string();
        let offsets = if parts[2] == "-" {
            Vec::new()
        } else {
            let inner = parts[2]
                .strip_prefix('{')
                .and_then(|s| s.strip_suffix('}'))
                .ok_or_else(|| err("offsets must be '-' or '{...}'"))?;
            let mut v = Vec::new();
            for item in inner.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    return Err(err("empty offset item"));
                }
                match item.parse::<i64>() {
                    Ok(k) => v.push(OffsetRef::Rel(k)),
                    Err(_) => v.push(OffsetRef::Layer(item.to_string())),
                }
            }
            v
        };
        let kind = match parts[1] {
            "conv" => LayerKind::Conv { stride_f: 1 },
            "conv-s2" => LayerKind::Conv { stride_f: 2 },
            "tdnn" => LayerKind::Tdnn,
            "linear" => LayerKind::Linear,
            "lstmp" => {
                let dims: Vec<usize> = parts[3]
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("lstmp dims must be cell,hidden,proj"))?;
                if dims.len() != 3 {
                    return Err(err("lstmp dims must be cell,hidden,proj"));
                }
                specs.push(LayerSpec {
                    id,
                    kind: LayerKind::Lstmp {
                        cell: dims[0],
                        hidden: dims[1],
                        proj: dims[2],
                    },
                    offsets,
                    dim: dims[2],
                });
                continue;
            }
            other => return Err(err(&format!("unknown layer kind '{other}'"))),
        };
        if matches!(kind, LayerKind::Tdnn | LayerKind::Linear) && offsets.is_empty() {
            return Err(err("tdnn/linear layers need a non-empty offset list"));
        }
        let dim = parts[3]
            .parse::<usize>()
            .map_err(|_| err("dim must be an integer"))?;
        specs.push(LayerSpec { id, kind, offsets, dim });
    }
    Ok(specs)
}

fn check_references(specs: &[LayerSpec]) -> Result<(), NnetError> {
    let mut seen: Vec<&str> = Vec::new();
    for s in specs {
        for o in &s.offsets {
            if let OffsetRef::Layer(id) = o {
                if !seen.contains(&id.as_str()) {
                    return Err(NnetError::DanglingReference {
                        layer: s.id.clone(),
                        reference: id.clone(),
                    });
                }
            }
        }
        seen.push(&s.id);
    }
    Ok(())
}

/// Exact (left, right) frame context implied by composing every layer's
/// offsets and convolution widths.
pub fn receptive_field(specs: &[LayerSpec]) -> (usize, usize) {
    let mut by_id: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut prev = (0usize, 0usize);
    for s in specs {
        let cur = match &s.kind {
            LayerKind::Conv { .. } => (prev.0 + 1, prev.1 + 1),
            LayerKind::Lstmp { .. } => prev,
            LayerKind::Tdnn | LayerKind::Linear => {
                let mut l = 0usize;
                let mut r = 0usize;
                for o in &s.offsets {
                    let (ol, or) = match o {
                        OffsetRef::Rel(k) => (
                            prev.0 + (-*k).max(0) as usize,
                            prev.1 + (*k).max(0) as usize,
                        ),
                        OffsetRef::Layer(id) => by_id[id.as_str()],
                    };
                    l = l.max(ol);
                    r = r.max(or);
                }
                (l, r)
            }
        };
        by_id.insert(&s.id, cur);
        prev = cur;
    }
    prev
}

/// Output dim of every layer, plus the trunk output dim, given the input
/// feature dim. Convolutions run over a `T x F x C` volume whose frequency
/// axis starts at `input_dim`; the first non-conv layer sees the flattened
/// `F*C` columns.
fn layer_dims(
    specs: &[LayerSpec],
    input_dim: usize,
    use_blstm: bool,
) -> (BTreeMap<String, usize>, usize) {
    let mut dims = BTreeMap::new();
    let mut freq = input_dim;
    let mut prev = input_dim;
    for s in specs {
        let out = match &s.kind {
            LayerKind::Conv { stride_f } => {
                freq = freq.div_ceil(*stride_f);
                prev = freq * s.dim;
                s.dim
            }
            LayerKind::Tdnn | LayerKind::Linear => s.dim,
            LayerKind::Lstmp { proj, .. } => {
                if use_blstm {
                    proj * 2
                } else {
                    *proj
                }
            }
        };
        if !matches!(s.kind, LayerKind::Conv { .. }) {
            prev = out;
        }
        dims.insert(s.id.clone(), out);
    }
    (dims, prev)
}

/// Input width of a spliced layer: one copy of the preceding layer's output
/// per relative offset plus each referenced layer's output.
fn splice_width(
    s: &LayerSpec,
    prev_dim: usize,
    dims: &BTreeMap<String, usize>,
) -> usize {
    s.offsets
        .iter()
        .map(|o| match o {
            OffsetRef::Rel(_) => prev_dim,
            OffsetRef::Layer(id) => dims[id],
        })
        .sum()
}

impl Network {
    /// Build a network with freshly initialized parameters.
    pub fn new(
        specs: Vec<LayerSpec>,
        input_dim: usize,
        num_states: usize,
        use_blstm: bool,
        seed: u64,
    ) -> Result<Network, NnetError> {
        check_references(&specs)?;
        let mut net = Network {
            specs,
            input_dim,
            num_states,
            use_blstm,
            params: BTreeMap::new(),
            bn_running: BTreeMap::new(),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        net.init_trunk(&mut rng);
        net.init_heads(&mut rng);
        Ok(net)
    }

    fn glorot(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
    }

    fn init_trunk(&mut self, rng: &mut ChaCha20Rng) {
        let (dims, _) = layer_dims(&self.specs, self.input_dim, self.use_blstm);
        let mut prev_dim = self.input_dim;
        let mut channels = 1usize;
        for s in &self.specs {
            match &s.kind {
                LayerKind::Conv { .. } => {
                    let cout = s.dim;
                    let k = Self::glorot(rng, &[3, 3, channels, cout], 9 * channels, 9 * cout);
                    self.params.insert(format!("{}.kernel", s.id), k);
                    self.params
                        .insert(format!("{}.bn.gamma", s.id), ArrayD::ones(IxDyn(&[cout])));
                    self.params
                        .insert(format!("{}.bn.beta", s.id), ArrayD::zeros(IxDyn(&[cout])));
                    self.bn_running
                        .insert(format!("{}.bn", s.id), (vec![0.0; cout], vec![1.0; cout]));
                    channels = cout;
                }
                LayerKind::Tdnn | LayerKind::Linear => {
                    // First non-conv layer consumes the flattened conv output.
                    if channels > 1 || self.is_first_trunk_layer(&s.id) {
                        prev_dim = self.flattened_front_dim(&s.id, channels, prev_dim);
                        channels = 1;
                    }
                    let w_in = splice_width(s, prev_dim, &dims);
                    let w = Self::glorot(rng, &[w_in, s.dim], w_in, s.dim);
                    self.params.insert(format!("{}.weight", s.id), w);
                    self.params
                        .insert(format!("{}.bias", s.id), ArrayD::zeros(IxDyn(&[s.dim])));
                    if matches!(s.kind, LayerKind::Tdnn) {
                        self.params
                            .insert(format!("{}.bn.gamma", s.id), ArrayD::ones(IxDyn(&[s.dim])));
                        self.params
                            .insert(format!("{}.bn.beta", s.id), ArrayD::zeros(IxDyn(&[s.dim])));
                        self.bn_running.insert(
                            format!("{}.bn", s.id),
                            (vec![0.0; s.dim], vec![1.0; s.dim]),
                        );
                    }
                    prev_dim = s.dim;
                }
                LayerKind::Lstmp { cell, hidden, proj } => {
                    if channels > 1 {
                        prev_dim = self.flattened_front_dim(&s.id, channels, prev_dim);
                        channels = 1;
                    }
                    let dirs: &[&str] = if self.use_blstm { &["fwd", "bwd"] } else { &["fwd"] };
                    let _ = cell;
                    for d in dirs {
                        let h4 = 4 * hidden;
                        self.params.insert(
                            format!("{}.{}.wx", s.id, d),
                            Self::glorot(rng, &[prev_dim, h4], prev_dim, h4),
                        );
                        self.params.insert(
                            format!("{}.{}.wh", s.id, d),
                            Self::glorot(rng, &[*proj, h4], *proj, h4),
                        );
                        self.params
                            .insert(format!("{}.{}.bias", s.id, d), ArrayD::zeros(IxDyn(&[h4])));
                        self.params.insert(
                            format!("{}.{}.proj", s.id, d),
                            Self::glorot(rng, &[*hidden, *proj], *hidden, *proj),
                        );
                    }
                    prev_dim = if self.use_blstm { proj * 2 } else { *proj };
                }
            }
        }
    }

    fn is_first_trunk_layer(&self, id: &str) -> bool {
        self.specs
            .iter()
            .find(|s| !matches!(s.kind, LayerKind::Conv { .. }))
            .map(|s| s.id == id)
            .unwrap_or(false)
    }

    /// Columns seen by the first non-conv layer: F' * C when a conv front
    /// end exists, otherwise the raw input dim.
    fn flattened_front_dim(&self, _id: &str, channels: usize, prev_dim: usize) -> usize {
        let mut freq = self.input_dim;
        let mut have_conv = false;
        for s in &self.specs {
            if let LayerKind::Conv { stride_f } = s.kind {
                freq = freq.div_ceil(stride_f);
                have_conv = true;
            } else {
                break;
            }
        }
        if have_conv {
            freq * channels
        } else {
            prev_dim
        }
    }

    fn trunk_dim(&self) -> usize {
        layer_dims(&self.specs, self.input_dim, self.use_blstm).1
    }

    /// (Re)initialize both output heads; used at construction and when
    /// warm-starting onto a different tied-state inventory.
    pub fn init_heads(&mut self, rng: &mut ChaCha20Rng) {
        let d = self.trunk_dim();
        let k = self.num_states;
        self.params
            .insert("head_ce.weight".into(), Self::glorot(rng, &[d, k], d, k));
        self.params
            .insert("head_ce.bias".into(), ArrayD::zeros(IxDyn(&[k])));
        self.params
            .insert("head_mmi.weight".into(), Self::glorot(rng, &[d, k], d, k));
        self.params
            .insert("head_mmi.bias".into(), ArrayD::zeros(IxDyn(&[k])));
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn zero_params(&mut self) {
        for p in self.params.values_mut() {
            p.fill(0.0);
        }
    }

    /// Fold one forward pass's batch statistics into the running averages.
    pub fn update_bn_running(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        for (name, mean, var) in stats {
            if let Some((rm, rv)) = self.bn_running.get_mut(name) {
                for j in 0..rm.len() {
                    rm[j] = BN_MOMENTUM * rm[j] + (1.0 - BN_MOMENTUM) * mean[j];
                    rv[j] = BN_MOMENTUM * rv[j] + (1.0 - BN_MOMENTUM) * var[j];
                }
            }
        }
    }

    pub fn receptive_field(&self) -> (usize, usize) {
        receptive_field(&self.specs)
    }

    /// Run the network over one utterance (`T x input_dim`). In train mode
    /// batch normalization uses batch statistics; in inference mode the
    /// stored running statistics make the whole pass deterministic.
    pub fn forward(&self, input: &Array2<f64>, train: bool) -> Result<ForwardPass, NnetError> {
        let (t, d) = (input.nrows(), input.ncols());
        if d != self.input_dim {
            return Err(NnetError::InputDimMismatch {
                want: self.input_dim,
                got: d,
            });
        }
        let (left, right) = self.receptive_field();
        if t < left + right + 1 {
            return Err(NnetError::InputTooShort {
                need: left + right + 1,
                got: t,
            });
        }
        let mut tape = Tape::new();
        let mut param_nodes = BTreeMap::new();
        for (name, value) in &self.params {
            param_nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        let mut batch_stats = Vec::new();
        let (dims, _) = layer_dims(&self.specs, self.input_dim, self.use_blstm);

        // Start as a T x F x 1 volume for the conv front end.
        let mut vol = Some(tape.leaf(
            input
                .clone()
                .into_shape_with_order(IxDyn(&[t, d, 1]))
                .unwrap(),
        ));
        let mut cur: Option<NodeId> = None; // 2-D trunk signal
        let mut outputs: BTreeMap<String, NodeId> = BTreeMap::new();

        for s in &self.specs {
            let out = match &s.kind {
                LayerKind::Conv { stride_f } => {
                    let src = match vol {
                        Some(v) => v,
                        None => {
                            // Conv after a 2-D layer is not part of the
                            // architecture; treat columns as frequency.
                            let c = cur.unwrap();
                            let shape = tape.value(c).shape().to_vec();
                            let flat = tape.value(c).clone();
                            tape.leaf(
                                flat.into_shape_with_order(IxDyn(&[shape[0], shape[1], 1]))
                                    .unwrap(),
                            )
                        }
                    };
                    let kernel = param_nodes[&format!("{}.kernel", s.id)];
                    let conv = tape.conv2d(src, kernel, *stride_f)?;
                    let relu = tape.relu(conv);
                    let bn_name = format!("{}.bn", s.id);
                    let gamma = param_nodes[&format!("{}.bn.gamma", s.id)];
                    let beta = param_nodes[&format!("{}.bn.beta", s.id)];
                    let running = self.bn_running.get(&bn_name);
                    let (bn, mean, var) = if train {
                        tape.batch_norm(relu, gamma, beta, None)?
                    } else {
                        let (m, v) = running.expect("running stats exist for every bn layer");
                        tape.batch_norm(relu, gamma, beta, Some((m, v)))?
                    };
                    if train {
                        batch_stats.push((bn_name, mean, var));
                    }
                    vol = Some(bn);
                    bn
                }
                LayerKind::Tdnn | LayerKind::Linear => {
                    if let Some(v) = vol.take() {
                        cur = Some(tape.flatten_channels(v)?);
                    }
                    let prev = cur.unwrap();
                    let mut parts = Vec::new();
                    for o in &s.offsets {
                        match o {
                            OffsetRef::Rel(k) => parts.push(tape.shift_rows(prev, *k)?),
                            OffsetRef::Layer(id) => parts.push(outputs[id]),
                        }
                    }
                    let spliced = if parts.len() == 1 {
                        parts[0]
                    } else {
                        tape.concat_cols(&parts)?
                    };
                    let w = param_nodes[&format!("{}.weight", s.id)];
                    let b = param_nodes[&format!("{}.bias", s.id)];
                    let lin = tape.matmul(spliced, w)?;
                    let lin = tape.add_row_broadcast(lin, b)?;
                    let out = if matches!(s.kind, LayerKind::Tdnn) {
                        let relu = tape.relu(lin);
                        let bn_name = format!("{}.bn", s.id);
                        let gamma = param_nodes[&format!("{}.bn.gamma", s.id)];
                        let beta = param_nodes[&format!("{}.bn.beta", s.id)];
                        let (bn, mean, var) = if train {
                            tape.batch_norm(relu, gamma, beta, None)?
                        } else {
                            let (m, v) = self
                                .bn_running
                                .get(&bn_name)
                                .expect("running stats exist for every bn layer");
                            tape.batch_norm(relu, gamma, beta, Some((m, v)))?
                        };
                        if train {
                            batch_stats.push((bn_name, mean, var));
                        }
                        bn
                    } else {
                        lin
                    };
                    cur = Some(out);
                    out
                }
                LayerKind::Lstmp { hidden, proj, .. } => {
                    if let Some(v) = vol.take() {
                        cur = Some(tape.flatten_channels(v)?);
                    }
                    let prev = cur.unwrap();
                    let fwd = self.lstmp_direction(&mut tape, &param_nodes, &s.id, "fwd", prev, *hidden, *proj)?;
                    let out = if self.use_blstm {
                        let rev_in = tape.reverse_rows(prev)?;
                        let bwd =
                            self.lstmp_direction(&mut tape, &param_nodes, &s.id, "bwd", rev_in, *hidden, *proj)?;
                        let bwd = tape.reverse_rows(bwd)?;
                        tape.concat_cols(&[fwd, bwd])?
                    } else {
                        fwd
                    };
                    cur = Some(out);
                    out
                }
            };
            debug_assert!(
                matches!(s.kind, LayerKind::Conv { .. })
                    || tape.value(out).shape()[1] == dims[&s.id],
                "dim bookkeeping out of sync for {}",
                s.id
            );
            outputs.insert(s.id.clone(), out);
        }
        if let Some(v) = vol.take() {
            cur = Some(tape.flatten_channels(v)?);
        }
        let trunk = cur.expect("network has at least one layer");

        let wce = param_nodes["head_ce.weight"];
        let bce = param_nodes["head_ce.bias"];
        let lin = tape.matmul(trunk, wce)?;
        let ce_logits = tape.add_row_broadcast(lin, bce)?;
        let ce_logprobs = tape.log_softmax(ce_logits)?;
        let wm = param_nodes["head_mmi.weight"];
        let bm = param_nodes["head_mmi.bias"];
        let linm = tape.matmul(trunk, wm)?;
        let mmi_scores = tape.add_row_broadcast(linm, bm)?;

        Ok(ForwardPass {
            tape,
            param_nodes,
            trunk,
            ce_logits,
            ce_logprobs,
            mmi_scores,
            batch_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn lstmp_direction(
        &self,
        tape: &mut Tape,
        param_nodes: &BTreeMap<String, NodeId>,
        id: &str,
        dir: &str,
        input: NodeId,
        hidden: usize,
        proj: usize,
    ) -> Result<NodeId, NnetError> {
        let t = tape.value(input).shape()[0];
        let wx = param_nodes[&format!("{id}.{dir}.wx")];
        let wh = param_nodes[&format!("{id}.{dir}.wh")];
        let bias = param_nodes[&format!("{id}.{dir}.bias")];
        let projw = param_nodes[&format!("{id}.{dir}.proj")];
        let mut h_prev = tape.leaf(ArrayD::zeros(IxDyn(&[1, proj])));
        let mut c_prev = tape.leaf(ArrayD::zeros(IxDyn(&[1, hidden])));
        let mut rows = Vec::with_capacity(t);
        for step in 0..t {
            let xt = tape.row(input, step)?;
            let gx = tape.matmul(xt, wx)?;
            let gh = tape.matmul(h_prev, wh)?;
            let gs = tape.add(gx, gh)?;
            let gates = tape.add_row_broadcast(gs, bias)?;
            let i_raw = tape.slice_cols(gates, 0, hidden)?;
            let f_raw = tape.slice_cols(gates, hidden, hidden)?;
            let o_raw = tape.slice_cols(gates, 2 * hidden, hidden)?;
            let g_raw = tape.slice_cols(gates, 3 * hidden, hidden)?;
            let i = tape.sigmoid(i_raw);
            let f = tape.sigmoid(f_raw);
            let o = tape.sigmoid(o_raw);
            let g = tape.tanh(g_raw);
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let c = tape.add(fc, ig)?;
            let ct = tape.tanh(c);
            let hcell = tape.mul(o, ct)?;
            let h = tape.matmul(hcell, projw)?;
            rows.push(h);
            h_prev = h;
            c_prev = c;
        }
        Ok(tape.stack_rows(&rows)?)
    }

    /// Inference-mode convenience wrapper returning plain matrices.
    pub fn score(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), NnetError> {
        let pass = self.forward(input, false)?;
        let ce = pass
            .tape
            .value(pass.ce_logprobs)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mmi = pass
            .tape
            .value(pass.mmi_scores)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok((ce, mmi))
    }

    pub fn write(&self, path: &Path) -> Result<(), NnetError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "DARTS-NNET v1")?;
        writeln!(w, "input_dim {}", self.input_dim)?;
        writeln!(w, "num_states {}", self.num_states)?;
        writeln!(w, "use_blstm {}", if self.use_blstm { 1 } else { 0 })?;
        writeln!(w, "layers {}", self.specs.len())?;
        w.write_all(format_layer_table(&self.specs).as_bytes())?;
        writeln!(w, "bn {}", self.bn_running.len())?;
        for (name, (mean, var)) in &self.bn_running {
            writeln!(w, "{} {}", name, mean.len())?;
            for v in mean.iter().chain(var.iter()) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            writeln!(w)?;
        }
        writeln!(w, "params {}", self.params.len())?;
        for (name, p) in &self.params {
            let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", name, dims.join(" "))?;
            for v in p.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Network, NnetError> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |msg: &str| NnetError::MalformedCheckpoint(msg.to_string());
        let mut line = String::new();
        let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<String, NnetError> {
            line.clear();
            let mut byte = [0u8; 1];
            loop {
                let n = r.read(&mut byte)?;
                if n == 0 || byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0] as char);
            }
            Ok(line.clone())
        };
        if read_line(&mut r, &mut line)? != "DARTS-NNET v1" {
            return Err(bad("missing magic header"));
        }
        let field = |l: &str, key: &str| -> Result<String, NnetError> {
            l.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(|s| s.to_string())
                .ok_or_else(|| NnetError::MalformedCheckpoint(format!("expected '{key}'")))
        };
        let input_dim: usize = field(&read_line(&mut r, &mut line)?, "input_dim")?
            .parse()
            .map_err(|_| bad("bad input_dim"))?;
        let num_states: usize = field(&read_line(&mut r, &mut line)?, "num_states")?
            .parse()
            .map_err(|_| bad("bad num_states"))?;
        let use_blstm = field(&read_line(&mut r, &mut line)?, "use_blstm")? == "1";
        let n_layers: usize = field(&read_line(&mut r, &mut line)?, "layers")?
            .parse()
            .map_err(|_| bad("bad layer count"))?;
        let mut table = String::new();
        for _ in 0..n_layers {
            table.push_str(&read_line(&mut r, &mut line)?);
            table.push('\n');
        }
        let specs = parse_layer_table(&table)?;
        if specs.len() != n_layers {
            return Err(bad("layer count does not match table"));
        }
        check_references(&specs)?;
        let n_bn: usize = field(&read_line(&mut r, &mut line)?, "bn")?
            .parse()
            .map_err(|_| bad("bad bn count"))?;
        let mut bn_running = BTreeMap::new();
        for _ in 0..n_bn {
            let l = read_line(&mut r, &mut line)?;
            let mut it = l.split_whitespace();
            let name = it.next().ok_or_else(|| bad("bn name missing"))?.to_string();
            let len: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bn length missing"))?;
            let mut mean = vec![0.0; len];
            let mut var = vec![0.0; len];
            for m in mean.iter_mut().chain(var.iter_mut()) {
                *m = r.read_f64::<LittleEndian>()?;
            }
            read_line(&mut r, &mut line)?; // trailing newline
            bn_running.insert(name, (mean, var));
        }
        let n_params: usize = field(&read_line(&mut r, &mut line)?, "params")?
            .parse()
            .map_err(|_| bad("bad param count"))?;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let l = read_line(&mut r, &mut line)?;
            let mut it = l.split_whitespace();
            let name = it.next().ok_or_else(|| bad("param name missing"))?.to_string();
            let shape: Vec<usize> = it
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad param shape"))?;
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            read_line(&mut r, &mut line)?; // trailing newline
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| bad("shape/data mismatch"))?;
            params.insert(name, arr);
        }
        Ok(Network {
            specs,
            input_dim,
            num_states,
            use_blstm,
            params,
            bn_running,
        })
    }
}

/// Build the stock architecture.
pub fn build_darts(
    cfg: &DartsConfig,
    input_dim: usize,
    num_states: usize,
    seed: u64,
) -> Result<Network, NnetError> {
    let specs = default_layer_table(cfg);
    Network::new(specs, input_dim, num_states, cfg.use_blstm, seed)
}
