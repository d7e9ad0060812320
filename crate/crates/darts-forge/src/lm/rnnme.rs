//! Class-based recurrent language model with hashed maximum-entropy
//! features ("direct connections" from n-gram context to the output
//! layer). Probabilities factor as P(w|h) = P(class(w)|h) * P(w|class(w),h)
//! so each step only touches one class block of the output layer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{assign_classes, LmError, EOS, UNK};

#[derive(Debug, Clone, PartialEq)]
pub struct RnnMeConfig {
    /// Hidden layer width; 0 disables the recurrent part entirely and the
    /// model degenerates to a hashed n-gram (maxent-only) model.
    pub hidden: usize,
    pub classes: usize,
    /// Keep the `vocab_k` most frequent words; the rest map to `<unk>`.
    pub vocab_k: usize,
    pub maxent_hash_size: usize,
    /// Highest n-gram order of the direct features (1 = unigram biases).
    pub maxent_order: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
    pub epochs: usize,
    /// Truncated-BPTT window in steps.
    pub bptt: usize,
    pub seed: u64,
}

impl Default for RnnMeConfig {
    /// Desk-scale preset; see [`RnnMeConfig::full_scale`] for the large one.
    fn default() -> Self {
        RnnMeConfig {
            hidden: 64,
            classes: 20,
            vocab_k: 2000,
            maxent_hash_size: 1 << 20,
            maxent_order: 3,
            lr: 0.1,
            lr_decay: 1.0,
            epochs: 5,
            bptt: 4,
            seed: 0,
        }
    }
}

impl RnnMeConfig {
    /// Production-scale preset: 300 hidden units, 200 classes, 40K words,
    /// 2000M direct-connection slots.
    pub fn full_scale() -> Self {
        RnnMeConfig {
            hidden: 300,
            classes: 200,
            vocab_k: 40_000,
            maxent_hash_size: 2_000_000_000,
            maxent_order: 3,
            lr: 0.1,
            lr_decay: 1.0,
            epochs: 10,
            bptt: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnnMeLm {
    /// Predicted vocabulary; the last two entries are `<unk>` and `</s>`.
    pub vocab: Vec<String>,
    word_id: HashMap<String, usize>,
    /// Class index per predicted word.
    pub class_of: Vec<usize>,
    /// Word ids grouped by class (non-empty, partition the vocabulary).
    pub class_words: Vec<Vec<usize>>,
    pub hidden: usize,
    pub maxent_order: usize,
    /// Input embeddings, one row per input token (vocab + `<s>`).
    wx: Array2<f64>,
    wh: Array2<f64>,
    /// Class output block.
    uc: Array2<f64>,
    bc: Array1<f64>,
    /// Word output block (rows indexed by word id).
    uw: Array2<f64>,
    bw: Array1<f64>,
    /// Hashed direct-connection weights shared by class and word targets.
    maxent: Vec<f64>,
}

/// Running evaluation/training state: hidden activations plus the n-gram
/// history (most recent first, input-vocabulary ids) for the direct features.
#[derive(Debug, Clone)]
pub struct RnnMeState {
    h: Array1<f64>,
    hist: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RnnMeReport {
    /// Per-epoch validation entropy (bits per token).
    pub valid_entropy: Vec<f64>,
    /// Learning rate used in each epoch (halved on divergence).
    pub lr_schedule: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// FNV-1a over the feature tuple; deterministic across runs, unlike the
/// standard library's keyed hasher.
fn fnv1a(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &p in parts {
        for byte in p.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl RnnMeLm {
    pub fn word_id(&self, word: &str) -> usize {
        let w = if self.word_id.contains_key(word) {
            word
        } else {
            UNK
        };
        self.word_id[w]
    }

    fn bos_id(&self) -> usize {
        // One extra embedding row beyond the predicted vocabulary.
        self.vocab.len()
    }

    pub fn start(&self) -> RnnMeState {
        RnnMeState {
            h: Array1::from_elem(self.hidden, 0.1),
            hist: vec![self.bos_id()],
        }
    }

    /// Direct-feature slot for (history n-gram, target). `kind` salts class
    /// targets apart from word targets.
    fn feat_slot(&self, hist: &[usize], order: usize, kind: u64, target: usize) -> usize {
        let mut parts: Vec<u64> = Vec::with_capacity(order + 2);
        parts.push(order as u64);
        for &w in hist.iter().take(order - 1) {
            parts.push(w as u64);
        }
        parts.push(kind);
        parts.push(target as u64);
        (fnv1a(&parts) % self.maxent.len() as u64) as usize
    }

    fn maxent_score(&self, hist: &[usize], kind: u64, target: usize) -> f64 {
        let mut s = 0.0;
        for order in 1..=self.maxent_order {
            if order > 1 && hist.len() < order - 1 {
                break;
            }
            s += self.maxent[self.feat_slot(hist, order, kind, target)];
        }
        s
    }

    /// Class posterior and the per-class word posteriors at this state.
    fn predict(&self, state: &RnnMeState) -> (Array1<f64>, Vec<Array1<f64>>) {
        let h = &state.h;
        let c = self.class_words.len();
        let mut class_logits = Array1::<f64>::zeros(c);
        for k in 0..c {
            let rec = if self.hidden > 0 {
                self.uc.row(k).dot(h)
            } else {
                0.0
            };
            class_logits[k] = rec + self.bc[k] + self.maxent_score(&state.hist, 0, k);
        }
        let class_probs = softmax(&class_logits);
        let mut word_probs = Vec::with_capacity(c);
        for words in &self.class_words {
            let mut logits = Array1::<f64>::zeros(words.len());
            for (j, &w) in words.iter().enumerate() {
                let rec = if self.hidden > 0 {
                    self.uw.row(w).dot(h)
                } else {
                    0.0
                };
                logits[j] = rec + self.bw[w] + self.maxent_score(&state.hist, 1, w);
            }
            word_probs.push(softmax(&logits));
        }
        (class_probs, word_probs)
    }

    /// Natural-log probability of `word` in `state`.
    pub fn word_logprob(&self, state: &RnnMeState, word: &str) -> f64 {
        let w = self.word_id(word);
        let k = self.class_of[w];
        let (pc, pw) = self.predict(state);
        let j = self.class_words[k].iter().position(|&x| x == w).unwrap();
        pc[k].ln() + pw[k][j].ln()
    }

    /// Advance the state by consuming `word` as the next input token.
    pub fn advance(&self, state: &mut RnnMeState, word: &str) {
        let x = self.word_id(word);
        if self.hidden > 0 {
            let mut z = self.wx.row(x).to_owned() + self.wh.dot(&state.h);
            z.mapv_inplace(sigmoid);
            state.h = z;
        }
        state.hist.insert(0, x);
        state.hist.truncate(self.maxent_order.saturating_sub(1).max(1));
    }

    /// Sum of natural-log word probabilities over the sentence, `</s>`
    /// included; unknown words map to `<unk>`.
    pub fn sentence_logprob(&self, words: &[String]) -> f64 {
        let mut state = self.start();
        let mut total = 0.0;
        for w in words {
            total += self.word_logprob(&state, w);
            self.advance(&mut state, w);
        }
        total + self.word_logprob(&state, EOS)
    }

    /// exp of the mean negative natural-log likelihood per token (with
    /// `</s>` counted once per sentence).
    pub fn perplexity(&self, text: &[Vec<String>]) -> Result<f64, LmError> {
        let mut ll = 0.0;
        let mut tokens = 0usize;
        for sentence in text {
            ll += self.sentence_logprob(sentence);
            tokens += sentence.len() + 1;
        }
        if tokens == 0 {
            return Err(LmError::EmptyText);
        }
        Ok((-ll / tokens as f64).exp())
    }

    pub fn write(&self, path: &Path) -> Result<(), LmError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "RNNME v1")?;
        writeln!(w, "hidden {}", self.hidden)?;
        writeln!(w, "classes {}", self.class_words.len())?;
        writeln!(w, "maxent_order {}", self.maxent_order)?;
        writeln!(w, "maxent_hash_size {}", self.maxent.len())?;
        writeln!(w, "vocab {}", self.vocab.len())?;
        for (i, word) in self.vocab.iter().enumerate() {
            writeln!(w, "{} {}", word, self.class_of[i])?;
        }
        writeln!(w, "params")?;
        for arr in [&self.wx, &self.wh, &self.uc, &self.uw] {
            for &v in arr.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for arr in [&self.bc, &self.bw] {
            for &v in arr.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for &v in &self.maxent {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RnnMeLm, LmError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = String::new();
        // The header is line-oriented; read byte-wise until the "params"
        // marker so the binary payload stays untouched.
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte).map_err(|_| LmError::Parse {
                line: 0,
                msg: "truncated header".to_string(),
            })?;
            header.push(byte[0] as char);
            if header.ends_with("params\n") {
                break;
            }
        }
        let mut lines = header.lines();
        let parse = |line: Option<&str>, key: &str| -> Result<usize, LmError> {
            let line = line.ok_or_else(|| LmError::Parse {
                line: 0,
                msg: format!("missing {key}"),
            })?;
            let rest = line.strip_prefix(key).ok_or_else(|| LmError::Parse {
                line: 0,
                msg: format!("expected '{key}', got '{line}'"),
            })?;
            rest.trim().parse().map_err(|_| LmError::Parse {
                line: 0,
                msg: format!("bad {key} value"),
            })
        };
        let magic = lines.next().unwrap_or_default();
        if magic != "RNNME v1" {
            return Err(LmError::Parse {
                line: 1,
                msg: format!("bad magic '{magic}'"),
            });
        }
        let hidden = parse(lines.next(), "hidden ")?;
        let n_classes = parse(lines.next(), "classes ")?;
        let maxent_order = parse(lines.next(), "maxent_order ")?;
        let hash_size = parse(lines.next(), "maxent_hash_size ")?;
        let v = parse(lines.next(), "vocab ")?;
        let mut vocab: Vec<String> = Vec::with_capacity(v);
        let mut class_of: Vec<usize> = Vec::with_capacity(v);
        for i in 0..v {
            let line = lines.next().ok_or_else(|| LmError::Parse {
                line: 6 + i,
                msg: "truncated vocabulary".to_string(),
            })?;
            let (word, class) = line.rsplit_once(' ').ok_or_else(|| LmError::Parse {
                line: 6 + i,
                msg: "bad vocabulary line".to_string(),
            })?;
            vocab.push(word.to_string());
            class_of.push(class.parse().map_err(|_| LmError::Parse {
                line: 6 + i,
                msg: "bad class index".to_string(),
            })?);
        }
        let mut class_words: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (w, &k) in class_of.iter().enumerate() {
            class_words[k].push(w);
        }
        let word_id = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let mut read_vec = |len: usize| -> Result<Vec<f64>, LmError> {
            let mut v = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let v_in = v + 1;
        let wx = Array2::from_shape_vec((v_in, hidden), read_vec(v_in * hidden)?).unwrap();
        let wh = Array2::from_shape_vec((hidden, hidden), read_vec(hidden * hidden)?).unwrap();
        let uc = Array2::from_shape_vec((n_classes, hidden), read_vec(n_classes * hidden)?).unwrap();
        let uw = Array2::from_shape_vec((v, hidden), read_vec(v * hidden)?).unwrap();
        let bc = Array1::from_vec(read_vec(n_classes)?);
        let bw = Array1::from_vec(read_vec(v)?);
        let maxent = read_vec(hash_size)?;
        Ok(RnnMeLm {
            vocab,
            word_id,
            class_of,
            class_words,
            hidden,
            maxent_order,
            wx,
            wh,
            uc,
            bc,
            uw,
            bw,
            maxent,
        })
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|x| (x - max).exp());
    let z = e.sum();
    e /= z;
    e
}

fn init_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.1..0.1))
}

/// Build the predicted vocabulary (top-k words + `<unk>` + `</s>`) and the
/// frequency-balanced class map.
fn build_vocab(
    corpus: &[Vec<String>],
    cfg: &RnnMeConfig,
) -> Result<(Vec<String>, Vec<usize>, Vec<Vec<usize>>), LmError> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for sentence in corpus {
        for w in sentence {
            *freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let mut by_freq: Vec<(&str, u64)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let kept: Vec<(String, u64)> = by_freq
        .iter()
        .take(cfg.vocab_k)
        .map(|(w, f)| (w.to_string(), *f))
        .collect();
    let oov: u64 = by_freq.iter().skip(cfg.vocab_k).map(|(_, f)| f).sum();
    let mut vocab_freqs = kept;
    vocab_freqs.push((UNK.to_string(), oov.max(1)));
    vocab_freqs.push((EOS.to_string(), corpus.len() as u64));
    let class_map = assign_classes(&vocab_freqs, cfg.classes.min(vocab_freqs.len()))?;
    let vocab: Vec<String> = vocab_freqs.into_iter().map(|(w, _)| w).collect();
    let class_of: Vec<usize> = vocab.iter().map(|w| class_map[w]).collect();
    let n_classes = class_of.iter().max().unwrap() + 1;
    let mut class_words = vec![Vec::new(); n_classes];
    for (w, &k) in class_of.iter().enumerate() {
        class_words[k].push(w);
    }
    Ok((vocab, class_of, class_words))
}

/// Truncated-BPTT SGD over the factored softmax plus direct features. The
/// learning rate halves (with a logged warning) once validation entropy has
/// risen for three consecutive epochs.
pub fn train_rnnme(
    corpus: &[Vec<String>],
    valid: &[Vec<String>],
    cfg: &RnnMeConfig,
) -> Result<(RnnMeLm, RnnMeReport), LmError> {
    let (vocab, class_of, class_words) = build_vocab(corpus, cfg)?;
    let v = vocab.len();
    let v_in = v + 1; // extra <s> embedding row
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let mut lm = RnnMeLm {
        word_id: vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect(),
        vocab,
        class_of,
        class_words,
        hidden: h,
        maxent_order: cfg.maxent_order,
        wx: init_matrix(&mut rng, v_in, h),
        wh: init_matrix(&mut rng, h, h),
        uc: init_matrix(&mut rng, cfg.classes.min(v), h),
        bc: Array1::zeros(cfg.classes.min(v)),
        uw: init_matrix(&mut rng, v, h),
        bw: Array1::zeros(v),
        maxent: vec![0.0; cfg.maxent_hash_size],
    };
    let n_classes = lm.class_words.len();
    if lm.uc.nrows() != n_classes {
        lm.uc = init_matrix(&mut rng, n_classes, h);
        lm.bc = Array1::zeros(n_classes);
    }

    let mut lr = cfg.lr;
    let mut valid_entropy = Vec::new();
    let mut lr_schedule = Vec::new();
    let mut rising = 0usize;
    for _epoch in 0..cfg.epochs {
        lr_schedule.push(lr);
        for sentence in corpus {
            train_sentence(&mut lm, sentence, lr, cfg.bptt);
        }
        let ppl = lm.perplexity(valid)?;
        let entropy = ppl.ln() / std::f64::consts::LN_2;
        if let Some(&prev) = valid_entropy.last() {
            if entropy > prev {
                rising += 1;
                if rising >= 3 {
                    lr *= 0.5;
                    rising = 0;
                    eprintln!("train_rnnme: validation entropy rising, halving lr to {lr}");
                }
            } else {
                rising = 0;
            }
        }
        valid_entropy.push(entropy);
        lr *= cfg.lr_decay;
    }
    Ok((
        lm,
        RnnMeReport {
            valid_entropy,
            lr_schedule,
        },
    ))
}

/// One SGD pass over a sentence: per-token forward, output/maxent update,
/// then back-propagation through at most `bptt` unrolled steps.
fn train_sentence(lm: &mut RnnMeLm, sentence: &[String], lr: f64, bptt: usize) {
    let targets: Vec<usize> = sentence
        .iter()
        .map(|w| lm.word_id(w))
        .chain(std::iter::once(lm.word_id(EOS)))
        .collect();
    let mut state = lm.start();
    // Hidden activations and input ids for the truncated window;
    // h_trace[i] is the state *before* step i's input was consumed.
    let mut h_trace: Vec<Array1<f64>> = vec![state.h.clone()];
    let mut x_trace: Vec<usize> = Vec::new();
    for &y in &targets {
        let (pc, pw) = lm.predict(&state);
        let k = lm.class_of[y];
        let j = lm.class_words[k].iter().position(|&x| x == y).unwrap();

        // Output-layer gradients (softmax minus one-hot).
        let mut dlc = pc.clone();
        dlc[k] -= 1.0;
        let mut dlw = pw[k].clone();
        dlw[j] -= 1.0;

        // Gradient into the hidden layer before any weight moves.
        let mut dh = Array1::<f64>::zeros(lm.hidden);
        if lm.hidden > 0 {
            for c in 0..dlc.len() {
                dh.scaled_add(dlc[c], &lm.uc.row(c));
            }
            for (jj, &w) in lm.class_words[k].iter().enumerate() {
                dh.scaled_add(dlw[jj], &lm.uw.row(w));
            }
        }

        // Output blocks and direct features.
        for c in 0..dlc.len() {
            lm.bc[c] -= lr * dlc[c];
            if lm.hidden > 0 {
                let g = dlc[c];
                let mut row = lm.uc.row_mut(c);
                row.scaled_add(-lr * g, &state.h);
            }
            for order in 1..=lm.maxent_order {
                if order > 1 && state.hist.len() < order - 1 {
                    break;
                }
                let slot = lm.feat_slot(&state.hist, order, 0, c);
                lm.maxent[slot] -= lr * dlc[c];
            }
        }
        let class_word_ids: Vec<usize> = lm.class_words[k].clone();
        for (jj, &w) in class_word_ids.iter().enumerate() {
            lm.bw[w] -= lr * dlw[jj];
            if lm.hidden > 0 {
                let g = dlw[jj];
                let mut row = lm.uw.row_mut(w);
                row.scaled_add(-lr * g, &state.h);
            }
            for order in 1..=lm.maxent_order {
                if order > 1 && state.hist.len() < order - 1 {
                    break;
                }
                let slot = lm.feat_slot(&state.hist, order, 1, w);
                lm.maxent[slot] -= lr * dlw[jj];
            }
        }

        // Truncated BPTT through the sigmoid recurrence.
        if lm.hidden > 0 {
            let steps = x_trace.len().min(bptt);
            let mut d = dh;
            for s in 0..steps {
                let i = x_trace.len() - 1 - s;
                // dz = dE/dh_i through the sigmoid at step i.
                let h_i = &h_trace[i + 1];
                let dz = &d * &(h_i * &h_i.mapv(|v| 1.0 - v));
                let mut row = lm.wx.row_mut(x_trace[i]);
                row.scaled_add(-lr, &dz);
                let h_prev = h_trace[i].clone();
                for r in 0..lm.hidden {
                    let g = dz[r];
                    let mut wrow = lm.wh.row_mut(r);
                    wrow.scaled_add(-lr * g, &h_prev);
                }
                d = lm.wh.t().dot(&dz);
            }
        }

        lm.advance(&mut state, &lm.vocab[y].clone());
        x_trace.push(y);
        h_trace.push(state.h.clone());
    }
}

impl crate::decoder::SentenceScorer for RnnMeLm {
    fn sentence_logprob(&self, words: &[String]) -> f64 {
        RnnMeLm::sentence_logprob(self, words)
    }
}
