//! Kneser-Ney backoff n-gram language models: counting, smoothing, pruning,
//! perplexity, and ARPA interchange. The class-based RNN-ME model lives in
//! [`rnnme`].

pub mod rnnme;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("empty text")]
    EmptyText,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid order {0}")]
    InvalidOrder(usize),
    #[error("n_classes must be >= 1")]
    BadClassCount,
    #[error("n_classes {n} exceeds vocabulary size {v}")]
    TooManyClasses { n: usize, v: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Gram = Vec<String>;

/// Raw and continuation counts for orders 1..=order.
#[derive(Debug, Clone)]
pub struct CountTables {
    pub order: usize,
    /// counts[n-1]: raw n-gram counts over boundary-padded sentences.
    pub counts: Vec<HashMap<Gram, u64>>,
    /// continuation[n-1][g] = number of distinct left extensions of g
    /// observed at order n+1 (defined for n < order).
    pub continuation: Vec<HashMap<Gram, u64>>,
}

/// Exact n-gram counts with one `<s>` pad and a closing `</s>` per sentence.
pub fn count_ngrams<'a, I>(corpus: I, order: usize) -> Result<CountTables, LmError>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if order == 0 {
        return Err(LmError::InvalidOrder(order));
    }
    let mut counts: Vec<HashMap<Gram, u64>> = vec![HashMap::new(); order];
    let mut any = false;
    for sentence in corpus {
        any = true;
        let mut padded: Vec<String> = Vec::with_capacity(sentence.len() + 2);
        padded.push(BOS.to_string());
        padded.extend(sentence.iter().cloned());
        padded.push(EOS.to_string());
        for n in 1..=order {
            for win in padded.windows(n) {
                *counts[n - 1].entry(win.to_vec()).or_insert(0) += 1;
            }
        }
    }
    if !any {
        return Err(LmError::EmptyCorpus);
    }
    let mut continuation: Vec<HashMap<Gram, u64>> = vec![HashMap::new(); order.saturating_sub(1)];
    for n in 1..order {
        let mut seen: HashMap<Gram, BTreeSet<String>> = HashMap::new();
        for gram in counts[n].keys() {
            seen.entry(gram[1..].to_vec())
                .or_default()
                .insert(gram[0].clone());
        }
        for (g, lefts) in seen {
            continuation[n - 1].insert(g, lefts.len() as u64);
        }
    }
    Ok(CountTables {
        order,
        counts,
        continuation,
    })
}

impl CountTables {
    /// Effective KN count: raw counts at the highest order and for n-grams
    /// anchored at `<s>` (which can never be left-extended), continuation
    /// counts elsewhere.
    pub fn adjusted(&self, gram: &[String]) -> u64 {
        let n = gram.len();
        if n == self.order || gram[0] == BOS {
            self.counts[n - 1].get(gram).copied().unwrap_or(0)
        } else {
            self.continuation[n - 1].get(gram).copied().unwrap_or(0)
        }
    }

    fn grams_of_order(&self, n: usize) -> Vec<Gram> {
        let mut grams: Vec<Gram> = self.counts[n - 1]
            .keys()
            .filter(|g| self.adjusted(g) > 0)
            .cloned()
            .collect();
        grams.sort();
        grams
    }
}

/// One stored n-gram: log10 probability and optional log10 backoff weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramEntry {
    pub logp: f64,
    pub backoff: Option<f64>,
}

/// Backoff n-gram model in ARPA semantics, natural habitat of `build_G`.
#[derive(Debug, Clone)]
pub struct ArpaLm {
    pub order: usize,
    /// tables[n-1]: n-gram -> entry.
    pub tables: Vec<BTreeMap<Gram, NgramEntry>>,
    /// Closed prediction vocabulary (includes `</s>` and `<unk>`, not `<s>`).
    pub vocab: BTreeSet<String>,
    /// Training counts, kept for likelihood-weighted pruning when available.
    pub train_counts: Option<CountTables>,
}

impl ArpaLm {
    /// log10 P(w | history) with standard longest-match backoff.
    pub fn log10_prob(&self, history: &[String], word: &str) -> f64 {
        let max_hist = (self.order - 1).min(history.len());
        let hist = &history[history.len() - max_hist..];
        self.lookup(hist, word)
    }

    fn lookup(&self, hist: &[String], word: &str) -> f64 {
        let n = hist.len() + 1;
        let mut gram: Gram = hist.to_vec();
        gram.push(word.to_string());
        if let Some(e) = self.tables[n - 1].get(&gram) {
            return e.logp;
        }
        if hist.is_empty() {
            // Closed vocabulary: unseen words map to <unk>.
            if word != UNK {
                return self.lookup(&[], UNK);
            }
            return f64::NEG_INFINITY;
        }
        let bo = self
            .tables
            .get(hist.len() - 1)
            .and_then(|t| t.get(hist))
            .and_then(|e| e.backoff)
            .unwrap_or(0.0);
        bo + self.lookup(&hist[1..], word)
    }

    /// Map out-of-vocabulary tokens to `<unk>`.
    pub fn normalize_token<'a>(&'a self, token: &'a str) -> &'a str {
        if self.vocab.contains(token) {
            token
        } else {
            UNK
        }
    }

    pub fn num_ngrams(&self) -> usize {
        self.tables.iter().map(|t| t.len()).sum()
    }
}

/// Ney discount estimate with the degenerate-corpus fallback.
fn estimate_discount(adjusted_counts: &[u64]) -> f64 {
    let n1 = adjusted_counts.iter().filter(|&&c| c == 1).count() as f64;
    let n2 = adjusted_counts.iter().filter(|&&c| c == 2).count() as f64;
    // A zero discount would strip all interpolation mass (and with it the
    // <unk> guarantee), so n1 == 0 degenerates to 0.5 as well.
    if n1 == 0.0 {
        eprintln!("warning: degenerate counts-of-counts, falling back to discount 0.5");
        0.5
    } else {
        n1 / (n1 + 2.0 * n2)
    }
}

/// Interpolated Kneser-Ney estimation.
///
/// Per-order discounts default to n1/(n1+2*n2) over the adjusted counts.
/// Lower orders use continuation counts; the unigram interpolates with a
/// uniform distribution over the closed vocabulary so `<unk>` receives mass.
pub fn kneser_ney(
    counts: &CountTables,
    order: usize,
    discounts: Option<&[f64]>,
) -> Result<ArpaLm, LmError> {
    if order == 0 || order > counts.order {
        return Err(LmError::InvalidOrder(order));
    }
    let mut vocab: BTreeSet<String> = counts.counts[0]
        .keys()
        .map(|g| g[0].clone())
        .filter(|w| w != BOS)
        .collect();
    vocab.insert(EOS.to_string());
    vocab.insert(UNK.to_string());
    let vocab_size = vocab.len() as f64;

    let mut d_n = Vec::with_capacity(order);
    for n in 1..=order {
        if let Some(ds) = discounts {
            d_n.push(ds[n - 1]);
        } else {
            let adj: Vec<u64> = counts
                .grams_of_order(n)
                .iter()
                .filter(|g| g[0] != BOS || n == 1)
                .map(|g| counts.adjusted(g))
                .collect();
            d_n.push(estimate_discount(&adj));
        }
    }

    // Interpolated probability, recursive over orders.
    fn prob(
        counts: &CountTables,
        d_n: &[f64],
        vocab_size: f64,
        gram: &[String],
    ) -> f64 {
        let n = gram.len();
        let d = d_n[n - 1];
        if n == 1 {
            let total: f64 = counts
                .counts[if counts.order > 1 { 1 } else { 0 }]
                .is_empty()
                .then_some(0.0)
                .unwrap_or_else(|| {
                    counts.counts[0]
                        .keys()
                        .filter(|g| g[0] != BOS)
                        .map(|g| counts.adjusted(g) as f64)
                        .sum()
                });
            if total == 0.0 {
                return 1.0 / vocab_size;
            }
            let a = counts.adjusted(gram) as f64;
            let distinct = counts.counts[0]
                .keys()
                .filter(|g| g[0] != BOS && counts.adjusted(g) > 0)
                .count() as f64;
            let lambda = d * distinct / total;
            (a - d).max(0.0) / total + lambda / vocab_size
        } else {
            let hist = &gram[..n - 1];
            // Denominator and extension count over the same adjusted counts.
            let mut total = 0.0;
            let mut distinct = 0.0;
            for g in counts.counts[n - 1].keys() {
                if g[..n - 1] == *hist {
                    let a = counts.adjusted(g) as f64;
                    if a > 0.0 {
                        total += a;
                        distinct += 1.0;
                    }
                }
            }
            let lower = prob(counts, d_n, vocab_size, &gram[1..]);
            if total == 0.0 {
                return lower;
            }
            let a = counts.adjusted(gram) as f64;
            let lambda = d * distinct / total;
            (a - d).max(0.0) / total + lambda * lower
        }
    }

    // Backoff weight of a history = its interpolation weight.
    fn lambda_of(counts: &CountTables, d_n: &[f64], hist: &[String]) -> f64 {
        let n = hist.len() + 1;
        let d = d_n[n - 1];
        let mut total = 0.0;
        let mut distinct = 0.0;
        for g in counts.counts[n - 1].keys() {
            if g[..n - 1] == *hist {
                let a = counts.adjusted(g) as f64;
                if a > 0.0 {
                    total += a;
                    distinct += 1.0;
                }
            }
        }
        if total == 0.0 {
            1.0
        } else {
            d * distinct / total
        }
    }

    let mut tables: Vec<BTreeMap<Gram, NgramEntry>> = vec![BTreeMap::new(); order];
    for n in 1..=order {
        for gram in counts.grams_of_order(n) {
            if gram[n - 1] == BOS && n == 1 {
                // <s> is never predicted; dummy entry holds its backoff.
                continue;
            }
            let p = prob(counts, &d_n, vocab_size, &gram);
            tables[n - 1].insert(
                gram,
                NgramEntry {
                    logp: p.log10(),
                    backoff: None,
                },
            );
        }
    }
    // Unigram entry for <unk> (interpolation mass only).
    let p_unk = prob(counts, &d_n, vocab_size, &[UNK.to_string()]);
    tables[0].insert(
        vec![UNK.to_string()],
        NgramEntry {
            logp: p_unk.log10(),
            backoff: None,
        },
    );
    // <s> context entry, probability conventionally -99.
    tables[0].insert(
        vec![BOS.to_string()],
        NgramEntry {
            logp: -99.0,
            backoff: None,
        },
    );

    // Attach backoff weights to histories that extend.
    for n in 2..=order {
        let hists: BTreeSet<Gram> = tables[n - 1].keys().map(|g| g[..n - 1].to_vec()).collect();
        for hist in hists {
            let lambda = lambda_of(counts, &d_n, &hist);
            let entry = tables[n - 2].entry(hist.clone()).or_insert(NgramEntry {
                logp: -99.0,
                backoff: None,
            });
            entry.backoff = Some(lambda.log10());
        }
    }

    Ok(ArpaLm {
        order,
        tables,
        vocab,
        train_counts: Some(counts.clone()),
    })
}

/// Remove n-grams whose removal shifts the training-corpus log-likelihood by
/// less than `threshold` (in log10 per occurrence mass); mass moves to the
/// backoff path and histories are renormalized.
pub fn prune(lm: &ArpaLm, threshold: f64) -> ArpaLm {
    let mut out = lm.clone();
    if threshold <= 0.0 {
        return out;
    }
    for n in (2..=out.order).rev() {
        let grams: Vec<Gram> = out.tables[n - 1].keys().cloned().collect();
        for gram in grams {
            // Keep histories of surviving higher-order n-grams.
            if n < out.order {
                let has_children = out.tables[n]
                    .keys()
                    .any(|g| g[..n] == gram[..] || g[1..=n] == gram[..]);
                if has_children {
                    continue;
                }
            }
            let hist = &gram[..n - 1];
            let word = &gram[n - 1];
            let direct = out.tables[n - 1][&gram].logp;
            let bo = out
                .tables
                .get(n - 2)
                .and_then(|t| t.get(hist))
                .and_then(|e| e.backoff)
                .unwrap_or(0.0);
            let fallback = bo + out.lookup(&hist[1..], word);
            let weight = out
                .train_counts
                .as_ref()
                .and_then(|c| c.counts[n - 1].get(&gram).copied())
                .unwrap_or(1) as f64;
            let delta = weight * (direct - fallback);
            if delta < threshold {
                out.tables[n - 1].remove(&gram);
            }
        }
    }
    renormalize_backoffs(&mut out);
    out
}

/// Recompute backoff weights so every history's distribution sums to one.
fn renormalize_backoffs(lm: &mut ArpaLm) {
    for n in 2..=lm.order {
        let hists: BTreeSet<Gram> = lm.tables[n - 1].keys().map(|g| g[..n - 1].to_vec()).collect();
        // Drop stale backoffs for histories that no longer extend.
        let stale: Vec<Gram> = lm.tables[n - 2]
            .iter()
            .filter(|(g, e)| e.backoff.is_some() && !hists.contains(*g))
            .map(|(g, _)| g.clone())
            .collect();
        for g in stale {
            if let Some(e) = lm.tables[n - 2].get_mut(&g) {
                e.backoff = None;
            }
        }
        for hist in hists {
            let mut kept = 0.0f64;
            let mut lower = 0.0f64;
            let words: Vec<String> = lm.tables[n - 1]
                .range(hist.clone()..)
                .take_while(|(g, _)| g[..n - 1] == hist[..])
                .map(|(g, _)| g[n - 1].clone())
                .collect();
            for w in &words {
                let mut gram = hist.clone();
                gram.push(w.clone());
                kept += 10f64.powf(lm.tables[n - 1][&gram].logp);
                lower += 10f64.powf(lm.lookup(&hist[1..], w));
            }
            let bo = if lower < 1.0 - 1e-12 {
                ((1.0 - kept) / (1.0 - lower)).max(1e-12)
            } else {
                1.0
            };
            if let Some(e) = lm.tables[n - 2].get_mut(&hist) {
                e.backoff = Some(bo.log10());
            }
        }
    }
}

/// Perplexity of tokenized text (per token, `</s>` included, OOVs as `<unk>`).
pub fn perplexity<'a, I>(lm: &ArpaLm, text: I) -> Result<f64, LmError>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut log10_total = 0.0;
    let mut tokens = 0usize;
    for sentence in text {
        let mut hist: Vec<String> = vec![BOS.to_string()];
        for w in sentence.iter().map(|w| lm.normalize_token(w)) {
            log10_total += lm.log10_prob(&hist, w);
            hist.push(w.to_string());
            tokens += 1;
        }
        log10_total += lm.log10_prob(&hist, EOS);
        tokens += 1;
    }
    if tokens == 0 {
        return Err(LmError::EmptyText);
    }
    Ok(10f64.powf(-log10_total / tokens as f64))
}

/// Natural-log sentence score including boundaries.
pub fn sentence_logprob(lm: &ArpaLm, sentence: &[String]) -> f64 {
    let mut hist: Vec<String> = vec![BOS.to_string()];
    let mut total = 0.0;
    for w in sentence.iter().map(|w| lm.normalize_token(w)) {
        total += lm.log10_prob(&hist, w);
        hist.push(w.to_string());
    }
    total += lm.log10_prob(&hist, EOS);
    total * std::f64::consts::LN_10
}

pub fn write_arpa(lm: &ArpaLm, path: &Path) -> Result<(), LmError> {
    std::fs::write(path, arpa_to_string(lm))?;
    Ok(())
}

pub fn arpa_to_string(lm: &ArpaLm) -> String {
    let mut out = String::new();
    out.push_str("\\data\\\n");
    for n in 1..=lm.order {
        writeln!(out, "ngram {}={}", n, lm.tables[n - 1].len()).unwrap();
    }
    for n in 1..=lm.order {
        writeln!(out, "\n\\{n}-grams:").unwrap();
        for (gram, e) in &lm.tables[n - 1] {
            match e.backoff {
                Some(bo) => writeln!(out, "{}\t{}\t{}", e.logp, gram.join(" "), bo).unwrap(),
                None => writeln!(out, "{}\t{}", e.logp, gram.join(" ")).unwrap(),
            }
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn read_arpa(path: &Path) -> Result<ArpaLm, LmError> {
    arpa_from_string(&std::fs::read_to_string(path)?)
}

pub fn arpa_from_string(text: &str) -> Result<ArpaLm, LmError> {
    let mut declared: Vec<usize> = Vec::new();
    let mut tables: Vec<BTreeMap<Gram, NgramEntry>> = Vec::new();
    let mut section: Option<usize> = None;
    let mut in_data = false;
    let mut ended = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line == "\\data\\" {
            in_data = true;
            continue;
        }
        if line == "\\end\\" {
            ended = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            if let Some(n_str) = rest.strip_suffix("-grams:") {
                let n: usize = n_str.parse().map_err(|_| LmError::Parse {
                    line: lineno,
                    msg: format!("bad section header `{line}`"),
                })?;
                if n == 0 || n > declared.len() {
                    return Err(LmError::Parse {
                        line: lineno,
                        msg: format!("section order {n} out of range"),
                    });
                }
                section = Some(n);
                in_data = false;
                continue;
            }
            return Err(LmError::Parse {
                line: lineno,
                msg: format!("unknown directive `{line}`"),
            });
        }
        if in_data {
            let rest = line.strip_prefix("ngram ").ok_or(LmError::Parse {
                line: lineno,
                msg: "expected `ngram N=count`".into(),
            })?;
            let (n, count) = rest.split_once('=').ok_or(LmError::Parse {
                line: lineno,
                msg: "expected `ngram N=count`".into(),
            })?;
            let n: usize = n.trim().parse().map_err(|_| LmError::Parse {
                line: lineno,
                msg: "bad ngram order".into(),
            })?;
            let count: usize = count.trim().parse().map_err(|_| LmError::Parse {
                line: lineno,
                msg: "bad ngram count".into(),
            })?;
            if n != declared.len() + 1 {
                return Err(LmError::Parse {
                    line: lineno,
                    msg: "non-consecutive ngram orders in \\data\\".into(),
                });
            }
            declared.push(count);
            tables.push(BTreeMap::new());
            continue;
        }
        let n = section.ok_or(LmError::Parse {
            line: lineno,
            msg: "n-gram line outside any section".into(),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(LmError::Parse {
                line: lineno,
                msg: "expected `logp<TAB>ngram[<TAB>backoff]`".into(),
            });
        }
        let logp: f64 = fields[0].parse().map_err(|_| LmError::Parse {
            line: lineno,
            msg: "bad log probability".into(),
        })?;
        let gram: Gram = fields[1].split(' ').map(|w| w.to_string()).collect();
        if gram.len() != n {
            return Err(LmError::Parse {
                line: lineno,
                msg: format!("{}-token n-gram in \\{n}-grams: section", gram.len()),
            });
        }
        let backoff = match fields.get(2) {
            Some(b) => Some(b.parse::<f64>().map_err(|_| LmError::Parse {
                line: lineno,
                msg: "bad backoff weight".into(),
            })?),
            None => None,
        };
        tables[n - 1].insert(gram, NgramEntry { logp, backoff });
    }
    if !ended || tables.is_empty() {
        return Err(LmError::Parse {
            line: 0,
            msg: "missing \\data\\ or \\end\\ section".into(),
        });
    }
    for (n, &count) in declared.iter().enumerate() {
        if tables[n].len() != count {
            return Err(LmError::Parse {
                line: 0,
                msg: format!(
                    "\\data\\ declares {} {}-grams, found {}",
                    count,
                    n + 1,
                    tables[n].len()
                ),
            });
        }
    }
    let vocab: BTreeSet<String> = tables[0]
        .keys()
        .map(|g| g[0].clone())
        .filter(|w| w != BOS)
        .collect();
    Ok(ArpaLm {
        order: tables.len(),
        tables,
        vocab,
        train_counts: None,
    })
}

/// Frequency-balanced class assignment: words sorted by descending frequency,
/// partitioned greedily into classes of roughly equal total mass.
pub fn assign_classes(
    vocab_freqs: &[(String, u64)],
    n_classes: usize,
) -> Result<HashMap<String, usize>, LmError> {
    if n_classes < 1 {
        return Err(LmError::BadClassCount);
    }
    if n_classes > vocab_freqs.len() {
        return Err(LmError::TooManyClasses {
            n: n_classes,
            v: vocab_freqs.len(),
        });
    }
    let mut sorted: Vec<(String, u64)> = vocab_freqs.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut remaining_mass: u64 = sorted.iter().map(|(_, f)| *f).sum();
    let mut map = HashMap::new();
    let mut class = 0usize;
    let mut mass = 0u64;
    let mut target = remaining_mass as f64 / n_classes as f64;
    for (i, (word, freq)) in sorted.iter().enumerate() {
        let remaining_words = sorted.len() - i;
        let remaining_classes = n_classes - class;
        // Close the class when adding the next word overshoots the target by
        // more than stopping undershoots it, or when each later class needs
        // one of the remaining words.
        let must_close = remaining_words == remaining_classes;
        let overshoot = (mass + freq) as f64 - target;
        let undershoot = target - mass as f64;
        if class + 1 < n_classes && mass > 0 && (must_close || overshoot.abs() > undershoot.abs())
        {
            class += 1;
            target = remaining_mass as f64 / (n_classes - class) as f64;
            mass = 0;
        }
        map.insert(word.clone(), class);
        mass += freq;
        remaining_mass -= freq;
    }
    Ok(map)
}
