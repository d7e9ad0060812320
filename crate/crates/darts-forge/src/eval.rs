//! Word error rate scoring and ROVER-style system combination.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference for utterance {0}")]
    EmptyReference(String),
    #[error("system combination needs at least 2 systems, got {0}")]
    TooFewSystems(usize),
}

/// Edit counts from one reference/hypothesis alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference word count.
    pub num_ref: usize,
}

impl EditCounts {
    pub fn total_edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer_percent(&self) -> f64 {
        100.0 * self.total_edits() as f64 / self.num_ref as f64
    }

    fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.num_ref += other.num_ref;
    }
}

/// Levenshtein alignment with unit costs. Ties prefer substitutions over
/// insert+delete pairs (a substitution costs 1, the pair costs 2, so the
/// minimal-cost alignment already prefers it; the traceback additionally
/// breaks exact ties toward the diagonal).
pub fn edit_counts(reference: &[String], hypothesis: &[String]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    // dp[i][j]: edits aligning ref[..i] with hyp[..j].
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }
    // Traceback, preferring matches/substitutions on ties.
    let mut counts = EditCounts {
        num_ref: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: EditCounts,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub corpus: EditCounts,
}

impl ScoreReport {
    pub fn wer_percent(&self) -> f64 {
        self.corpus.wer_percent()
    }

    /// Machine-readable lines: `id S D I N WER` per utterance plus a TOTAL row.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format!(
                "{} {} {} {} {} {:.2}\n",
                u.id,
                u.counts.substitutions,
                u.counts.deletions,
                u.counts.insertions,
                u.counts.num_ref,
                u.counts.wer_percent()
            ));
        }
        out.push_str(&format!(
            "TOTAL {} {} {} {} {:.2}\n",
            self.corpus.substitutions,
            self.corpus.deletions,
            self.corpus.insertions,
            self.corpus.num_ref,
            self.corpus.wer_percent()
        ));
        out
    }
}

/// Score a batch of (id, reference, hypothesis) triples.
pub fn score_corpus(
    triples: &[(String, Vec<String>, Vec<String>)],
) -> Result<ScoreReport, EvalError> {
    let mut report = ScoreReport::default();
    for (id, reference, hypothesis) in triples {
        if reference.is_empty() {
            return Err(EvalError::EmptyReference(id.clone()));
        }
        let counts = edit_counts(reference, hypothesis);
        report.corpus.add(&counts);
        report.utterances.push(UtteranceScore {
            id: id.clone(),
            counts,
        });
    }
    Ok(report)
}

/// One slot of the word transition network: per-system candidate words
/// (None = that system skips the slot).
#[derive(Debug, Clone)]
struct Slot {
    words: Vec<Option<String>>,
}

/// ROVER combination: align the one-best outputs into a word transition
/// network by iterative Levenshtein alignment against the growing network,
/// then take a weighted plurality vote per slot. Ties go to the
/// first-listed system.
pub fn combine(systems: &[Vec<String>], weights: &[f64]) -> Result<Vec<String>, EvalError> {
    if systems.len() < 2 {
        return Err(EvalError::TooFewSystems(systems.len()));
    }
    let weights: Vec<f64> = if weights.len() == systems.len() {
        weights.to_vec()
    } else {
        vec![1.0; systems.len()]
    };
    // Seed the network with system 0.
    let mut network: Vec<Slot> = systems[0]
        .iter()
        .map(|w| Slot {
            words: vec![Some(w.clone())],
        })
        .collect();
    for sys in systems.iter().skip(1) {
        network = align_into_network(&network, sys);
    }
    // Weighted plurality vote per slot; a None vote is a vote for deletion.
    let mut out = Vec::new();
    for slot in &network {
        let mut tallies: Vec<(Option<&String>, f64)> = Vec::new();
        for (i, w) in slot.words.iter().enumerate() {
            let key = w.as_ref();
            match tallies.iter_mut().find(|(k, _)| *k == key) {
                Some((_, t)) => *t += weights[i],
                None => tallies.push((key, weights[i])),
            }
        }
        // First insertion order breaks ties, which favors earlier systems.
        let best = tallies
            .iter()
            .enumerate()
            .max_by(|(ia, (_, ta)), (ib, (_, tb))| {
                ta.partial_cmp(tb)
                    .unwrap()
                    .then(ib.cmp(ia)) // earlier entry wins ties
            })
            .map(|(_, (k, _))| *k)
            .unwrap();
        if let Some(w) = best {
            out.push(w.clone());
        }
    }
    Ok(out)
}

/// Align one hypothesis into the network with Levenshtein distance where a
/// hypothesis word matches a slot if any of the slot's words equal it.
fn align_into_network(network: &[Slot], hyp: &[String]) -> Vec<Slot> {
    let n = network.len();
    let m = hyp.len();
    let sys_count = network.first().map(|s| s.words.len()).unwrap_or(0);
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let matched = network[i - 1]
                .words
                .iter()
                .any(|w| w.as_deref() == Some(hyp[j - 1].as_str()));
            let sub = dp[i - 1][j - 1] + usize::from(!matched);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }
    // Traceback building the merged network back-to-front.
    let mut merged: Vec<Slot> = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let matched = network[i - 1]
                .words
                .iter()
                .any(|w| w.as_deref() == Some(hyp[j - 1].as_str()));
            if dp[i][j] == dp[i - 1][j - 1] + usize::from(!matched) {
                let mut slot = network[i - 1].clone();
                slot.words.push(Some(hyp[j - 1].clone()));
                merged.push(slot);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            // Network slot with no word from the new hypothesis.
            let mut slot = network[i - 1].clone();
            slot.words.push(None);
            merged.push(slot);
            i -= 1;
        } else {
            // New-hypothesis word with no slot: all previous systems skip.
            let mut words = vec![None; sys_count];
            words.push(Some(hyp[j - 1].clone()));
            merged.push(Slot { words });
            j -= 1;
        }
    }
    merged.reverse();
    merged
}
