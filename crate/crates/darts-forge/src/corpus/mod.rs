//! Synthetic-corpus generation, transcript handling, and grapheme lexicon
//! construction.
//!
//! The toy language stands in for a real speech database: every grapheme has a
//! prototype feature vector, utterances are prototype sequences plus Gaussian
//! noise, and the generating boundaries are kept as hidden ground truth so
//! alignment quality can be measured.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use thiserror::Error;

/// Reserved silence grapheme; never part of `Lexicon::grapheme_inventory`.
pub const SILENCE: &str = "SIL";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no vocabulary")]
    NoVocabulary,
    #[error("invalid toy spec: {0}")]
    InvalidSpec(String),
    #[error("manifest parse error at line {0}")]
    ManifestParse(usize),
    #[error("lexicon parse error at line {0}")]
    LexiconParse(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Audio payload of an utterance: a raw waveform or pregenerated features.
#[derive(Debug, Clone)]
pub enum Audio {
    Waveform { samples: Vec<f64>, sample_rate: u32 },
    Features(Array2<f64>),
}

/// The unit of all processing.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub audio: Audio,
    /// Word sequence; empty for unlabeled utterances.
    pub transcript: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizePolicy {
    None,
    StripPunct,
}

/// Text normalization. The default policy leaves tokens untouched; strip-punct
/// removes punctuation-only tokens.
pub fn normalize_text(text: &[String], policy: NormalizePolicy) -> Vec<String> {
    match policy {
        NormalizePolicy::None => text.to_vec(),
        NormalizePolicy::StripPunct => text
            .iter()
            .filter(|tok| !tok.chars().all(|c| c.is_ascii_punctuation()))
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub word: String,
    /// Grapheme sequence, excluding any disambiguation symbol.
    pub graphemes: Vec<String>,
    /// 1-based disambiguation index for duplicated pronunciations.
    pub disambig: Option<u32>,
}

/// Grapheme pronunciation dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub entries: BTreeMap<String, LexiconEntry>,
    /// Ordered symbol set of real graphemes; excludes epsilon, silence and
    /// disambiguation symbols.
    pub grapheme_inventory: Vec<String>,
    /// Number of disambiguation symbols in use (#1..#k).
    pub disambiguation_count: u32,
}

impl Lexicon {
    /// Build a lexicon from explicit (word, pronunciation) pairs. Duplicate
    /// pronunciations across distinct words receive #1..#k suffixes.
    pub fn from_entries(pairs: Vec<(String, Vec<String>)>) -> Result<Lexicon, CorpusError> {
        if pairs.is_empty() {
            return Err(CorpusError::NoVocabulary);
        }
        let mut inventory: Vec<String> = Vec::new();
        let mut seen_graphemes: HashSet<String> = HashSet::new();
        let mut by_pron: HashMap<Vec<String>, u32> = HashMap::new();
        let mut entries = BTreeMap::new();
        let mut max_disambig = 0u32;
        // Sort for deterministic disambiguation assignment.
        let mut pairs = pairs;
        pairs.sort();
        pairs.dedup();
        for (word, graphemes) in pairs {
            if graphemes.is_empty() {
                return Err(CorpusError::InvalidSpec(format!(
                    "empty pronunciation for `{word}`"
                )));
            }
            if entries.contains_key(&word) {
                continue;
            }
            for g in &graphemes {
                if seen_graphemes.insert(g.clone()) {
                    inventory.push(g.clone());
                }
            }
            let dup = by_pron.entry(graphemes.clone()).or_insert(0);
            *dup += 1;
            let disambig = if *dup > 1 {
                let k = *dup - 1;
                max_disambig = max_disambig.max(k);
                Some(k)
            } else {
                None
            };
            entries.insert(
                word.clone(),
                LexiconEntry {
                    word,
                    graphemes,
                    disambig,
                },
            );
        }
        inventory.sort();
        Ok(Lexicon {
            entries,
            grapheme_inventory: inventory,
            disambiguation_count: max_disambig,
        })
    }

    pub fn disambig_symbols(&self) -> Vec<String> {
        (1..=self.disambiguation_count)
            .map(|k| format!("#{k}"))
            .collect()
    }

    /// `word<TAB>g1 g2 ...` lines (disambiguation suffix appended when set).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for entry in self.entries.values() {
            let mut pron = entry.graphemes.join(" ");
            if let Some(k) = entry.disambig {
                write!(pron, " #{k}").unwrap();
            }
            writeln!(out, "{}\t{}", entry.word, pron).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Lexicon, CorpusError> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or(CorpusError::LexiconParse(lineno + 1))?;
            let graphemes: Vec<String> = pron
                .split_whitespace()
                .filter(|g| !g.starts_with('#'))
                .map(|g| g.to_string())
                .collect();
            if graphemes.is_empty() {
                return Err(CorpusError::LexiconParse(lineno + 1));
            }
            pairs.push((word.to_string(), graphemes));
        }
        Lexicon::from_entries(pairs)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Lexicon, CorpusError> {
        Lexicon::from_text(&std::fs::read_to_string(path)?)
    }
}

/// One entry per unique word; the pronunciation is its character sequence.
pub fn build_grapheme_lexicon<'a, I>(transcripts: I) -> Result<Lexicon, CorpusError>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for transcript in transcripts {
        for word in transcript {
            if seen.insert(word.clone()) {
                let graphemes: Vec<String> = word.chars().map(|c| c.to_string()).collect();
                pairs.push((word.clone(), graphemes));
            }
        }
    }
    if pairs.is_empty() {
        return Err(CorpusError::NoVocabulary);
    }
    Lexicon::from_entries(pairs)
}

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLanguageSpec {
    pub vocab_size: usize,
    pub grapheme_count: usize,
    pub utterances_train: usize,
    pub utterances_dev: usize,
    pub utterances_eval: usize,
    pub utterances_unlabeled: usize,
    pub frames_per_grapheme_min: usize,
    pub frames_per_grapheme_max: usize,
    pub prototype_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub speakers: usize,
    pub words_per_utterance_min: usize,
    pub words_per_utterance_max: usize,
    /// Probability of inserting silence between words.
    pub silence_prob: f64,
    /// Standard deviation of the per-speaker offset vector.
    pub speaker_sigma: f64,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        ToyLanguageSpec {
            vocab_size: 20,
            grapheme_count: 8,
            utterances_train: 500,
            utterances_dev: 50,
            utterances_eval: 50,
            utterances_unlabeled: 0,
            frames_per_grapheme_min: 3,
            frames_per_grapheme_max: 8,
            prototype_dim: 16,
            noise_sigma: 0.3,
            seed: 7,
            speakers: 8,
            words_per_utterance_min: 3,
            words_per_utterance_max: 6,
            silence_prob: 0.2,
            speaker_sigma: 0.15,
        }
    }
}

impl ToyLanguageSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab_size < 2 {
            return Err(CorpusError::InvalidSpec("vocab_size must be >= 2".into()));
        }
        if self.prototype_dim < 1 {
            return Err(CorpusError::InvalidSpec("prototype_dim must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(CorpusError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        if self.grapheme_count < 2 || self.grapheme_count > 26 {
            return Err(CorpusError::InvalidSpec(
                "grapheme_count must be in 2..=26".into(),
            ));
        }
        if self.frames_per_grapheme_min < 1
            || self.frames_per_grapheme_max < self.frames_per_grapheme_min
        {
            return Err(CorpusError::InvalidSpec(
                "frames_per_grapheme range invalid".into(),
            ));
        }
        if self.words_per_utterance_min < 1
            || self.words_per_utterance_max < self.words_per_utterance_min
        {
            return Err(CorpusError::InvalidSpec(
                "words_per_utterance range invalid".into(),
            ));
        }
        if self.speakers < 1 {
            return Err(CorpusError::InvalidSpec("speakers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hidden ground truth: per-utterance grapheme segments (grapheme, start
/// frame, end frame exclusive).
pub type Boundaries = Vec<(String, usize, usize)>;

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub spec: ToyLanguageSpec,
    pub words: Vec<String>,
    /// Row per grapheme in `grapheme_order`, final row is silence.
    pub prototypes: Array2<f64>,
    pub grapheme_order: Vec<String>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    pub boundaries: HashMap<String, Boundaries>,
    pub speaker_offsets: HashMap<String, Array1<f64>>,
}

impl ToyCorpus {
    pub fn splits(&self) -> [(&'static str, &[Utterance]); 4] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("eval", &self.eval),
            ("unlabeled", &self.unlabeled),
        ]
    }
}

fn gen_words(rng: &mut ChaCha20Rng, spec: &ToyLanguageSpec) -> Vec<String> {
    let graphemes: Vec<char> = (0..spec.grapheme_count)
        .map(|i| (b'a' + i as u8) as char)
        .collect();
    let mut words = Vec::new();
    let mut seen = HashSet::new();
    while words.len() < spec.vocab_size {
        let len = rng.gen_range(2..=4);
        let w: String = (0..len)
            .map(|_| graphemes[rng.gen_range(0..graphemes.len())])
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Deterministic synthetic corpus: same spec (and seed) gives byte-identical
/// manifests and features.
pub fn synthesize_toy_corpus(spec: &ToyLanguageSpec) -> Result<ToyCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let words = gen_words(&mut rng, spec);

    let grapheme_order: Vec<String> = (0..spec.grapheme_count)
        .map(|i| ((b'a' + i as u8) as char).to_string())
        .collect();
    let n_protos = spec.grapheme_count + 1; // + silence
    let d = spec.prototype_dim;
    let mut prototypes = Array2::<f64>::zeros((n_protos, d));
    for mut row in prototypes.rows_mut() {
        for v in row.iter_mut() {
            *v = sample_gauss(&mut rng);
        }
    }
    // Scale so the minimum pairwise distance clears the noise level.
    let target = (4.0 * spec.noise_sigma).max(1.0);
    let mut min_dist = f64::INFINITY;
    for i in 0..n_protos {
        for j in (i + 1)..n_protos {
            let diff = &prototypes.row(i) - &prototypes.row(j);
            min_dist = min_dist.min(diff.dot(&diff).sqrt());
        }
    }
    if min_dist > 0.0 && min_dist < target {
        prototypes *= target / min_dist;
    }

    let mut speaker_offsets = HashMap::new();
    for s in 0..spec.speakers {
        let offset =
            Array1::from_iter((0..d).map(|_| sample_gauss(&mut rng) * spec.speaker_sigma));
        speaker_offsets.insert(format!("spk{s}"), offset);
    }

    let grapheme_index: HashMap<&str, usize> = grapheme_order
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();

    let mut boundaries = HashMap::new();
    let make_split = |rng: &mut ChaCha20Rng,
                          name: &str,
                          count: usize,
                          labeled: bool,
                          boundaries: &mut HashMap<String, Boundaries>|
     -> Vec<Utterance> {
        let mut utts = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{name}-{i:05}");
            let speaker = format!("spk{}", rng.gen_range(0..spec.speakers));
            let n_words = rng.gen_range(spec.words_per_utterance_min..=spec.words_per_utterance_max);
            let sent: Vec<String> = (0..n_words)
                .map(|_| words[rng.gen_range(0..words.len())].clone())
                .collect();
            // Grapheme string with optional inter-word silence.
            let mut graphemes: Vec<String> = Vec::new();
            for (wi, w) in sent.iter().enumerate() {
                if wi > 0 && rng.gen_bool(spec.silence_prob) {
                    graphemes.push(SILENCE.to_string());
                }
                graphemes.extend(w.chars().map(|c| c.to_string()));
            }
            let mut frames: Vec<f64> = Vec::new();
            let mut segs: Boundaries = Vec::new();
            let mut t = 0usize;
            let offset = &speaker_offsets[&speaker];
            for g in &graphemes {
                let dur =
                    rng.gen_range(spec.frames_per_grapheme_min..=spec.frames_per_grapheme_max);
                let proto_row = if g == SILENCE {
                    n_protos - 1
                } else {
                    grapheme_index[g.as_str()]
                };
                for _ in 0..dur {
                    for k in 0..d {
                        frames.push(
                            prototypes[[proto_row, k]]
                                + offset[k]
                                + spec.noise_sigma * sample_gauss(rng),
                        );
                    }
                }
                segs.push((g.clone(), t, t + dur));
                t += dur;
            }
            let feat = Array2::from_shape_vec((t, d), frames).expect("shape");
            boundaries.insert(id.clone(), segs);
            utts.push(Utterance {
                id,
                speaker_id: speaker,
                audio: Audio::Features(feat),
                transcript: if labeled { sent } else { Vec::new() },
            });
        }
        utts
    };

    let train = make_split(&mut rng, "train", spec.utterances_train, true, &mut boundaries);
    let dev = make_split(&mut rng, "dev", spec.utterances_dev, true, &mut boundaries);
    let eval = make_split(&mut rng, "eval", spec.utterances_eval, true, &mut boundaries);
    let unlabeled = make_split(
        &mut rng,
        "unlab",
        spec.utterances_unlabeled,
        false,
        &mut boundaries,
    );

    Ok(ToyCorpus {
        spec: spec.clone(),
        words,
        prototypes,
        grapheme_order,
        train,
        dev,
        eval,
        unlabeled,
        boundaries,
        speaker_offsets,
    })
}

/// Box-Muller; avoids pulling a distributions crate for one sampler.
fn sample_gauss(rng: &mut ChaCha20Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// One record per line: `id<TAB>speaker<TAB>path-or-inline<TAB>transcript`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: String,
    pub resource: String,
    pub transcript: Vec<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.id,
            r.speaker,
            r.resource,
            r.transcript.join(" ")
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() < 3 {
            return Err(CorpusError::ManifestParse(lineno + 1));
        }
        let transcript = fields
            .get(3)
            .map(|t| {
                t.split_whitespace()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default();
        records.push(ManifestRecord {
            id: fields[0].to_string(),
            speaker: fields[1].to_string(),
            resource: fields[2].to_string(),
            transcript,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn normalize_none_is_identity() {
        let t = toks("A B C");
        assert_eq!(normalize_text(&t, NormalizePolicy::None), t);
        let buckwalter = toks("mktb");
        assert_eq!(normalize_text(&buckwalter, NormalizePolicy::None), buckwalter);
    }

    #[test]
    fn strip_punct_removes_punctuation_tokens() {
        let t = toks("A , B");
        assert_eq!(normalize_text(&t, NormalizePolicy::StripPunct), toks("A B"));
    }

    #[test]
    fn grapheme_lexicon_from_characters() {
        let t1 = toks("ab abc");
        let lex = build_grapheme_lexicon([t1.as_slice()]).unwrap();
        assert_eq!(lex.entries["ab"].graphemes, vec!["a", "b"]);
        assert_eq!(lex.entries["abc"].graphemes, vec!["a", "b", "c"]);
        assert_eq!(lex.grapheme_inventory, vec!["a", "b", "c"]);
        assert_eq!(lex.disambiguation_count, 0);
    }

    #[test]
    fn duplicate_words_collapse() {
        let t1 = toks("ab ab ab");
        let lex = build_grapheme_lexicon([t1.as_slice()]).unwrap();
        assert_eq!(lex.entries.len(), 1);
    }

    #[test]
    fn empty_corpus_is_error() {
        let empty: Vec<&[String]> = Vec::new();
        assert!(matches!(
            build_grapheme_lexicon(empty),
            Err(CorpusError::NoVocabulary)
        ));
    }

    #[test]
    fn homophones_get_disambiguation_symbols() {
        let lex = Lexicon::from_entries(vec![
            ("one".into(), vec!["a".into(), "b".into()]),
            ("two".into(), vec!["a".into(), "b".into()]),
        ])
        .unwrap();
        let marks: Vec<Option<u32>> = lex.entries.values().map(|e| e.disambig).collect();
        assert_eq!(marks.iter().filter(|m| m.is_some()).count(), 1);
        assert_eq!(lex.disambiguation_count, 1);
        assert!(!lex.grapheme_inventory.contains(&"#1".to_string()));
    }

    #[test]
    fn lexicon_text_roundtrip() {
        let lex = Lexicon::from_entries(vec![
            ("ab".into(), vec!["a".into(), "b".into()]),
            ("ba".into(), vec!["b".into(), "a".into()]),
        ])
        .unwrap();
        let back = Lexicon::from_text(&lex.to_text()).unwrap();
        assert_eq!(lex, back);
    }

    #[test]
    fn lexicon_spelling_roundtrip() {
        let t1 = toks("abc ba caa");
        let lex = build_grapheme_lexicon([t1.as_slice()]).unwrap();
        for entry in lex.entries.values() {
            assert_eq!(entry.graphemes.join(""), entry.word);
        }
    }

    #[test]
    fn corpus_deterministic() {
        let spec = ToyLanguageSpec {
            utterances_train: 5,
            utterances_dev: 2,
            utterances_eval: 2,
            ..Default::default()
        };
        let a = synthesize_toy_corpus(&spec).unwrap();
        let b = synthesize_toy_corpus(&spec).unwrap();
        assert_eq!(a.words, b.words);
        for (ua, ub) in a.train.iter().zip(&b.train) {
            assert_eq!(ua.id, ub.id);
            assert_eq!(ua.transcript, ub.transcript);
            match (&ua.audio, &ub.audio) {
                (Audio::Features(fa), Audio::Features(fb)) => assert_eq!(fa, fb),
                _ => panic!("expected features"),
            }
        }
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let spec = ToyLanguageSpec {
            utterances_train: 3,
            utterances_dev: 1,
            utterances_eval: 1,
            noise_sigma: 0.0,
            speaker_sigma: 0.0,
            silence_prob: 0.0,
            ..Default::default()
        };
        let c = synthesize_toy_corpus(&spec).unwrap();
        let u = &c.train[0];
        let feats = match &u.audio {
            Audio::Features(f) => f,
            _ => panic!(),
        };
        let segs = &c.boundaries[&u.id];
        for (g, start, end) in segs {
            let proto_row = c.grapheme_order.iter().position(|x| x == g).unwrap();
            for t in *start..*end {
                for k in 0..c.spec.prototype_dim {
                    assert_eq!(feats[[t, k]], c.prototypes[[proto_row, k]]);
                }
            }
        }
    }

    #[test]
    fn oracle_frame_accuracy_with_separated_prototypes() {
        // noise 0.5, prototypes scaled to pairwise distance >= 4 sigma; a
        // nearest-prototype classifier should recover >= 95% of frames.
        let spec = ToyLanguageSpec {
            utterances_train: 30,
            utterances_dev: 0,
            utterances_eval: 0,
            noise_sigma: 0.5,
            speaker_sigma: 0.0,
            ..Default::default()
        };
        let c = synthesize_toy_corpus(&spec).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for u in &c.train {
            let feats = match &u.audio {
                Audio::Features(f) => f,
                _ => panic!(),
            };
            for (g, start, end) in &c.boundaries[&u.id] {
                let truth = if g == SILENCE {
                    c.prototypes.nrows() - 1
                } else {
                    c.grapheme_order.iter().position(|x| x == g).unwrap()
                };
                for t in *start..*end {
                    let frame = feats.row(t);
                    let mut best = (f64::INFINITY, 0usize);
                    for p in 0..c.prototypes.nrows() {
                        let diff = &frame - &c.prototypes.row(p);
                        let d2 = diff.dot(&diff);
                        if d2 < best.0 {
                            best = (d2, p);
                        }
                    }
                    if best.1 == truth {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "oracle frame accuracy {acc} < 0.95");
    }

    #[test]
    fn split_ids_disjoint() {
        let spec = ToyLanguageSpec {
            utterances_train: 4,
            utterances_dev: 4,
            utterances_eval: 4,
            utterances_unlabeled: 4,
            ..Default::default()
        };
        let c = synthesize_toy_corpus(&spec).unwrap();
        let mut ids = HashSet::new();
        for (_, split) in c.splits() {
            for u in split {
                assert!(ids.insert(u.id.clone()), "duplicate id {}", u.id);
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = std::env::temp_dir().join("df-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.tsv");
        let records = vec![ManifestRecord {
            id: "u1".into(),
            speaker: "spk0".into(),
            resource: "feats.ark#u1".into(),
            transcript: toks("ab ba"),
        }];
        write_manifest(&path, &records).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = ToyLanguageSpec {
            prototype_dim: 0,
            ..Default::default()
        };
        assert!(synthesize_toy_corpus(&spec).is_err());
    }
}
