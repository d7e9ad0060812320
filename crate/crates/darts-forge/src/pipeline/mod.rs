//! Stage-oriented experiment driver: prepare -> gmm -> align -> graphs ->
//! train -> decode -> rescore -> combine -> score, with transfer and
//! semi-supervised training modes and a variant matrix for comparison
//! tables.
//!
//! Every stage reads its inputs from plain files under the output
//! directory, writes a manifest of content hashes, and is a no-op when
//! re-run with unchanged inputs. All randomness flows from the single
//! `seed` key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    self, build_grapheme_lexicon, synthesize_toy_corpus, Audio, Lexicon, ManifestRecord,
    ToyLanguageSpec, Utterance,
};
use crate::decoder::{self, decode, DecodeConfig, Lattice, NBestList, SentenceScorer};
use crate::eval::{combine, score_corpus};
use crate::features::FeatureArchive;
use crate::hmm::{
    baum_welch_update, flat_start, mixup, read_alignments, read_model, viterbi_align,
    write_alignments, write_model, Alignment, HmmConfig, HmmGmmModel,
};
use crate::lm::{count_ngrams, kneser_ney, prune, write_arpa};
use crate::nnet::{
    default_layer_table, train_am, warm_start, DartsConfig, Network, TrainConfig, TrainUtterance,
};
use crate::objectives::semisup_numerator;
use crate::wfst::{
    graphs::{
        build_decoding_graph, build_denominator_graph, build_numerator_graph, build_G, build_H,
        build_L, first_disambig_label, word_symbols,
    },
    Fst, SemiringKind, SymbolTable,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Validation(String),
    #[error("missing artifact: {artifact} (run stage '{stage}' first)")]
    MissingArtifact { artifact: String, stage: String },
    #[error("unknown stage '{0}'")]
    UnknownStage(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Hmm(#[from] crate::hmm::HmmError),
    #[error(transparent)]
    Fst(#[from] crate::wfst::FstError),
    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),
    #[error(transparent)]
    Nnet(#[from] crate::nnet::NnetError),
    #[error(transparent)]
    Train(#[from] crate::nnet::TrainError),
    #[error(transparent)]
    Decode(#[from] decoder::DecodeError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// CLI exit code: 2 for configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::UnknownStage(_) => 2,
            _ => 1,
        }
    }
}

pub const STAGE_ORDER: [&str; 9] = [
    "prepare", "gmm", "align", "graphs", "train", "decode", "rescore", "combine", "score",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub grapheme_count: usize,
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
    pub unlabeled: usize,
    pub noise_sigma: f64,
    pub frames_per_grapheme_min: usize,
    pub frames_per_grapheme_max: usize,
    pub words_per_utterance_min: usize,
    pub words_per_utterance_max: usize,
    pub speakers: usize,
    pub silence_prob: f64,
    pub speaker_sigma: f64,
    /// Fraction of the training split that keeps its labels; the rest is
    /// treated as unlabeled (for semi-supervised experiments).
    pub label_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            vocab_size: 20,
            grapheme_count: 8,
            train: 500,
            dev: 50,
            eval: 50,
            unlabeled: 0,
            noise_sigma: 0.3,
            frames_per_grapheme_min: 3,
            frames_per_grapheme_max: 8,
            words_per_utterance_min: 3,
            words_per_utterance_max: 6,
            speakers: 8,
            silence_prob: 0.2,
            speaker_sigma: 0.15,
            label_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    pub states_per_unit: usize,
    pub em_iters: usize,
    /// Gaussians per state after mixing up.
    pub mixture_components: usize,
    pub post_mixup_iters: usize,
    pub optional_silence: bool,
    pub self_loop_init: f64,
}

impl Default for GmmSection {
    fn default() -> Self {
        GmmSection {
            states_per_unit: 3,
            em_iters: 4,
            mixture_components: 2,
            post_mixup_iters: 2,
            optional_silence: true,
            self_loop_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnetSection {
    /// One of: darts, darts-blstm, cnn-tdnn, tdnn, tdnn-lstm.
    pub arch: String,
    pub width_scale: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub w_mmi: f64,
    pub w_ce: f64,
    pub acoustic_scale: f64,
    pub patience: usize,
    /// Frame tolerance of the LF-MMI numerator graph.
    pub numerator_tolerance: usize,
    /// Order of the grapheme n-gram denominator graph.
    pub denominator_order: usize,
    /// Checkpoint to fine-tune from (transfer mode).
    pub init_checkpoint: Option<String>,
    /// Use unlabeled utterances via lattices decoded by the seed model.
    pub semisup: bool,
    pub semisup_epochs: usize,
    pub lattice_scale: f64,
}

impl Default for NnetSection {
    fn default() -> Self {
        NnetSection {
            arch: "darts".to_string(),
            width_scale: 1.0 / 16.0,
            epochs: 12,
            lr: 0.01,
            lr_decay: 0.9,
            momentum: 0.9,
            w_mmi: 1.0,
            w_ce: 1.0,
            acoustic_scale: 1.0,
            patience: 3,
            numerator_tolerance: 1,
            denominator_order: 2,
            init_checkpoint: None,
            semisup: false,
            semisup_epochs: 3,
            lattice_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub order: usize,
    pub prune_threshold: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            order: 3,
            prune_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: f64,
    pub max_active: usize,
    pub lattice_beam: f64,
    pub acoustic_scale: f64,
    pub nbest: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 12.0,
            max_active: 2000,
            lattice_beam: 4.0,
            acoustic_scale: 1.0,
            nbest: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RescoreSection {
    pub enabled: bool,
    pub lm_order: usize,
    pub am_grid: Vec<f64>,
    pub lm_grid: Vec<f64>,
    pub penalty_grid: Vec<f64>,
}

impl Default for RescoreSection {
    fn default() -> Self {
        RescoreSection {
            enabled: true,
            lm_order: 4,
            am_grid: vec![1.0],
            lm_grid: vec![0.0, 0.25, 0.5, 1.0],
            penalty_grid: vec![0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombineSection {
    /// Hypothesis files (`id word word ...` lines) from other systems; the
    /// stage is a no-op with fewer than two.
    pub inputs: Vec<String>,
    pub weights: Vec<f64>,
}

impl Default for CombineSection {
    fn default() -> Self {
        CombineSection {
            inputs: Vec::new(),
            weights: Vec::new(),
        }
    }
}

/// One row of the experiment matrix: a named set of overrides on the base
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub arch: Option<String>,
    pub w_mmi: Option<f64>,
    pub w_ce: Option<f64>,
    pub semisup: Option<bool>,
    pub label_fraction: Option<f64>,
    pub rescore: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub corpus: CorpusSection,
    pub gmm: GmmSection,
    pub nnet: NnetSection,
    pub lm: LmSection,
    pub decode: DecodeSection,
    pub rescore: RescoreSection,
    pub combine: CombineSection,
    pub matrix: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_dir: "exp".to_string(),
            corpus: CorpusSection::default(),
            gmm: GmmSection::default(),
            nnet: NnetSection::default(),
            lm: LmSection::default(),
            decode: DecodeSection::default(),
            rescore: RescoreSection::default(),
            combine: CombineSection::default(),
            matrix: Vec::new(),
        }
    }
}

pub const ARCHES: [&str; 5] = ["darts", "darts-blstm", "cnn-tdnn", "tdnn", "tdnn-lstm"];

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !ARCHES.contains(&self.nnet.arch.as_str()) {
            return Err(PipelineError::Validation(format!(
                "unknown arch '{}' (expected one of {:?})",
                self.nnet.arch, ARCHES
            )));
        }
        if !(0.0..=1.0).contains(&self.corpus.label_fraction) {
            return Err(PipelineError::Validation(
                "label_fraction must be within [0, 1]".to_string(),
            ));
        }
        if self.lm.order == 0 || self.rescore.lm_order == 0 {
            return Err(PipelineError::Validation("LM order must be >= 1".to_string()));
        }
        if self.nnet.width_scale <= 0.0 {
            return Err(PipelineError::Validation(
                "width_scale must be positive".to_string(),
            ));
        }
        self.toy_spec()
            .validate()
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn toy_spec(&self) -> ToyLanguageSpec {
        let c = &self.corpus;
        ToyLanguageSpec {
            vocab_size: c.vocab_size,
            grapheme_count: c.grapheme_count,
            utterances_train: c.train,
            utterances_dev: c.dev,
            utterances_eval: c.eval,
            utterances_unlabeled: c.unlabeled,
            frames_per_grapheme_min: c.frames_per_grapheme_min,
            frames_per_grapheme_max: c.frames_per_grapheme_max,
            prototype_dim: 16,
            noise_sigma: c.noise_sigma,
            seed: self.seed,
            speakers: c.speakers,
            words_per_utterance_min: c.words_per_utterance_min,
            words_per_utterance_max: c.words_per_utterance_max,
            silence_prob: c.silence_prob,
            speaker_sigma: c.speaker_sigma,
        }
    }

    pub fn apply_variant(&self, v: &Variant) -> ExperimentConfig {
        let mut cfg = self.clone();
        if let Some(a) = &v.arch {
            cfg.nnet.arch = a.clone();
        }
        if let Some(w) = v.w_mmi {
            cfg.nnet.w_mmi = w;
        }
        if let Some(w) = v.w_ce {
            cfg.nnet.w_ce = w;
        }
        if let Some(s) = v.semisup {
            cfg.nnet.semisup = s;
        }
        if let Some(f) = v.label_fraction {
            cfg.corpus.label_fraction = f;
        }
        if let Some(r) = v.rescore {
            cfg.rescore.enabled = r;
        }
        if let Some(s) = v.seed {
            cfg.seed = s;
        }
        cfg
    }
}

/// Layer table for a named architecture preset. All presets are carved out
/// of the full table so cross-layer references stay consistent.
pub fn preset_layer_table(arch: &str, cfg: &DartsConfig) -> Vec<crate::nnet::LayerSpec> {
    let full = default_layer_table(cfg);
    match arch {
        "darts" | "darts-blstm" => full,
        "cnn-tdnn" => full
            .into_iter()
            .filter(|s| !s.id.ends_with('r'))
            .collect(),
        "tdnn" => full
            .into_iter()
            .filter(|s| s.id.ends_with('l'))
            .collect(),
        "tdnn-lstm" => full
            .into_iter()
            .filter(|s| !s.id.starts_with('c'))
            .collect(),
        other => panic!("unknown arch preset '{other}' (validate() missed it)"),
    }
}

fn build_network(cfg: &ExperimentConfig, input_dim: usize, num_states: usize) -> Result<Network, PipelineError> {
    let darts_cfg = DartsConfig {
        width_scale: cfg.nnet.width_scale,
        use_blstm: cfg.nnet.arch == "darts-blstm",
        ..DartsConfig::default()
    };
    let specs = preset_layer_table(&cfg.nnet.arch, &darts_cfg);
    Ok(Network::new(
        specs,
        input_dim,
        num_states,
        darts_cfg.use_blstm,
        cfg.seed,
    )?)
}

/// Frame scores for decoding: the MMI head when the objective trained it,
/// otherwise the cross-entropy log-probabilities.
fn acoustic_scores(
    net: &Network,
    cfg: &ExperimentConfig,
    feats: &Array2<f64>,
) -> Result<Array2<f64>, PipelineError> {
    let (ce, mmi) = net.score(feats)?;
    Ok(if cfg.nnet.w_mmi > 0.0 { mmi } else { ce })
}

/// Edge-replicate short utterances up to the network's receptive field;
/// the alignment (when present) is extended with its last state.
fn pad_for_network(
    net: &Network,
    feats: &Array2<f64>,
    alignment: Option<&[u32]>,
) -> (Array2<f64>, Option<Vec<u32>>) {
    let (l, r) = net.receptive_field();
    let need = l + r + 1;
    let t = feats.nrows();
    if t >= need {
        return (feats.clone(), alignment.map(|a| a.to_vec()));
    }
    let mut padded = Array2::zeros((need, feats.ncols()));
    for i in 0..need {
        let src = i.min(t - 1);
        padded.row_mut(i).assign(&feats.row(src));
    }
    let ali = alignment.map(|a| {
        let mut v = a.to_vec();
        while v.len() < need {
            v.push(*a.last().unwrap());
        }
        v
    });
    (padded, ali)
}

// ---------------------------------------------------------------------------
// Stage plumbing: content hashes, manifests, idempotence.

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, artifact: &str, stage: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                artifact: artifact.to_string(),
                stage: stage.to_string(),
            });
        }
        Ok(p)
    }

    /// Hash of everything a stage depends on: the resolved config section
    /// text plus the contents of its input artifacts.
    fn inputs_hash(&self, section: &str, inputs: &[PathBuf]) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(section.as_bytes());
        h.update(self.cfg.seed.to_le_bytes());
        for p in inputs {
            h.update(fs::read(p)?);
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// True when the stage's manifest matches the current inputs and all
    /// recorded outputs are still present with the same hashes.
    fn up_to_date(&self, stage: &str, inputs_hash: &str) -> bool {
        let manifest = self.path(&format!("manifests/{stage}.manifest"));
        let Ok(text) = fs::read_to_string(&manifest) else {
            return false;
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first == format!("inputs {inputs_hash}") => {}
            _ => return false,
        }
        for line in lines {
            let mut parts = line.splitn(3, ' ');
            if parts.next() != Some("output") {
                return false;
            }
            let (Some(hash), Some(rel)) = (parts.next(), parts.next()) else {
                return false;
            };
            match file_hash(&self.path(rel)) {
                Ok(actual) if actual == hash => {}
                _ => return false,
            }
        }
        true
    }

    fn write_stage_manifest(
        &self,
        stage: &str,
        inputs_hash: &str,
        outputs: &[&str],
    ) -> Result<(), PipelineError> {
        fs::create_dir_all(self.path("manifests"))?;
        let mut text = format!("inputs {inputs_hash}\n");
        for rel in outputs {
            text.push_str(&format!("output {} {rel}\n", file_hash(&self.path(rel))?));
        }
        fs::write(self.path(&format!("manifests/{stage}.manifest")), text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Split I/O helpers.

fn utt_to_record(u: &Utterance) -> ManifestRecord {
    ManifestRecord {
        id: u.id.clone(),
        speaker: u.speaker_id.clone(),
        resource: "inline".to_string(),
        transcript: u.transcript.clone(),
    }
}

fn write_split(ctx: &Ctx, name: &str, utts: &[Utterance]) -> Result<(), PipelineError> {
    corpus::write_manifest(&ctx.path(&format!("corpus/{name}.manifest")), &utts
        .iter()
        .map(utt_to_record)
        .collect::<Vec<_>>())?;
    FeatureArchive::write(
        &ctx.path(&format!("feats/{name}.ark")),
        utts.iter().map(|u| {
            let f = match &u.audio {
                Audio::Features(f) => f.clone(),
                Audio::Waveform { .. } => unreachable!("toy corpus is feature-valued"),
            };
            (u.id.clone(), f)
        }),
    )?;
    Ok(())
}

/// Rehydrate a split from its manifest + feature archive. Producing stage
/// for both artifacts is `prepare`.
fn read_split(ctx: &Ctx, name: &str) -> Result<Vec<Utterance>, PipelineError> {
    let manifest = ctx.require(
        &format!("corpus/{name}.manifest"),
        &format!("{name} manifest"),
        "prepare",
    )?;
    let ark = ctx.require(
        &format!("feats/{name}.ark"),
        &format!("{name} features"),
        "prepare",
    )?;
    let records = corpus::read_manifest(&manifest)?;
    let feats: BTreeMap<String, Array2<f64>> =
        FeatureArchive::read_all(&ark)?.into_iter().collect();
    let mut utts = Vec::with_capacity(records.len());
    for r in records {
        let f = feats.get(&r.id).ok_or_else(|| PipelineError::MissingArtifact {
            artifact: format!("features for {}", r.id),
            stage: "prepare".to_string(),
        })?;
        utts.push(Utterance {
            id: r.id,
            speaker_id: r.speaker,
            audio: Audio::Features(f.clone()),
            transcript: r.transcript,
        });
    }
    Ok(utts)
}

fn write_refs(ctx: &Ctx, name: &str, utts: &[Utterance]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for u in utts {
        text.push_str(&format!("{} {}\n", u.id, u.transcript.join(" ")));
    }
    fs::write(ctx.path(&format!("refs/{name}.ref")), text)?;
    Ok(())
}

fn read_word_file(path: &Path) -> Result<Vec<(String, Vec<String>)>, PipelineError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace().map(|s| s.to_string());
            let id = it.next().unwrap_or_default();
            (id, it.collect())
        })
        .collect())
}

fn write_word_file(path: &Path, items: &[(String, Vec<String>)]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for (id, words) in items {
        text.push_str(&format!("{} {}\n", id, words.join(" ")));
    }
    fs::write(path, text)?;
    Ok(())
}

fn transcripts_of(utts: &[Utterance]) -> Vec<&[String]> {
    utts.iter()
        .filter(|u| !u.transcript.is_empty())
        .map(|u| u.transcript.as_slice())
        .collect()
}

// ---------------------------------------------------------------------------
// Stages.

fn stage_prepare(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = toml::to_string(&ctx.cfg.corpus).unwrap();
    let inputs_hash = ctx.inputs_hash(&section, &[])?;
    if ctx.up_to_date("prepare", &inputs_hash) {
        println!("prepare: up to date");
        return Ok(());
    }
    for dir in ["corpus", "feats", "refs"] {
        fs::create_dir_all(ctx.path(dir))?;
    }
    let mut corpus = synthesize_toy_corpus(&ctx.cfg.toy_spec())?;
    // Strip labels beyond the labeled fraction; those utterances join the
    // unlabeled pool.
    let keep = ((ctx.cfg.corpus.label_fraction * corpus.train.len() as f64).round() as usize)
        .min(corpus.train.len());
    let stripped: Vec<Utterance> = corpus
        .train
        .split_off(keep)
        .into_iter()
        .map(|mut u| {
            u.transcript.clear();
            u
        })
        .collect();
    corpus.unlabeled.extend(stripped);

    // The lexicon covers the full closed vocabulary, not just observed
    // transcripts, so every decodable word has a pronunciation.
    let word_rows: Vec<Vec<String>> = corpus.words.iter().map(|w| vec![w.clone()]).collect();
    let lexicon = build_grapheme_lexicon(word_rows.iter().map(|r| r.as_slice()))?;
    lexicon.write(&ctx.path("corpus/lexicon.txt"))?;

    write_split(ctx, "train", &corpus.train)?;
    write_split(ctx, "dev", &corpus.dev)?;
    write_split(ctx, "eval", &corpus.eval)?;
    write_split(ctx, "unlab", &corpus.unlabeled)?;
    write_refs(ctx, "dev", &corpus.dev)?;
    write_refs(ctx, "eval", &corpus.eval)?;

    ctx.write_stage_manifest(
        "prepare",
        &inputs_hash,
        &[
            "corpus/train.manifest",
            "corpus/dev.manifest",
            "corpus/eval.manifest",
            "corpus/unlab.manifest",
            "corpus/lexicon.txt",
            "feats/train.ark",
            "feats/dev.ark",
            "feats/eval.ark",
            "feats/unlab.ark",
            "refs/dev.ref",
            "refs/eval.ref",
        ],
    )
}

fn read_lexicon(ctx: &Ctx) -> Result<Lexicon, PipelineError> {
    let p = ctx.require("corpus/lexicon.txt", "lexicon", "prepare")?;
    Ok(Lexicon::read(&p)?)
}

fn hmm_config(cfg: &ExperimentConfig) -> HmmConfig {
    HmmConfig {
        states_per_unit: cfg.gmm.states_per_unit,
        optional_silence: cfg.gmm.optional_silence,
        context_dependent: false,
        self_loop_init: cfg.gmm.self_loop_init,
    }
}

fn stage_gmm(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = toml::to_string(&ctx.cfg.gmm).unwrap();
    let inputs = vec![
        ctx.require("corpus/train.manifest", "train manifest", "prepare")?,
        ctx.require("feats/train.ark", "train features", "prepare")?,
        ctx.require("corpus/lexicon.txt", "lexicon", "prepare")?,
    ];
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("gmm", &inputs_hash) {
        println!("gmm: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("gmm"))?;
    let lexicon = read_lexicon(ctx)?;
    let train = read_split(ctx, "train")?;
    let labeled: Vec<Utterance> = train
        .into_iter()
        .filter(|u| !u.transcript.is_empty())
        .collect();
    let cfg = hmm_config(&ctx.cfg);
    let mut model = flat_start(&lexicon, &labeled, &cfg)?;
    for _ in 0..ctx.cfg.gmm.em_iters {
        let (m, _ll) = baum_welch_update(&model, &lexicon, &labeled)?;
        model = m;
    }
    if ctx.cfg.gmm.mixture_components > 1 {
        model = mixup(&model, ctx.cfg.gmm.mixture_components)?;
        for _ in 0..ctx.cfg.gmm.post_mixup_iters {
            let (m, _ll) = baum_welch_update(&model, &lexicon, &labeled)?;
            model = m;
        }
    }
    write_model(&model, &ctx.path("gmm/final.mdl"))?;
    ctx.write_stage_manifest("gmm", &inputs_hash, &["gmm/final.mdl"])
}

fn read_gmm(ctx: &Ctx) -> Result<HmmGmmModel, PipelineError> {
    let p = ctx.require("gmm/final.mdl", "acoustic GMM model", "gmm")?;
    Ok(read_model(&p)?)
}

fn stage_align(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = toml::to_string(&ctx.cfg.gmm).unwrap();
    let inputs = vec![
        ctx.require("gmm/final.mdl", "acoustic GMM model", "gmm")?,
        ctx.require("corpus/train.manifest", "train manifest", "prepare")?,
        ctx.require("corpus/dev.manifest", "dev manifest", "prepare")?,
    ];
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("align", &inputs_hash) {
        println!("align: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("align"))?;
    let lexicon = read_lexicon(ctx)?;
    let model = read_gmm(ctx)?;
    for split in ["train", "dev"] {
        let utts = read_split(ctx, split)?;
        let mut alignments = Vec::new();
        for u in utts.iter().filter(|u| !u.transcript.is_empty()) {
            alignments.push(viterbi_align(&model, &lexicon, u)?);
        }
        write_alignments(&alignments, &ctx.path(&format!("align/{split}.ali")))?;
    }
    ctx.write_stage_manifest("align", &inputs_hash, &["align/train.ali", "align/dev.ali"])
}

fn stage_graphs(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = format!(
        "{}{}",
        toml::to_string(&ctx.cfg.lm).unwrap(),
        toml::to_string(&ctx.cfg.nnet).unwrap()
    );
    let inputs = vec![
        ctx.require("corpus/lexicon.txt", "lexicon", "prepare")?,
        ctx.require("corpus/train.manifest", "train manifest", "prepare")?,
        ctx.require("gmm/final.mdl", "acoustic GMM model", "gmm")?,
        ctx.require("align/train.ali", "training alignments", "align")?,
    ];
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("graphs", &inputs_hash) {
        println!("graphs: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("graphs"))?;
    let lexicon = read_lexicon(ctx)?;
    let model = read_gmm(ctx)?;
    let train = read_split(ctx, "train")?;

    let words = word_symbols(&lexicon);
    fs::write(ctx.path("graphs/words.syms"), words.to_text())?;

    let transcripts = transcripts_of(&train);
    let counts = count_ngrams(transcripts.iter().copied(), ctx.cfg.lm.order)?;
    let mut lm = kneser_ney(&counts, ctx.cfg.lm.order, None)?;
    if ctx.cfg.lm.prune_threshold > 0.0 {
        lm = prune(&lm, ctx.cfg.lm.prune_threshold);
    }
    write_arpa(&lm, &ctx.path("graphs/lm.arpa"))?;

    let g = build_G(&lm, &words)?;
    let l = build_L(&lexicon, ctx.cfg.corpus.silence_prob)?;
    // Average self-loop probability of the trained transition model.
    let self_loop = model.transitions.iter().map(|t| t[0]).sum::<f64>()
        / model.transitions.len() as f64;
    let h = build_H(&model.inventory, &lexicon, self_loop, SemiringKind::Tropical);
    let hclg = build_decoding_graph(&h, &l, &g, first_disambig_label(&model.inventory))?;
    g.write_text(&ctx.path("graphs/G.fst"))?;
    l.write_text(&ctx.path("graphs/L.fst"))?;
    h.write_text(&ctx.path("graphs/H.fst"))?;
    hclg.write_text(&ctx.path("graphs/HCLG.fst"))?;

    let alignments = read_alignments(&ctx.path("align/train.ali"), &model.inventory)?;
    let den = build_denominator_graph(
        &alignments,
        &model.inventory,
        &lexicon,
        ctx.cfg.nnet.denominator_order,
        self_loop,
    )?;
    den.write_text(&ctx.path("graphs/den.fst"))?;

    ctx.write_stage_manifest(
        "graphs",
        &inputs_hash,
        &[
            "graphs/words.syms",
            "graphs/lm.arpa",
            "graphs/G.fst",
            "graphs/L.fst",
            "graphs/H.fst",
            "graphs/HCLG.fst",
            "graphs/den.fst",
        ],
    )
}

fn train_utterances(
    net: &Network,
    utts: &[Utterance],
    alignments: &[Alignment],
    tolerance: usize,
    want_numerator: bool,
) -> Vec<TrainUtterance> {
    let by_id: BTreeMap<&str, &Alignment> =
        alignments.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut out = Vec::new();
    for u in utts {
        let Some(a) = by_id.get(u.id.as_str()) else {
            continue;
        };
        let feats = match &u.audio {
            Audio::Features(f) => f,
            Audio::Waveform { .. } => continue,
        };
        let (feats, ali) = pad_for_network(net, feats, Some(&a.states));
        let ali = ali.unwrap();
        let numerator = if want_numerator {
            let padded = Alignment {
                id: a.id.clone(),
                states: ali.clone(),
                graphemes: Vec::new(),
            };
            Some(build_numerator_graph(&padded, tolerance))
        } else {
            None
        };
        out.push(TrainUtterance {
            id: u.id.clone(),
            feats,
            alignment: Some(ali),
            numerator,
        });
    }
    out
}

fn train_config(cfg: &ExperimentConfig, epochs: usize, checkpoints: Option<PathBuf>) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: cfg.nnet.lr,
        lr_decay: cfg.nnet.lr_decay,
        momentum: cfg.nnet.momentum,
        w_mmi: cfg.nnet.w_mmi,
        w_ce: cfg.nnet.w_ce,
        acoustic_scale: cfg.nnet.acoustic_scale,
        seed: cfg.seed,
        patience: cfg.nnet.patience,
        checkpoint_dir: checkpoints,
    }
}

fn stage_train(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = toml::to_string(&ctx.cfg.nnet).unwrap();
    let mut inputs = vec![
        ctx.require("align/train.ali", "training alignments", "align")?,
        ctx.require("align/dev.ali", "dev alignments", "align")?,
        ctx.require("graphs/den.fst", "denominator graph", "graphs")?,
        ctx.require("feats/train.ark", "train features", "prepare")?,
    ];
    if ctx.cfg.nnet.semisup {
        inputs.push(ctx.require("graphs/HCLG.fst", "decoding graph", "graphs")?);
        inputs.push(ctx.require("feats/unlab.ark", "unlabeled features", "prepare")?);
    }
    if let Some(init) = &ctx.cfg.nnet.init_checkpoint {
        let p = PathBuf::from(init);
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                artifact: format!("init checkpoint {init}"),
                stage: "train (of the source experiment)".to_string(),
            });
        }
        inputs.push(p);
    }
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("train", &inputs_hash) {
        println!("train: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("am"))?;
    let model = read_gmm(ctx)?;
    let num_states = model.inventory.num_states();
    let train = read_split(ctx, "train")?;
    let dev = read_split(ctx, "dev")?;
    let input_dim = match &train[0].audio {
        Audio::Features(f) => f.ncols(),
        Audio::Waveform { .. } => unreachable!(),
    };

    let net = match &ctx.cfg.nnet.init_checkpoint {
        Some(init) => warm_start(Network::read(Path::new(init))?, num_states, true, ctx.cfg.seed)?,
        None => build_network(&ctx.cfg, input_dim, num_states)?,
    };

    let train_ali = read_alignments(&ctx.path("align/train.ali"), &model.inventory)?;
    let dev_ali = read_alignments(&ctx.path("align/dev.ali"), &model.inventory)?;
    let want_num = ctx.cfg.nnet.w_mmi > 0.0;
    let train_set = train_utterances(&net, &train, &train_ali, ctx.cfg.nnet.numerator_tolerance, want_num);
    let dev_set = train_utterances(&net, &dev, &dev_ali, ctx.cfg.nnet.numerator_tolerance, want_num);
    let den = if want_num {
        Some(Fst::read_text(&ctx.path("graphs/den.fst"), SemiringKind::Log)?)
    } else {
        None
    };

    let cfg = train_config(&ctx.cfg, ctx.cfg.nnet.epochs, Some(ctx.path("am")));
    let (mut net, report) = train_am(net, &train_set, &dev_set, den.as_ref(), &cfg)?;
    let mut log = String::new();
    for (i, l) in report.dev_losses.iter().enumerate() {
        log.push_str(&format!("epoch {i} dev_loss {l:.6}\n"));
    }
    log.push_str(&format!("best_epoch {}\n", report.best_epoch));

    if ctx.cfg.nnet.semisup {
        let unlab = read_split(ctx, "unlab")?;
        if !unlab.is_empty() {
            let hclg = Fst::read_text(&ctx.path("graphs/HCLG.fst"), SemiringKind::Tropical)?;
            let words = SymbolTable::from_text(&fs::read_to_string(ctx.require(
                "graphs/words.syms",
                "word symbols",
                "graphs",
            )?)?)?;
            let dcfg = DecodeConfig {
                beam: ctx.cfg.decode.beam,
                max_active: ctx.cfg.decode.max_active,
                lattice_beam: ctx.cfg.decode.lattice_beam,
                acoustic_scale: ctx.cfg.decode.acoustic_scale,
            };
            let mut semisup_set = train_set;
            let mut decoded = 0usize;
            for u in &unlab {
                let feats = match &u.audio {
                    Audio::Features(f) => f,
                    Audio::Waveform { .. } => continue,
                };
                let (feats, _) = pad_for_network(&net, feats, None);
                let scores = acoustic_scores(&net, &ctx.cfg, &feats)?;
                let lat = match decode(&hclg, &scores, &words, &u.id, &dcfg) {
                    Ok(l) => l,
                    Err(e) => {
                        log.push_str(&format!("semisup: skipping {} ({e})\n", u.id));
                        continue;
                    }
                };
                if let Some(num) = semisup_numerator(&lat, ctx.cfg.nnet.lattice_scale) {
                    semisup_set.push(TrainUtterance {
                        id: u.id.clone(),
                        feats,
                        alignment: None,
                        numerator: Some(num),
                    });
                    decoded += 1;
                }
            }
            log.push_str(&format!("semisup: {decoded} unlabeled lattices\n"));
            // Unlabeled utterances carry only the MMI term; keep the CE head
            // alive through the labeled part of the batch.
            let mut scfg = train_config(&ctx.cfg, ctx.cfg.nnet.semisup_epochs, None);
            scfg.w_mmi = ctx.cfg.nnet.w_mmi.max(1.0);
            let (n2, rep2) = train_am(net, &semisup_set, &dev_set, den.as_ref(), &scfg)?;
            net = n2;
            for (i, l) in rep2.dev_losses.iter().enumerate() {
                log.push_str(&format!("semisup epoch {i} dev_loss {l:.6}\n"));
            }
        }
    }

    net.write(&ctx.path("am/final.ckpt"))?;
    fs::write(ctx.path("am/train.log"), log)?;
    ctx.write_stage_manifest("train", &inputs_hash, &["am/final.ckpt", "am/train.log"])
}

fn decode_split(
    ctx: &Ctx,
    net: &Network,
    hclg: &Fst,
    words: &SymbolTable,
    split: &str,
) -> Result<(), PipelineError> {
    let utts = read_split(ctx, split)?;
    let dcfg = DecodeConfig {
        beam: ctx.cfg.decode.beam,
        max_active: ctx.cfg.decode.max_active,
        lattice_beam: ctx.cfg.decode.lattice_beam,
        acoustic_scale: ctx.cfg.decode.acoustic_scale,
    };
    fs::create_dir_all(ctx.path(&format!("decode/lats-{split}")))?;
    let mut hyps = Vec::new();
    let mut nbests = Vec::new();
    for u in &utts {
        let feats = match &u.audio {
            Audio::Features(f) => f,
            Audio::Waveform { .. } => continue,
        };
        let (feats, _) = pad_for_network(net, feats, None);
        let scores = acoustic_scores(net, &ctx.cfg, &feats)?;
        let lat = decode(hclg, &scores, words, &u.id, &dcfg)?;
        lat.write_text(&ctx.path(&format!("decode/lats-{split}/{}.lat", u.id)))?;
        let best = lat.best_path().map(|e| e.words).unwrap_or_default();
        hyps.push((u.id.clone(), best));
        nbests.push(decoder::nbest(&lat, ctx.cfg.decode.nbest));
    }
    write_word_file(&ctx.path(&format!("decode/{split}.hyp")), &hyps)?;
    decoder::write_nbest(&ctx.path(&format!("decode/{split}.nbest")), &nbests)?;
    Ok(())
}

fn stage_decode(ctx: &Ctx) -> Result<(), PipelineError> {
    let section = toml::to_string(&ctx.cfg.decode).unwrap();
    let inputs = vec![
        ctx.require("am/final.ckpt", "acoustic model", "train")?,
        ctx.require("graphs/HCLG.fst", "decoding graph", "graphs")?,
        ctx.require("graphs/words.syms", "word symbols", "graphs")?,
        ctx.require("feats/eval.ark", "eval features", "prepare")?,
        ctx.require("feats/dev.ark", "dev features", "prepare")?,
    ];
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("decode", &inputs_hash) {
        println!("decode: up to date");
        return Ok(());
    }
    let net = Network::read(&ctx.path("am/final.ckpt"))?;
    let hclg = Fst::read_text(&ctx.path("graphs/HCLG.fst"), SemiringKind::Tropical)?;
    let words = SymbolTable::from_text(&fs::read_to_string(ctx.path("graphs/words.syms"))?)?;
    decode_split(ctx, &net, &hclg, &words, "dev")?;
    decode_split(ctx, &net, &hclg, &words, "eval")?;
    ctx.write_stage_manifest(
        "decode",
        &inputs_hash,
        &["decode/dev.hyp", "decode/eval.hyp", "decode/dev.nbest", "decode/eval.nbest"],
    )
}

/// Re-derive N-best lists from the lattice files of a split.
fn nbest_from_lats(ctx: &Ctx, split: &str, n: usize) -> Result<Vec<NBestList>, PipelineError> {
    let dir = ctx.require(
        &format!("decode/lats-{split}"),
        &format!("{split} lattices"),
        "decode",
    )?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "lat").unwrap_or(false))
        .collect();
    paths.sort();
    let mut lists = Vec::new();
    for p in paths {
        let lat = Lattice::from_text(&fs::read_to_string(&p)?)?;
        lists.push(decoder::nbest(&lat, n));
    }
    Ok(lists)
}

fn stage_rescore(ctx: &Ctx) -> Result<(), PipelineError> {
    if !ctx.cfg.rescore.enabled {
        println!("rescore: disabled");
        return Ok(());
    }
    let section = toml::to_string(&ctx.cfg.rescore).unwrap();
    let inputs = vec![
        ctx.require("decode/eval.nbest", "eval N-best lists", "decode")?,
        ctx.require("decode/dev.nbest", "dev N-best lists", "decode")?,
        ctx.require("refs/dev.ref", "dev references", "prepare")?,
        ctx.require("corpus/train.manifest", "train manifest", "prepare")?,
    ];
    let inputs_hash = ctx.inputs_hash(&section, &inputs)?;
    if ctx.up_to_date("rescore", &inputs_hash) {
        println!("rescore: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("rescore"))?;
    let train = read_split(ctx, "train")?;
    let transcripts = transcripts_of(&train);
    let counts = count_ngrams(transcripts.iter().copied(), ctx.cfg.rescore.lm_order)?;
    let lm4 = kneser_ney(&counts, ctx.cfg.rescore.lm_order, None)?;
    write_arpa(&lm4, &ctx.path("rescore/lm4.arpa"))?;

    let dev_nbest = nbest_from_lats(ctx, "dev", ctx.cfg.decode.nbest)?;
    let dev_refs: BTreeMap<String, Vec<String>> =
        read_word_file(&ctx.path("refs/dev.ref"))?.into_iter().collect();
    let dev_pairs: Vec<(NBestList, Vec<String>)> = dev_nbest
        .into_iter()
        .filter_map(|l| dev_refs.get(&l.id).map(|r| (l, r.clone())))
        .collect();
    let scorers: Vec<(&dyn SentenceScorer, f64)> = vec![(&lm4, 1.0)];
    let tuned = decoder::tune_weights(
        &dev_pairs,
        &scorers,
        &ctx.cfg.rescore.am_grid,
        &ctx.cfg.rescore.lm_grid,
        &ctx.cfg.rescore.penalty_grid,
    )?;
    fs::write(
        ctx.path("rescore/weights.txt"),
        format!(
            "am_weight {}\nlm_weight {}\nword_penalty {}\n",
            tuned.am_weight, tuned.lm_weight, tuned.word_penalty
        ),
    )?;

    let eval_nbest = nbest_from_lats(ctx, "eval", ctx.cfg.decode.nbest)?;
    let scaled: Vec<(&dyn SentenceScorer, f64)> = vec![(&lm4, tuned.lm_weight)];
    let mut hyps = Vec::new();
    for list in &eval_nbest {
        let rescored = decoder::rescore_nbest(list, &scaled, tuned.am_weight, tuned.word_penalty);
        let words = rescored
            .entries
            .first()
            .map(|e| e.words.clone())
            .unwrap_or_default();
        hyps.push((list.id.clone(), words));
    }
    write_word_file(&ctx.path("rescore/eval.hyp"), &hyps)?;
    ctx.write_stage_manifest(
        "rescore",
        &inputs_hash,
        &["rescore/lm4.arpa", "rescore/weights.txt", "rescore/eval.hyp"],
    )
}

fn stage_combine(ctx: &Ctx) -> Result<(), PipelineError> {
    if ctx.cfg.combine.inputs.len() < 2 {
        println!("combine: fewer than two systems configured, skipping");
        return Ok(());
    }
    let section = toml::to_string(&ctx.cfg.combine).unwrap();
    let paths: Vec<PathBuf> = ctx.cfg.combine.inputs.iter().map(PathBuf::from).collect();
    for p in &paths {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact {
                artifact: format!("system hypothesis file {}", p.display()),
                stage: "decode (of the contributing system)".to_string(),
            });
        }
    }
    let inputs_hash = ctx.inputs_hash(&section, &paths)?;
    if ctx.up_to_date("combine", &inputs_hash) {
        println!("combine: up to date");
        return Ok(());
    }
    fs::create_dir_all(ctx.path("combine"))?;
    let systems: Vec<BTreeMap<String, Vec<String>>> = paths
        .iter()
        .map(|p| read_word_file(p).map(|v| v.into_iter().collect()))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for id in systems[0].keys() {
        let hyps: Vec<Vec<String>> = systems
            .iter()
            .map(|s| s.get(id).cloned().unwrap_or_default())
            .collect();
        let voted = combine(&hyps, &ctx.cfg.combine.weights)?;
        out.push((id.clone(), voted));
    }
    write_word_file(&ctx.path("combine/eval.hyp"), &out)?;
    ctx.write_stage_manifest("combine", &inputs_hash, &["combine/eval.hyp"])
}

fn stage_score(ctx: &Ctx) -> Result<Option<f64>, PipelineError> {
    // Prefer the most refined hypothesis set available.
    let hyp_rel = ["combine/eval.hyp", "rescore/eval.hyp", "decode/eval.hyp"]
        .iter()
        .find(|rel| ctx.path(rel).exists())
        .copied()
        .ok_or(PipelineError::MissingArtifact {
            artifact: "eval hypotheses".to_string(),
            stage: "decode".to_string(),
        })?;
    let inputs = vec![
        ctx.path(hyp_rel),
        ctx.require("refs/eval.ref", "eval references", "prepare")?,
    ];
    let inputs_hash = ctx.inputs_hash(hyp_rel, &inputs)?;
    fs::create_dir_all(ctx.path("score"))?;
    let score_path = ctx.path("score/eval.score");
    if ctx.up_to_date("score", &inputs_hash) && score_path.exists() {
        println!("score: up to date");
    } else {
        let refs: BTreeMap<String, Vec<String>> =
            read_word_file(&ctx.path("refs/eval.ref"))?.into_iter().collect();
        let hyps: BTreeMap<String, Vec<String>> =
            read_word_file(&ctx.path(hyp_rel))?.into_iter().collect();
        let triples: Vec<(String, Vec<String>, Vec<String>)> = refs
            .iter()
            .map(|(id, r)| {
                (
                    id.clone(),
                    r.clone(),
                    hyps.get(id).cloned().unwrap_or_default(),
                )
            })
            .collect();
        let report = score_corpus(&triples)?;
        fs::write(&score_path, report.to_lines())?;
        ctx.write_stage_manifest("score", &inputs_hash, &["score/eval.score"])?;
    }
    read_total_wer(&score_path)
}

/// Pull the corpus WER out of a score file's TOTAL line.
pub fn read_total_wer(path: &Path) -> Result<Option<f64>, PipelineError> {
    let text = fs::read_to_string(path)?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("TOTAL ") {
            if let Some(last) = rest.split_whitespace().last() {
                return Ok(last.parse().ok());
            }
        }
    }
    Ok(None)
}

#[derive(Debug)]
pub struct RunSummary {
    pub stages_run: Vec<String>,
    pub eval_wer: Option<f64>,
}

/// Execute the requested stages in pipeline order. An empty `stages` slice
/// means all of them.
pub fn run(cfg: &ExperimentConfig, stages: &[String]) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    for s in stages {
        if !STAGE_ORDER.contains(&s.as_str()) {
            return Err(PipelineError::UnknownStage(s.clone()));
        }
    }
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    let ctx = Ctx {
        cfg: cfg.clone(),
        out,
    };
    fs::write(ctx.path("config.resolved.toml"), cfg.to_toml())?;
    let mut summary = RunSummary {
        stages_run: Vec::new(),
        eval_wer: None,
    };
    for stage in STAGE_ORDER {
        if !stages.is_empty() && !stages.iter().any(|s| s == stage) {
            continue;
        }
        match stage {
            "prepare" => stage_prepare(&ctx)?,
            "gmm" => stage_gmm(&ctx)?,
            "align" => stage_align(&ctx)?,
            "graphs" => stage_graphs(&ctx)?,
            "train" => stage_train(&ctx)?,
            "decode" => stage_decode(&ctx)?,
            "rescore" => stage_rescore(&ctx)?,
            "combine" => stage_combine(&ctx)?,
            "score" => summary.eval_wer = stage_score(&ctx)?,
            _ => unreachable!(),
        }
        summary.stages_run.push(stage.to_string());
    }
    Ok(summary)
}

#[derive(Debug)]
pub struct MatrixRow {
    pub name: String,
    pub arch: String,
    pub condition: String,
    pub wer: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("name\tarch\tcondition\tWER%\n");
        for r in &self.rows {
            let wer = match (&r.wer, &r.error) {
                (Some(w), _) => format!("{w:.2}"),
                (None, Some(e)) => format!("FAILED: {e}"),
                (None, None) => "-".to_string(),
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.arch, r.condition, wer));
        }
        out
    }
}

fn condition_of(cfg: &ExperimentConfig) -> String {
    let mut parts = Vec::new();
    if cfg.corpus.label_fraction < 1.0 {
        parts.push(format!("labels {:.0}%", cfg.corpus.label_fraction * 100.0));
    }
    if cfg.nnet.semisup {
        parts.push("semisup".to_string());
    }
    if cfg.rescore.enabled {
        parts.push("rescored".to_string());
    }
    if parts.is_empty() {
        parts.push("supervised".to_string());
    }
    parts.join("+")
}

/// Run every variant under `out_dir/matrix/<name>`, then a ROVER
/// combination row over all successful variants. Failures are reported in
/// the table without aborting the rest.
pub fn experiment_matrix(
    base: &ExperimentConfig,
    variants: &[Variant],
) -> Result<MatrixReport, PipelineError> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut hyp_files = Vec::new();
    for v in variants {
        let mut cfg = base.apply_variant(v);
        let name = if v.name.is_empty() { "base" } else { &v.name };
        cfg.out_dir = format!("{}/matrix/{}", base.out_dir, name);
        let condition = condition_of(&cfg);
        match run(&cfg, &[]) {
            Ok(summary) => {
                let hyp = ["combine/eval.hyp", "rescore/eval.hyp", "decode/eval.hyp"]
                    .iter()
                    .map(|rel| Path::new(&cfg.out_dir).join(rel))
                    .find(|p| p.exists());
                if let Some(h) = hyp {
                    hyp_files.push(h);
                }
                rows.push(MatrixRow {
                    name: name.to_string(),
                    arch: cfg.nnet.arch.clone(),
                    condition,
                    wer: summary.eval_wer,
                    error: None,
                });
            }
            Err(e) => rows.push(MatrixRow {
                name: name.to_string(),
                arch: cfg.nnet.arch.clone(),
                condition,
                wer: None,
                error: Some(e.to_string()),
            }),
        }
    }
    if hyp_files.len() >= 2 {
        let mut cfg = base.clone();
        cfg.out_dir = format!("{}/matrix/combination", base.out_dir);
        cfg.combine.inputs = hyp_files
            .iter()
            .map(|p| p.to_string_lossy().to_string())
            .collect();
        // The combination experiment only needs prepare (for references),
        // combine, and score.
        let stages: Vec<String> = ["prepare", "combine", "score"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        match run(&cfg, &stages) {
            Ok(summary) => rows.push(MatrixRow {
                name: "combination".to_string(),
                arch: "rover".to_string(),
                condition: format!("{} systems", hyp_files.len()),
                wer: summary.eval_wer,
                error: None,
            }),
            Err(e) => rows.push(MatrixRow {
                name: "combination".to_string(),
                arch: "rover".to_string(),
                condition: format!("{} systems", hyp_files.len()),
                wer: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let report = MatrixReport { rows };
    fs::create_dir_all(format!("{}/matrix", base.out_dir))?;
    fs::write(format!("{}/matrix/matrix.txt", base.out_dir), report.to_table())?;
    Ok(report)
}
