//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line. Oracles here are re-derived from first principles rather
//! than reusing library internals, so a bug in the library cannot hide
//! behind its own fixtures.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use darts_forge::corpus::{synthesize_toy_corpus, Audio, Lexicon, ToyCorpus, ToyLanguageSpec, Utterance};
use darts_forge::decoder::{
    decode, nbest, rescore_nbest, tune_weights, DecodeConfig, Lattice, LatticeArc, LatticeNode,
    NBestEntry, NBestList,
};
use darts_forge::eval::edit_counts;
use darts_forge::hmm::{
    baum_welch_update, flat_start, mixup, viterbi_align, Alignment, HmmConfig, HmmGmmModel,
};
use darts_forge::lm::{self, arpa_from_string, arpa_to_string, count_ngrams, kneser_ney};
use darts_forge::nnet::{
    default_layer_table, train_am, warm_start, DartsConfig, LayerKind, LayerSpec, Network,
    OffsetRef, TrainConfig, TrainUtterance,
};
use darts_forge::objectives::{ce_loss, forward_backward, mmi_objective, semisup_numerator};
use darts_forge::pipeline::{self, preset_layer_table, ExperimentConfig, Variant};
use darts_forge::wfst::graphs::{
    build_decoding_graph, build_numerator_graph, build_G, build_H, build_L, first_disambig_label,
    state_label, word_symbols,
};
use darts_forge::wfst::{compose, shortest_path, Arc, Fst, Label, SemiringKind, EPSILON};

/// Run a criterion body, printing exactly one summary line.
fn criterion<F: FnOnce() + std::panic::UnwindSafe>(num: u32, name: &str, body: F) {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => println!("ACCEPTANCE {num:02} {name}: PASS ({secs:.1}s)"),
        Err(e) => {
            println!("ACCEPTANCE {num:02} {name}: FAIL ({secs:.1}s)");
            std::panic::resume_unwind(e);
        }
    }
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn rand_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| uniform(rng, lo, hi))
}

/// Relative-or-absolute gradient agreement.
fn grads_close(analytic: f64, fd: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= abs_tol || diff <= rel_tol * analytic.abs().max(fd.abs())
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks
// ---------------------------------------------------------------------------

fn net_loss(net: &Network, x: &Array2<f64>) -> f64 {
    let fp = net.forward(x, true).unwrap();
    fp.tape.value(fp.ce_logprobs).sum() + fp.tape.value(fp.mmi_scores).sum()
}

fn net_grads(net: &Network, x: &Array2<f64>) -> BTreeMap<String, ArrayD<f64>> {
    let mut fp = net.forward(x, true).unwrap();
    let a = fp.tape.sum_all(fp.ce_logprobs);
    let b = fp.tape.sum_all(fp.mmi_scores);
    let loss = fp.tape.add(a, b).unwrap();
    fp.tape.backward(loss).unwrap();
    fp.param_nodes
        .iter()
        .map(|(k, &id)| (k.clone(), fp.tape.grad(id).clone()))
        .collect()
}

fn fd_check_network(specs: Vec<LayerSpec>, input_dim: usize, use_blstm: bool, seed: u64) {
    let num_states = 4;
    let net = Network::new(specs, input_dim, num_states, use_blstm, seed).unwrap();
    let (l, r) = net.receptive_field();
    let t_len = l + r + 5;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xfeed);
    let x = rand_matrix(&mut rng, t_len, input_dim, -1.0, 1.0);
    let analytic = net_grads(&net, &x);
    let h = 1e-5;
    for (name, grad) in &analytic {
        let len = net.params[name].len();
        let step = (len / 4).max(1);
        for idx in (0..len).step_by(step).take(5) {
            let mut plus = net.clone();
            plus.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            let mut minus = net.clone();
            minus.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let fd = (net_loss(&plus, &x) - net_loss(&minus, &x)) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            assert!(
                grads_close(an, fd, 1e-4, 1e-7),
                "layer gradient mismatch at {name}[{idx}]: analytic {an} vs fd {fd}"
            );
        }
    }
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - z);
    }
    out
}

/// A tiny two-state label loop usable as a denominator for any frame count.
fn loop_denominator(num_labels: u32) -> Fst {
    let mut f = Fst::new(SemiringKind::Log);
    let s0 = f.add_state();
    let s1 = f.add_state();
    f.set_start(s0);
    f.set_final(s1, 0.1);
    f.set_final(s0, 0.3);
    for l in 1..=num_labels {
        f.add_arc(s0, Arc { ilabel: l, olabel: l, weight: 0.2 + 0.1 * l as f64, nextstate: if l % 2 == 0 { s1 } else { s0 } });
        f.add_arc(s1, Arc { ilabel: l, olabel: l, weight: 0.3 + 0.05 * l as f64, nextstate: if l % 2 == 0 { s0 } else { s1 } });
    }
    f
}

fn fd_check_mmi(numerator: &Fst, t_len: usize, k: usize, seed: u64) {
    let den = loop_denominator(k as u32);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scores = rand_matrix(&mut rng, t_len, k, -1.5, 1.5);
    let scale = 0.8;
    let (_, grad) = mmi_objective(&scores, numerator, &den, scale).unwrap();
    let h = 1e-6;
    for t in 0..t_len {
        for j in 0..k {
            let mut p = scores.clone();
            p[[t, j]] += h;
            let mut m = scores.clone();
            m[[t, j]] -= h;
            let f_p = mmi_objective(&p, numerator, &den, scale).unwrap().0;
            let f_m = mmi_objective(&m, numerator, &den, scale).unwrap().0;
            let fd = (f_p - f_m) / (2.0 * h);
            let an = grad[[t, j]];
            assert!(
                grads_close(an, fd, 1e-5, 1e-8),
                "MMI gradient mismatch at ({t},{j}): analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn c01_gradient_checks() {
    criterion(1, "finite-difference gradient checks", || {
        let started = Instant::now();
        let conv = |id: &str, stride_f: usize, dim: usize| LayerSpec {
            id: id.into(),
            kind: LayerKind::Conv { stride_f },
            offsets: Vec::new(),
            dim,
        };
        let tdnn = |id: &str, offsets: Vec<OffsetRef>, dim: usize| LayerSpec {
            id: id.into(),
            kind: LayerKind::Tdnn,
            offsets,
            dim,
        };
        let linear = |id: &str, offsets: Vec<OffsetRef>, dim: usize| LayerSpec {
            id: id.into(),
            kind: LayerKind::Linear,
            offsets,
            dim,
        };
        let lstmp = |id: &str, hidden: usize, proj: usize| LayerSpec {
            id: id.into(),
            kind: LayerKind::Lstmp { cell: hidden, hidden, proj },
            offsets: Vec::new(),
            dim: proj,
        };
        let rel = |ks: &[i64]| ks.iter().map(|&k| OffsetRef::Rel(k)).collect::<Vec<_>>();

        // Convolution front end including the frequency-subsampling layer.
        fd_check_network(
            vec![
                conv("c1", 1, 4),
                conv("c2", 2, 3),
                tdnn("t1", rel(&[-1, 0, 1]), 6),
                linear("p1", rel(&[-1, 0]), 5),
            ],
            6,
            false,
            11,
        );
        // TDNN/linear splicing, a projected LSTM, and a cross-layer reference.
        fd_check_network(
            vec![
                tdnn("t1", rel(&[-1, 0, 1]), 6),
                linear("p1", rel(&[-1, 0]), 4),
                lstmp("r1", 5, 3),
                tdnn("t2", vec![OffsetRef::Rel(0), OffsetRef::Layer("p1".into())], 5),
                linear("p2", rel(&[0, 3]), 4),
            ],
            5,
            false,
            12,
        );
        // Bidirectional LSTM variant.
        fd_check_network(
            vec![
                tdnn("t1", rel(&[-1, 0]), 5),
                lstmp("r1", 4, 2),
                linear("p1", rel(&[0]), 3),
            ],
            5,
            true,
            13,
        );

        // Cross-entropy objective: gradient is w.r.t. the pre-softmax logits.
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (t_len, k) = (5, 4);
        let x = rand_matrix(&mut rng, t_len, k, -2.0, 2.0);
        let align: Vec<u32> = vec![0, 3, 1, 2, 0];
        let (_, grad) = ce_loss(&log_softmax_rows(&x), &align).unwrap();
        let h = 1e-6;
        let f = |x: &Array2<f64>| -> f64 {
            let lp = log_softmax_rows(x);
            -(0..t_len).map(|t| lp[[t, align[t] as usize]]).sum::<f64>() / t_len as f64
        };
        for t in 0..t_len {
            for j in 0..k {
                let mut p = x.clone();
                p[[t, j]] += h;
                let mut m = x.clone();
                m[[t, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = grad[[t, j]];
                assert!(
                    grads_close(an, fd, 1e-5, 1e-9),
                    "CE gradient mismatch at ({t},{j}): analytic {an} vs fd {fd}"
                );
            }
        }

        // LF-MMI with a clamped alignment numerator.
        let align = Alignment {
            id: "u1".into(),
            states: vec![0, 0, 1, 2, 2],
            graphemes: vec!["a".into(); 5],
        };
        let num = build_numerator_graph(&align, 1);
        fd_check_mmi(&num, 5, 4, 31);

        // Semi-supervised numerator built from a decoding lattice.
        let lat = Lattice {
            id: "u2".into(),
            num_frames: 2,
            nodes: vec![
                LatticeNode { frame: 0 },
                LatticeNode { frame: 1 },
                LatticeNode { frame: 1 },
                LatticeNode { frame: 2 },
            ],
            arcs: vec![
                LatticeArc { from: 0, to: 1, word: None, state: 1, am: -0.2, lm: 0.3 },
                LatticeArc { from: 0, to: 2, word: None, state: 2, am: -0.1, lm: 0.1 },
                LatticeArc { from: 1, to: 3, word: Some("w".into()), state: 1, am: -0.4, lm: 0.2 },
                LatticeArc { from: 2, to: 3, word: Some("v".into()), state: 3, am: -0.3, lm: 0.4 },
            ],
        };
        let num = semisup_numerator(&lat, 0.8).unwrap();
        fd_check_mmi(&num, 2, 4, 32);

        assert!(
            started.elapsed().as_secs_f64() < 120.0,
            "gradient check suite exceeded its two-minute budget"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: forward-backward vs exhaustive path enumeration
// ---------------------------------------------------------------------------

/// Enumerate every accepting path of `f` over exactly `t_len` frames and
/// return (log-partition, per-frame label posteriors) by brute force.
/// Epsilon arcs must only go from a lower to a higher state index.
fn enumerate_fb(f: &Fst, scores: &Array2<f64>, scale: f64) -> Option<(f64, Array2<f64>)> {
    let t_len = scores.nrows();
    let k = scores.ncols();
    let start = f.start()?;
    let mut paths: Vec<(f64, Vec<Label>)> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    fn go(
        f: &Fst,
        q: usize,
        t: usize,
        w: f64,
        t_len: usize,
        scores: &Array2<f64>,
        scale: f64,
        labels: &mut Vec<Label>,
        paths: &mut Vec<(f64, Vec<Label>)>,
    ) {
        if t == t_len && f.is_final(q) {
            paths.push((w - f.final_weight(q), labels.clone()));
        }
        for arc in f.arcs(q) {
            if arc.ilabel == EPSILON {
                go(f, arc.nextstate, t, w - arc.weight, t_len, scores, scale, labels, paths);
            } else if t < t_len {
                let s = scale * scores[[t, arc.ilabel as usize - 1]];
                labels.push(arc.ilabel);
                go(f, arc.nextstate, t + 1, w - arc.weight + s, t_len, scores, scale, labels, paths);
                labels.pop();
            }
        }
    }
    go(f, start, 0, 0.0, t_len, scores, scale, &mut labels, &mut paths);
    if paths.is_empty() {
        return None;
    }
    let m = paths.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let log_z = paths.iter().map(|p| (p.0 - m).exp()).sum::<f64>().ln() + m;
    let mut gamma = Array2::<f64>::zeros((t_len, k));
    for (w, labs) in &paths {
        let p = (w - log_z).exp();
        for (t, &l) in labs.iter().enumerate() {
            gamma[[t, l as usize - 1]] += p;
        }
    }
    Some((log_z, gamma))
}

fn random_fb_graph(rng: &mut ChaCha20Rng, num_labels: u32) -> Fst {
    let n = rng.gen_range(2..=6);
    let mut f = Fst::new(SemiringKind::Log);
    for _ in 0..n {
        f.add_state();
    }
    f.set_start(0);
    for i in 0..n {
        for j in 0..n {
            if i < j && rng.gen_bool(0.25) {
                f.add_arc(i, Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: uniform(rng, 0.0, 1.5),
                    nextstate: j,
                });
            }
            if rng.gen_bool(0.35) {
                let l = rng.gen_range(1..=num_labels);
                f.add_arc(i, Arc {
                    ilabel: l,
                    olabel: l,
                    weight: uniform(rng, 0.0, 2.0),
                    nextstate: j,
                });
            }
        }
    }
    let mut any_final = false;
    for q in 0..n {
        if rng.gen_bool(0.4) {
            f.set_final(q, uniform(rng, 0.0, 1.0));
            any_final = true;
        }
    }
    if !any_final {
        f.set_final(n - 1, 0.0);
    }
    f
}

#[test]
fn c02_forward_backward_oracle() {
    criterion(2, "forward-backward vs exhaustive enumeration", || {
        let mut rng = ChaCha20Rng::seed_from_u64(200);
        let k = 3u32;
        let scale = 0.7;
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 50 && attempts < 2000 {
            attempts += 1;
            let f = random_fb_graph(&mut rng, k);
            let t_len = rng.gen_range(1..=6);
            let scores = rand_matrix(&mut rng, t_len, k as usize, -1.0, 1.0);
            let lib = forward_backward(&f, &scores, scale);
            let oracle = enumerate_fb(&f, &scores, scale);
            match (lib, oracle) {
                (Ok((z, gamma)), Some((oz, ogamma))) => {
                    assert!(
                        (z - oz).abs() <= 1e-8,
                        "log partition mismatch: {z} vs oracle {oz}"
                    );
                    for t in 0..t_len {
                        let mut row_sum = 0.0;
                        for j in 0..k as usize {
                            let d = (gamma[[t, j]] - ogamma[[t, j]]).abs();
                            assert!(d <= 1e-8, "posterior mismatch at ({t},{j}): {d}");
                            row_sum += gamma[[t, j]];
                        }
                        assert!(
                            (row_sum - 1.0).abs() <= 1e-8,
                            "posterior row {t} sums to {row_sum}"
                        );
                    }
                    checked += 1;
                }
                (Err(_), None) => {} // both agree there is no accepting path
                (lib, oracle) => panic!(
                    "acceptance disagreement: library {:?} vs oracle {:?}",
                    lib.map(|x| x.0),
                    oracle.map(|x| x.0)
                ),
            }
        }
        assert!(checked >= 50, "only {checked} graphs with accepting paths");
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: composition, n-shortest paths, semiring laws
// ---------------------------------------------------------------------------

/// All accepting paths of an acyclic transducer as (ilabels, olabels, weight),
/// epsilon labels stripped.
fn enumerate_paths(f: &Fst) -> Vec<(Vec<Label>, Vec<Label>, f64)> {
    let mut out = Vec::new();
    let start = match f.start() {
        Some(s) => s,
        None => return out,
    };
    fn go(
        f: &Fst,
        q: usize,
        il: &mut Vec<Label>,
        ol: &mut Vec<Label>,
        w: f64,
        out: &mut Vec<(Vec<Label>, Vec<Label>, f64)>,
    ) {
        if f.is_final(q) {
            out.push((il.clone(), ol.clone(), w + f.final_weight(q)));
        }
        for arc in f.arcs(q) {
            let pushed_i = arc.ilabel != EPSILON;
            let pushed_o = arc.olabel != EPSILON;
            if pushed_i {
                il.push(arc.ilabel);
            }
            if pushed_o {
                ol.push(arc.olabel);
            }
            go(f, arc.nextstate, il, ol, w + arc.weight, out);
            if pushed_i {
                il.pop();
            }
            if pushed_o {
                ol.pop();
            }
        }
    }
    let mut il = Vec::new();
    let mut ol = Vec::new();
    go(f, start, &mut il, &mut ol, 0.0, &mut out);
    out
}

fn random_transducer(rng: &mut ChaCha20Rng, allow_eps: bool) -> Fst {
    let n = rng.gen_range(2..=4);
    let mut f = Fst::new(SemiringKind::Tropical);
    for _ in 0..n {
        f.add_state();
    }
    f.set_start(0);
    for i in 0..n {
        for j in (i + 1)..n {
            for _ in 0..2 {
                if rng.gen_bool(0.6) {
                    let lab = |rng: &mut ChaCha20Rng| -> Label {
                        if allow_eps && rng.gen_bool(0.2) {
                            EPSILON
                        } else {
                            rng.gen_range(1..=2)
                        }
                    };
                    let il = lab(rng);
                    let ol = lab(rng);
                    f.add_arc(i, Arc { ilabel: il, olabel: ol, weight: uniform(rng, 0.0, 3.0), nextstate: j });
                }
            }
        }
    }
    f.set_final(n - 1, uniform(rng, 0.0, 1.0));
    for q in 0..n.saturating_sub(1) {
        if rng.gen_bool(0.25) {
            f.set_final(q, uniform(rng, 0.0, 1.0));
        }
    }
    f
}

fn sort_paths(mut paths: Vec<(Vec<Label>, Vec<Label>, f64)>) -> Vec<(Vec<Label>, Vec<Label>, f64)> {
    paths.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.total_cmp(&b.2))
    });
    paths
}

#[test]
fn c03_compose_shortest_semirings() {
    criterion(3, "composition, n-shortest, semiring laws", || {
        let mut rng = ChaCha20Rng::seed_from_u64(300);
        // Composition vs brute-force path pairing.
        let mut pairs_checked = 0;
        while pairs_checked < 110 {
            let a = random_transducer(&mut rng, true);
            let b = random_transducer(&mut rng, true);
            let composed = match compose(&a, &b) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let got = sort_paths(enumerate_paths(&composed));
            let pa = enumerate_paths(&a);
            let pb = enumerate_paths(&b);
            let mut want = Vec::new();
            for x in &pa {
                for y in &pb {
                    if x.1 == y.0 {
                        want.push((x.0.clone(), y.1.clone(), x.2 + y.2));
                    }
                }
            }
            let want = sort_paths(want);
            assert_eq!(
                got.len(),
                want.len(),
                "composed path count {} vs brute force {}",
                got.len(),
                want.len()
            );
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0, "composed input labels disagree");
                assert_eq!(g.1, w.1, "composed output labels disagree");
                assert!((g.2 - w.2).abs() <= 1e-9, "composed weight {} vs {}", g.2, w.2);
            }
            pairs_checked += 1;
        }

        // n-shortest paths vs sorted exhaustive enumeration.
        for _ in 0..60 {
            let f = random_transducer(&mut rng, false);
            let mut all: Vec<f64> = enumerate_paths(&f).into_iter().map(|p| p.2).collect();
            all.sort_by(f64::total_cmp);
            let got = shortest_path(&f, 4);
            assert_eq!(got.len(), all.len().min(4));
            for (entry, want) in got.iter().zip(&all) {
                assert!(
                    (entry.weight - want).abs() <= 1e-9,
                    "n-shortest weight {} vs enumerated {}",
                    entry.weight,
                    want
                );
            }
        }

        // Semiring laws as property tests.
        use proptest::test_runner::{Config as PtConfig, TestRunner};
        let mut runner = TestRunner::new(PtConfig {
            cases: 600,
            failure_persistence: None,
            ..PtConfig::default()
        });
        runner
            .run(&(-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), |(a, b, c)| {
                for s in [SemiringKind::Tropical, SemiringKind::Log] {
                    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9;
                    // Commutativity and associativity of both operations.
                    assert!(close(s.plus(a, b), s.plus(b, a)));
                    assert!(close(s.plus(s.plus(a, b), c), s.plus(a, s.plus(b, c))));
                    assert!(close(s.times(a, b), s.times(b, a)));
                    assert!(close(s.times(s.times(a, b), c), s.times(a, s.times(b, c))));
                    // Identities and annihilation.
                    assert!(close(s.plus(s.zero(), a), a));
                    assert!(close(s.times(s.one(), a), a));
                    assert_eq!(s.times(s.zero(), a), s.zero());
                    // Distributivity.
                    assert!(close(
                        s.times(a, s.plus(b, c)),
                        s.plus(s.times(a, b), s.times(a, c))
                    ));
                }
                Ok(())
            })
            .unwrap();
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: Kneser-Ney estimation, normalization, ARPA round trip, G
// ---------------------------------------------------------------------------

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

/// Independent interpolated Kneser-Ney estimator used as the test oracle.
struct KnOracle {
    order: usize,
    /// raw[n-1]: n-gram counts over `<s> ... </s>`-padded sentences.
    raw: Vec<HashMap<Vec<String>, u64>>,
    vocab: BTreeSet<String>,
    d: Vec<f64>,
}

impl KnOracle {
    fn new(sentences: &[Vec<String>], order: usize, d: Vec<f64>) -> KnOracle {
        let mut raw: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); order];
        for s in sentences {
            let mut padded = vec![BOS.to_string()];
            padded.extend(s.iter().cloned());
            padded.push(EOS.to_string());
            for n in 1..=order {
                for win in padded.windows(n) {
                    *raw[n - 1].entry(win.to_vec()).or_insert(0) += 1;
                }
            }
        }
        let mut vocab: BTreeSet<String> = raw[0]
            .keys()
            .map(|g| g[0].clone())
            .filter(|w| w != BOS)
            .collect();
        vocab.insert(EOS.to_string());
        vocab.insert(UNK.to_string());
        KnOracle { order, raw, vocab, d }
    }

    /// Number of distinct left extensions observed one order up.
    fn continuation(&self, gram: &[String]) -> u64 {
        let n = gram.len();
        self.raw[n]
            .keys()
            .filter(|g| g[1..] == *gram)
            .count() as u64
    }

    /// Effective KN count: raw at top order and for `<s>`-anchored grams,
    /// continuation elsewhere.
    fn adjusted(&self, gram: &[String]) -> f64 {
        let n = gram.len();
        if n == self.order || gram[0] == BOS {
            self.raw[n - 1].get(gram).copied().unwrap_or(0) as f64
        } else {
            self.continuation(gram) as f64
        }
    }

    fn prob(&self, gram: &[String]) -> f64 {
        let n = gram.len();
        let d = self.d[n - 1];
        if n == 1 {
            let seen: Vec<f64> = self.raw[0]
                .keys()
                .filter(|g| g[0] != BOS)
                .map(|g| self.adjusted(g))
                .collect();
            let total: f64 = seen.iter().sum();
            if total == 0.0 {
                return 1.0 / self.vocab.len() as f64;
            }
            let distinct = seen.iter().filter(|&&a| a > 0.0).count() as f64;
            let a = self.adjusted(gram);
            (a - d).max(0.0) / total + d * distinct / total / self.vocab.len() as f64
        } else {
            let hist = &gram[..n - 1];
            let mut total = 0.0;
            let mut distinct = 0.0;
            for g in self.raw[n - 1].keys() {
                if g[..n - 1] == *hist {
                    let a = self.adjusted(g);
                    if a > 0.0 {
                        total += a;
                        distinct += 1.0;
                    }
                }
            }
            let lower = self.prob(&gram[1..]);
            if total == 0.0 {
                return lower;
            }
            let a = self.adjusted(gram);
            (a - d).max(0.0) / total + d * distinct / total * lower
        }
    }
}

fn toy_transcripts(corpus: &ToyCorpus) -> Vec<Vec<String>> {
    corpus
        .train
        .iter()
        .map(|u| u.transcript.clone())
        .filter(|t| !t.is_empty())
        .collect()
}

#[test]
fn c04_kneser_ney() {
    criterion(4, "Kneser-Ney, normalization, ARPA, G agreement", || {
        // Hand fixture against the independent estimator.
        let sentences: Vec<Vec<String>> = ["a b a c", "b a a", "c b", "a b c a b"]
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        let refs: Vec<&[String]> = sentences.iter().map(|s| s.as_slice()).collect();
        let discounts = [0.4, 0.55, 0.6];
        for order in 1..=3usize {
            let counts = count_ngrams(refs.iter().copied(), order).unwrap();
            let lib = kneser_ney(&counts, order, Some(&discounts[..order])).unwrap();
            let oracle = KnOracle::new(&sentences, order, discounts[..order].to_vec());
            let mut hist_set: Vec<Vec<String>> = vec![Vec::new()];
            let mut units: Vec<String> = oracle.vocab.iter().cloned().collect();
            units.push(BOS.to_string());
            units.push("zzz".to_string());
            if order >= 2 {
                for v in &units {
                    hist_set.push(vec![v.clone()]);
                }
            }
            if order >= 3 {
                for v in &units {
                    for w in &units {
                        hist_set.push(vec![v.clone(), w.clone()]);
                    }
                }
            }
            for hist in &hist_set {
                for w in &oracle.vocab {
                    let got = 10f64.powf(lib.log10_prob(hist, w));
                    let mut gram = hist.clone();
                    gram.push(w.clone());
                    // The oracle recursion only sees the in-model history.
                    let trim = gram.len().saturating_sub(order);
                    let want = oracle.prob(&gram[trim..]);
                    assert!(
                        (got - want).abs() <= 1e-12,
                        "KN mismatch for {:?} -> {w}: library {got} vs oracle {want}",
                        hist
                    );
                }
            }
        }

        // Per-history normalization, orders 1..=4, on toy-corpus text.
        let spec = ToyLanguageSpec {
            vocab_size: 12,
            grapheme_count: 6,
            utterances_train: 60,
            utterances_dev: 5,
            utterances_eval: 5,
            seed: 5,
            ..ToyLanguageSpec::default()
        };
        let corpus = synthesize_toy_corpus(&spec).unwrap();
        let text = toy_transcripts(&corpus);
        let refs: Vec<&[String]> = text.iter().map(|t| t.as_slice()).collect();
        for order in 1..=4usize {
            let counts = count_ngrams(refs.iter().copied(), order).unwrap();
            let lm = kneser_ney(&counts, order, None).unwrap();
            let mut hists: Vec<Vec<String>> = vec![Vec::new()];
            if order > 1 {
                for t in text.iter().take(25) {
                    let mut h = vec![BOS.to_string()];
                    h.extend(t.iter().cloned());
                    let n = h.len().min(order - 1);
                    hists.push(h[h.len() - n..].to_vec());
                }
                hists.push(vec!["never-seen".to_string(); order - 1]);
            }
            for hist in &hists {
                let total: f64 = lm
                    .vocab
                    .iter()
                    .map(|w| 10f64.powf(lm.log10_prob(hist, w)))
                    .sum();
                assert!(
                    (total - 1.0).abs() <= 1e-9,
                    "order-{order} distribution for {:?} sums to {total}",
                    hist
                );
            }
        }

        // ARPA round trip is byte-identical.
        let counts = count_ngrams(refs.iter().copied(), 3).unwrap();
        let lm3 = kneser_ney(&counts, 3, None).unwrap();
        let s1 = arpa_to_string(&lm3);
        let lm_rt = arpa_from_string(&s1).unwrap();
        let s2 = arpa_to_string(&lm_rt);
        assert_eq!(s1, s2, "ARPA round trip changed the model text");

        // Sentence score equals the negated weight of its G path.
        let lexicon = full_vocab_lexicon(&corpus);
        let words = word_symbols(&lexicon);
        let g = build_G(&lm3, &words).unwrap();
        for sent in text.iter().take(5) {
            let mut acc = Fst::new(SemiringKind::Tropical);
            let mut prev = acc.add_state();
            acc.set_start(prev);
            for w in sent {
                let next = acc.add_state();
                let id = words.id(w).unwrap();
                acc.add_arc(prev, Arc { ilabel: id, olabel: id, weight: 0.0, nextstate: next });
                prev = next;
            }
            acc.set_final(prev, 0.0);
            let composed = compose(&acc, &g).unwrap();
            let best = shortest_path(&composed, 1);
            assert_eq!(best.len(), 1, "no G path for {:?}", sent);
            let want = -lm::sentence_logprob(&lm3, sent);
            assert!(
                (best[0].weight - want).abs() <= 1e-9,
                "G path weight {} vs sentence score {}",
                best[0].weight,
                want
            );
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: exact decoding and lattice oracle WER
// ---------------------------------------------------------------------------

fn full_vocab_lexicon(corpus: &ToyCorpus) -> Lexicon {
    let entries: Vec<(String, Vec<String>)> = corpus
        .words
        .iter()
        .map(|w| (w.clone(), w.chars().map(|c| c.to_string()).collect()))
        .collect();
    Lexicon::from_entries(entries).unwrap()
}

struct GmmRecognizer {
    model: HmmGmmModel,
    words: darts_forge::wfst::SymbolTable,
    hclg: Fst,
}

fn build_gmm_recognizer(corpus: &ToyCorpus, lm_order: usize, em_iters: usize) -> GmmRecognizer {
    let lexicon = full_vocab_lexicon(corpus);
    let cfg = HmmConfig::default();
    let mut model = flat_start(&lexicon, &corpus.train, &cfg).unwrap();
    for _ in 0..em_iters {
        model = baum_welch_update(&model, &lexicon, &corpus.train).unwrap().0;
    }
    model = mixup(&model, 2).unwrap();
    model = baum_welch_update(&model, &lexicon, &corpus.train).unwrap().0;
    let text = toy_transcripts(corpus);
    let refs: Vec<&[String]> = text.iter().map(|t| t.as_slice()).collect();
    let counts = count_ngrams(refs.iter().copied(), lm_order).unwrap();
    let lm = kneser_ney(&counts, lm_order, None).unwrap();
    let words = word_symbols(&lexicon);
    let g = build_G(&lm, &words).unwrap();
    let l = build_L(&lexicon, 0.2).unwrap();
    let self_loop =
        model.transitions.iter().map(|t| t[0]).sum::<f64>() / model.transitions.len() as f64;
    let h = build_H(&model.inventory, &lexicon, self_loop, SemiringKind::Tropical);
    let hclg = build_decoding_graph(&h, &l, &g, first_disambig_label(&model.inventory)).unwrap();
    GmmRecognizer { model, words, hclg }
}

fn gmm_frame_scores(model: &HmmGmmModel, utt: &Utterance) -> Array2<f64> {
    let feats = match &utt.audio {
        Audio::Features(f) => f,
        Audio::Waveform { .. } => panic!("toy corpus carries features"),
    };
    let k = model.inventory.num_states();
    Array2::from_shape_fn((feats.nrows(), k), |(t, s)| {
        model.emissions[s].log_likelihood(feats.row(t).as_slice().unwrap())
    })
}

/// Independent tropical shortest-accepting-path cost over exactly `t_len`
/// frames, Bellman-Ford style epsilon relaxation per frame level.
fn oracle_decode_cost(g: &Fst, scores: &Array2<f64>, scale: f64) -> f64 {
    let inf = f64::INFINITY;
    let n = g.num_states();
    let t_len = scores.nrows();
    let start = g.start().unwrap();
    let mut cost = vec![inf; n];
    cost[start] = 0.0;
    let relax_eps = |cost: &mut Vec<f64>| {
        for _ in 0..=n {
            let mut changed = false;
            for q in 0..n {
                if cost[q] == inf {
                    continue;
                }
                for arc in g.arcs(q) {
                    if arc.ilabel == EPSILON && arc.nextstate != q {
                        let c = cost[q] + arc.weight;
                        if c < cost[arc.nextstate] - 1e-15 {
                            cost[arc.nextstate] = c;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return;
            }
        }
        panic!("epsilon relaxation failed to converge");
    };
    relax_eps(&mut cost);
    for t in 0..t_len {
        let mut next = vec![inf; n];
        for q in 0..n {
            if cost[q] == inf {
                continue;
            }
            for arc in g.arcs(q) {
                if arc.ilabel != EPSILON {
                    let c = cost[q] + arc.weight - scale * scores[[t, arc.ilabel as usize - 1]];
                    if c < next[arc.nextstate] {
                        next[arc.nextstate] = c;
                    }
                }
            }
        }
        relax_eps(&mut next);
        cost = next;
    }
    (0..n)
        .filter(|&q| g.is_final(q))
        .map(|q| cost[q] + g.final_weight(q))
        .fold(inf, f64::min)
}

#[test]
fn c05_exact_decode_and_lattice_oracle() {
    criterion(5, "infinite-beam decode exactness, lattice oracle WER", || {
        let spec = ToyLanguageSpec {
            utterances_train: 120,
            utterances_dev: 20,
            utterances_eval: 20,
            seed: 50,
            ..ToyLanguageSpec::default()
        };
        let corpus = synthesize_toy_corpus(&spec).unwrap();
        let rec = build_gmm_recognizer(&corpus, 3, 2);
        let k = rec.model.inventory.num_states();

        // Infinite beam equals the exact shortest path.
        let exact_cfg = DecodeConfig {
            beam: f64::INFINITY,
            max_active: usize::MAX,
            lattice_beam: f64::INFINITY,
            acoustic_scale: 1.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(500);
        for _ in 0..10 {
            let t_len = rng.gen_range(8..=20);
            let scores = rand_matrix(&mut rng, t_len, k, -2.0, 2.0);
            let lat = decode(&rec.hclg, &scores, &rec.words, "synthetic", &exact_cfg).unwrap();
            let best = lat.best_path().unwrap();
            let want = oracle_decode_cost(&rec.hclg, &scores, 1.0);
            assert!(
                (best.total - want).abs() <= 1e-9,
                "decode best cost {} vs exact shortest path {}",
                best.total,
                want
            );
        }

        // Lattice oracle WER never exceeds the one-best WER.
        let cfg = DecodeConfig {
            beam: 50.0,
            max_active: 7000,
            lattice_beam: 10.0,
            acoustic_scale: 1.0,
        };
        let mut checked = 0;
        for utt in &corpus.eval {
            let scores = gmm_frame_scores(&rec.model, utt);
            let lat = decode(&rec.hclg, &scores, &rec.words, &utt.id, &cfg).unwrap();
            let best = lat.best_path().unwrap();
            let one_best = edit_counts(&utt.transcript, &best.words).wer_percent();
            let oracle = lat.oracle_wer(&utt.transcript).unwrap();
            assert!(
                oracle <= one_best + 1e-9,
                "{}: oracle WER {oracle} above one-best WER {one_best}",
                utt.id
            );
            checked += 1;
        }
        assert!(checked >= 20);
    });
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end pipeline, WER and reproducibility
// ---------------------------------------------------------------------------

#[test]
fn c06_end_to_end_pipeline() {
    criterion(6, "end-to-end recipe, WER <= 5%, reproducible", || {
        // The corpus noise level must keep frames nearly separable: nearest
        // prototype (with the known speaker offset) recovers >= 95% of frames.
        let spec = ToyLanguageSpec::default();
        let corpus = synthesize_toy_corpus(&spec).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for utt in corpus.train.iter().take(100) {
            let feats = match &utt.audio {
                Audio::Features(f) => f,
                _ => unreachable!(),
            };
            let offset = &corpus.speaker_offsets[&utt.speaker_id];
            let bounds = &corpus.boundaries[&utt.id];
            for (g, b, e) in bounds {
                let want = corpus
                    .grapheme_order
                    .iter()
                    .position(|x| x == g)
                    .unwrap_or(corpus.grapheme_order.len()); // silence row
                for t in *b..*e {
                    let mut best = (f64::INFINITY, 0usize);
                    for p in 0..corpus.prototypes.nrows() {
                        let d: f64 = (0..spec.prototype_dim)
                            .map(|j| {
                                let x = feats[[t, j]] - corpus.prototypes[[p, j]] - offset[j];
                                x * x
                            })
                            .sum();
                        if d < best.0 {
                            best = (d, p);
                        }
                    }
                    if best.1 == want {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        let acc = 100.0 * correct as f64 / total as f64;
        assert!(acc >= 95.0, "oracle frame accuracy {acc:.2}% below 95%");

        // Full recipe at the stock configuration.
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = tmp.path().join("run-a").to_string_lossy().to_string();
        let started = Instant::now();
        let summary = pipeline::run(&cfg, &[]).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        let wer = summary.eval_wer.expect("pipeline reports an eval WER");
        assert!(wer <= 5.0, "end-to-end eval WER {wer:.2}% above 5%");
        assert!(elapsed <= 1200.0, "end-to-end run took {elapsed:.0}s (> 20 min)");

        // Same seed in a fresh directory reproduces the WER bit-exactly.
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = tmp.path().join("run-b").to_string_lossy().to_string();
        let summary2 = pipeline::run(&cfg2, &[]).unwrap();
        let wer2 = summary2.eval_wer.unwrap();
        assert_eq!(
            wer.to_bits(),
            wer2.to_bits(),
            "same-seed rerun produced {wer2} instead of {wer}"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 7: transfer learning beats cold start
// ---------------------------------------------------------------------------

fn gmm_align_corpus(
    train: &[Utterance],
    lexicon: &Lexicon,
    em_iters: usize,
) -> (HmmGmmModel, HashMap<String, Vec<u32>>) {
    let cfg = HmmConfig::default();
    let mut model = flat_start(lexicon, train, &cfg).unwrap();
    for _ in 0..em_iters {
        model = baum_welch_update(&model, lexicon, train).unwrap().0;
    }
    let mut aligns = HashMap::new();
    for u in train {
        let a = viterbi_align(&model, lexicon, u).unwrap();
        aligns.insert(u.id.clone(), a.states);
    }
    (model, aligns)
}

fn to_train_utts(
    utts: &[Utterance],
    aligns: &HashMap<String, Vec<u32>>,
    net: &Network,
) -> Vec<TrainUtterance> {
    let (l, r) = net.receptive_field();
    let need = l + r + 1;
    utts.iter()
        .filter_map(|u| {
            let feats = match &u.audio {
                Audio::Features(f) => f.clone(),
                _ => return None,
            };
            let mut states = aligns.get(&u.id)?.clone();
            let mut feats = feats;
            while feats.nrows() < need {
                let last = feats.row(feats.nrows() - 1).to_owned();
                feats.push_row(last.view()).unwrap();
                states.push(*states.last().unwrap());
            }
            Some(TrainUtterance {
                id: u.id.clone(),
                feats,
                alignment: Some(states),
                numerator: None,
            })
        })
        .collect()
}

#[test]
fn c07_transfer_learning() {
    criterion(7, "fine-tuning beats cold start on 10% labels", || {
        let spec_a = ToyLanguageSpec {
            utterances_train: 80,
            utterances_dev: 5,
            utterances_eval: 5,
            seed: 11,
            ..ToyLanguageSpec::default()
        };
        let spec_b = ToyLanguageSpec {
            utterances_train: 100,
            utterances_dev: 15,
            utterances_eval: 5,
            seed: 22,
            ..ToyLanguageSpec::default()
        };
        let corpus_a = synthesize_toy_corpus(&spec_a).unwrap();
        let corpus_b = synthesize_toy_corpus(&spec_b).unwrap();
        let lex_a = full_vocab_lexicon(&corpus_a);
        let lex_b = full_vocab_lexicon(&corpus_b);
        let (_, aligns_a) = gmm_align_corpus(&corpus_a.train, &lex_a, 2);
        let (model_b, mut aligns_b) = gmm_align_corpus(&corpus_b.train, &lex_b, 2);
        for u in &corpus_b.dev {
            let a = viterbi_align(&model_b, &lex_b, u).unwrap();
            aligns_b.insert(u.id.clone(), a.states);
        }

        let darts_cfg = DartsConfig {
            width_scale: 1.0 / 32.0,
            ..DartsConfig::default()
        };
        let specs = preset_layer_table("tdnn", &darts_cfg);
        let input_dim = spec_a.prototype_dim;
        let num_states = model_b.inventory.num_states();

        // Pretrain on all of domain A.
        let base = TrainConfig {
            epochs: 3,
            w_mmi: 0.0,
            w_ce: 1.0,
            ..TrainConfig::default()
        };
        let net_a = Network::new(specs.clone(), input_dim, num_states, false, 7).unwrap();
        let train_a = to_train_utts(&corpus_a.train, &aligns_a, &net_a);
        let dev_a = to_train_utts(&corpus_a.dev.iter().cloned().collect::<Vec<_>>(), &aligns_a, &net_a);
        let dev_a = if dev_a.is_empty() { train_a[..4].to_vec() } else { dev_a };
        let (pretrained, _) = train_am(net_a, &train_a, &dev_a, None, &base).unwrap();

        // 10% of domain B, three fine-tuning seeds.
        let b_lab = &corpus_b.train[..10];
        let train_b = to_train_utts(b_lab, &aligns_b, &pretrained);
        let dev_b = to_train_utts(&corpus_b.dev, &aligns_b, &pretrained);
        let mut wins = 0;
        for seed in [1u64, 2, 3] {
            let cfg = TrainConfig { seed, ..base.clone() };
            let warm = warm_start(pretrained.clone(), num_states, true, seed).unwrap();
            let (_, rep_warm) = train_am(warm, &train_b, &dev_b, None, &cfg).unwrap();
            let cold = Network::new(specs.clone(), input_dim, num_states, false, seed + 100).unwrap();
            let (_, rep_cold) = train_am(cold, &train_b, &dev_b, None, &cfg).unwrap();
            let best = |r: &darts_forge::nnet::TrainReport| {
                r.dev_losses.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            if best(&rep_warm) < best(&rep_cold) {
                wins += 1;
            }
        }
        assert!(wins >= 2, "transfer won only {wins}/3 seeds");
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: semi-supervised training
// ---------------------------------------------------------------------------

fn small_pipeline_cfg(seed: u64, out_dir: String) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.out_dir = out_dir;
    cfg.corpus.vocab_size = 10;
    cfg.corpus.grapheme_count = 6;
    cfg.corpus.train = 100;
    cfg.corpus.dev = 10;
    cfg.corpus.eval = 30;
    cfg.nnet.arch = "tdnn".to_string();
    cfg.nnet.width_scale = 1.0 / 32.0;
    cfg.nnet.epochs = 3;
    cfg.rescore.enabled = false;
    cfg
}

#[test]
fn c08_semi_supervised() {
    criterion(8, "semi-supervised training helps or holds", || {
        // Degenerate case: a lattice holding only the ground-truth path gives
        // exactly the supervised objective.
        let states: Vec<u32> = vec![0, 0, 1, 2, 2, 3];
        let align = Alignment {
            id: "u".into(),
            states: states.clone(),
            graphemes: vec!["a".into(); states.len()],
        };
        let num_sup = build_numerator_graph(&align, 0);
        let nodes: Vec<LatticeNode> = (0..=states.len()).map(|t| LatticeNode { frame: t }).collect();
        let arcs: Vec<LatticeArc> = states
            .iter()
            .enumerate()
            .map(|(t, &s)| LatticeArc {
                from: t,
                to: t + 1,
                word: None,
                state: state_label(s),
                am: -0.5,
                lm: 0.0,
            })
            .collect();
        let lat = Lattice {
            id: "u".into(),
            num_frames: states.len(),
            nodes,
            arcs,
        };
        let num_semi = semisup_numerator(&lat, 1.0).unwrap();
        let den = loop_denominator(4);
        let mut rng = ChaCha20Rng::seed_from_u64(800);
        let scores = rand_matrix(&mut rng, states.len(), 4, -1.0, 1.0);
        let (v_sup, g_sup) = mmi_objective(&scores, &num_sup, &den, 1.0).unwrap();
        let (v_semi, g_semi) = mmi_objective(&scores, &num_semi, &den, 1.0).unwrap();
        assert!(
            (v_sup - v_semi).abs() <= 1e-10,
            "degenerate semi-supervised objective {v_semi} differs from supervised {v_sup}"
        );
        let gd = (&g_sup - &g_semi).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(gd <= 1e-10, "degenerate gradients differ by {gd}");

        // Pipeline: 20% labels, +80% unlabeled via lattice supervision.
        let tmp = tempfile::tempdir().unwrap();
        let mut wins = 0;
        for seed in [3u64, 4, 5] {
            let mut seed_cfg = small_pipeline_cfg(
                seed,
                tmp.path().join(format!("seed-{seed}")).to_string_lossy().to_string(),
            );
            seed_cfg.corpus.label_fraction = 0.2;
            let wer_seed = pipeline::run(&seed_cfg, &[]).unwrap().eval_wer.unwrap();

            let mut semi_cfg = small_pipeline_cfg(
                seed,
                tmp.path().join(format!("semi-{seed}")).to_string_lossy().to_string(),
            );
            semi_cfg.corpus.label_fraction = 0.2;
            semi_cfg.nnet.semisup = true;
            semi_cfg.nnet.semisup_epochs = 2;
            let wer_semi = pipeline::run(&semi_cfg, &[]).unwrap().eval_wer.unwrap();
            if wer_semi <= wer_seed + 0.2 {
                wins += 1;
            }
        }
        assert!(wins >= 2, "semi-supervised helped/held in only {wins}/3 seeds");
    });
}

// ---------------------------------------------------------------------------
// Criterion 9: rescoring and combination
// ---------------------------------------------------------------------------

#[test]
fn c09_rescoring_and_combination() {
    criterion(9, "4-gram rescoring, ROVER, ranking preservation", || {
        // Zero-weight rescoring preserves rankings exactly.
        let sentences: Vec<Vec<String>> = ["a b", "b a", "a a b"]
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        let refs: Vec<&[String]> = sentences.iter().map(|s| s.as_slice()).collect();
        let counts = count_ngrams(refs.iter().copied(), 2).unwrap();
        let toy_lm = kneser_ney(&counts, 2, None).unwrap();
        let list = NBestList {
            id: "u".into(),
            entries: vec![
                NBestEntry { words: vec!["a".into(), "b".into()], am: 1.0, lm: 0.5, total: 1.5 },
                NBestEntry { words: vec!["b".into()], am: 1.2, lm: 0.9, total: 2.1 },
                NBestEntry { words: vec!["b".into(), "a".into()], am: 2.0, lm: 0.8, total: 2.8 },
                NBestEntry { words: vec![], am: 3.0, lm: 0.1, total: 3.1 },
            ],
        };
        let rescored = rescore_nbest(&list, &[(&toy_lm, 0.0)], 1.0, 0.0);
        let order: Vec<&Vec<String>> = rescored.entries.iter().map(|e| &e.words).collect();
        let want: Vec<&Vec<String>> = list.entries.iter().map(|e| &e.words).collect();
        assert_eq!(order, want, "zero-weight rescoring reordered the N-best list");

        // 4-gram rescoring on background text never hurts (2/3 seeds).
        let mut rescore_wins = 0;
        for seed in [21u64, 22, 23] {
            let spec = ToyLanguageSpec {
                vocab_size: 15,
                grapheme_count: 6,
                utterances_train: 150,
                utterances_dev: 20,
                utterances_eval: 30,
                seed,
                ..ToyLanguageSpec::default()
            };
            let corpus = synthesize_toy_corpus(&spec).unwrap();
            let rec = build_gmm_recognizer(&corpus, 3, 2);
            let cfg = DecodeConfig {
                beam: 50.0,
                max_active: 7000,
                lattice_beam: 10.0,
                acoustic_scale: 1.0,
            };
            let decode_split = |utts: &[Utterance]| -> Vec<(NBestList, Vec<String>)> {
                utts.iter()
                    .map(|u| {
                        let scores = gmm_frame_scores(&rec.model, u);
                        let lat = decode(&rec.hclg, &scores, &rec.words, &u.id, &cfg).unwrap();
                        (nbest(&lat, 10), u.transcript.clone())
                    })
                    .collect()
            };
            let dev = decode_split(&corpus.dev);
            let eval = decode_split(&corpus.eval);

            // Extra background text: a larger corpus over the same language.
            let bg_spec = ToyLanguageSpec {
                utterances_train: 1500,
                utterances_dev: 1,
                utterances_eval: 1,
                ..spec.clone()
            };
            let bg = synthesize_toy_corpus(&bg_spec).unwrap();
            assert_eq!(bg.words, corpus.words, "background text changed vocabulary");
            let bg_text = toy_transcripts(&bg);
            let bg_refs: Vec<&[String]> = bg_text.iter().map(|t| t.as_slice()).collect();
            let bg_counts = count_ngrams(bg_refs.iter().copied(), 4).unwrap();
            let lm4 = kneser_ney(&bg_counts, 4, None).unwrap();

            let tuned = tune_weights(
                &dev,
                &[(&lm4, 1.0)],
                &[1.0],
                &[0.0, 0.25, 0.5, 1.0],
                &[0.0, 0.5, 1.0],
            )
            .unwrap();
            let wer_of = |hyps: &[(Vec<String>, Vec<String>)]| -> f64 {
                let mut edits = 0usize;
                let mut len = 0usize;
                for (reference, hyp) in hyps {
                    let c = edit_counts(reference, hyp);
                    edits += c.total_edits();
                    len += reference.len();
                }
                100.0 * edits as f64 / len.max(1) as f64
            };
            let baseline: Vec<(Vec<String>, Vec<String>)> = eval
                .iter()
                .map(|(l, r)| (r.clone(), l.entries.first().map(|e| e.words.clone()).unwrap_or_default()))
                .collect();
            let rescored: Vec<(Vec<String>, Vec<String>)> = eval
                .iter()
                .map(|(l, r)| {
                    let rl = rescore_nbest(
                        l,
                        &[(&lm4, tuned.lm_weight)],
                        tuned.am_weight,
                        tuned.word_penalty,
                    );
                    (r.clone(), rl.entries.first().map(|e| e.words.clone()).unwrap_or_default())
                })
                .collect();
            if wer_of(&rescored) <= wer_of(&baseline) + 1e-9 {
                rescore_wins += 1;
            }
        }
        assert!(rescore_wins >= 2, "rescoring hurt in {}/3 seeds", 3 - rescore_wins);

        // ROVER over three architecture variants.
        let tmp = tempfile::tempdir().unwrap();
        let base = small_pipeline_cfg(7, tmp.path().join("matrix-base").to_string_lossy().to_string());
        let variants: Vec<Variant> = ["tdnn", "cnn-tdnn", "tdnn-lstm"]
            .iter()
            .map(|arch| Variant {
                name: arch.to_string(),
                arch: Some(arch.to_string()),
                ..Variant::default()
            })
            .collect();
        let report = pipeline::experiment_matrix(&base, &variants).unwrap();
        let mut singles = Vec::new();
        let mut combined = None;
        for row in &report.rows {
            assert!(row.error.is_none(), "variant {} failed: {:?}", row.name, row.error);
            if row.name == "combination" {
                combined = row.wer;
            } else {
                singles.push(row.wer.unwrap());
            }
        }
        assert_eq!(singles.len(), 3);
        let best_single = singles.iter().cloned().fold(f64::INFINITY, f64::min);
        let combined = combined.expect("matrix produced a combination row");
        assert!(
            combined <= best_single + 0.5,
            "ROVER WER {combined:.2} worse than best single {best_single:.2} + 0.5"
        );
    });
}

// ---------------------------------------------------------------------------
// Criterion 10: full-width architecture fidelity
// ---------------------------------------------------------------------------

/// Recompute the parameter count of a layer table symbolically, mirroring
/// only the published shape rules (3x3 kernels, spliced affines with batch
/// norm on TDNN layers, projected LSTMs, two linear heads).
fn symbolic_param_count(
    specs: &[LayerSpec],
    input_dim: usize,
    num_states: usize,
    use_blstm: bool,
) -> usize {
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    let mut count = 0usize;
    let mut prev = input_dim;
    let mut channels = 1usize;
    let mut freq = input_dim;
    let mut seen_non_conv = false;
    for s in specs {
        match &s.kind {
            LayerKind::Conv { stride_f } => {
                count += 3 * 3 * channels * s.dim; // kernel
                count += 2 * s.dim; // batch-norm gamma and beta
                channels = s.dim;
                freq = freq.div_ceil(*stride_f);
                dims.insert(&s.id, s.dim);
            }
            LayerKind::Tdnn | LayerKind::Linear => {
                if !seen_non_conv {
                    prev = if channels > 1 { freq * channels } else { input_dim };
                    seen_non_conv = true;
                }
                let w_in: usize = s
                    .offsets
                    .iter()
                    .map(|o| match o {
                        OffsetRef::Rel(_) => prev,
                        OffsetRef::Layer(id) => dims[id.as_str()],
                    })
                    .sum();
                count += w_in * s.dim + s.dim;
                if matches!(s.kind, LayerKind::Tdnn) {
                    count += 2 * s.dim;
                }
                prev = s.dim;
                dims.insert(&s.id, s.dim);
            }
            LayerKind::Lstmp { hidden, proj, .. } => {
                if !seen_non_conv {
                    prev = if channels > 1 { freq * channels } else { input_dim };
                    seen_non_conv = true;
                }
                let dirs = if use_blstm { 2 } else { 1 };
                count += dirs * (prev * 4 * hidden + proj * 4 * hidden + 4 * hidden + hidden * proj);
                prev = if use_blstm { proj * 2 } else { *proj };
                dims.insert(&s.id, prev);
            }
        }
    }
    count + 2 * (prev * num_states + num_states)
}

#[test]
fn c10_architecture_fidelity() {
    criterion(10, "width-1 architecture matches the reference tables", || {
        let cfg = DartsConfig {
            width_scale: 1.0,
            use_blstm: false,
            swap_6r_7r: false,
        };
        let table = default_layer_table(&cfg);

        // Block structure: 5 convs, 18 TDNN-block rows, 13 recurrent rows.
        let convs: Vec<&LayerSpec> = table
            .iter()
            .filter(|s| matches!(s.kind, LayerKind::Conv { .. }))
            .collect();
        assert_eq!(convs.len(), 5);
        for (i, c) in convs.iter().enumerate() {
            assert_eq!(c.dim, 32, "conv {} filter count", c.id);
            let want_stride = if c.id == "c3" { 2 } else { 1 };
            assert!(
                matches!(c.kind, LayerKind::Conv { stride_f } if stride_f == want_stride),
                "conv {} stride (position {i})",
                c.id
            );
        }
        let l_rows: Vec<&LayerSpec> = table.iter().filter(|s| s.id.ends_with('l')).collect();
        let r_rows: Vec<&LayerSpec> = table.iter().filter(|s| s.id.ends_with('r')).collect();
        assert_eq!(l_rows.len(), 18, "TDNN block row count");
        assert_eq!(r_rows.len(), 13, "recurrent block row count");

        // TDNN rows are 1280-dim, linear bottlenecks 256, with the one
        // transposed pair in the third recurrent repetition.
        for s in &l_rows {
            match s.kind {
                LayerKind::Tdnn => assert_eq!(s.dim, 1280, "{} dim", s.id),
                LayerKind::Linear => assert_eq!(s.dim, 256, "{} dim", s.id),
                _ => panic!("unexpected kind in TDNN block: {}", s.id),
            }
        }
        for s in &r_rows {
            match (&s.kind, s.id.as_str()) {
                (LayerKind::Lstmp { cell, hidden, proj }, id) => {
                    assert!(matches!(id, "1r" | "5r" | "9r" | "13r"), "LSTM position {id}");
                    assert_eq!((*cell, *hidden, *proj), (1024, 256, 128), "{id} LSTM dims");
                }
                (LayerKind::Tdnn, "6r") => assert_eq!(s.dim, 256),
                (LayerKind::Linear, "7r") => assert_eq!(s.dim, 1280),
                (LayerKind::Tdnn, _) => assert_eq!(s.dim, 1280, "{} dim", s.id),
                (LayerKind::Linear, _) => assert_eq!(s.dim, 256, "{} dim", s.id),
                _ => panic!("unexpected kind in recurrent block: {}", s.id),
            }
        }
        // Cross-layer connections feed each TDNN from earlier bottlenecks.
        let offsets_of = |id: &str| -> Vec<String> {
            table
                .iter()
                .find(|s| s.id == id)
                .unwrap()
                .offsets
                .iter()
                .filter_map(|o| match o {
                    OffsetRef::Layer(l) => Some(l.clone()),
                    OffsetRef::Rel(_) => None,
                })
                .collect()
        };
        assert_eq!(offsets_of("10l"), vec!["6l", "3l"]);
        assert_eq!(offsets_of("16l"), vec!["9l", "6l", "3l"]);
        assert_eq!(offsets_of("6r"), vec!["15l", "12l", "9l"]);
        assert_eq!(offsets_of("10r"), vec!["8r", "4r", "18l"]);

        // Parameter count vs the independent symbolic computation, both
        // directions of the recurrent block, and a scaled-width variant.
        let input_dim = 30;
        let num_states = 100;
        for use_blstm in [false, true] {
            let net = Network::new(table.clone(), input_dim, num_states, use_blstm, 0).unwrap();
            assert_eq!(
                net.params["c1.kernel"].shape(),
                &[3, 3, 1, 32],
                "first conv kernel shape"
            );
            assert_eq!(net.params["c2.kernel"].shape(), &[3, 3, 32, 32]);
            let want = symbolic_param_count(&table, input_dim, num_states, use_blstm);
            assert_eq!(
                net.num_params(),
                want,
                "parameter count (blstm = {use_blstm})"
            );
        }
        let scaled = default_layer_table(&DartsConfig {
            width_scale: 1.0 / 16.0,
            ..cfg
        });
        let net = Network::new(scaled.clone(), input_dim, num_states, false, 0).unwrap();
        assert_eq!(
            net.num_params(),
            symbolic_param_count(&scaled, input_dim, num_states, false)
        );
    });
}
