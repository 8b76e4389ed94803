//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=3,7` to run a subset.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scanpath::corpus::{
    compute_norm_stats, generate_synthetic_corpus, load_corpus, make_splits, save_corpus, Corpus,
    Scanpath, Sentence, SplitKind, SyntheticCorpus,
};
use scanpath::embed::EmbeddingSet;
use scanpath::eval::{
    evaluate_nll, levenshtein, nll_by_saccade_range, paired_ttest, parse_buckets,
    uniform_predictor, EmpiricalLabelDist, ModelPredictor, Predictor, DEFAULT_ALPHA,
};
use scanpath::model::{
    attention_weights, class_index, num_classes, range_of, AttentionWindow, Kernel, KernelKind,
    Model, ModelConfig, PathInput, SigmaRule, WindowMode,
};
use scanpath::scangen::{generate, GenerateOptions, StopReason};
use scanpath::train::{fine_tune, train, Checkpoint, TrainConfig};
use scanpath_nn::{grad_check, GradCheckOptions, Mode, Tensor};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Everything a trained synthetic experiment leaves behind.
struct Trained {
    synth: SyntheticCorpus,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    ckpt: Checkpoint<f32>,
    elapsed: Duration,
}

fn new_sentence_fold(corpus: &Corpus, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let plan = make_splits(corpus, SplitKind::NewSentence, 5, seed).expect("split");
    let fold = plan.fold(0).expect("fold 0");
    (fold.train_indices(), fold.test_indices())
}

fn run_single_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
        .install(f)
}

fn planted() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let synth = generate_synthetic_corpus(&common::planted_spec(), 20, 100, 11)
            .expect("synthetic corpus");
        let (train_idx, test_idx) = new_sentence_fold(&synth.corpus, 11);
        let config = ModelConfig {
            max_len: Some(10),
            ..common::small_config()
        };
        let start = Instant::now();
        let ckpt = run_single_core(|| {
            train::<f32>(
                &synth.corpus,
                &train_idx,
                None,
                &config,
                &common::small_train(3),
            )
        })
        .expect("training");
        Trained {
            synth,
            train_idx,
            test_idx,
            ckpt,
            elapsed: start.elapsed(),
        }
    })
}

/// Full model and the variant without the word-sequence encoder on the regression-trigger task.
fn regression_models() -> &'static (Trained, Checkpoint<f32>) {
    static CELL: OnceLock<(Trained, Checkpoint<f32>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let synth = generate_synthetic_corpus(&common::regression_spec(), 10, 200, 21)
            .expect("synthetic corpus");
        let (train_idx, test_idx) = new_sentence_fold(&synth.corpus, 21);
        let full = ModelConfig {
            max_len: Some(10),
            ..common::small_config()
        };
        let ablated = ModelConfig {
            use_word_encoder: false,
            ..full.clone()
        };
        let start = Instant::now();
        let ckpt = train::<f32>(
            &synth.corpus,
            &train_idx,
            None,
            &full,
            &common::small_train(5),
        )
        .expect("training");
        let elapsed = start.elapsed();
        let bare = train::<f32>(
            &synth.corpus,
            &train_idx,
            None,
            &ablated,
            &common::small_train(5),
        )
        .expect("training");
        (
            Trained {
                synth,
                train_idx,
                test_idx,
                ckpt,
                elapsed,
            },
            bare,
        )
    })
}

// ---------------------------------------------------------------------------------------------
// 1. Gradient soundness

fn grad_corpus() -> Corpus {
    let sent =
        |id: &str, w: &str| Sentence::new(id, w.split(' ').map(String::from).collect()).unwrap();
    let sentences = vec![
        sent("a", "one two three four five"),
        sent("b", "six seven eight"),
    ];
    let path = |r: &str, s: &str, idx: &[usize], k: f64| {
        let mut sp = Scanpath::from_indices(r, s, idx);
        for (j, f) in sp.fixations.iter_mut().enumerate() {
            f.duration = 150.0 + 41.0 * ((j as f64 * 1.7 + k) % 4.0);
            f.landing_pos = (0.13 + 0.29 * j as f64 + 0.07 * k) % 1.0;
        }
        sp
    };
    let scanpaths = vec![
        path("r1", "a", &[1, 2, 4, 3, 5], 0.0),
        path("r2", "a", &[2, 3, 5], 1.0),
        path("r1", "b", &[1, 3, 2], 2.0),
        path("r2", "b", &[1], 3.0),
    ];
    Corpus::new(sentences, scanpaths).unwrap()
}

fn grad_variants() -> Vec<(&'static str, ModelConfig, bool)> {
    let base = ModelConfig {
        max_len: Some(5),
        ..common::tiny_config()
    };
    let v = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone(), false),
        ("frozen embeddings", base.clone(), true),
        ("w/o word length", v(&|c| c.use_word_length = false), false),
        ("w/o duration", v(&|c| c.use_duration = false), false),
        ("w/o landing", v(&|c| c.use_landing = false), false),
        ("w/o kernel", v(&|c| c.kernel = KernelKind::None), false),
        (
            "skewed kernel",
            v(&|c| {
                c.window_left = 2;
                c.window_right = 1;
                c.kernel_center_offset = 1.0;
                c.sigma = SigmaRule::Fixed {
                    left: 0.7,
                    right: 1.3,
                };
            }),
            false,
        ),
        (
            "w/o window",
            v(&|c| c.window_mode = WindowMode::Global),
            false,
        ),
        (
            "w/o window+kernel",
            v(&|c| {
                c.window_mode = WindowMode::Global;
                c.kernel = KernelKind::None;
            }),
            false,
        ),
        (
            "w/o word encoder",
            v(&|c| c.use_word_encoder = false),
            false,
        ),
        (
            "reader embedding",
            v(&|c| c.reader_embedding = Some(3)),
            false,
        ),
    ]
}

fn frozen_embeddings(corpus: &Corpus, dim: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut set = EmbeddingSet::new(dim);
    for s in corpus.sentences.values() {
        for (j, t) in s.tokens.iter().enumerate() {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set.insert_contextual(&s.sentence_id, j as u32 + 1, v)
                .unwrap();
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set.insert_noncontextual(t, v).unwrap();
        }
    }
    set
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let corpus = grad_corpus();
    let idx: Vec<usize> = (0..corpus.scanpaths.len()).collect();
    let norm = compute_norm_stats(&corpus, &idx).map_err(err)?;
    let readers: Vec<String> = corpus.reader_ids().into_iter().map(String::from).collect();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0;
    for (name, config, frozen) in grad_variants() {
        let emb = frozen.then(|| frozen_embeddings(&corpus, config.embed_dim));
        let vocab = (!frozen).then(|| scanpath::embed::build_vocab(&corpus));
        let model = Model::<f64>::new(config, 5, vocab, &readers, 17).map_err(err)?;
        let items: Vec<PathInput<'_>> = idx
            .iter()
            .map(|&i| PathInput::new(corpus.sentence_of(i), &corpus.scanpaths[i]))
            .collect();
        // A generic point: no bias sits exactly on a ReLU kink.
        let mut store = model.params.clone();
        let mut jitter = ChaCha8Rng::seed_from_u64(23);
        for t in store.tensors_mut() {
            for x in t.data_mut() {
                *x += jitter.gen_range(-0.1..0.1);
            }
        }
        for mode in [Mode::Eval, Mode::Train] {
            let report = grad_check(
                &mut store,
                |g, p| {
                    let mut rng = ChaCha8Rng::seed_from_u64(5);
                    model
                        .forward_batch(g, p, &items, emb.as_ref(), &norm, mode, &mut rng)
                        .map(|o| o.loss)
                },
                GradCheckOptions::default(),
            )
            .map_err(|e: scanpath::Error| e.to_string())?;
            checked += report.groups.iter().map(|g| g.checked).sum::<usize>();
            worst = worst.max(report.max_rel_err());
            if !report.passed() {
                failures.push(format!("{name} ({mode:?}): {:?}", report.failures()));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = failures.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "max relative error {worst:.2e} < 1e-4 over {checked} entries in 11 configurations, {:.1}s < 120s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {failures:?}") }
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 2. Uniform closed form

fn criterion_2() -> Outcome {
    let synth = generate_synthetic_corpus(&common::planted_spec(), 4, 20, 2).map_err(err)?;
    let corpus = &synth.corpus;
    let idx: Vec<usize> = (0..corpus.scanpaths.len()).collect();
    let mut worst = 0.0f64;
    for max_len in [10usize, 11, 16] {
        let expect = ((2 * max_len + 1) as f64).ln();
        let config = ModelConfig {
            max_len: Some(max_len),
            ..common::small_config()
        };
        let mut model = Model::<f32>::new(
            config,
            max_len,
            Some(scanpath::embed::build_vocab(corpus)),
            &[],
            4,
        )
        .map_err(err)?;
        let (w, b) = model.head_params();
        for id in [w, b] {
            model
                .params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let ckpt = Checkpoint {
            model,
            norm: compute_norm_stats(corpus, &idx).map_err(err)?,
            history: Default::default(),
            adam: None,
            embeddings: None,
        };
        let model_nll =
            evaluate_nll(&ModelPredictor::new(&ckpt, None), corpus, &idx).map_err(err)?;
        let uni = evaluate_nll(&uniform_predictor(max_len), corpus, &idx).map_err(err)?;
        for x in model_nll.per_scanpath.iter().chain(&uni.per_scanpath) {
            worst = worst.max((x - expect).abs());
        }
    }
    Ok((
        worst <= 1e-6,
        format!("max |NLL - ln(2M+1)| = {worst:.2e} <= 1e-6 for zero-head model and uniform baseline, M in {{10, 11, 16}}"),
    ))
}

// ---------------------------------------------------------------------------------------------
// 3. Planted-policy learning

fn label_dist(t: &Trained) -> Result<EmpiricalLabelDist, String> {
    EmpiricalLabelDist::from_corpus(
        &t.synth.corpus,
        &t.train_idx,
        t.ckpt.model.max_len,
        DEFAULT_ALPHA,
    )
    .map_err(err)
}

fn criterion_3() -> Outcome {
    let t = planted();
    let corpus = &t.synth.corpus;
    let h = t.synth.scanpath_entropy(&t.test_idx);
    let nll =
        evaluate_nll(&ModelPredictor::new(&t.ckpt, None), corpus, &t.test_idx).map_err(err)?;
    let label = evaluate_nll(&label_dist(t)?.predictor(), corpus, &t.test_idx).map_err(err)?;
    let uni = evaluate_nll(
        &uniform_predictor(t.ckpt.model.max_len),
        corpus,
        &t.test_idx,
    )
    .map_err(err)?;
    let ok = nll.mean <= h + 0.1
        && nll.mean <= 0.85 * label.mean
        && label.mean < uni.mean
        && t.elapsed < Duration::from_secs(900);
    Ok((
        ok,
        format!(
            "test NLL {:.4} <= H + 0.1 = {:.4}; label-dist {:.4} (ratio {:.3} <= 0.85); uniform {:.4}; \
             single-core f32 training {:.0}s < 900s ({} epochs)",
            nll.mean,
            h + 0.1,
            label.mean,
            nll.mean / label.mean,
            uni.mean,
            t.elapsed.as_secs_f64(),
            t.ckpt.history.epochs.len()
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 4. Ablation ordering

/// Mean per-scanpath NLL per test sentence, in sentence order.
fn sentence_groups(corpus: &Corpus, idx: &[usize], per_scanpath: &[f64]) -> Vec<f64> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (&i, &x) in idx.iter().zip(per_scanpath) {
        groups
            .entry(corpus.scanpaths[i].sentence_id.as_str())
            .or_default()
            .push(x);
    }
    groups
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect()
}

fn criterion_4() -> Outcome {
    let (t, bare) = regression_models();
    let corpus = &t.synth.corpus;
    let full =
        evaluate_nll(&ModelPredictor::new(&t.ckpt, None), corpus, &t.test_idx).map_err(err)?;
    let abl = evaluate_nll(&ModelPredictor::new(bare, None), corpus, &t.test_idx).map_err(err)?;
    let a = sentence_groups(corpus, &t.test_idx, &abl.per_scanpath);
    let f = sentence_groups(corpus, &t.test_idx, &full.per_scanpath);
    let test = paired_ttest(&a, &f).map_err(err)?;
    let ok = a.len() >= 30 && abl.mean > full.mean && test.p < 0.05;
    Ok((
        ok,
        format!(
            "w/o word encoder NLL {:.4} > full {:.4}; paired t = {:.2}, p = {:.2e} < 0.05 over {} sentence groups",
            abl.mean,
            full.mean,
            test.t,
            test.p,
            a.len()
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 5. Metric oracles

fn brute_levenshtein(s: &[usize], t: &[usize]) -> usize {
    match (s.split_first(), t.split_first()) {
        (None, _) => t.len(),
        (_, None) => s.len(),
        (Some((a, sr)), Some((b, tr))) => {
            let sub = brute_levenshtein(sr, tr) + usize::from(a != b);
            sub.min(brute_levenshtein(sr, t) + 1)
                .min(brute_levenshtein(s, tr) + 1)
        }
    }
}

/// Regularized incomplete beta by Lentz's continued fraction.
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    fn ln_gamma(x: f64) -> f64 {
        // Lanczos, g = 7.
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if x < 0.5 {
            return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
                - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let mut s = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            s += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
    }
    fn cf(a: f64, b: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let mut c = 1.0;
        let mut d = 1.0 - (a + b) * x / (a + 1.0);
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..10_000 {
            let m = m as f64;
            let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
            d = 1.0 + num * d;
            d = if d.abs() < tiny { 1.0 / tiny } else { 1.0 / d };
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            h *= d * c;
            let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
            d = 1.0 + num * d;
            d = if d.abs() < tiny { 1.0 / tiny } else { 1.0 / d };
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h
    }
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * cf(a, b, x) / a
    } else {
        1.0 - front * cf(b, a, 1.0 - x) / b
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut lev_mismatch = 0;
    for _ in 0..1000 {
        let alpha = rng.gen_range(1..=4);
        let s: Vec<usize> = (0..rng.gen_range(0..=8))
            .map(|_| rng.gen_range(0..alpha))
            .collect();
        let t: Vec<usize> = (0..rng.gen_range(0..=8))
            .map(|_| rng.gen_range(0..alpha))
            .collect();
        if levenshtein(&s, &t) != brute_levenshtein(&s, &t) {
            lev_mismatch += 1;
        }
    }

    // Counting oracle for the label-distribution cross-entropy.
    let synth = generate_synthetic_corpus(&common::regression_spec(), 6, 40, 5).map_err(err)?;
    let corpus = &synth.corpus;
    let (train_idx, test_idx) = new_sentence_fold(corpus, 5);
    let max_len = 10usize;
    let alpha = DEFAULT_ALPHA;
    let ranges = |sp: &Scanpath| -> Vec<Option<i64>> {
        let mut prev = 0i64;
        let mut out: Vec<Option<i64>> = sp
            .fixations
            .iter()
            .map(|f| {
                let r = f.word_index as i64 - prev;
                prev = f.word_index as i64;
                Some(r)
            })
            .collect();
        out.push(None);
        out
    };
    let mut counts: HashMap<Option<i64>, f64> = HashMap::new();
    let mut total = 0.0;
    for &i in &train_idx {
        for r in ranges(&corpus.scanpaths[i]) {
            *counts.entry(r).or_default() += 1.0;
            total += 1.0;
        }
    }
    let k = (2 * max_len + 1) as f64;
    let mut oracle = 0.0;
    for &i in &test_idx {
        let rs = ranges(&corpus.scanpaths[i]);
        let ce: f64 = rs
            .iter()
            .map(|r| -((counts.get(r).copied().unwrap_or(0.0) + alpha) / (total + alpha * k)).ln())
            .sum();
        oracle += ce / rs.len() as f64;
    }
    oracle /= test_idx.len() as f64;
    let dist = EmpiricalLabelDist::from_corpus(corpus, &train_idx, max_len, alpha).map_err(err)?;
    let got = evaluate_nll(&dist.predictor(), corpus, &test_idx)
        .map_err(err)?
        .mean;
    let ce_err = (got - oracle).abs();

    // Textbook paired t-test.
    let mut t_err = 0.0f64;
    let mut p_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-0.5..0.8)).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let nf = n as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0)).sqrt();
        let t = mean / (sd / nf.sqrt());
        let df = nf - 1.0;
        let p = inc_beta(df / 2.0, 0.5, df / (df + t * t));
        let r = paired_ttest(&a, &b).map_err(err)?;
        t_err = t_err.max((r.t - t).abs() / t.abs().max(1.0));
        p_err = p_err.max((r.p - p).abs());
    }
    let ok = lev_mismatch == 0 && ce_err <= 1e-9 && t_err <= 1e-9 && p_err <= 1e-9;
    Ok((
        ok,
        format!(
            "levenshtein mismatches {lev_mismatch}/1000; label-dist NLL vs counting oracle {ce_err:.1e} <= 1e-9; \
             t-test |dt| {t_err:.1e}, |dp| {p_err:.1e} <= 1e-9"
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 6. Attention invariants

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut violations: Vec<String> = Vec::new();
    let mut worst_sum = 0.0f64;
    for draw in 0..10_000 {
        let m = rng.gen_range(1..=12);
        let hdim = rng.gen_range(1..=5);
        let zdim = rng.gen_range(1..=5);
        let f_prev = rng.gen_range(0..=m);
        let dl = rng.gen_range(0..=3);
        let dr = rng.gen_range(0..=3);
        let scale = rng.gen_range(0.1..4.0);
        let h: Vec<f64> = (0..hdim).map(|_| rng.gen_range(-scale..scale)).collect();
        let w_a = Tensor::new(
            vec![hdim, zdim],
            (0..hdim * zdim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let z = Tensor::matrix(
            m,
            zdim,
            (0..m * zdim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let global = draw % 4 == 3;
        let kernel = (draw % 2 == 0).then(|| Kernel {
            center_offset: [0.0, 0.0, 1.0, -1.0][rng.gen_range(0..4)],
            sigma_left: rng.gen_range(0.2..2.0),
            sigma_right: rng.gen_range(0.2..2.0),
        });
        let window = AttentionWindow {
            mode: if global {
                WindowMode::Global
            } else {
                WindowMode::Local
            },
            left: dl,
            right: dr,
            kernel,
        };
        let a = attention_weights(&h, &w_a, &z, f_prev, &window).map_err(err)?;
        // Independent bounds.
        let (lo, hi) = if global {
            (1, m)
        } else {
            let lo = (f_prev as i64 - dl as i64).max(1) as usize;
            let hi = (f_prev + dr).min(m);
            if lo > hi {
                (1, 1)
            } else {
                (lo, hi)
            }
        };
        for n in 1..=m {
            let inside = n >= lo && n <= hi;
            if !inside && (a.weights[n - 1] != 0.0 || a.pre_kernel[n - 1] != 0.0) {
                violations.push(format!("draw {draw}: weight outside window at {n}"));
            }
        }
        let s: f64 = a.pre_kernel.iter().sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
        if let Some(k) = kernel {
            let center = f_prev as f64 + k.center_offset;
            if k.center_offset.fract() == 0.0 && center >= 1.0 {
                let c = window.kernel_value(center as usize, f_prev);
                if (c - 1.0).abs() > 1e-15 {
                    violations.push(format!("draw {draw}: kernel {c} at the center"));
                }
            }
            for n in 1..=m {
                let kv = window.kernel_value(n, f_prev);
                if !(0.0..=1.0).contains(&kv) {
                    violations.push(format!("draw {draw}: kernel value {kv}"));
                }
                let farther = if (n as f64) < center {
                    n.checked_sub(1)
                } else {
                    Some(n + 1)
                };
                if let Some(nf) = farther.filter(|&x| x >= 1 && x <= m + 3) {
                    if window.kernel_value(nf, f_prev) > kv {
                        violations.push(format!("draw {draw}: kernel grows from {n} to {nf}"));
                    }
                }
                let expect = a.pre_kernel[n - 1] * if n >= lo && n <= hi { kv } else { 0.0 };
                if (a.weights[n - 1] - expect).abs() > 1e-15 {
                    violations.push(format!(
                        "draw {draw}: weight is not pre-kernel times kernel at {n}"
                    ));
                }
            }
        }
        if global && kernel.is_none() {
            let q: Vec<f64> = (0..zdim)
                .map(|j| (0..hdim).map(|i| h[i] * w_a.data()[i * zdim + j]).sum())
                .collect();
            let scores: Vec<f64> = (0..m)
                .map(|n| z.row(n).iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for n in 0..m {
                if (a.weights[n] - e[n] / tot).abs() > 1e-12 {
                    violations.push(format!("draw {draw}: global softmax differs at {}", n + 1));
                }
            }
        }
    }
    let ok = violations.is_empty() && worst_sum <= 1e-6;
    Ok((
        ok,
        format!(
            "10000 draws: {} violations, max |sum(pre-kernel) - 1| = {worst_sum:.1e} <= 1e-6{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!("; first: {v}"))
                .unwrap_or_default()
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 7. Generation validity and faithfulness

fn first_step_frequencies(
    ckpt: &Checkpoint<f32>,
    sentence: &Sentence,
    draws: usize,
) -> Result<f64, String> {
    let probs = ckpt
        .model
        .first_step_distribution(sentence, None, None, &ckpt.norm, true)
        .map_err(err)?;
    let opts = GenerateOptions {
        max_len: Some(1),
        n_samples: draws,
        seed: 77,
        ..Default::default()
    };
    let out = generate(ckpt, None, sentence, &opts).map_err(err)?;
    let mut counts = vec![0usize; probs.len()];
    for g in &out {
        let c = match g.indices.first() {
            Some(&w) => class_index(w as i64, ckpt.model.max_len).map_err(err)?,
            None => num_classes(ckpt.model.max_len) - 1,
        };
        counts[c] += 1;
    }
    Ok(probs
        .iter()
        .zip(&counts)
        .map(|(p, &n)| (n as f64 / draws as f64 - p).abs())
        .fold(0.0, f64::max))
}

fn criterion_7() -> Outcome {
    let t = planted();
    let corpus = &t.synth.corpus;
    let test_sentences: Vec<&Sentence> = {
        let mut ids: Vec<&str> = t
            .test_idx
            .iter()
            .map(|&i| corpus.scanpaths[i].sentence_id.as_str())
            .collect();
        ids.dedup();
        ids.iter().map(|id| corpus.sentence(id).unwrap()).collect()
    };
    let per = 10_000usize.div_ceil(test_sentences.len());
    let mut total = 0;
    let mut bad = 0;
    let mut eos = 0;
    for (k, s) in test_sentences.iter().enumerate() {
        let opts = GenerateOptions {
            n_samples: per,
            seed: k as u64,
            ..Default::default()
        };
        for g in generate(&t.ckpt, None, s, &opts).map_err(err)? {
            total += 1;
            let in_range = g.indices.iter().all(|&w| w >= 1 && w <= s.len());
            let terminated = matches!(g.stop, StopReason::Eos | StopReason::MaxLen)
                && g.indices.len() <= 4 * s.len();
            if !(in_range && terminated) {
                bad += 1;
            }
            eos += usize::from(g.stop == StopReason::Eos);
        }
    }
    // Faithfulness on a spread-out (untrained) head and on the trained one.
    let fresh_model = Model::<f32>::new(
        t.ckpt.model.config.clone(),
        t.ckpt.model.max_len,
        t.ckpt.model.vocab.clone(),
        &[],
        123,
    )
    .map_err(err)?;
    let fresh = Checkpoint {
        model: fresh_model,
        ..t.ckpt.clone()
    };
    let s0 = test_sentences[0];
    let dev_fresh = first_step_frequencies(&fresh, s0, 100_000)?;
    let dev_trained = first_step_frequencies(&t.ckpt, s0, 100_000)?;
    let ok = total >= 10_000 && bad == 0 && dev_fresh <= 0.01 && dev_trained <= 0.01;
    Ok((
        ok,
        format!(
            "{total} sampled paths, {bad} invalid, {eos} ended by EOS; first-step max |freq - p| over 1e5 draws: \
             untrained {dev_fresh:.4}, trained {dev_trained:.4} <= 0.01"
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 8. Fine-tune trend

fn criterion_8() -> Outcome {
    let pre = planted();
    let b = generate_synthetic_corpus(&common::policy_b_spec(), 40, 50, 81).map_err(err)?;
    let (pool_idx, test_idx) = new_sentence_fold(&b.corpus, 81);
    let pool = b.corpus.subset(&pool_idx);
    let test = b.corpus.subset(&test_idx);
    let test_all: Vec<usize> = (0..test.scanpaths.len()).collect();
    let tc = TrainConfig {
        patience: 4,
        max_epochs: 40,
        ..common::small_train(8)
    };
    let mut rows = Vec::new();
    for k in [0usize, 64, 256, 1024] {
        let ckpt = fine_tune(&pre.ckpt, &pool, k, None, &tc).map_err(err)?;
        let r = evaluate_nll(&ModelPredictor::new(&ckpt, None), &test, &test_all).map_err(err)?;
        rows.push((k, r));
    }
    let zero = &rows[0].1;
    let few = &rows[1].1;
    let sig = paired_ttest(&zero.per_scanpath, &few.per_scanpath).map_err(err)?;
    let monotone = rows
        .windows(2)
        .all(|w| w[1].1.mean <= w[0].1.mean + w[1].1.se);
    let ok = pool.scanpaths.len() >= 1024 && few.mean < zero.mean && sig.p < 0.05 && monotone;
    let table: Vec<String> = rows
        .iter()
        .map(|(k, r)| format!("k={k}: {:.4}±{:.4}", r.mean, r.se))
        .collect();
    Ok((
        ok,
        format!(
            "{}; k=64 vs zero-shot p = {:.2e} < 0.05; non-increasing within one SE: {monotone}",
            table.join(", "),
            sig.p
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 9. Reader embedding

fn criterion_9() -> Outcome {
    let synth =
        generate_synthetic_corpus(&common::two_population_spec(), 20, 100, 91).map_err(err)?;
    let corpus = &synth.corpus;
    let (train_idx, test_idx) = new_sentence_fold(corpus, 91);
    let bare = ModelConfig {
        max_len: Some(10),
        ..common::small_config()
    };
    let reader = ModelConfig {
        reader_embedding: Some(16),
        ..bare.clone()
    };
    let a = train::<f32>(corpus, &train_idx, None, &bare, &common::small_train(9)).map_err(err)?;
    let r =
        train::<f32>(corpus, &train_idx, None, &reader, &common::small_train(9)).map_err(err)?;
    let na = evaluate_nll(&ModelPredictor::new(&a, None), corpus, &test_idx).map_err(err)?;
    let nr = evaluate_nll(&ModelPredictor::new(&r, None), corpus, &test_idx).map_err(err)?;
    let test = paired_ttest(&na.per_scanpath, &nr.per_scanpath).map_err(err)?;
    let ok = nr.mean < na.mean && test.p < 0.05;
    Ok((
        ok,
        format!(
            "reader-embedding NLL {:.4} < bare {:.4} ({:.1}% lower); paired t = {:.2}, p = {:.2e} < 0.05 over {} scanpaths",
            nr.mean,
            na.mean,
            100.0 * (1.0 - nr.mean / na.mean),
            test.t,
            test.p,
            test_idx.len()
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 10. Determinism and persistence

fn criterion_10() -> Outcome {
    let synth = generate_synthetic_corpus(&common::planted_spec(), 6, 30, 10).map_err(err)?;
    let corpus = &synth.corpus;
    let (train_idx, test_idx) = new_sentence_fold(corpus, 10);
    let config = ModelConfig {
        max_len: Some(10),
        ..common::small_config()
    };
    let tc = TrainConfig {
        max_epochs: 3,
        ..common::small_train(10)
    };
    let a = train::<f32>(corpus, &train_idx, None, &config, &tc).map_err(err)?;
    let b = train::<f32>(corpus, &train_idx, None, &config, &tc).map_err(err)?;
    let c =
        run_single_core(|| train::<f32>(corpus, &train_idx, None, &config, &tc)).map_err(err)?;
    let same_history = a.history == b.history
        && a.history == c.history
        && a.model == b.model
        && a.model == c.model;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.eyckpt");
    a.save(&path).map_err(err)?;
    let loaded = Checkpoint::<f32>::load(&path).map_err(err)?;
    let before = evaluate_nll(&ModelPredictor::new(&a, None), corpus, &test_idx).map_err(err)?;
    let after =
        evaluate_nll(&ModelPredictor::new(&loaded, None), corpus, &test_idx).map_err(err)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let nll_exact = bits(&before.per_scanpath) == bits(&after.per_scanpath);
    let a64: Checkpoint<f64> = Checkpoint {
        model: a.model.cast(),
        norm: a.norm,
        history: a.history.clone(),
        adam: None,
        embeddings: None,
    };
    let p64 = dir.path().join("model64.eyckpt");
    a64.save(&p64).map_err(err)?;
    let l64 = Checkpoint::<f64>::load(&p64).map_err(err)?;
    let nll64_exact = bits(
        &evaluate_nll(&ModelPredictor::new(&a64, None), corpus, &test_idx)
            .map_err(err)?
            .per_scanpath,
    ) == bits(
        &evaluate_nll(&ModelPredictor::new(&l64, None), corpus, &test_idx)
            .map_err(err)?
            .per_scanpath,
    );

    let (sp, cp) = (dir.path().join("s.jsonl"), dir.path().join("c.jsonl"));
    save_corpus(corpus, &sp, &cp).map_err(err)?;
    let back = load_corpus(&sp, &cp).map_err(err)?;
    let (sp2, cp2) = (dir.path().join("s2.jsonl"), dir.path().join("c2.jsonl"));
    save_corpus(&back, &sp2, &cp2).map_err(err)?;
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let corpus_exact = &back == corpus && read(&sp) == read(&sp2) && read(&cp) == read(&cp2);

    let emb = frozen_embeddings(corpus, 16);
    let ep = dir.path().join("e.bin");
    emb.write(&ep).map_err(err)?;
    let eback = EmbeddingSet::load(&ep).map_err(err)?;
    let ep2 = dir.path().join("e2.bin");
    eback.write(&ep2).map_err(err)?;
    let emb_exact = eback == emb && read(&ep) == read(&ep2);

    let ok = same_history && nll_exact && nll64_exact && corpus_exact && emb_exact;
    Ok((
        ok,
        format!(
            "same-seed histories and parameters identical (incl. 1 thread): {same_history}; checkpoint NLL bit-exact \
             f32 {nll_exact}, f64 {nll64_exact}; corpus round-trip {corpus_exact}; embeddings round-trip {emb_exact}"
        ),
    ))
}

// ---------------------------------------------------------------------------------------------
// 11. Per-saccade-range analysis

fn recombination_error<P: Predictor>(
    p: &P,
    corpus: &Corpus,
    idx: &[usize],
    spec: &str,
) -> Result<f64, String> {
    let buckets = parse_buckets(spec, p.max_len()).map_err(err)?;
    let rows = nll_by_saccade_range(p, corpus, idx, &buckets).map_err(err)?;
    let out = p.predict(corpus, idx).map_err(err)?;
    let steps: Vec<f64> = out
        .iter()
        .flat_map(|o| o.step_nll.iter().copied())
        .collect();
    let overall = steps.iter().sum::<f64>() / steps.len() as f64;
    let n: usize = rows.iter().map(|r| r.steps).sum();
    let recombined = rows
        .iter()
        .map(|r| r.mean_nll.unwrap_or(0.0) * r.steps as f64)
        .sum::<f64>()
        / n as f64;
    Ok((recombined - overall).abs())
}

fn criterion_11() -> Outcome {
    let (t, _) = regression_models();
    let corpus = &t.synth.corpus;
    let max_len = t.ckpt.model.max_len;
    let model = ModelPredictor::new(&t.ckpt, None);
    let label = label_dist(t)?.predictor();
    let every_class: Vec<String> = (0..num_classes(max_len))
        .map(|c| match range_of(c, max_len) {
            Some(r) => r.to_string(),
            None => "eos".into(),
        })
        .collect();
    let mut worst = 0.0f64;
    for spec in [
        "...:-1,0,1:...,eos",
        "...:...,eos",
        "...-3,-2:-1,0,1:3,4:...,eos",
        &every_class.join(","),
    ] {
        worst = worst.max(recombination_error(&model, corpus, &t.test_idx, spec)?);
        worst = worst.max(recombination_error(&label, corpus, &t.test_idx, spec)?);
    }
    let buckets = parse_buckets("...:-1,0,1:...,eos", max_len).map_err(err)?;
    let m_rows = nll_by_saccade_range(&model, corpus, &t.test_idx, &buckets).map_err(err)?;
    let l_rows = nll_by_saccade_range(&label, corpus, &t.test_idx, &buckets).map_err(err)?;
    let (mr, lr) = (m_rows[0].mean_nll, l_rows[0].mean_nll);
    let ok = worst <= 1e-9 && matches!((mr, lr), (Some(a), Some(b)) if a < b);
    Ok((
        ok,
        format!(
            "recombination error {worst:.1e} <= 1e-9 over 4 partitions; regression bucket ({} steps) NLL model {:.4} < label-dist {:.4}",
            m_rows[0].steps,
            mr.unwrap_or(f64::NAN),
            lr.unwrap_or(f64::NAN)
        ),
    ))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "gradient soundness", criterion_1),
        (2, "uniform closed form", criterion_2),
        (3, "planted-policy learning", criterion_3),
        (4, "ablation ordering", criterion_4),
        (5, "metric oracles", criterion_5),
        (6, "attention invariants", criterion_6),
        (7, "generation validity and faithfulness", criterion_7),
        (8, "fine-tune trend", criterion_8),
        (9, "reader embedding", criterion_9),
        (10, "determinism and persistence", criterion_10),
        (11, "per-saccade-range analysis", criterion_11),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok((true, detail)) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Ok((false, detail)) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): error: {e} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
