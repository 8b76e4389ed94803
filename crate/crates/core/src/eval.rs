//! Metrics, baselines, per-range analysis and significance testing.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scanpath_nn::Real;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Corpus;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{class_index, eos_class, num_classes, range_of, targets_of, ScanpathForward};
use crate::scangen::{sample_seed, GenRequest, Generated};
use crate::train::Checkpoint;

/// Tolerance on `Σ p = 1` for predictor outputs.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Default additive smoothing of the label-distribution baseline.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Anything that yields a next-fixation distribution for each step of a scanpath.
pub trait Predictor: Sync {
    /// `M` of the class space.
    fn max_len(&self) -> usize;
    /// Teacher-forced outputs for `indices`, in order.
    fn predict(&self, corpus: &Corpus, indices: &[usize]) -> Result<Vec<ScanpathForward>>;
}

/// The same distribution at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantPredictor {
    pub max_len: usize,
    pub probs: Vec<f64>,
}

impl ConstantPredictor {
    pub fn new(max_len: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_classes(max_len) {
            return Err(Error::Invalid(format!(
                "distribution has {} classes, expected {}",
                probs.len(),
                num_classes(max_len)
            )));
        }
        Ok(Self { max_len, probs })
    }
}

impl Predictor for ConstantPredictor {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn predict(&self, corpus: &Corpus, indices: &[usize]) -> Result<Vec<ScanpathForward>> {
        indices
            .iter()
            .map(|&i| {
                let sp = corpus
                    .scanpaths
                    .get(i)
                    .ok_or_else(|| Error::Invalid(format!("scanpath index {i} out of range")))?;
                let targets = targets_of(&sp.fixations, self.max_len)?;
                let step_nll: Vec<f64> = targets.iter().map(|&c| -self.probs[c].ln()).collect();
                let nll = step_nll.iter().sum::<f64>() / targets.len() as f64;
                Ok(ScanpathForward {
                    distributions: vec![self.probs.clone(); targets.len()],
                    targets,
                    step_nll,
                    nll,
                })
            })
            .collect()
    }
}

/// Uniform over all `2M+1` classes.
pub fn uniform_predictor(max_len: usize) -> ConstantPredictor {
    let k = num_classes(max_len);
    ConstantPredictor {
        max_len,
        probs: vec![1.0 / k as f64; k],
    }
}

/// Smoothed empirical frequencies of training target classes, EOS included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLabelDist {
    pub max_len: usize,
    pub alpha: f64,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
}

impl EmpiricalLabelDist {
    pub fn from_targets(targets: &[usize], max_len: usize, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!(
                "smoothing must be finite and ≥ 0, got {alpha}"
            )));
        }
        if targets.is_empty() {
            return Err(Error::Invalid("no training targets".into()));
        }
        let k = num_classes(max_len);
        let mut counts = vec![0u64; k];
        for &c in targets {
            *counts.get_mut(c).ok_or_else(|| {
                Error::Invalid(format!("target class {c} outside {k} classes"))
            })? += 1;
        }
        let total = targets.len() as f64 + alpha * k as f64;
        let probs = counts.iter().map(|&n| (n as f64 + alpha) / total).collect();
        Ok(Self {
            max_len,
            alpha,
            counts,
            probs,
        })
    }

    /// Counts the targets of the given training scanpaths.
    pub fn from_corpus(
        corpus: &Corpus,
        indices: &[usize],
        max_len: usize,
        alpha: f64,
    ) -> Result<Self> {
        let mut targets = Vec::new();
        for &i in indices {
            targets.extend(targets_of(&corpus.scanpaths[i].fixations, max_len)?);
        }
        Self::from_targets(&targets, max_len, alpha)
    }

    pub fn predictor(&self) -> ConstantPredictor {
        ConstantPredictor {
            max_len: self.max_len,
            probs: self.probs.clone(),
        }
    }
}

/// Label-distribution baseline built from training targets.
pub fn train_label_predictor(
    targets: &[usize],
    max_len: usize,
    alpha: f64,
) -> Result<ConstantPredictor> {
    Ok(EmpiricalLabelDist::from_targets(targets, max_len, alpha)?.predictor())
}

/// A trained checkpoint used as a predictor.
pub struct ModelPredictor<'a, F> {
    pub checkpoint: &'a Checkpoint<F>,
    pub embeddings: Option<&'a EmbeddingSet>,
    pub batch_size: usize,
}

impl<'a, F> ModelPredictor<'a, F> {
    pub fn new(checkpoint: &'a Checkpoint<F>, embeddings: Option<&'a EmbeddingSet>) -> Self {
        Self {
            checkpoint,
            embeddings,
            batch_size: 64,
        }
    }
}

impl<F: Real> Predictor for ModelPredictor<'_, F> {
    fn max_len(&self) -> usize {
        self.checkpoint.model.max_len
    }

    fn predict(&self, corpus: &Corpus, indices: &[usize]) -> Result<Vec<ScanpathForward>> {
        self.checkpoint.model.predict(
            corpus,
            indices,
            self.embeddings,
            &self.checkpoint.norm,
            self.batch_size,
        )
    }
}

/// Mean and standard error (sample sd over `√n`). The error is NaN below two values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub mean: f64,
    pub se: f64,
    pub per_scanpath: Vec<f64>,
}

fn check_normalized(out: &[ScanpathForward]) -> Result<()> {
    for (b, sp) in out.iter().enumerate() {
        for (t, d) in sp.distributions.iter().enumerate() {
            let s: f64 = d.iter().sum();
            if !((s - 1.0).abs() <= NORMALIZATION_TOL) || d.iter().any(|&p| p < 0.0) {
                return Err(Error::Numeric(format!(
                    "distribution of item {b} at step {t} sums to {s}, not 1"
                )));
            }
        }
    }
    Ok(())
}

/// Per-scanpath mean step NLL (EOS step included), averaged over scanpaths.
pub fn evaluate_nll<P: Predictor + ?Sized>(
    predictor: &P,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<NllReport> {
    let out = predictor.predict(corpus, indices)?;
    check_normalized(&out)?;
    let per_scanpath: Vec<f64> = out.iter().map(|o| o.nll).collect();
    let (mean, se) = mean_se(&per_scanpath);
    Ok(NllReport {
        mean,
        se,
        per_scanpath,
    })
}

/// A named set of target classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub classes: BTreeSet<usize>,
}

fn parse_bound(s: &str) -> Result<i64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad saccade range `{s}` in bucket list")))
}

/// Parses buckets such as `...-3,-2:-1,0,1:3,4:...,eos`. `...` stands for the end of the
/// class space. The buckets must partition `{−M+1..M} ∪ {EOS}` exactly.
pub fn parse_buckets(spec: &str, max_len: usize) -> Result<Vec<Bucket>> {
    let lo = -(max_len as i64) + 1;
    let hi = max_len as i64;
    let mut buckets = Vec::new();
    for item in spec.split(',').map(str::trim) {
        if item.is_empty() {
            return Err(Error::Invalid("empty bucket in list".into()));
        }
        let mut classes = BTreeSet::new();
        if item.eq_ignore_ascii_case("eos") {
            classes.insert(eos_class(max_len));
        } else {
            let (a, b) = if let Some((a, b)) = item.split_once(':') {
                let a = if a.trim() == "..." {
                    lo
                } else {
                    parse_bound(a)?
                };
                let b = if b.trim() == "..." {
                    hi
                } else {
                    parse_bound(b)?
                };
                (a, b)
            } else if let Some(rest) = item.strip_prefix("...") {
                (lo, parse_bound(rest)?)
            } else if let Some(rest) = item.strip_suffix("...") {
                (parse_bound(rest)?, hi)
            } else {
                let v = parse_bound(item)?;
                (v, v)
            };
            if a > b {
                return Err(Error::Invalid(format!("empty bucket `{item}`")));
            }
            for r in a..=b {
                classes.insert(class_index(r, max_len).map_err(|_| {
                    Error::Invalid(format!(
                        "bucket `{item}` reaches range {r} outside [{lo}, {hi}]"
                    ))
                })?);
            }
        }
        buckets.push(Bucket {
            label: item.to_string(),
            classes,
        });
    }
    check_partition(&buckets, max_len)?;
    Ok(buckets)
}

/// Errors unless every class lies in exactly one bucket.
pub fn check_partition(buckets: &[Bucket], max_len: usize) -> Result<()> {
    let mut owner: BTreeMap<usize, &str> = BTreeMap::new();
    for b in buckets {
        for &c in &b.classes {
            if let Some(prev) = owner.insert(c, &b.label) {
                return Err(Error::Invalid(format!(
                    "buckets `{prev}` and `{}` overlap on {}",
                    b.label,
                    class_label(c, max_len)
                )));
            }
        }
    }
    if let Some(c) = (0..num_classes(max_len)).find(|c| !owner.contains_key(c)) {
        return Err(Error::Invalid(format!(
            "buckets do not cover {}",
            class_label(c, max_len)
        )));
    }
    Ok(())
}

fn class_label(c: usize, max_len: usize) -> String {
    match range_of(c, max_len) {
        Some(r) => format!("range {r}"),
        None => "EOS".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub steps: usize,
    /// `None` when no test step falls in the bucket.
    pub mean_nll: Option<f64>,
}

/// Mean step NLL grouped by the bucket of the true target class.
pub fn nll_by_saccade_range<P: Predictor + ?Sized>(
    predictor: &P,
    corpus: &Corpus,
    indices: &[usize],
    buckets: &[Bucket],
) -> Result<Vec<BucketRow>> {
    check_partition(buckets, predictor.max_len())?;
    let out = predictor.predict(corpus, indices)?;
    check_normalized(&out)?;
    let mut sums = vec![0.0; buckets.len()];
    let mut counts = vec![0usize; buckets.len()];
    for sp in &out {
        for (&c, &nll) in sp.targets.iter().zip(&sp.step_nll) {
            let k = buckets
                .iter()
                .position(|b| b.classes.contains(&c))
                .expect("partition");
            sums[k] += nll;
            counts[k] += 1;
        }
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(k, b)| BucketRow {
            label: b.label.clone(),
            steps: counts[k],
            mean_nll: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

/// Unit-cost edit distance.
pub fn levenshtein(s: &[usize], t: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=t.len()).collect();
    let mut cur = vec![0; t.len() + 1];
    for (i, a) in s.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in t.iter().enumerate() {
            let sub = prev[j] + usize::from(a != b);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Edit distance over the longer length.
pub fn nld(s: &[usize], t: &[usize]) -> Result<f64> {
    let n = s.len().max(t.len());
    if n == 0 {
        return Err(Error::Invalid(
            "normalized distance of two empty sequences".into(),
        ));
    }
    Ok(levenshtein(s, t) as f64 / n as f64)
}

/// One sampled path per test scanpath, on the same sentence and for the same reader.
/// Scanpath `i` uses seed `sample_seed(seed, i)`.
pub fn generate_for_test<F: Real>(
    checkpoint: &Checkpoint<F>,
    emb: Option<&EmbeddingSet>,
    corpus: &Corpus,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<Generated>> {
    let requests: Vec<GenRequest<'_>> = indices
        .iter()
        .map(|&i| {
            let sp = &corpus.scanpaths[i];
            let sentence = corpus.sentence_of(i);
            GenRequest {
                sentence,
                reader: Some(sp.reader_id.as_str()),
                seed: sample_seed(seed, i as u64),
                max_len: 4 * sentence.len(),
            }
        })
        .collect();
    checkpoint
        .model
        .generate_requests(&requests, emb, &checkpoint.norm, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NldReport {
    pub mean: f64,
    pub se: f64,
    pub per_scanpath: Vec<f64>,
}

/// NLD between each test scanpath and one path generated for it.
pub fn evaluate_nld<F: Real>(
    checkpoint: &Checkpoint<F>,
    emb: Option<&EmbeddingSet>,
    corpus: &Corpus,
    indices: &[usize],
    seed: u64,
) -> Result<NldReport> {
    let generated = generate_for_test(checkpoint, emb, corpus, indices, seed)?;
    nld_report(corpus, indices, &generated)
}

/// NLD of test scanpaths against already generated paths, pairwise in order.
pub fn nld_report(
    corpus: &Corpus,
    indices: &[usize],
    generated: &[Generated],
) -> Result<NldReport> {
    let per_scanpath = indices
        .iter()
        .zip(generated)
        .map(|(&i, g)| nld(&corpus.scanpaths[i].word_indices(), &g.indices))
        .collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_se(&per_scanpath);
    Ok(NldReport {
        mean,
        se,
        per_scanpath,
    })
}

/// NLD between each test scanpath and a different, uniformly drawn test scanpath on the same
/// sentence. Scanpaths alone on their sentence are skipped.
pub fn human_nld(corpus: &Corpus, indices: &[usize], seed: u64) -> Result<NldReport> {
    let mut by_sentence: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_sentence
            .entry(corpus.scanpaths[i].sentence_id.as_str())
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_scanpath = Vec::new();
    for &i in indices {
        let group = &by_sentence[corpus.scanpaths[i].sentence_id.as_str()];
        if group.len() < 2 {
            continue;
        }
        let pos = group.iter().position(|&j| j == i).expect("member");
        let mut k = rng.gen_range(0..group.len() - 1);
        if k >= pos {
            k += 1;
        }
        per_scanpath.push(nld(
            &corpus.scanpaths[i].word_indices(),
            &corpus.scanpaths[group[k]].word_indices(),
        )?);
    }
    if per_scanpath.is_empty() {
        return Err(Error::Invalid(
            "no sentence has two or more test scanpaths".into(),
        ));
    }
    let (mean, se) = mean_se(&per_scanpath);
    Ok(NldReport {
        mean,
        se,
        per_scanpath,
    })
}

/// Shape, length and position similarity of two index sequences over 1-D saccades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiMatch {
    pub shape: f64,
    pub length: f64,
    pub position: f64,
}

/// Aligns the saccade sequences of `s` and `t` by the minimum-cost monotone path through the
/// `|v_i − u_j|` matrix, then scores the aligned pairs. `max_len` sets the normalization.
pub fn multimatch_1d(s: &[usize], t: &[usize], max_len: usize) -> Result<MultiMatch> {
    if s.len() < 2 || t.len() < 2 {
        return Err(Error::Invalid(
            "multimatch needs at least 2 fixations per scanpath".into(),
        ));
    }
    if max_len < 2 {
        return Err(Error::Invalid("multimatch needs M ≥ 2".into()));
    }
    // Ties in the alignment are broken the same way whichever argument comes first.
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    let sac = |p: &[usize]| -> Vec<(f64, f64)> {
        p.windows(2)
            .map(|w| (w[0] as f64, w[1] as f64 - w[0] as f64))
            .collect()
    };
    let (a, b) = (sac(s), sac(t));
    let (n, m) = (a.len(), b.len());
    let cost = |i: usize, j: usize| (a[i].1 - b[j].1).abs();
    let mut acc = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut v = f64::INFINITY;
                if i > 0 && j > 0 {
                    v = v.min(acc[i - 1][j - 1]);
                }
                if i > 0 {
                    v = v.min(acc[i - 1][j]);
                }
                if j > 0 {
                    v = v.min(acc[i][j - 1]);
                }
                v
            };
            acc[i][j] = best + cost(i, j);
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let d = acc[i - 1][j - 1];
            let up = acc[i - 1][j];
            let left = acc[i][j - 1];
            if d <= up && d <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        pairs.push((i, j));
    }
    let k = pairs.len() as f64;
    let span = (max_len - 1) as f64;
    let mean =
        |f: &dyn Fn(usize, usize) -> f64| pairs.iter().map(|&(i, j)| f(i, j)).sum::<f64>() / k;
    let shape = 1.0 - mean(&|i, j| (a[i].1 - b[j].1).abs()) / (2.0 * span);
    let length = 1.0 - mean(&|i, j| (a[i].1.abs() - b[j].1.abs()).abs()) / span;
    let position = 1.0 - mean(&|i, j| (a[i].0 - b[j].0).abs()) / span;
    Ok(MultiMatch {
        shape: shape.clamp(0.0, 1.0),
        length: length.clamp(0.0, 1.0),
        position: position.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiMatchReport {
    pub shape: f64,
    pub length: f64,
    pub position: f64,
    pub pairs: usize,
    /// Pairs where either path has fewer than two fixations.
    pub skipped: usize,
}

/// Mean MultiMatch scores of test scanpaths against generated paths.
pub fn multimatch_report(
    corpus: &Corpus,
    indices: &[usize],
    generated: &[Generated],
    max_len: usize,
) -> Result<MultiMatchReport> {
    let scores: Vec<Option<MultiMatch>> = indices
        .par_iter()
        .zip(generated)
        .map(|(&i, g)| {
            let h = corpus.scanpaths[i].word_indices();
            if h.len() < 2 || g.indices.len() < 2 {
                Ok(None)
            } else {
                multimatch_1d(&h, &g.indices, max_len).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let ok: Vec<MultiMatch> = scores.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let avg = |f: fn(&MultiMatch) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(f).sum::<f64>() / n
        }
    };
    Ok(MultiMatchReport {
        shape: avg(|m| m.shape),
        length: avg(|m| m.length),
        position: avg(|m| m.position),
        pairs: ok.len(),
        skipped: scores.len() - ok.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Zero variance of the differences; reported as `p = 1` with `t` undefined.
    pub degenerate: bool,
}

/// Paired two-tailed t-test of `a` against `b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var <= 0.0 || !var.is_finite() {
        return Ok(TTest {
            t: f64::NAN,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}
