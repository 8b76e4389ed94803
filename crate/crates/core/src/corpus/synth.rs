//! Synthetic corpora sampled from a planted reading policy.
//!
//! A policy maps the current fixation context to a distribution over moves (saccade ranges and
//! end-of-scanpath). Moves leaving the sentence are dropped and the remaining mass renormalized,
//! so the per-step entropy reported here is that of the distribution actually sampled from.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Fixation, Scanpath, Sentence};
use crate::error::{Error, Result};

/// Pseudo-class matching positions outside the sentence.
pub const END_CLASS: &str = "$end";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Range(i64),
    Eos,
}

impl std::str::FromStr for Move {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("eos") {
            return Ok(Move::Eos);
        }
        s.trim_start_matches('+')
            .parse::<i64>()
            .map(Move::Range)
            .map_err(|_| {
                Error::Config(format!(
                    "bad move `{s}`: expected a signed integer or `eos`"
                ))
            })
    }
}

/// A distribution row, written as `{"+1": 0.5, "-2": 0.25, "eos": 0.25}`.
pub type Dist = BTreeMap<String, f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    /// Offset from the current fixation of the token whose class is tested.
    #[serde(default)]
    pub at: i64,
    pub class: String,
    /// Only match when the current word is being fixated for the first time and is the rightmost
    /// word reached so far.
    #[serde(default)]
    pub first_pass: bool,
    pub dist: Dist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    #[serde(default)]
    pub name: String,
    /// Distribution for the first fixation.
    pub start: Dist,
    /// Checked in order; the first match wins.
    #[serde(default)]
    pub rules: Vec<Rule>,
    pub default: Dist,
}

fn default_max_steps() -> usize {
    60
}

fn default_duration() -> [f64; 2] {
    [100.0, 400.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab: Vec<String>,
    /// Optional sampling weights for `vocab`; uniform when absent.
    #[serde(default)]
    pub vocab_weights: Option<Vec<f64>>,
    /// Token classes referenced by rules.
    #[serde(default)]
    pub classes: BTreeMap<String, Vec<String>>,
    /// Inclusive range of sentence lengths.
    pub sentence_len: [usize; 2],
    /// Paths reaching this many fixations are terminated.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Uniform range of the recorded durations (ms).
    #[serde(default = "default_duration")]
    pub duration: [f64; 2],
    /// Reader `k` follows policy `k mod len`.
    pub policies: Vec<Policy>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Mean per-step entropy (nats) over every generated step, EOS steps included.
    pub entropy: f64,
    /// Per-scanpath step entropies, one per prediction step (fixations + EOS).
    pub step_entropies: Vec<Vec<f64>>,
    /// Policy index followed by each reader.
    pub reader_policy: BTreeMap<String, usize>,
}

impl SyntheticCorpus {
    /// Mean over the given scanpaths of their mean step entropy. This is the expected NLL of the
    /// generating policy under the per-scanpath averaging used for evaluation.
    pub fn scanpath_entropy(&self, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        indices
            .iter()
            .map(|&i| {
                let e = &self.step_entropies[i];
                e.iter().sum::<f64>() / e.len() as f64
            })
            .sum::<f64>()
            / indices.len() as f64
    }
}

struct CompiledRule {
    at: i64,
    class: Option<usize>,
    first_pass: bool,
    dist: Vec<(Move, f64)>,
}

struct CompiledPolicy {
    start: Vec<(Move, f64)>,
    rules: Vec<CompiledRule>,
    default: Vec<(Move, f64)>,
}

fn compile_dist(d: &Dist, what: &str) -> Result<Vec<(Move, f64)>> {
    let mut out = Vec::with_capacity(d.len());
    let mut total = 0.0;
    for (k, &p) in d {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::Config(format!(
                "{what}: probability {p} for `{k}` is not a valid probability"
            )));
        }
        total += p;
        out.push((k.parse()?, p));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(out)
}

impl SynthSpec {
    fn compile(&self, class_index: &BTreeMap<&str, usize>) -> Result<Vec<CompiledPolicy>> {
        self.policies
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let label = if p.name.is_empty() {
                    format!("policy {pi}")
                } else {
                    format!("policy `{}`", p.name)
                };
                let rules = p
                    .rules
                    .iter()
                    .enumerate()
                    .map(|(ri, r)| {
                        let class = if r.class == END_CLASS {
                            None
                        } else {
                            Some(*class_index.get(r.class.as_str()).ok_or_else(|| {
                                Error::Config(format!(
                                    "{label}, rule {ri}: unknown class `{}`",
                                    r.class
                                ))
                            })?)
                        };
                        Ok(CompiledRule {
                            at: r.at,
                            class,
                            first_pass: r.first_pass,
                            dist: compile_dist(&r.dist, &format!("{label}, rule {ri}"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CompiledPolicy {
                    start: compile_dist(&p.start, &format!("{label}, start row"))?,
                    rules,
                    default: compile_dist(&p.default, &format!("{label}, default row"))?,
                })
            })
            .collect()
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Samples one scanpath over a sentence whose tokens carry the given class memberships.
/// Returns the word indices and the entropy of every step actually taken.
fn sample_path<R: Rng>(
    policy: &CompiledPolicy,
    token_classes: &[Vec<bool>],
    max_steps: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let m = token_classes.len() as i64;
    let mut path = Vec::new();
    let mut entropies = Vec::new();
    let mut visits = vec![0u32; m as usize + 1];
    let mut cur = 0i64;
    let mut rightmost = 0i64;
    loop {
        let row = if cur == 0 {
            &policy.start
        } else {
            let first_pass = visits[cur as usize] == 1 && cur == rightmost;
            policy
                .rules
                .iter()
                .find(|r| {
                    if r.first_pass && !first_pass {
                        return false;
                    }
                    let pos = cur + r.at;
                    let inside = (1..=m).contains(&pos);
                    match r.class {
                        None => !inside,
                        Some(c) => inside && token_classes[(pos - 1) as usize][c],
                    }
                })
                .map_or(&policy.default, |r| &r.dist)
        };
        let valid = |mv: &Move| match *mv {
            Move::Eos => !path.is_empty(),
            Move::Range(r) => (1..=m).contains(&(cur + r)),
        };
        let mut moves: Vec<(Move, f64)> = row
            .iter()
            .filter(|(mv, p)| *p > 0.0 && valid(mv))
            .copied()
            .collect();
        let mass: f64 = moves.iter().map(|(_, p)| p).sum();
        if path.len() >= max_steps || mass <= 0.0 {
            if path.is_empty() {
                return Err(Error::Config(
                    "start row has no move that lands inside the sentence".into(),
                ));
            }
            entropies.push(0.0);
            return Ok((path, entropies));
        }
        for mv in &mut moves {
            mv.1 /= mass;
        }
        let probs: Vec<f64> = moves.iter().map(|(_, p)| *p).collect();
        entropies.push(entropy(&probs));
        let pick = WeightedIndex::new(&probs)
            .expect("positive mass")
            .sample(rng);
        match moves[pick].0 {
            Move::Eos => return Ok((path, entropies)),
            Move::Range(r) => {
                cur += r;
                visits[cur as usize] += 1;
                rightmost = rightmost.max(cur);
                path.push(cur as usize);
            }
        }
    }
}

/// Samples `n_sentences` sentences and one scanpath per (reader, sentence) pair.
pub fn generate_synthetic_corpus(
    spec: &SynthSpec,
    n_readers: usize,
    n_sentences: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if spec.vocab.is_empty() || spec.policies.is_empty() {
        return Err(Error::Config(
            "synthetic spec needs a vocabulary and at least one policy".into(),
        ));
    }
    let [lo, hi] = spec.sentence_len;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "bad sentence length range [{lo}, {hi}]"
        )));
    }
    let [d_lo, d_hi] = spec.duration;
    if !(d_lo >= 0.0 && d_lo <= d_hi) {
        return Err(Error::Config(format!(
            "bad duration range [{d_lo}, {d_hi}]"
        )));
    }
    let class_names: Vec<&str> = spec.classes.keys().map(String::as_str).collect();
    let class_index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    for (c, toks) in &spec.classes {
        if let Some(t) = toks.iter().find(|t| !spec.vocab.contains(t)) {
            return Err(Error::Config(format!(
                "class `{c}` lists `{t}`, which is not in the vocabulary"
            )));
        }
    }
    let policies = spec.compile(&class_index)?;
    let token_sampler = match &spec.vocab_weights {
        Some(w) if w.len() != spec.vocab.len() => {
            return Err(Error::Config(
                "vocab_weights must match the vocabulary size".into(),
            ))
        }
        Some(w) => {
            WeightedIndex::new(w).map_err(|e| Error::Config(format!("vocab_weights: {e}")))?
        }
        None => WeightedIndex::new(vec![1.0; spec.vocab.len()]).expect("uniform weights"),
    };
    let membership: Vec<Vec<bool>> = spec
        .vocab
        .iter()
        .map(|t| spec.classes.values().map(|toks| toks.contains(t)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let readers: Vec<String> = (0..n_readers).map(|k| format!("r{k:03}")).collect();
    let reader_policy = readers
        .iter()
        .enumerate()
        .map(|(k, r)| (r.clone(), k % policies.len()))
        .collect();
    let mut sentences = Vec::with_capacity(n_sentences);
    let mut scanpaths = Vec::new();
    let mut step_entropies = Vec::new();
    for j in 0..n_sentences {
        let m = rng.gen_range(lo..=hi);
        let ids: Vec<usize> = (0..m).map(|_| token_sampler.sample(&mut rng)).collect();
        let sentence_id = format!("s{j:04}");
        let tokens = ids.iter().map(|&i| spec.vocab[i].clone()).collect();
        let classes: Vec<Vec<bool>> = ids.iter().map(|&i| membership[i].clone()).collect();
        sentences.push(Sentence::new(sentence_id.clone(), tokens)?);
        for (k, reader) in readers.iter().enumerate() {
            let (path, ent) = sample_path(
                &policies[k % policies.len()],
                &classes,
                spec.max_steps,
                &mut rng,
            )?;
            let fixations = path
                .into_iter()
                .map(|w| Fixation {
                    word_index: w,
                    duration: rng.gen_range(d_lo..=d_hi),
                    landing_pos: rng.gen_range(0.0..=1.0),
                })
                .collect();
            scanpaths.push(Scanpath::new(
                reader.clone(),
                sentence_id.clone(),
                fixations,
            ));
            step_entropies.push(ent);
        }
    }
    let (sum, count) = step_entropies
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &e| (s + e, n + 1));
    Ok(SyntheticCorpus {
        corpus: Corpus::new(sentences, scanpaths)?,
        entropy: if count == 0 { 0.0 } else { sum / count as f64 },
        step_entropies,
        reader_policy,
    })
}
