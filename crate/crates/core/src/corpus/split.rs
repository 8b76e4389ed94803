//! Cross-validation plans along sentence IDs, reader IDs, or both.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    NewSentence,
    NewReader,
    NewReaderNewSentence,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "new-sentence" => Ok(Self::NewSentence),
            "new-reader" => Ok(Self::NewReader),
            "new-reader-new-sentence" => Ok(Self::NewReaderNewSentence),
            other => Err(Error::Config(format!("unknown split kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub train: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl Fold {
    pub fn train_indices(&self) -> Vec<usize> {
        self.train.iter().copied().collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.test.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn fold(&self, k: usize) -> Result<&Fold> {
        self.folds.get(k).ok_or_else(|| {
            Error::Config(format!(
                "fold {k} requested but the plan has {} folds",
                self.folds.len()
            ))
        })
    }
}

/// Fraction of reader IDs and of sentence IDs held out per resample in the combined split.
pub const HOLDOUT_FRACTION: f64 = 0.2;

fn partition(ids: &[&str], folds: usize, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<String>> {
    let mut ids: Vec<&str> = ids.to_vec();
    ids.shuffle(rng);
    let (base, extra) = (ids.len() / folds, ids.len() % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let size = base + usize::from(k < extra);
        out.push(
            ids[start..start + size]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        start += size;
    }
    out
}

fn holdout(ids: &[&str], rng: &mut ChaCha8Rng) -> BTreeSet<String> {
    let n = ids.len();
    let k = ((HOLDOUT_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids = ids.to_vec();
    ids.shuffle(rng);
    ids[..k].iter().map(|s| s.to_string()).collect()
}

/// Builds a deterministic split plan. Sentence/reader splits partition the shuffled IDs into
/// `folds` near-equal test blocks; the combined split draws `folds` independent resamples.
pub fn make_splits(corpus: &Corpus, kind: SplitKind, folds: usize, seed: u64) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::Config(format!(
            "at least 2 folds required, got {folds}"
        )));
    }
    let sentences: Vec<&str> = corpus
        .scanpaths
        .iter()
        .map(|s| s.sentence_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let readers: Vec<&str> = corpus.reader_ids().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scanpaths = &corpus.scanpaths;
    let mut plan = Vec::with_capacity(folds);
    match kind {
        SplitKind::NewSentence | SplitKind::NewReader => {
            let ids = if kind == SplitKind::NewSentence {
                &sentences
            } else {
                &readers
            };
            if ids.len() < folds {
                return Err(Error::Config(format!(
                    "{} distinct IDs cannot fill {folds} folds",
                    ids.len()
                )));
            }
            for block in partition(ids, folds, &mut rng) {
                let mut fold = Fold {
                    train: BTreeSet::new(),
                    test: BTreeSet::new(),
                };
                for (i, sp) in scanpaths.iter().enumerate() {
                    let id = if kind == SplitKind::NewSentence {
                        &sp.sentence_id
                    } else {
                        &sp.reader_id
                    };
                    if block.contains(id) {
                        fold.test.insert(i);
                    } else {
                        fold.train.insert(i);
                    }
                }
                plan.push(fold);
            }
        }
        SplitKind::NewReaderNewSentence => {
            if readers.len() < 2 || sentences.len() < 2 {
                return Err(Error::Config(format!(
                    "combined split needs at least 2 readers and 2 sentences, got {} and {}",
                    readers.len(),
                    sentences.len()
                )));
            }
            for _ in 0..folds {
                let held_readers = holdout(&readers, &mut rng);
                let held_sentences = holdout(&sentences, &mut rng);
                let mut fold = Fold {
                    train: BTreeSet::new(),
                    test: BTreeSet::new(),
                };
                for (i, sp) in scanpaths.iter().enumerate() {
                    match (
                        held_readers.contains(&sp.reader_id),
                        held_sentences.contains(&sp.sentence_id),
                    ) {
                        (true, true) => {
                            fold.test.insert(i);
                        }
                        (false, false) => {
                            fold.train.insert(i);
                        }
                        _ => {}
                    }
                }
                plan.push(fold);
            }
        }
    }
    Ok(SplitPlan {
        kind,
        seed,
        folds: plan,
    })
}
