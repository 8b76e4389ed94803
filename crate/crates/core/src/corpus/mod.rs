//! Sentences, scanpaths and the corpus that ties them together.

mod io;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_corpus, load_scanpaths, load_sentences, save_corpus, write_scanpaths, write_sentences,
};
pub use split::{make_splits, Fold, SplitKind, SplitPlan};
pub use synth::{generate_synthetic_corpus, Dist, Move, Policy, Rule, SynthSpec, SyntheticCorpus};

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub token_lengths: Vec<u32>,
}

impl Sentence {
    /// Builds a sentence with token lengths taken from the character count of each token.
    pub fn new(sentence_id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let token_lengths = tokens.iter().map(|t| t.chars().count() as u32).collect();
        Self::with_lengths(sentence_id, tokens, token_lengths)
    }

    pub fn with_lengths(
        sentence_id: impl Into<String>,
        tokens: Vec<String>,
        token_lengths: Vec<u32>,
    ) -> Result<Self> {
        let s = Self {
            sentence_id: sentence_id.into(),
            tokens,
            token_lengths,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.sentence_id;
        if self.tokens.is_empty() {
            return Err(Error::Invalid(format!("sentence `{id}` has no tokens")));
        }
        if self.token_lengths.len() != self.tokens.len() {
            return Err(Error::Invalid(format!(
                "sentence `{id}` has {} tokens but {} token lengths",
                self.tokens.len(),
                self.token_lengths.len()
            )));
        }
        if let Some(j) = self.token_lengths.iter().position(|&l| l == 0) {
            return Err(Error::Invalid(format!(
                "sentence `{id}`: token {} has length 0",
                j + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    /// 1-based token index.
    pub word_index: usize,
    /// Milliseconds.
    pub duration: f64,
    /// Relative landing position within the word, in [0, 1].
    pub landing_pos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scanpath {
    pub reader_id: String,
    pub sentence_id: String,
    pub fixations: Vec<Fixation>,
    /// Produced by a generator rather than recorded. Synthetic scanpaths may be empty.
    pub synthetic: bool,
    /// Why generation stopped, for synthetic scanpaths.
    pub stop: Option<String>,
}

impl Scanpath {
    pub fn new(
        reader_id: impl Into<String>,
        sentence_id: impl Into<String>,
        fixations: Vec<Fixation>,
    ) -> Self {
        Self {
            reader_id: reader_id.into(),
            sentence_id: sentence_id.into(),
            fixations,
            synthetic: false,
            stop: None,
        }
    }

    /// Builds a scanpath from word indices with zero durations and landing positions.
    pub fn from_indices(
        reader_id: impl Into<String>,
        sentence_id: impl Into<String>,
        indices: &[usize],
    ) -> Self {
        let fixations = indices
            .iter()
            .map(|&w| Fixation {
                word_index: w,
                duration: 0.0,
                landing_pos: 0.0,
            })
            .collect();
        Self::new(reader_id, sentence_id, fixations)
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn word_indices(&self) -> Vec<usize> {
        self.fixations.iter().map(|f| f.word_index).collect()
    }

    /// Signed saccade ranges `f_i − f_{i−1}` with `f_0 = 0`, one per fixation.
    pub fn saccade_ranges(&self) -> Vec<i64> {
        let mut prev = 0i64;
        self.fixations
            .iter()
            .map(|f| {
                let w = f.word_index as i64;
                let r = w - prev;
                prev = w;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sentences: BTreeMap<String, Sentence>,
    pub scanpaths: Vec<Scanpath>,
}

impl Corpus {
    /// Assembles and validates a corpus. Duplicate sentence IDs are rejected.
    pub fn new(sentences: Vec<Sentence>, scanpaths: Vec<Scanpath>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in sentences {
            if map.contains_key(&s.sentence_id) {
                return Err(Error::Invalid(format!(
                    "duplicate sentence_id `{}`",
                    s.sentence_id
                )));
            }
            map.insert(s.sentence_id.clone(), s);
        }
        let corpus = Self {
            sentences: map,
            scanpaths,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.sentences.values() {
            s.validate()?;
        }
        for (index, sp) in self.scanpaths.iter().enumerate() {
            self.validate_scanpath(index, sp)?;
        }
        Ok(())
    }

    fn validate_scanpath(&self, index: usize, sp: &Scanpath) -> Result<()> {
        let sentence =
            self.sentences
                .get(&sp.sentence_id)
                .ok_or_else(|| Error::UnknownSentence {
                    index,
                    sentence_id: sp.sentence_id.clone(),
                })?;
        if sp.fixations.is_empty() && !sp.synthetic {
            return Err(Error::Invalid(format!("scanpath {index} has no fixations")));
        }
        let m = sentence.len();
        for (k, f) in sp.fixations.iter().enumerate() {
            if f.word_index == 0 || f.word_index > m {
                return Err(Error::WordIndex {
                    index,
                    sentence_id: sp.sentence_id.clone(),
                    word_index: f.word_index,
                    m,
                });
            }
            if !f.duration.is_finite() || f.duration < 0.0 {
                return Err(Error::Invalid(format!(
                    "scanpath {index}, fixation {}: duration {} must be finite and non-negative",
                    k + 1,
                    f.duration
                )));
            }
            if !(0.0..=1.0).contains(&f.landing_pos) {
                return Err(Error::Invalid(format!(
                    "scanpath {index}, fixation {}: landing position {} outside [0, 1]",
                    k + 1,
                    f.landing_pos
                )));
            }
        }
        Ok(())
    }

    pub fn sentence(&self, id: &str) -> Result<&Sentence> {
        self.sentences
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("unknown sentence `{id}`")))
    }

    /// Sentence of scanpath `index`.
    pub fn sentence_of(&self, index: usize) -> &Sentence {
        &self.sentences[&self.scanpaths[index].sentence_id]
    }

    pub fn reader_ids(&self) -> BTreeSet<&str> {
        self.scanpaths
            .iter()
            .map(|s| s.reader_id.as_str())
            .collect()
    }

    /// Longest sentence among those referenced by `indices`.
    pub fn max_sentence_len(&self, indices: &[usize]) -> usize {
        indices
            .iter()
            .map(|&i| self.sentence_of(i).len())
            .max()
            .unwrap_or(0)
    }

    /// A corpus restricted to the given scanpaths (all sentences kept).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            sentences: self.sentences.clone(),
            scanpaths: indices.iter().map(|&i| self.scanpaths[i].clone()).collect(),
        }
    }
}

/// Z-score statistics for the numeric inputs. Standard deviations are population values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub duration_mean: f64,
    pub duration_std: f64,
    pub landing_mean: f64,
    pub landing_std: f64,
    pub wordlen_mean: f64,
    pub wordlen_std: f64,
}

impl NormStats {
    pub fn duration(&self, v: f64) -> f64 {
        zscore(v, self.duration_mean, self.duration_std)
    }

    pub fn landing(&self, v: f64) -> f64 {
        zscore(v, self.landing_mean, self.landing_std)
    }

    pub fn wordlen(&self, v: f64) -> f64 {
        zscore(v, self.wordlen_mean, self.wordlen_std)
    }
}

/// `(value − mean) / std`, or 0 when `std` is 0.
pub fn zscore(value: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        (value - mean) / std
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Statistics over every fixation of the training scanpaths and every token of the distinct
/// sentences they read.
pub fn compute_norm_stats(corpus: &Corpus, train_indices: &[usize]) -> Result<NormStats> {
    if train_indices.is_empty() {
        return Err(Error::Invalid(
            "cannot compute normalization statistics from an empty training set".into(),
        ));
    }
    let mut idx = train_indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i >= corpus.scanpaths.len()) {
        return Err(Error::Invalid(format!("training index {bad} out of range")));
    }
    let fixations = || {
        idx.iter()
            .flat_map(|&i| corpus.scanpaths[i].fixations.iter())
    };
    let (duration_mean, duration_std) = mean_std(fixations().map(|f| f.duration));
    let (landing_mean, landing_std) = mean_std(fixations().map(|f| f.landing_pos));
    let sentence_ids: BTreeSet<&str> = idx
        .iter()
        .map(|&i| corpus.scanpaths[i].sentence_id.as_str())
        .collect();
    let lengths = sentence_ids.iter().flat_map(|id| {
        corpus.sentences[*id]
            .token_lengths
            .iter()
            .map(|&l| l as f64)
    });
    let (wordlen_mean, wordlen_std) = mean_std(lengths);
    Ok(NormStats {
        duration_mean,
        duration_std,
        landing_mean,
        landing_std,
        wordlen_mean,
        wordlen_std,
    })
}
