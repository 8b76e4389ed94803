//! Autoregressive scanpath generation and attention heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scanpath_nn::{softmax_vec, Graph, Mode, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{Fixation, Scanpath, Sentence};
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{eos_class, range_of, Model, PathInput, StepInput};
use crate::train::Checkpoint;

/// Rows generated together in one batch.
const GEN_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    MaxLen,
    /// An unmasked draw pointed outside the sentence.
    OutOfRange,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Eos => "eos",
            StopReason::MaxLen => "max-len",
            StopReason::OutOfRange => "out-of-range",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub indices: Vec<usize>,
    pub stop: StopReason,
}

impl Generated {
    /// Output record: zero durations and landing positions, flagged synthetic.
    pub fn to_scanpath(&self, reader_id: &str, sentence_id: &str) -> Scanpath {
        Scanpath {
            reader_id: reader_id.to_string(),
            sentence_id: sentence_id.to_string(),
            fixations: self
                .indices
                .iter()
                .map(|&w| Fixation {
                    word_index: w,
                    duration: 0.0,
                    landing_pos: 0.0,
                })
                .collect(),
            synthetic: true,
            stop: Some(self.stop.as_str().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    /// Maximum path length; `4·m` when unset.
    pub max_len: Option<usize>,
    pub n_samples: usize,
    pub seed: u64,
    pub mask_invalid: bool,
    /// Reader conditioning for reader-embedding models.
    pub reader: Option<String>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_len: None,
            n_samples: 1,
            seed: 0,
            mask_invalid: true,
            reader: None,
        }
    }
}

/// Seed of sample `i` of a run, independent of scheduling.
pub fn sample_seed(seed: u64, i: u64) -> u64 {
    let mut x = seed.wrapping_add(0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(i.wrapping_add(1)));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One path to generate.
#[derive(Debug, Clone)]
pub struct GenRequest<'a> {
    pub sentence: &'a Sentence,
    pub reader: Option<&'a str>,
    pub seed: u64,
    pub max_len: usize,
}

/// Zeroes classes leading outside `[1, m]` from location `loc` and renormalizes.
pub fn mask_distribution(probs: &[f64], loc: usize, m: usize, max_len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| match range_of(c, max_len) {
            None => p,
            Some(r) => {
                let next = loc as i64 + r;
                if next >= 1 && next <= m as i64 {
                    p
                } else {
                    0.0
                }
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for p in &mut out {
            *p /= total;
        }
    } else {
        out.iter_mut().for_each(|p| *p = 0.0);
        out[eos_class(max_len)] = 1.0;
    }
    out
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = c;
            if u < acc {
                return c;
            }
        }
    }
    last
}

struct Row<F> {
    group: usize,
    reader: Option<usize>,
    rng: ChaCha8Rng,
    max_len: usize,
    path: Vec<usize>,
    stop: Option<StopReason>,
    h: Vec<Vec<F>>,
    c: Vec<Vec<F>>,
}

impl<F: Real> Model<F> {
    /// Samples one path per request. Requests are processed in parallel chunks; each path draws
    /// from its own seeded stream, so results do not depend on chunking or thread count.
    pub fn generate_requests(
        &self,
        requests: &[GenRequest<'_>],
        emb: Option<&EmbeddingSet>,
        norm: &crate::corpus::NormStats,
        mask_invalid: bool,
    ) -> Result<Vec<Generated>> {
        for r in requests {
            self.check_sentence(r.sentence)?;
        }
        let chunks: Vec<Result<Vec<Generated>>> = requests
            .par_chunks(GEN_CHUNK)
            .map(|chunk| self.generate_chunk(chunk, emb, norm, mask_invalid))
            .collect();
        let mut out = Vec::with_capacity(requests.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Per-row next-step distributions for the active rows, advancing their recurrent state.
    #[allow(clippy::too_many_arguments)]
    fn step_rows(
        &self,
        keys: Option<&(Tensor<F>, usize)>,
        sentences: &[&Sentence],
        rows: &mut [Row<F>],
        active: &[usize],
        emb: Option<&EmbeddingSet>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let hidden = self.config.lstm_units;
        let layers = self.config.lstm_layers;
        let mut states = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut h = Vec::with_capacity(active.len() * hidden);
            let mut c = Vec::with_capacity(active.len() * hidden);
            for &r in active {
                h.extend_from_slice(&rows[r].h[l]);
                c.extend_from_slice(&rows[r].c[l]);
            }
            states.push(scanpath_nn::LstmState {
                h: g.constant(Tensor::matrix(active.len(), hidden, h)?),
                c: g.constant(Tensor::matrix(active.len(), hidden, c)?),
            });
        }
        let inputs: Vec<StepInput<'_>> = active
            .iter()
            .map(|&r| {
                let row = &rows[r];
                match row.path.last() {
                    Some(&loc) => StepInput {
                        location: loc,
                        token: Some(sentences[row.group].tokens[loc - 1].as_str()),
                        duration_z: 0.0,
                        landing_z: 0.0,
                        reader: row.reader,
                    },
                    None => StepInput::start(row.reader),
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.fixation_step(&mut g, &p, emb, &inputs, &mut states, Mode::Eval, &mut rng)?;
        let context = match keys {
            Some((k, width)) => {
                let kv = g.constant(k.clone());
                let groups = active.iter().map(|&r| rows[r].group).collect();
                let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
                let f_prev: Vec<usize> = inputs.iter().map(|s| s.location).collect();
                let (_, _, c) =
                    self.cross_attend(&mut g, &p, h, kv, *width, groups, &lengths, &f_prev)?;
                Some(c)
            }
            None => None,
        };
        let logits = self.decode_logits(&mut g, &p, context, h, Mode::Eval, &mut rng)?;
        for (l, s) in states.iter().enumerate() {
            let hv = g.value(s.h);
            let cv = g.value(s.c);
            for (k, &r) in active.iter().enumerate() {
                rows[r].h[l] = hv.row(k).to_vec();
                rows[r].c[l] = cv.row(k).to_vec();
            }
        }
        let lv = g.value(logits);
        Ok((0..active.len())
            .map(|k| softmax_vec(&lv.row(k).iter().map(|x| x.f64()).collect::<Vec<_>>()))
            .collect())
    }

    fn encode_group(
        &self,
        sentences: &[&Sentence],
        emb: Option<&EmbeddingSet>,
        norm: &crate::corpus::NormStats,
    ) -> Result<Option<(Tensor<F>, usize)>> {
        if !self.config.use_word_encoder {
            return Ok(None);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (keys, width) =
            self.encode_words(&mut g, &p, emb, norm, sentences, Mode::Eval, &mut rng)?;
        Ok(Some((g.value(keys).clone(), width)))
    }

    fn new_rows<'a>(&self, requests: &[GenRequest<'a>]) -> (Vec<&'a Sentence>, Vec<Row<F>>) {
        let mut sentences: Vec<&'a Sentence> = Vec::new();
        let mut seen: BTreeMap<&'a str, usize> = BTreeMap::new();
        let hidden = self.config.lstm_units;
        let rows = requests
            .iter()
            .map(|req| {
                let next = sentences.len();
                let group = *seen
                    .entry(req.sentence.sentence_id.as_str())
                    .or_insert(next);
                if group == next {
                    sentences.push(req.sentence);
                }
                Row {
                    group,
                    reader: self.reader_row(req.reader),
                    rng: ChaCha8Rng::seed_from_u64(req.seed),
                    max_len: req.max_len,
                    path: Vec::new(),
                    stop: None,
                    h: vec![vec![F::zero(); hidden]; self.config.lstm_layers],
                    c: vec![vec![F::zero(); hidden]; self.config.lstm_layers],
                }
            })
            .collect();
        (sentences, rows)
    }

    fn generate_chunk(
        &self,
        requests: &[GenRequest<'_>],
        emb: Option<&EmbeddingSet>,
        norm: &crate::corpus::NormStats,
        mask_invalid: bool,
    ) -> Result<Vec<Generated>> {
        let (sentences, mut rows) = self.new_rows(requests);
        let keys = self.encode_group(&sentences, emb, norm)?;
        for row in &mut rows {
            if row.max_len == 0 {
                row.stop = Some(StopReason::MaxLen);
            }
        }
        loop {
            let active: Vec<usize> = (0..rows.len())
                .filter(|&r| rows[r].stop.is_none())
                .collect();
            if active.is_empty() {
                break;
            }
            let dists = self.step_rows(keys.as_ref(), &sentences, &mut rows, &active, emb)?;
            for (&r, probs) in active.iter().zip(dists) {
                let row = &mut rows[r];
                let m = sentences[row.group].len();
                let loc = row.path.last().copied().unwrap_or(0);
                let probs = if mask_invalid {
                    mask_distribution(&probs, loc, m, self.max_len)
                } else {
                    probs
                };
                let class = draw(&probs, &mut row.rng);
                match range_of(class, self.max_len) {
                    None => row.stop = Some(StopReason::Eos),
                    Some(range) => {
                        let next = loc as i64 + range;
                        if next < 1 || next > m as i64 {
                            row.stop = Some(StopReason::OutOfRange);
                        } else {
                            row.path.push(next as usize);
                            if row.path.len() >= row.max_len {
                                row.stop = Some(StopReason::MaxLen);
                            }
                        }
                    }
                }
            }
        }
        Ok(rows
            .into_iter()
            .map(|r| Generated {
                indices: r.path,
                stop: r.stop.expect("finished"),
            })
            .collect())
    }

    /// Distribution of the first generated step, masked or raw.
    pub fn first_step_distribution(
        &self,
        sentence: &Sentence,
        reader: Option<&str>,
        emb: Option<&EmbeddingSet>,
        norm: &crate::corpus::NormStats,
        mask_invalid: bool,
    ) -> Result<Vec<f64>> {
        self.check_sentence(sentence)?;
        let req = [GenRequest {
            sentence,
            reader,
            seed: 0,
            max_len: 1,
        }];
        let (sentences, mut rows) = self.new_rows(&req);
        let keys = self.encode_group(&sentences, emb, norm)?;
        let probs = self
            .step_rows(keys.as_ref(), &sentences, &mut rows, &[0], emb)?
            .remove(0);
        Ok(if mask_invalid {
            mask_distribution(&probs, 0, sentence.len(), self.max_len)
        } else {
            probs
        })
    }
}

/// Samples `opts.n_samples` scanpaths on `sentence`. Sample `i` uses seed `sample_seed(seed, i)`.
pub fn generate<F: Real>(
    checkpoint: &Checkpoint<F>,
    emb: Option<&EmbeddingSet>,
    sentence: &Sentence,
    opts: &GenerateOptions,
) -> Result<Vec<Generated>> {
    let max_len = opts.max_len.unwrap_or(4 * sentence.len());
    let requests: Vec<GenRequest<'_>> = (0..opts.n_samples)
        .map(|i| GenRequest {
            sentence,
            reader: opts.reader.as_deref(),
            seed: sample_seed(opts.seed, i as u64),
            max_len,
        })
        .collect();
    checkpoint
        .model
        .generate_requests(&requests, emb, &checkpoint.norm, opts.mask_invalid)
}

/// Teacher-forced attention weights, one row per prediction step (`(n+1) × m`).
pub fn attention_heatmap<F: Real>(
    checkpoint: &Checkpoint<F>,
    emb: Option<&EmbeddingSet>,
    sentence: &Sentence,
    scanpath: &Scanpath,
) -> Result<Vec<Vec<f64>>> {
    let model = &checkpoint.model;
    if !model.config.use_word_encoder {
        return Err(Error::Config(
            "model has no word encoder, so it has no attention".into(),
        ));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward_batch(
        &mut g,
        &p,
        &[PathInput::new(sentence, scanpath)],
        emb,
        &checkpoint.norm,
        Mode::Eval,
        &mut rng,
    )?;
    let w = g.value(out.attention.expect("word encoder present"));
    Ok((0..out.steps)
        .map(|t| w.row(t)[..sentence.len()].iter().map(|x| x.f64()).collect())
        .collect())
}

/// Writes a heatmap as CSV: a header of tokens, then one row per step.
pub fn write_heatmap_csv(path: &Path, sentence: &Sentence, heatmap: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&sentence.tokens)?;
    for row in heatmap {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
