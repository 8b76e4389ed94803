//! The scanpath model: a BiLSTM word-sequence encoder, an LSTM fixation-sequence encoder,
//! windowed cross-attention between them, and a dense decoder over saccade-range classes.

mod attention;
mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scanpath_nn::{
    dropout, init_uniform, run_bilstm, softmax_vec, Bound, Dense, Graph, LstmParams, LstmState,
    Mode, ParamId, ParamStore, Real, Tensor, Var,
};

use crate::corpus::{Corpus, Fixation, NormStats, Scanpath, Sentence};
use crate::embed::{init_table, EmbeddingSet, TrainableLookup};
use crate::error::{Error, Result};

pub(crate) use attention::attend;
pub use attention::{attention_weights, context_vector, AttentionWeights, AttentionWindow, Kernel};
pub use config::{
    class_index, eos_class, num_classes, range_of, KernelKind, ModelConfig, SigmaRule, WindowMode,
};

/// Parameter handles, rebuilt deterministically from the configuration.
#[derive(Debug, Clone)]
struct Layout {
    lookup: Option<ParamId>,
    bilstm: Vec<(LstmParams, LstmParams)>,
    position: ParamId,
    reader: Option<ParamId>,
    lstm: Vec<LstmParams>,
    w_a: Option<ParamId>,
    dense: Vec<Dense>,
    head: Dense,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    /// `M`: longest supported sentence; the class space is `{−M+1, …, M} ∪ {EOS}`.
    pub max_len: usize,
    pub params: ParamStore<F>,
    /// Vocabulary of the trainable embedding table, when no embedding file is used.
    pub vocab: Option<BTreeMap<String, usize>>,
    /// Reader rows of the reader-embedding table (empty when the table is disabled).
    pub readers: BTreeMap<String, usize>,
    layout: Layout,
}

/// One fixation-encoder input: the fixated location (0 for the start fixation), its token, the
/// normalized duration and landing position, and the reader row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput<'a> {
    pub location: usize,
    pub token: Option<&'a str>,
    pub duration_z: f64,
    pub landing_z: f64,
    pub reader: Option<usize>,
}

impl StepInput<'_> {
    pub fn start(reader: Option<usize>) -> Self {
        Self {
            location: 0,
            token: None,
            duration_z: 0.0,
            landing_z: 0.0,
            reader,
        }
    }
}

/// Token vectors `z_j` of one sentence (`[m, Z]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence<F> {
    pub z: Tensor<F>,
    pub m: usize,
}

/// Recurrent state of the fixation encoder, one `[rows, H]` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationState<F> {
    pub h: Vec<Tensor<F>>,
    pub c: Vec<Tensor<F>>,
}

/// One scanpath of a batch.
#[derive(Debug, Clone, Copy)]
pub struct PathInput<'a> {
    pub sentence: &'a Sentence,
    pub fixations: &'a [Fixation],
    pub reader: Option<&'a str>,
}

impl<'a> PathInput<'a> {
    pub fn new(sentence: &'a Sentence, scanpath: &'a Scanpath) -> Self {
        Self {
            sentence,
            fixations: &scanpath.fixations,
            reader: Some(&scanpath.reader_id),
        }
    }
}

/// Graph outputs of a teacher-forced batch. Row `t·batch + b` holds step `t` of scanpath `b`.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Mean over scanpaths of the per-scanpath mean step NLL.
    pub loss: Var,
    pub logits: Var,
    /// Attention weights `[rows, width]` (post kernel), absent without the word encoder.
    pub attention: Option<Var>,
    pub pre_kernel: Option<Var>,
    pub batch: usize,
    pub steps: usize,
    pub width: usize,
    /// Target classes per scanpath, `n + 1` each (the last is EOS).
    pub targets: Vec<Vec<usize>>,
}

impl BatchForward {
    pub fn row(&self, b: usize, t: usize) -> usize {
        t * self.batch + b
    }
}

/// Per-step outputs of one teacher-forced scanpath.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanpathForward {
    pub distributions: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    /// `−ln p(target)` per step, from the logits.
    pub step_nll: Vec<f64>,
    pub nll: f64,
}

/// Target classes of a fixation sequence: one per fixation plus EOS.
pub fn targets_of(fixations: &[Fixation], max_len: usize) -> Result<Vec<usize>> {
    let mut prev = 0i64;
    let mut out = Vec::with_capacity(fixations.len() + 1);
    for f in fixations {
        let w = f.word_index as i64;
        out.push(class_index(w - prev, max_len)?);
        prev = w;
    }
    out.push(eos_class(max_len));
    Ok(out)
}

impl<F: PartialEq> PartialEq for Model<F> {
    /// Layouts are derived from the configuration, so they are not compared.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.max_len == other.max_len
            && self.vocab == other.vocab
            && self.readers == other.readers
            && self.params == other.params
    }
}

enum Tokens<'a> {
    Table(Var, &'a BTreeMap<String, usize>),
    Frozen(&'a EmbeddingSet),
}

impl<F: Real> Model<F> {
    /// A freshly initialized model. `vocab` enables the trainable embedding table; `readers`
    /// lists the reader rows when reader embeddings are configured.
    pub fn new(
        config: ModelConfig,
        max_len: usize,
        vocab: Option<BTreeMap<String, usize>>,
        readers: &[String],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if max_len == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = config.embed_dim;
        let lookup = match &vocab {
            Some(v) => Some(p.insert("embed.table", init_table(&mut rng, v.len(), e))?),
            None => None,
        };
        let mut bilstm = Vec::new();
        if config.use_word_encoder {
            let mut input = e;
            for l in 0..config.bilstm_layers {
                let u = config.bilstm_units;
                let f = LstmParams::new(&mut p, &format!("word.l{l}.fwd"), input, u, &mut rng)?;
                let b = LstmParams::new(&mut p, &format!("word.l{l}.bwd"), input, u, &mut rng)?;
                bilstm.push((f, b));
                input = 2 * u;
            }
        }
        let position = p.insert("fix.position", init_table(&mut rng, max_len + 1, e))?;
        let mut reader_map = BTreeMap::new();
        let reader = match config.reader_embedding {
            Some(d) => {
                let mut sorted: Vec<&String> = readers.iter().collect();
                sorted.sort();
                sorted.dedup();
                reader_map = sorted
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r.to_string(), i))
                    .collect();
                Some(p.insert(
                    "fix.reader",
                    init_table(&mut rng, reader_map.len().max(1), d),
                )?)
            }
            None => None,
        };
        let mut lstm = Vec::new();
        let mut input = config.fixation_input_dim();
        for l in 0..config.lstm_layers {
            lstm.push(LstmParams::new(
                &mut p,
                &format!("fix.l{l}"),
                input,
                config.lstm_units,
                &mut rng,
            )?);
            input = config.lstm_units;
        }
        let w_a = if config.use_word_encoder {
            let h = config.lstm_units;
            Some(p.insert(
                "attn.w_a",
                init_uniform(&mut rng, &[h, config.word_dim()], h),
            )?)
        } else {
            None
        };
        let mut dense = Vec::new();
        let mut input = config.decoder_input_dim();
        for (l, &u) in config.dense_units.iter().enumerate() {
            dense.push(Dense::new(
                &mut p,
                &format!("dec.l{l}"),
                input,
                u,
                &mut rng,
            )?);
            input = u;
        }
        let head = Dense::new(&mut p, "dec.out", input, num_classes(max_len), &mut rng)?;
        Ok(Self {
            config,
            max_len,
            params: p,
            vocab,
            readers: reader_map,
            layout: Layout {
                lookup,
                bilstm,
                position,
                reader,
                lstm,
                w_a,
                dense,
                head,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        num_classes(self.max_len)
    }

    /// The same model at another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            max_len: self.max_len,
            params: self.params.cast(),
            vocab: self.vocab.clone(),
            readers: self.readers.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn window(&self) -> AttentionWindow {
        AttentionWindow::from_config(&self.config)
    }

    /// `W_a`, absent without the word encoder.
    pub fn w_a(&self) -> Option<&Tensor<F>> {
        self.layout.w_a.map(|id| self.params.get(id))
    }

    /// Parameter handles of the output head `(weight, bias)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.layout.head.weight, self.layout.head.bias)
    }

    /// Parameter handle of `W_a`.
    pub fn w_a_param(&self) -> Option<ParamId> {
        self.layout.w_a
    }

    /// Trainable embeddings as a standalone lookup.
    pub fn lookup(&self) -> Option<TrainableLookup<F>> {
        Some(TrainableLookup {
            vocab: self.vocab.clone()?,
            table: self.params.get(self.layout.lookup?).clone(),
        })
    }

    pub fn reader_row(&self, reader: Option<&str>) -> Option<usize> {
        self.layout.reader?;
        reader.and_then(|r| self.readers.get(r).copied())
    }

    /// Rejects sentences longer than `M`.
    pub fn check_sentence(&self, s: &Sentence) -> Result<()> {
        if s.len() > self.max_len {
            return Err(Error::SentenceTooLong {
                sentence_id: s.sentence_id.clone(),
                m: s.len(),
                max_len: self.max_len,
            });
        }
        Ok(())
    }

    fn tokens<'a>(&'a self, p: &Bound, emb: Option<&'a EmbeddingSet>) -> Result<Tokens<'a>> {
        match (self.layout.lookup, &self.vocab, emb) {
            (Some(id), Some(v), _) => Ok(Tokens::Table(p.var(id), v)),
            (None, _, Some(set)) => {
                if set.dim != self.config.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding dimension {} differs from the model's embed_dim {}",
                        set.dim, self.config.embed_dim
                    )));
                }
                Ok(Tokens::Frozen(set))
            }
            _ => Err(Error::Config(
                "this model reads frozen embeddings; none were supplied".into(),
            )),
        }
    }

    /// `[rows, e]` token vectors; `None` entries give zero rows.
    fn token_rows(
        &self,
        g: &mut Graph<F>,
        tokens: &Tokens<'_>,
        keys: &[Option<(&str, u32, &str)>],
        contextual: bool,
    ) -> Result<Var> {
        let e = self.config.embed_dim;
        match tokens {
            Tokens::Table(table, vocab) => {
                let idx = keys
                    .iter()
                    .map(|k| {
                        k.map(|(_, _, tok)| {
                            vocab.get(tok).copied().ok_or_else(|| {
                                Error::MissingEmbedding(format!(
                                    "token `{tok}` (not in the trainable vocabulary)"
                                ))
                            })
                        })
                        .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.gather_rows(*table, idx)?)
            }
            Tokens::Frozen(set) => {
                let mut data = Vec::with_capacity(keys.len() * e);
                for k in keys {
                    match k {
                        None => data.extend(std::iter::repeat_n(F::zero(), e)),
                        Some((sid, j, tok)) => {
                            let v = if contextual {
                                set.get_contextual(sid, *j)?
                            } else {
                                set.get_noncontextual(tok)?
                            };
                            data.extend(v.iter().map(|&x| F::of(x as f64)));
                        }
                    }
                }
                Ok(g.constant(Tensor::matrix(keys.len(), e, data)?))
            }
        }
    }

    /// Encodes `sentences` jointly. Returns keys `[G·width, Z]` laid out group-major, and `width`.
    pub(crate) fn encode_words<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
        sentences: &[&Sentence],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, usize)> {
        let groups = sentences.len();
        let width = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        if groups == 0 || width == 0 {
            return Err(Error::Invalid("nothing to encode".into()));
        }
        let tokens = self.tokens(p, emb)?;
        let mut seq = Vec::with_capacity(width);
        let mut valid = Vec::with_capacity(width);
        for t in 0..width {
            let keys: Vec<_> = sentences
                .iter()
                .map(|s| {
                    (t < s.len())
                        .then(|| (s.sentence_id.as_str(), t as u32 + 1, s.tokens[t].as_str()))
                })
                .collect();
            valid.push(keys.iter().map(Option::is_some).collect::<Vec<bool>>());
            let x = self.token_rows(g, &tokens, &keys, true)?;
            seq.push(dropout(g, x, self.config.dropout_embed, mode, rng)?);
        }
        let all_valid = valid.iter().all(|v| v.iter().all(|&k| k));
        let out = run_bilstm(
            g,
            p,
            &self.layout.bilstm,
            &seq,
            (!all_valid).then_some(valid.as_slice()),
            self.config.dropout_recurrent,
            mode,
            rng,
        )?;
        let mut steps = Vec::with_capacity(width);
        for (t, o) in out.into_iter().enumerate() {
            if self.config.use_word_length {
                let lens = sentences
                    .iter()
                    .map(|s| {
                        F::of(
                            s.token_lengths
                                .get(t)
                                .map_or(0.0, |&l| norm.wordlen(l as f64)),
                        )
                    })
                    .collect();
                let l = g.constant(Tensor::matrix(groups, 1, lens)?);
                steps.push(g.concat_cols(&[o, l])?);
            } else {
                steps.push(o);
            }
        }
        let time_major = g.concat_rows(&steps)?;
        let perm = (0..groups * width)
            .map(|r| Some((r % width) * groups + r / width))
            .collect();
        Ok((g.gather_rows(time_major, perm)?, width))
    }

    /// Fixation-encoder input rows `[rows, in]`.
    fn fixation_inputs(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        tokens: &Tokens<'_>,
        steps: &[StepInput<'_>],
    ) -> Result<Var> {
        let rows = steps.len();
        if let Some(s) = steps.iter().find(|s| s.location > self.max_len) {
            return Err(Error::Invalid(format!(
                "location {} exceeds M={}",
                s.location, self.max_len
            )));
        }
        let keys: Vec<_> = steps.iter().map(|s| s.token.map(|t| ("", 0, t))).collect();
        let tok = self.token_rows(g, tokens, &keys, false)?;
        let pos = g.gather_rows(
            p.var(self.layout.position),
            steps.iter().map(|s| Some(s.location)).collect(),
        )?;
        let mut parts = vec![g.add(tok, pos)?];
        if self.config.use_duration {
            let d = steps.iter().map(|s| F::of(s.duration_z)).collect();
            parts.push(g.constant(Tensor::matrix(rows, 1, d)?));
        }
        if self.config.use_landing {
            let l = steps.iter().map(|s| F::of(s.landing_z)).collect();
            parts.push(g.constant(Tensor::matrix(rows, 1, l)?));
        }
        if let Some(id) = self.layout.reader {
            let n = self.params.get(id).rows();
            let idx = steps.iter().map(|s| s.reader.filter(|&r| r < n)).collect();
            parts.push(g.gather_rows(p.var(id), idx)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(g.concat_cols(&parts)?)
        }
    }

    /// One step of the fixation encoder for a batch of rows. Returns the top hidden state.
    pub(crate) fn fixation_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        emb: Option<&EmbeddingSet>,
        steps: &[StepInput<'_>],
        states: &mut [LstmState],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let tokens = self.tokens(p, emb)?;
        let mut x = self.fixation_inputs(g, p, &tokens, steps)?;
        let last = self.layout.lstm.len() - 1;
        for (l, layer) in self.layout.lstm.iter().enumerate() {
            states[l] = layer.step(g, p, x, states[l])?;
            x = if l < last {
                dropout(g, states[l].h, self.config.dropout_recurrent, mode, rng)?
            } else {
                states[l].h
            };
        }
        Ok(x)
    }

    pub(crate) fn zero_states(&self, g: &mut Graph<F>, rows: usize) -> Vec<LstmState> {
        self.layout
            .lstm
            .iter()
            .map(|l| l.zero_state(g, rows))
            .collect()
    }

    /// Attention from rows of `h` at locations `f_prev` into the key groups.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cross_attend(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        h: Var,
        keys: Var,
        width: usize,
        groups: Vec<usize>,
        lengths: &[usize],
        f_prev: &[usize],
    ) -> Result<(Var, Var, Var)> {
        let w_a = self
            .layout
            .w_a
            .ok_or_else(|| Error::Config("model has no word encoder".into()))?;
        let window = self.window();
        let mut mask = Vec::with_capacity(groups.len() * width);
        let mut kernel = Vec::with_capacity(groups.len() * width);
        for (r, &grp) in groups.iter().enumerate() {
            let (mk, kv) = window.mask_and_kernel(f_prev[r], lengths[grp], width);
            mask.extend(mk);
            kernel.extend(kv.into_iter().map(F::of));
        }
        let q = g.matmul(h, p.var(w_a))?;
        let kernel = window.kernel.map(|_| kernel);
        let (pre, weights) = attend(g, q, keys, groups.clone(), width, mask, kernel)?;
        let context = g.cross_context(weights, keys, groups, width)?;
        Ok((pre, weights, context))
    }

    /// Decoder logits for rows of `h`, with the attention context when the word encoder is on.
    pub(crate) fn decode_logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        context: Option<Var>,
        h: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let mut x = match context {
            Some(c) => g.concat_cols(&[c, h])?,
            None => h,
        };
        for d in &self.layout.dense {
            x = dropout(g, x, self.config.dropout_dense, mode, rng)?;
            let y = d.forward(g, p, x)?;
            x = g.relu(y);
        }
        Ok(self.layout.head.forward(g, p, x)?)
    }

    /// Teacher-forced forward pass over a batch of scanpaths, with parameters bound from a store
    /// laid out like `self.params`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        items: &[PathInput<'_>],
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
        mode: Mode,
        rng: &mut R,
    ) -> Result<BatchForward> {
        let batch = items.len();
        if batch == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut group_of = Vec::with_capacity(batch);
        let mut sentences: Vec<&Sentence> = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut targets = Vec::with_capacity(batch);
        for it in items {
            self.check_sentence(it.sentence)?;
            let m = it.sentence.len();
            if let Some(f) = it
                .fixations
                .iter()
                .find(|f| f.word_index == 0 || f.word_index > m)
            {
                return Err(Error::Invalid(format!(
                    "word index {} outside sentence `{}` (m={m})",
                    f.word_index, it.sentence.sentence_id
                )));
            }
            targets.push(targets_of(it.fixations, self.max_len)?);
            let next = sentences.len();
            let grp = *seen.entry(it.sentence.sentence_id.as_str()).or_insert(next);
            if grp == next {
                sentences.push(it.sentence);
            }
            group_of.push(grp);
        }
        let steps = targets.iter().map(Vec::len).max().unwrap_or(1);

        let encoded = if self.config.use_word_encoder {
            Some(self.encode_words(g, p, emb, norm, &sentences, mode, rng)?)
        } else {
            None
        };

        let mut states = self.zero_states(g, batch);
        let mut hs = Vec::with_capacity(steps);
        let mut f_prev = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            let inputs: Vec<StepInput<'_>> = items
                .iter()
                .map(|it| {
                    let reader = self.reader_row(it.reader);
                    match t.checked_sub(1).and_then(|k| it.fixations.get(k)) {
                        Some(f) => StepInput {
                            location: f.word_index,
                            token: Some(it.sentence.tokens[f.word_index - 1].as_str()),
                            duration_z: norm.duration(f.duration),
                            landing_z: norm.landing(f.landing_pos),
                            reader,
                        },
                        None => StepInput::start(reader),
                    }
                })
                .collect();
            f_prev.extend(inputs.iter().map(|s| s.location));
            hs.push(self.fixation_step(g, p, emb, &inputs, &mut states, mode, rng)?);
        }
        let h = g.concat_rows(&hs)?;

        let (attention, pre_kernel, context, width) = match encoded {
            Some((keys, width)) => {
                let groups = (0..steps * batch).map(|r| group_of[r % batch]).collect();
                let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
                let (pre, w, c) =
                    self.cross_attend(g, p, h, keys, width, groups, &lengths, &f_prev)?;
                (Some(w), Some(pre), Some(c), width)
            }
            None => (None, None, None, 0),
        };
        let logits = self.decode_logits(g, p, context, h, mode, rng)?;

        let mut row_targets = vec![0usize; steps * batch];
        let mut weights = vec![F::zero(); steps * batch];
        for (b, tg) in targets.iter().enumerate() {
            let w = F::of(1.0 / (tg.len() as f64 * batch as f64));
            for (t, &c) in tg.iter().enumerate() {
                row_targets[t * batch + b] = c;
                weights[t * batch + b] = w;
            }
        }
        let loss = g.softmax_nll(logits, row_targets, weights)?;
        Ok(BatchForward {
            loss,
            logits,
            attention,
            pre_kernel,
            batch,
            steps,
            width,
            targets,
        })
    }

    /// Eval-mode per-step distributions and NLLs for a batch, without gradients.
    pub fn evaluate_batch(
        &self,
        items: &[PathInput<'_>],
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
    ) -> Result<Vec<ScanpathForward>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_batch(&mut g, &p, items, emb, norm, Mode::Eval, &mut rng)?;
        let logits = g.value(out.logits);
        Ok(out
            .targets
            .iter()
            .enumerate()
            .map(|(b, tg)| {
                let distributions: Vec<Vec<f64>> = (0..tg.len())
                    .map(|t| {
                        let row: Vec<f64> =
                            logits.row(out.row(b, t)).iter().map(|x| x.f64()).collect();
                        softmax_vec(&row)
                    })
                    .collect();
                let step_nll: Vec<f64> = tg
                    .iter()
                    .enumerate()
                    .map(|(t, &c)| {
                        let row: Vec<f64> =
                            logits.row(out.row(b, t)).iter().map(|x| x.f64()).collect();
                        scanpath_nn::log_sum_exp(&row) - row[c]
                    })
                    .collect();
                let nll = step_nll.iter().sum::<f64>() / tg.len() as f64;
                ScanpathForward {
                    distributions,
                    targets: tg.clone(),
                    step_nll,
                    nll,
                }
            })
            .collect())
    }

    /// Eval-mode outputs for the given scanpaths of `corpus`, in order. Batches run in parallel.
    pub fn predict(
        &self,
        corpus: &Corpus,
        indices: &[usize],
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
        batch_size: usize,
    ) -> Result<Vec<ScanpathForward>> {
        let chunks: Vec<Result<Vec<ScanpathForward>>> = indices
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let items: Vec<PathInput<'_>> = chunk
                    .iter()
                    .map(|&i| PathInput::new(corpus.sentence_of(i), &corpus.scanpaths[i]))
                    .collect();
                self.evaluate_batch(&items, emb, norm)
            })
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Teacher-forced pass over one scanpath.
    pub fn forward_scanpath<R: Rng + ?Sized>(
        &self,
        sentence: &Sentence,
        scanpath: &Scanpath,
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ScanpathForward> {
        if scanpath.sentence_id != sentence.sentence_id {
            return Err(Error::Invalid(format!(
                "scanpath reads `{}` but sentence `{}` was given",
                scanpath.sentence_id, sentence.sentence_id
            )));
        }
        if mode == Mode::Eval {
            return Ok(self
                .evaluate_batch(&[PathInput::new(sentence, scanpath)], emb, norm)?
                .remove(0));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward_batch(
            &mut g,
            &p,
            &[PathInput::new(sentence, scanpath)],
            emb,
            norm,
            mode,
            rng,
        )?;
        let logits = g.value(out.logits);
        let distributions = (0..out.steps)
            .map(|t| softmax_vec(&logits.row(t).iter().map(|x| x.f64()).collect::<Vec<_>>()))
            .collect();
        let step_nll = out.targets[0]
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let row: Vec<f64> = logits.row(t).iter().map(|x| x.f64()).collect();
                scanpath_nn::log_sum_exp(&row) - row[c]
            })
            .collect();
        Ok(ScanpathForward {
            distributions,
            targets: out.targets[0].clone(),
            step_nll,
            nll: g.scalar(out.loss).f64(),
        })
    }

    /// Token vectors of one sentence.
    pub fn encode_sentence<R: Rng + ?Sized>(
        &self,
        sentence: &Sentence,
        emb: Option<&EmbeddingSet>,
        norm: &NormStats,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EncodedSentence<F>> {
        if !self.config.use_word_encoder {
            return Err(Error::Config("model has no word encoder".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (keys, m) = self.encode_words(&mut g, &p, emb, norm, &[sentence], mode, rng)?;
        Ok(EncodedSentence {
            z: g.value(keys).clone(),
            m,
        })
    }

    /// Input row the fixation encoder sees for `step`.
    pub fn fixation_input(
        &self,
        step: &StepInput<'_>,
        emb: Option<&EmbeddingSet>,
    ) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let tokens = self.tokens(&p, emb)?;
        let x = self.fixation_inputs(&mut g, &p, &tokens, std::slice::from_ref(step))?;
        Ok(g.value(x).data().to_vec())
    }

    /// Zero recurrent state for `rows` rows.
    pub fn initial_state(&self, rows: usize) -> FixationState<F> {
        let h = self.config.lstm_units;
        FixationState {
            h: vec![Tensor::zeros(&[rows, h]); self.layout.lstm.len()],
            c: vec![Tensor::zeros(&[rows, h]); self.layout.lstm.len()],
        }
    }

    pub(crate) fn bind_state(&self, g: &mut Graph<F>, s: &FixationState<F>) -> Vec<LstmState> {
        s.h.iter()
            .zip(&s.c)
            .map(|(h, c)| LstmState {
                h: g.constant(h.clone()),
                c: g.constant(c.clone()),
            })
            .collect()
    }

    pub(crate) fn read_state(g: &Graph<F>, s: &[LstmState]) -> FixationState<F> {
        FixationState {
            h: s.iter().map(|x| g.value(x.h).clone()).collect(),
            c: s.iter().map(|x| g.value(x.c).clone()).collect(),
        }
    }

    /// One eval-mode step of the fixation encoder for a single row.
    pub fn encode_fixation_step(
        &self,
        step: &StepInput<'_>,
        emb: Option<&EmbeddingSet>,
        state: &FixationState<F>,
    ) -> Result<(Vec<F>, FixationState<F>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut states = self.bind_state(&mut g, state);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.fixation_step(
            &mut g,
            &p,
            emb,
            std::slice::from_ref(step),
            &mut states,
            Mode::Eval,
            &mut rng,
        )?;
        Ok((g.value(h).data().to_vec(), Self::read_state(&g, &states)))
    }

    /// Distribution over the output classes from a context vector (ignored without the word
    /// encoder) and a fixation-encoder state `h`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        context: Option<&[F]>,
        h: &[F],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let hv = g.constant(Tensor::matrix(1, h.len(), h.to_vec())?);
        let c = match (self.config.use_word_encoder, context) {
            (true, Some(c)) => Some(g.constant(Tensor::matrix(1, c.len(), c.to_vec())?)),
            (true, None) => return Err(Error::Invalid("decoder needs a context vector".into())),
            (false, _) => None,
        };
        let logits = self.decode_logits(&mut g, &p, c, hv, mode, rng)?;
        Ok(softmax_vec(
            &g.value(logits)
                .data()
                .iter()
                .map(|x| x.f64())
                .collect::<Vec<_>>(),
        ))
    }

    /// Replaces parameters by name, checking shapes.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<F>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .params
                .id(&name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, the configuration implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}
