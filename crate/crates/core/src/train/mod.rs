//! Mini-batch training with early stopping, fine-tuning, and checkpoints.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scanpath_nn::{AdamState, Graph, Mode, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{compute_norm_stats, Corpus, NormStats};
use crate::embed::{build_vocab, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PathInput};

pub use checkpoint::{load_checkpoint, AnyCheckpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};

/// Scanpaths per gradient shard. Shards of a batch are differentiated in parallel and their
/// gradients summed in a fixed order, so results do not depend on the thread count.
pub const SHARD_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Share of the training scanpaths held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Batch size for evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 1000,
            patience: 20,
            batch_size: 256,
            validation_fraction: 0.1,
            seed: 0,
            precision: Precision::F32,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct History {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
    /// Scanpath indices (into the training corpus) used for validation.
    pub validation: Vec<usize>,
}

/// Splits `indices` into (fit, validation) with the given seed.
pub fn validation_split(
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 training scanpaths, got {n}"
        )));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A11));
    let mut val = shuffled[..k].to_vec();
    let mut fit = shuffled[k..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    Ok((fit, val))
}

/// Mean per-scanpath NLL of `model` on the given scanpaths.
pub fn mean_nll<F: Real>(
    model: &Model<F>,
    corpus: &Corpus,
    indices: &[usize],
    emb: Option<&EmbeddingSet>,
    norm: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    let out = model.predict(corpus, indices, emb, norm, batch_size)?;
    Ok(out.iter().map(|o| o.nll).sum::<f64>() / out.len().max(1) as f64)
}

fn shard_seed(seed: u64, epoch: usize, batch: usize, shard: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, batch as u64, shard as u64] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

/// Loss and parameter gradients of one batch, averaged over its scanpaths.
fn batch_gradients<F: Real>(
    model: &Model<F>,
    corpus: &Corpus,
    batch: &[usize],
    emb: Option<&EmbeddingSet>,
    norm: &NormStats,
    seeds: (u64, usize, usize),
) -> Result<(f64, Vec<Tensor<F>>)> {
    let n = batch.len() as f64;
    let shards: Vec<Result<(f64, Vec<Tensor<F>>)>> = batch
        .par_chunks(SHARD_SIZE)
        .enumerate()
        .map(|(s, shard)| {
            let mut rng = ChaCha8Rng::seed_from_u64(shard_seed(seeds.0, seeds.1, seeds.2, s));
            let items: Vec<PathInput<'_>> = shard
                .iter()
                .map(|&i| PathInput::new(corpus.sentence_of(i), &corpus.scanpaths[i]))
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let out = model.forward_batch(&mut g, &p, &items, emb, norm, Mode::Train, &mut rng)?;
            let grads = g.backward(out.loss)?;
            let mut tensors = model.params.collect_grads(&p, &grads);
            let w = F::of(shard.len() as f64 / n);
            for t in &mut tensors {
                for x in t.data_mut() {
                    *x *= w;
                }
            }
            Ok((g.scalar(out.loss).f64() * shard.len() as f64 / n, tensors))
        })
        .collect();
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<F>>> = None;
    for s in shards {
        let (l, grads) = s?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Trains `model` in place on `fit`, keeping the parameters with the best validation NLL.
#[allow(clippy::too_many_arguments)]
pub fn fit<F: Real>(
    model: &mut Model<F>,
    corpus: &Corpus,
    fit: &[usize],
    validation: &[usize],
    emb: Option<&EmbeddingSet>,
    norm: &NormStats,
    tc: &TrainConfig,
) -> Result<History> {
    tc.validate()?;
    if fit.is_empty() || validation.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    for &i in fit.iter().chain(validation) {
        model.check_sentence(corpus.sentence_of(i))?;
    }
    let mut adam = AdamState::new(&model.params, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order = fit.to_vec();
    let mut history = History {
        best_val_nll: f64::INFINITY,
        validation: validation.to_vec(),
        ..History::default()
    };
    let mut best = model.params.clone();
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let (loss, grads) =
                batch_gradients(model, corpus, batch, emb, norm, (tc.seed, epoch, b))?;
            if !loss.is_finite()
                || grads
                    .iter()
                    .any(|g| g.data().iter().any(|x| !x.is_finite()))
            {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.step(&mut model.params, &grads)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let val_nll = mean_nll(model, corpus, validation, emb, norm, tc.eval_batch_size)?;
        if !val_nll.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        history.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            val_nll,
        });
        if val_nll < history.best_val_nll {
            history.best_val_nll = val_nll;
            history.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok(history)
}

/// Trains a fresh model on the training scanpaths of `corpus`. Normalization statistics and `M`
/// (unless fixed in the configuration) come from the training scanpaths only.
pub fn train<F: Real>(
    corpus: &Corpus,
    train_indices: &[usize],
    emb: Option<&EmbeddingSet>,
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<Checkpoint<F>> {
    tc.validate()?;
    config.validate()?;
    if train_indices.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let norm = compute_norm_stats(corpus, train_indices)?;
    let max_len = config
        .max_len
        .unwrap_or_else(|| corpus.max_sentence_len(train_indices));
    let vocab = match emb {
        Some(set) => {
            if set.dim != config.embed_dim {
                return Err(Error::Config(format!(
                    "embedding file has dimension {}, configuration says {}",
                    set.dim, config.embed_dim
                )));
            }
            None
        }
        None => Some(build_vocab(corpus)),
    };
    let readers: Vec<String> = train_indices
        .iter()
        .map(|&i| corpus.scanpaths[i].reader_id.clone())
        .collect();
    let mut model = Model::new(config.clone(), max_len, vocab, &readers, tc.seed)?;
    let (fit_idx, val_idx) = validation_split(train_indices, tc.validation_fraction, tc.seed)?;
    let history = fit(&mut model, corpus, &fit_idx, &val_idx, emb, &norm, tc)?;
    Ok(Checkpoint {
        model,
        norm,
        history,
        adam: None,
        embeddings: None,
    })
}

/// The scanpath indices a fine-tuning run with this seed draws.
pub fn sample_instances(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Invalid(format!(
            "{k} instances requested from {n} scanpaths"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Continues training a checkpoint on `k_instances` scanpaths of `corpus` drawn with the run
/// seed. The optimizer starts fresh; normalization statistics are kept from the checkpoint.
pub fn fine_tune<F: Real>(
    checkpoint: &Checkpoint<F>,
    corpus: &Corpus,
    k_instances: usize,
    emb: Option<&EmbeddingSet>,
    tc: &TrainConfig,
) -> Result<Checkpoint<F>> {
    tc.validate()?;
    for s in corpus.sentences.values() {
        checkpoint.model.check_sentence(s)?;
    }
    if k_instances == 0 {
        return Ok(checkpoint.clone());
    }
    let chosen = sample_instances(corpus.scanpaths.len(), k_instances, tc.seed)?;
    let (fit_idx, val_idx) = validation_split(&chosen, tc.validation_fraction, tc.seed)?;
    let mut model = checkpoint.model.clone();
    let history = fit(
        &mut model,
        corpus,
        &fit_idx,
        &val_idx,
        emb,
        &checkpoint.norm,
        tc,
    )?;
    Ok(Checkpoint {
        model,
        norm: checkpoint.norm,
        history,
        adam: None,
        embeddings: checkpoint.embeddings.clone(),
    })
}
