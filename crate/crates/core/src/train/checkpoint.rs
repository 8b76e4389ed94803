//! `EYCKPT1` checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use scanpath_nn::{AdamState, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::{History, Precision};
use crate::corpus::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CKPT_MAGIC: &[u8; 8] = b"EYCKPT1\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub norm: NormStats,
    pub history: History,
    pub adam: Option<AdamState<F>>,
    /// Path of the frozen embedding file the model was trained with, if any.
    pub embeddings: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    precision: Precision,
    config: ModelConfig,
    max_len: usize,
    norm: NormStats,
    /// Trainable-embedding vocabulary in row order.
    vocab: Option<Vec<String>>,
    /// Reader-embedding rows in row order.
    readers: Vec<String>,
    embeddings: Option<String>,
    history: History,
    adam: Option<AdamMeta>,
}

fn precision_of<F: Real>() -> Precision {
    if F::BYTES == 4 {
        Precision::F32
    } else {
        Precision::F64
    }
}

fn in_row_order(map: &BTreeMap<String, usize>) -> Vec<String> {
    let mut v: Vec<(&String, &usize)> = map.iter().collect();
    v.sort_by_key(|(_, &i)| i);
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

fn push_tensor<F: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("tensor name `{name}` too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor<F: Real>(&mut self) -> Option<(String, Tensor<F>)> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().ok()?) as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Option<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(F::BYTES)?)?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let meta = Meta {
            precision: precision_of::<F>(),
            config: model.config.clone(),
            max_len: model.max_len,
            norm: self.norm,
            vocab: model.vocab.as_ref().map(in_row_order),
            readers: in_row_order(&model.readers),
            embeddings: self.embeddings.clone(),
            history: self.history.clone(),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            }),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let n_params = model.params.len();
        let count = if self.adam.is_some() {
            3 * n_params
        } else {
            n_params
        };
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (name, t) in model.params.iter() {
            push_tensor(&mut out, name, t)?;
        }
        if let Some(a) = &self.adam {
            for (which, moments) in [("m", &a.m), ("v", &a.v)] {
                for ((name, t), mom) in model.params.iter().zip(moments) {
                    let mt = Tensor::new(t.shape().to_vec(), mom.clone())?;
                    push_tensor(&mut out, &format!("adam.{which}.{name}"), &mt)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if r.take(8) != Some(CKPT_MAGIC.as_slice()) {
            return Err(bad("bad magic: not an EYCKPT1 file"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let len = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let json = r.take(len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.precision != precision_of::<F>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {:?} tensors, {} requested",
                meta.precision,
                F::NAME
            )));
        }
        let vocab = meta.vocab.map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, t)| (t, i))
                .collect::<BTreeMap<_, _>>()
        });
        let mut model = Model::<F>::new(meta.config, meta.max_len, vocab, &meta.readers, 0)?;
        let expected: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut expected_all = expected.clone();
        if meta.adam.is_some() {
            for which in ["m", "v"] {
                expected_all.extend(expected.iter().map(|n| format!("adam.{which}.{n}")));
            }
        }
        let count = r.u64().ok_or_else(|| bad("truncated tensor count"))? as usize;
        if count != expected_all.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, the configuration implies {}",
                expected_all.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for name in &expected_all {
            let (got, t) = r.tensor::<F>().ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: tensor `{name}` is missing or incomplete"
                ))
            })?;
            if &got != name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{name}`, found `{got}`"
                )));
            }
            tensors.push((got, t));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let moments = tensors.split_off(expected.len());
        model.load_tensors(tensors)?;
        let adam = meta.adam.map(|a| {
            let (m, v) = moments.split_at(expected.len());
            AdamState {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
                m: m.iter().map(|(_, t)| t.data().to_vec()).collect(),
                v: v.iter().map(|(_, t)| t.data().to_vec()).collect(),
            }
        });
        Ok(Self {
            model,
            norm: meta.norm,
            history: meta.history,
            adam,
            embeddings: meta.embeddings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

/// Loads a checkpoint at whatever precision it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = fs::read(path)?;
    match Checkpoint::<f32>::from_bytes(&bytes) {
        Ok(c) => Ok(AnyCheckpoint::F32(c)),
        Err(Error::Checkpoint(m)) if m.contains("requested") => {
            Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(&bytes)?))
        }
        Err(e) => Err(e),
    }
}
