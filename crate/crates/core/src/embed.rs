//! Word embeddings: frozen vectors from an `EYEMB1` file, or a trainable lookup table.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use scanpath_nn::{Real, Tensor};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 8] = b"EYEMB1\0\0";
pub const EMB_VERSION: u32 = 1;

/// Element-wise sum of sub-word vectors.
pub fn aggregate_subwords(subword_vectors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = subword_vectors
        .first()
        .ok_or_else(|| Error::Invalid("no sub-word vectors to aggregate".into()))?;
    let mut out = first.clone();
    for (i, v) in subword_vectors.iter().enumerate().skip(1) {
        if v.len() != out.len() {
            return Err(Error::Invalid(format!(
                "sub-word vector {i} has {} entries, expected {}",
                v.len(),
                out.len()
            )));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    Ok(out)
}

/// Read access shared by frozen sets and the trainable lookup.
pub trait EmbeddingLookup {
    fn dim(&self) -> usize;
    /// Vector of the 1-based `token_index` of a sentence.
    fn contextual(&self, sentence_id: &str, token_index: u32, token: &str) -> Result<Vec<f64>>;
    fn noncontextual(&self, token: &str) -> Result<Vec<f64>>;
}

pub fn get_contextual(
    src: &dyn EmbeddingLookup,
    sentence_id: &str,
    token_index: u32,
    token: &str,
) -> Result<Vec<f64>> {
    src.contextual(sentence_id, token_index, token)
}

pub fn get_noncontextual(src: &dyn EmbeddingLookup, token: &str) -> Result<Vec<f64>> {
    src.noncontextual(token)
}

/// Frozen embeddings. Contextual vectors are keyed by sentence ID and 1-based token index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub contextual: BTreeMap<(String, u32), Vec<f32>>,
    pub noncontextual: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    fn check_dim(&self, v: &[f32], what: &str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::EmbeddingFormat(format!(
                "{what}: {} entries, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn insert_contextual(
        &mut self,
        sentence_id: &str,
        token_index: u32,
        v: Vec<f32>,
    ) -> Result<()> {
        self.check_dim(&v, &format!("contextual ({sentence_id}, {token_index})"))?;
        self.contextual
            .insert((sentence_id.to_string(), token_index), v);
        Ok(())
    }

    pub fn insert_noncontextual(&mut self, token: &str, v: Vec<f32>) -> Result<()> {
        self.check_dim(&v, &format!("token `{token}`"))?;
        self.noncontextual.insert(token.to_string(), v);
        Ok(())
    }

    pub fn get_contextual(&self, sentence_id: &str, token_index: u32) -> Result<&[f32]> {
        self.contextual
            .get(&(sentence_id.to_string(), token_index))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::MissingEmbedding(format!("token {token_index} of sentence `{sentence_id}`"))
            })
    }

    pub fn get_noncontextual(&self, token: &str) -> Result<&[f32]> {
        self.noncontextual
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(format!("token `{token}`")))
    }

    /// Checks that every sentence token and token type of `corpus` has a vector.
    pub fn check_coverage(&self, corpus: &Corpus) -> Result<()> {
        for s in corpus.sentences.values() {
            for (j, t) in s.tokens.iter().enumerate() {
                self.get_contextual(&s.sentence_id, j as u32 + 1)?;
                self.get_noncontextual(t)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(EMB_MAGIC)?;
        w.write_all(&EMB_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.contextual.len() as u64).to_le_bytes())?;
        w.write_all(&(self.noncontextual.len() as u64).to_le_bytes())?;
        let write_key = |w: &mut BufWriter<File>, key: &str| -> Result<()> {
            let len = u16::try_from(key.len()).map_err(|_| {
                Error::EmbeddingFormat(format!("key `{key}` longer than 65535 bytes"))
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            Ok(())
        };
        for ((sid, idx), v) in &self.contextual {
            write_key(&mut w, sid)?;
            w.write_all(&idx.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for (tok, v) in &self.noncontextual {
            write_key(&mut w, tok)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "header")?;
        if &magic != EMB_MAGIC {
            return Err(Error::EmbeddingFormat(
                "bad magic: not an EYEMB1 file".into(),
            ));
        }
        let version = read_u32(&mut r, "header")?;
        if version != EMB_VERSION {
            return Err(Error::EmbeddingFormat(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u32(&mut r, "header")? as usize;
        if dim == 0 {
            return Err(Error::EmbeddingFormat("dimension 0".into()));
        }
        let n_ctx = read_u64(&mut r, "header")?;
        let n_tok = read_u64(&mut r, "header")?;
        let mut set = Self::new(dim);
        for i in 0..n_ctx {
            let what = format!("contextual record {i}");
            let sid = read_key(&mut r, &what)?;
            let idx = read_u32(&mut r, &what)?;
            let v = read_vec(&mut r, dim, &what)?;
            if set.contextual.insert((sid.clone(), idx), v).is_some() {
                return Err(Error::EmbeddingFormat(format!(
                    "duplicate contextual key ({sid}, {idx})"
                )));
            }
        }
        for i in 0..n_tok {
            let what = format!("noncontextual record {i}");
            let tok = read_key(&mut r, &what)?;
            let v = read_vec(&mut r, dim, &what)?;
            if set.noncontextual.insert(tok.clone(), v).is_some() {
                return Err(Error::EmbeddingFormat(format!("duplicate token `{tok}`")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::EmbeddingFormat(
                "trailing bytes after the last record".into(),
            ));
        }
        Ok(set)
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::load(path)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    set.write(path)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::EmbeddingFormat(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_key(r: &mut impl Read, what: &str) -> Result<String> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    let mut key = vec![0u8; u16::from_le_bytes(b) as usize];
    read_exact(r, &mut key, what)?;
    String::from_utf8(key).map_err(|_| Error::EmbeddingFormat(format!("{what}: key is not UTF-8")))
}

fn read_vec(r: &mut impl Read, dim: usize, what: &str) -> Result<Vec<f32>> {
    let mut b = vec![0u8; dim * 4];
    read_exact(r, &mut b, what)?;
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl EmbeddingLookup for EmbeddingSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contextual(&self, sentence_id: &str, token_index: u32, _token: &str) -> Result<Vec<f64>> {
        Ok(self
            .get_contextual(sentence_id, token_index)?
            .iter()
            .map(|&x| x as f64)
            .collect())
    }

    fn noncontextual(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self
            .get_noncontextual(token)?
            .iter()
            .map(|&x| x as f64)
            .collect())
    }
}

/// Trainable embedding table used when no embedding file is given. It has no notion of context,
/// so contextual and non-contextual lookups of a token return the same row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableLookup<F> {
    pub vocab: BTreeMap<String, usize>,
    pub table: Tensor<F>,
}

impl<F: Real> TrainableLookup<F> {
    /// Vocabulary over every token of the corpus sentences, rows drawn from uniform(−0.1, 0.1).
    pub fn new<R: Rng + ?Sized>(corpus: &Corpus, dim: usize, rng: &mut R) -> Self {
        let vocab = build_vocab(corpus);
        let table = init_table(rng, vocab.len(), dim);
        Self { vocab, table }
    }

    pub fn row_of(&self, token: &str) -> Result<usize> {
        self.vocab.get(token).copied().ok_or_else(|| {
            Error::MissingEmbedding(format!("token `{token}` (not in the trainable vocabulary)"))
        })
    }
}

impl<F: Real> EmbeddingLookup for TrainableLookup<F> {
    fn dim(&self) -> usize {
        self.table.cols()
    }

    fn contextual(&self, _sentence_id: &str, _token_index: u32, token: &str) -> Result<Vec<f64>> {
        self.noncontextual(token)
    }

    fn noncontextual(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self
            .table
            .row(self.row_of(token)?)
            .iter()
            .map(|x| x.f64())
            .collect())
    }
}

/// Sorted vocabulary of all tokens in the corpus sentences.
pub fn build_vocab(corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut tokens: Vec<&String> = corpus
        .sentences
        .values()
        .flat_map(|s| s.tokens.iter())
        .collect();
    tokens.sort();
    tokens.dedup();
    tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect()
}

/// `rows × dim` table of uniform(−0.1, 0.1) entries.
pub fn init_table<F: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Tensor<F> {
    let data = (0..rows * dim)
        .map(|_| F::of(rng.gen_range(-0.1..0.1)))
        .collect();
    Tensor::new(vec![rows, dim], data).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_cases() {
        assert_eq!(
            aggregate_subwords(&[vec![1.0, 2.0]]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            aggregate_subwords(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![4.0, 6.0]
        );
        assert!(aggregate_subwords(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(aggregate_subwords(&[]).is_err());
    }

    #[test]
    fn missing_token_is_named() {
        let set = EmbeddingSet::new(2);
        let e = set.noncontextual("zebra").unwrap_err().to_string();
        assert!(e.contains("zebra"));
    }
}
