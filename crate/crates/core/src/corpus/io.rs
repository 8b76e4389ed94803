//! JSONL reading and writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Fixation, Scanpath, Sentence};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceRecord {
    sentence_id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_lengths: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixationRecord {
    w: usize,
    dur: f64,
    land: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanpathRecord {
    reader_id: String,
    sentence_id: String,
    fixations: Vec<FixationRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stop: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sentences(path: &Path) -> Result<Vec<Sentence>> {
    read_jsonl::<SentenceRecord>(path)?
        .into_iter()
        .map(|r| match r.token_lengths {
            Some(l) => Sentence::with_lengths(r.sentence_id, r.tokens, l),
            None => Sentence::new(r.sentence_id, r.tokens),
        })
        .collect()
}

pub fn load_scanpaths(path: &Path) -> Result<Vec<Scanpath>> {
    Ok(read_jsonl::<ScanpathRecord>(path)?
        .into_iter()
        .map(|r| Scanpath {
            reader_id: r.reader_id,
            sentence_id: r.sentence_id,
            fixations: r
                .fixations
                .into_iter()
                .map(|f| Fixation {
                    word_index: f.w,
                    duration: f.dur,
                    landing_pos: f.land,
                })
                .collect(),
            synthetic: r.synthetic,
            stop: r.stop,
        })
        .collect())
}

/// Loads and validates a corpus from its two JSONL files.
pub fn load_corpus(sentences_path: &Path, scanpaths_path: &Path) -> Result<Corpus> {
    Corpus::new(
        load_sentences(sentences_path)?,
        load_scanpaths(scanpaths_path)?,
    )
}

pub fn write_sentences<'a>(
    path: &Path,
    sentences: impl Iterator<Item = &'a Sentence>,
) -> Result<()> {
    write_jsonl(
        path,
        sentences.map(|s| SentenceRecord {
            sentence_id: s.sentence_id.clone(),
            tokens: s.tokens.clone(),
            token_lengths: Some(s.token_lengths.clone()),
        }),
    )
}

pub fn write_scanpaths<'a>(
    path: &Path,
    scanpaths: impl Iterator<Item = &'a Scanpath>,
) -> Result<()> {
    write_jsonl(
        path,
        scanpaths.map(|s| ScanpathRecord {
            reader_id: s.reader_id.clone(),
            sentence_id: s.sentence_id.clone(),
            fixations: s
                .fixations
                .iter()
                .map(|f| FixationRecord {
                    w: f.word_index,
                    dur: f.duration,
                    land: f.landing_pos,
                })
                .collect(),
            synthetic: s.synthetic,
            stop: s.stop.clone(),
        }),
    )
}

pub fn save_corpus(corpus: &Corpus, sentences_path: &Path, scanpaths_path: &Path) -> Result<()> {
    write_sentences(sentences_path, corpus.sentences.values())?;
    write_scanpaths(scanpaths_path, corpus.scanpaths.iter())
}
