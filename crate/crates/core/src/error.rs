use std::path::PathBuf;

use scanpath_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("scanpath {index} references unknown sentence `{sentence_id}`")]
    UnknownSentence { index: usize, sentence_id: String },
    #[error("scanpath {index}: word index {word_index} out of range for sentence `{sentence_id}` with m={m}")]
    WordIndex {
        index: usize,
        sentence_id: String,
        word_index: usize,
        m: usize,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("embedding file: {0}")]
    EmbeddingFormat(String),
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),
    #[error("sentence `{sentence_id}` has {m} tokens but the model supports at most M={max_len}")]
    SentenceTooLong {
        sentence_id: String,
        m: usize,
        max_len: usize,
    },
    #[error("saccade range {range} outside the class space of M={max_len}")]
    RangeOutOfBounds { range: i64, max_len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
