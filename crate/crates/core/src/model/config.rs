use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Attend to `[f_prev − D_l, f_prev + D_r] ∩ [1, m]`.
    Local,
    /// Attend to the whole sentence.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    None,
}

/// How the Gaussian kernel's standard deviations are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaRule {
    /// `σ_l = factor·D_l`, `σ_r = factor·D_r`.
    PerSide {
        factor: f64,
    },
    /// `σ_l = σ_r = factor·D_l`.
    LeftWindow {
        factor: f64,
    },
    Fixed {
        left: f64,
        right: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension of the token embeddings (must match the embedding file when one is used).
    pub embed_dim: usize,
    pub bilstm_layers: usize,
    pub bilstm_units: usize,
    pub lstm_layers: usize,
    pub lstm_units: usize,
    pub dense_units: Vec<usize>,
    pub dropout_embed: f64,
    pub dropout_recurrent: f64,
    pub dropout_dense: f64,
    pub window_mode: WindowMode,
    pub window_left: usize,
    pub window_right: usize,
    pub kernel: KernelKind,
    pub kernel_center_offset: f64,
    pub sigma: SigmaRule,
    pub use_word_encoder: bool,
    pub use_word_length: bool,
    pub use_duration: bool,
    pub use_landing: bool,
    /// Reader-embedding size, or `None` for the reader-agnostic model.
    pub reader_embedding: Option<usize>,
    /// Largest supported sentence length `M`. Derived from the training data when unset.
    pub max_len: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            bilstm_layers: 8,
            bilstm_units: 64,
            lstm_layers: 8,
            lstm_units: 128,
            dense_units: vec![512, 256, 256, 256],
            dropout_embed: 0.2,
            dropout_recurrent: 0.4,
            dropout_dense: 0.2,
            window_mode: WindowMode::Local,
            window_left: 1,
            window_right: 1,
            kernel: KernelKind::Gaussian,
            kernel_center_offset: 0.0,
            sigma: SigmaRule::PerSide { factor: 0.5 },
            use_word_encoder: true,
            use_word_length: true,
            use_duration: true,
            use_landing: true,
            reader_embedding: None,
            max_len: None,
        }
    }
}

impl ModelConfig {
    /// `(σ_l, σ_r)` of the Gaussian kernel.
    pub fn sigmas(&self) -> (f64, f64) {
        let (dl, dr) = (self.window_left as f64, self.window_right as f64);
        match self.sigma {
            SigmaRule::PerSide { factor } => (factor * dl, factor * dr),
            SigmaRule::LeftWindow { factor } => (factor * dl, factor * dl),
            SigmaRule::Fixed { left, right } => (left, right),
        }
    }

    /// Width of the per-token vectors `z_j`.
    pub fn word_dim(&self) -> usize {
        2 * self.bilstm_units + usize::from(self.use_word_length)
    }

    /// Width of the fixation-encoder input.
    pub fn fixation_input_dim(&self) -> usize {
        self.embed_dim
            + usize::from(self.use_duration)
            + usize::from(self.use_landing)
            + self.reader_embedding.unwrap_or(0)
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.lstm_units
            + if self.use_word_encoder {
                self.word_dim()
            } else {
                0
            }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.lstm_units == 0 || self.lstm_layers == 0 {
            return bad("embed_dim, lstm_units and lstm_layers must be positive".into());
        }
        if self.use_word_encoder && (self.bilstm_layers == 0 || self.bilstm_units == 0) {
            return bad(
                "the word encoder needs at least one BiLSTM layer with positive width".into(),
            );
        }
        if self.dense_units.len() != 4 || self.dense_units.contains(&0) {
            return bad(format!(
                "dense_units must list 4 positive sizes, got {:?}",
                self.dense_units
            ));
        }
        for (name, r) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_recurrent", self.dropout_recurrent),
            ("dropout_dense", self.dropout_dense),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1)"));
            }
        }
        if self.window_mode == WindowMode::Local && self.window_left == 0 && self.window_right == 0
        {
            return bad("local attention needs window_left or window_right > 0".into());
        }
        if self.kernel == KernelKind::Gaussian {
            let (l, r) = self.sigmas();
            if !(l > 0.0 && r > 0.0 && l.is_finite() && r.is_finite()) {
                return bad(format!(
                    "Gaussian kernel needs positive sigmas, got ({l}, {r})"
                ));
            }
        }
        if !self.kernel_center_offset.is_finite() {
            return bad("kernel_center_offset must be finite".into());
        }
        if self.reader_embedding == Some(0) {
            return bad("reader_embedding size must be positive".into());
        }
        if self.max_len == Some(0) {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }
}

/// Number of output classes `2M + 1`.
pub fn num_classes(max_len: usize) -> usize {
    2 * max_len + 1
}

/// Class of saccade range `r ∈ {−M+1, …, M}`: `r + M − 1`.
pub fn class_index(range: i64, max_len: usize) -> Result<usize> {
    let m = max_len as i64;
    if range < 1 - m || range > m {
        return Err(Error::RangeOutOfBounds { range, max_len });
    }
    Ok((range + m - 1) as usize)
}

/// The end-of-scanpath class `2M`.
pub fn eos_class(max_len: usize) -> usize {
    2 * max_len
}

/// Saccade range of a class, or `None` for EOS.
pub fn range_of(class: usize, max_len: usize) -> Option<i64> {
    (class < 2 * max_len).then(|| class as i64 - max_len as i64 + 1)
}
