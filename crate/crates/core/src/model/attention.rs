//! Windowed cross-attention with an optional (possibly asymmetric) Gaussian kernel.

use scanpath_nn::{Graph, Real, Tensor, Var};

use super::config::{KernelKind, ModelConfig, WindowMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub center_offset: f64,
    pub sigma_left: f64,
    pub sigma_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWindow {
    pub mode: WindowMode,
    pub left: usize,
    pub right: usize,
    pub kernel: Option<Kernel>,
}

impl AttentionWindow {
    pub fn from_config(c: &ModelConfig) -> Self {
        let (sigma_left, sigma_right) = c.sigmas();
        Self {
            mode: c.window_mode,
            left: c.window_left,
            right: c.window_right,
            kernel: (c.kernel == KernelKind::Gaussian).then_some(Kernel {
                center_offset: c.kernel_center_offset,
                sigma_left,
                sigma_right,
            }),
        }
    }

    /// Inclusive 1-based token range attended from location `f_prev`. A window clamped to
    /// nothing (only possible with `D_r = 0` at the start fixation) falls back to token 1.
    pub fn bounds(&self, f_prev: usize, m: usize) -> (usize, usize) {
        match self.mode {
            WindowMode::Global => (1, m),
            WindowMode::Local => {
                let lo = f_prev.saturating_sub(self.left).max(1);
                let hi = (f_prev + self.right).min(m);
                if lo > hi {
                    (1, 1)
                } else {
                    (lo, hi)
                }
            }
        }
    }

    /// Kernel factor at token `n` for location `f_prev`; 1 without a kernel.
    pub fn kernel_value(&self, n: usize, f_prev: usize) -> f64 {
        match self.kernel {
            None => 1.0,
            Some(k) => {
                let center = f_prev as f64 + k.center_offset;
                let d = n as f64 - center;
                let sigma = if d < 0.0 { k.sigma_left } else { k.sigma_right };
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// Mask and kernel factors over `width` columns for a sentence of length `m ≤ width`.
    pub fn mask_and_kernel(&self, f_prev: usize, m: usize, width: usize) -> (Vec<bool>, Vec<f64>) {
        let (lo, hi) = self.bounds(f_prev, m);
        let mut mask = vec![false; width];
        let mut kernel = vec![0.0; width];
        for n in lo..=hi {
            mask[n - 1] = true;
            kernel[n - 1] = self.kernel_value(n, f_prev);
        }
        (mask, kernel)
    }
}

/// Attention weights before and after the kernel is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F> {
    pub pre_kernel: Vec<F>,
    pub weights: Vec<F>,
}

/// Graph form of the attention: rows of `query` (already multiplied by `W_a`) attend to the key
/// block of their group. Returns `(pre-kernel softmax, weights)`.
pub(crate) fn attend<F: Real>(
    g: &mut Graph<F>,
    query: Var,
    keys: Var,
    groups: Vec<usize>,
    width: usize,
    mask: Vec<bool>,
    kernel: Option<Vec<F>>,
) -> Result<(Var, Var)> {
    let scores = g.cross_scores(query, keys, groups, width)?;
    let pre = g.masked_softmax(scores, mask)?;
    let weights = match kernel {
        Some(k) => g.mul_const(pre, k)?,
        None => pre,
    };
    Ok((pre, weights))
}

/// Attention of a single query `h` over the token vectors `z` (`[m, Z]`) from location `f_prev`.
pub fn attention_weights<F: Real>(
    h: &[F],
    w_a: &Tensor<F>,
    z: &Tensor<F>,
    f_prev: usize,
    window: &AttentionWindow,
) -> Result<AttentionWeights<F>> {
    let m = z.rows();
    if f_prev > m {
        return Err(Error::Invalid(format!(
            "location {f_prev} outside a sentence of {m} tokens"
        )));
    }
    let mut g = Graph::new();
    let hv = g.constant(Tensor::matrix(1, h.len(), h.to_vec())?);
    let wa = g.constant(w_a.clone());
    let zv = g.constant(Tensor::matrix(m, z.cols(), z.data().to_vec())?);
    let q = g.matmul(hv, wa)?;
    let (mask, kernel) = window.mask_and_kernel(f_prev, m, m);
    let kernel = window
        .kernel
        .map(|_| kernel.into_iter().map(F::of).collect());
    let (pre, w) = attend(&mut g, q, zv, vec![0], m, mask, kernel)?;
    Ok(AttentionWeights {
        pre_kernel: g.value(pre).data().to_vec(),
        weights: g.value(w).data().to_vec(),
    })
}

/// `c = Σ_n weights[n] · z_n`.
pub fn context_vector<F: Real>(weights: &[F], z: &Tensor<F>) -> Result<Vec<F>> {
    if weights.len() != z.rows() {
        return Err(Error::Invalid(format!(
            "{} weights for {} tokens",
            weights.len(),
            z.rows()
        )));
    }
    let mut c = vec![F::zero(); z.cols()];
    for (n, &w) in weights.iter().enumerate() {
        for (o, &x) in c.iter_mut().zip(z.row(n)) {
            *o += w * x;
        }
    }
    Ok(c)
}
