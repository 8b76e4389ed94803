//! Layers built from graph primitives: dense, LSTM, BiLSTM and dropout.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `uniform(−1/√fan_in, 1/√fan_in)` weights.
pub fn init_uniform<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| F::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Inverted dropout. Eval mode and rate 0 return `x` itself.
pub fn dropout<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::DropoutRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask = (0..g.value(x).len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    g.mul_const(x, mask)
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{prefix}.w"),
            init_uniform(rng, &[input, output], input),
        )?;
        let bias = store.insert(format!("{prefix}.b"), Tensor::zeros(&[output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}

/// LSTM weights. `w_ih` is `[input, 4h]`, `w_hh` is `[h, 4h]`; gate columns are ordered
/// (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    /// Weights `uniform(±1/√fan_in)` with fan_in = input + hidden, biases 0, forget bias 1.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = input + hidden;
        let w_ih = store.insert(
            format!("{prefix}.w_ih"),
            init_uniform(rng, &[input, 4 * hidden], fan_in),
        )?;
        let w_hh = store.insert(
            format!("{prefix}.w_hh"),
            init_uniform(rng, &[hidden, 4 * hidden], fan_in),
        )?;
        let mut b = vec![F::zero(); 4 * hidden];
        for v in &mut b[hidden..2 * hidden] {
            *v = F::one();
        }
        let bias = store.insert(format!("{prefix}.b"), Tensor::vector(b))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn zero_state<F: Real>(&self, g: &mut Graph<F>, rows: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[rows, self.hidden]));
        let c = g.constant(Tensor::zeros(&[rows, self.hidden]));
        LstmState { h, c }
    }

    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        lstm_cell(
            g,
            x,
            state,
            p.var(self.w_ih),
            p.var(self.w_hh),
            p.var(self.bias),
        )
    }
}

/// One LSTM step: i,f,o = σ(·), g = tanh(·), c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
pub fn lstm_cell<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    state: LstmState,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<LstmState> {
    let hidden = g.value(state.c).cols();
    if g.value(w_ih).cols() != 4 * hidden || g.value(w_ih).rows() != g.value(x).cols() {
        return shape_err(
            "lstm_cell",
            format!(
                "input {:?} against w_ih {:?}",
                g.value(x).shape(),
                g.value(w_ih).shape()
            ),
        );
    }
    let xi = g.matmul(x, w_ih)?;
    let hh = g.matmul(state.h, w_hh)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add_row(pre, bias)?;
    let hc = g.lstm_cell(pre, state.c)?;
    let h = g.slice_cols(hc, 0, hidden)?;
    let c = g.slice_cols(hc, hidden, 2 * hidden)?;
    Ok(LstmState { h, c })
}

/// Runs one direction over `seq` (each `[rows, input]`). Rows whose `valid[t][r]` is false keep
/// their previous state, so backward passes over right-padded batches start at each row's true end.
pub fn run_lstm<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    layer: &LstmParams,
    seq: &[Var],
    valid: Option<&[Vec<bool>]>,
    reverse: bool,
) -> Result<Vec<Var>> {
    let Some(&first) = seq.first() else {
        return Ok(Vec::new());
    };
    let rows = g.value(first).rows();
    let mut state = layer.zero_state(g, rows);
    let mut out = vec![first; seq.len()];
    let order: Vec<usize> = if reverse {
        (0..seq.len()).rev().collect()
    } else {
        (0..seq.len()).collect()
    };
    for t in order {
        let next = layer.step(g, p, seq[t], state)?;
        state = match valid {
            Some(v) if v[t].iter().any(|&k| !k) => LstmState {
                h: g.blend_rows(next.h, state.h, v[t].clone())?,
                c: g.blend_rows(next.c, state.c, v[t].clone())?,
            },
            _ => next,
        };
        out[t] = state.h;
    }
    Ok(out)
}

/// Stacked bidirectional LSTM. Each layer's output is `[fwd | bwd]` per time step; dropout at
/// `rate` is applied between layers (not after the last).
#[allow(clippy::too_many_arguments)]
pub fn run_bilstm<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    p: &Bound,
    layers: &[(LstmParams, LstmParams)],
    seq: &[Var],
    valid: Option<&[Vec<bool>]>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let mut current = seq.to_vec();
    for (l, (fwd, bwd)) in layers.iter().enumerate() {
        let f = run_lstm(g, p, fwd, &current, valid, false)?;
        let b = run_lstm(g, p, bwd, &current, valid, true)?;
        let mut next = Vec::with_capacity(current.len());
        for (hf, hb) in f.into_iter().zip(b) {
            let cat = g.concat_cols(&[hf, hb])?;
            next.push(if l + 1 < layers.len() {
                dropout(g, cat, rate, mode, rng)?
            } else {
                cat
            });
        }
        current = next;
    }
    Ok(current)
}
