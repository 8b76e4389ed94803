//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! holding its value and remembers its inputs. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on
//! a parameter leaf. Tensors are viewed as matrices (`rows × cols`, last
//! dimension = columns); rank-1 tensors are a single row.

use crate::error::{shape_err, NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    BlendRows {
        new: Var,
        old: Var,
        keep_new: Vec<bool>,
    },
    Softmax(Var, Option<Vec<bool>>),
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    CrossScores {
        query: Var,
        keys: Var,
        groups: Vec<usize>,
        width: usize,
    },
    CrossContext {
        weights: Var,
        keys: Var,
        groups: Vec<usize>,
        width: usize,
    },
    SoftmaxNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Single-threaded tape.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`; zeros for tracked nodes the loss does not reach.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let shape = self.shapes.get(v.0)?.clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).ok(),
            None => Some(Tensor::zeros(&shape)),
        }
    }

    pub fn slice(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn rows_cols<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a));
        let (k2, n) = rows_cols(self.value(b));
        if self.value(b).shape().len() != 2 || k != k2 {
            return shape_err(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            F::zero(),
        );
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    /// Adds a bias row (`cols` entries) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return shape_err(
                "add_row",
                format!(
                    "{:?} + bias {:?}",
                    self.value(x).shape(),
                    self.value(bias).shape()
                ),
            );
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let t = self.tracked(x) || self.tracked(bias);
        Ok(self.push(v, Op::AddRow(x, bias), t))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&a| a * s).collect(),
        )
        .expect("shape");
        let t = self.tracked(x);
        self.push(v, Op::Scale(x, s), t)
    }

    /// Element-wise product with a constant of the same size (dropout masks, kernels).
    pub fn mul_const(&mut self, x: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return shape_err(
                "mul_const",
                format!("{} values for {:?}", c.len(), self.value(x).shape()),
            );
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::MulConst(x, c), t))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&a| f(a)).collect(),
        )
        .expect("shape");
        let t = self.tracked(x);
        self.push(v, op, t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |a| a.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |a| if a > F::zero() { a } else { F::zero() },
            Op::Relu(x),
        )
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<_> = parts
                .iter()
                .map(|&p| self.value(p).shape().to_vec())
                .collect();
            return shape_err("concat_cols", format!("row counts differ: {shapes:?}"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            t,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(x));
        if start >= end || end > cols {
            return shape_err("slice_cols", format!("{start}..{end} of {cols} columns"));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).row(r)[start..end]);
        }
        let t = self.tracked(x);
        Ok(self.push(
            Tensor::new(vec![rows, end - start], data)?,
            Op::SliceCols(x, start, end),
            t,
        ))
    }

    /// Stacks parts vertically; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return shape_err("concat_rows", "column counts differ");
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            t,
        ))
    }

    /// Row lookup into a table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (n_rows, cols) = rows_cols(self.value(table));
        let mut data = Vec::with_capacity(index.len() * cols);
        for &ix in &index {
            match ix {
                Some(r) if r < n_rows => data.extend_from_slice(self.value(table).row(r)),
                Some(r) => {
                    return shape_err("gather_rows", format!("row {r} of a {n_rows}-row table"))
                }
                None => data.extend(std::iter::repeat_n(F::zero(), cols)),
            }
        }
        let t = self.tracked(table);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::GatherRows(table, index),
            t,
        ))
    }

    /// Row-wise select: row `r` comes from `new` when `keep_new[r]`, else from `old`.
    pub fn blend_rows(&mut self, new: Var, old: Var, keep_new: Vec<bool>) -> Result<Var> {
        self.same_shape("blend_rows", new, old)?;
        let (rows, cols) = rows_cols(self.value(new));
        if keep_new.len() != rows {
            return shape_err(
                "blend_rows",
                format!("{} flags for {rows} rows", keep_new.len()),
            );
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &k) in keep_new.iter().enumerate() {
            let src = if k { new } else { old };
            data.extend_from_slice(self.value(src).row(r));
        }
        let v = Tensor::new(self.value(new).shape().to_vec(), data)?;
        let t = self.tracked(new) || self.tracked(old);
        Ok(self.push(v, Op::BlendRows { new, old, keep_new }, t))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked-out entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return shape_err("masked_softmax", "mask size differs from input");
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(x));
        let mut out = vec![F::zero(); rows * cols];
        let vx = self.value(x).data();
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            softmax_row(&vx[range.clone()], &mut out[range], keep);
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Softmax(x, mask), t))
    }

    /// Fused LSTM cell. `gates` holds pre-activations `[rows, 4h]` in (input, forget, cell, output)
    /// order; returns `[rows, 2h]` = `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (rows, g4) = rows_cols(self.value(gates));
        let (rc, h) = rows_cols(self.value(c_prev));
        if rc != rows || g4 != 4 * h {
            return shape_err(
                "lstm_cell",
                format!(
                    "gates {:?}, cell {:?}",
                    self.value(gates).shape(),
                    self.value(c_prev).shape()
                ),
            );
        }
        let a = self.value(gates).data();
        let cp = self.value(c_prev).data();
        let mut out = vec![F::zero(); rows * 2 * h];
        for r in 0..rows {
            let ar = &a[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(ar[j]);
                let f = sigmoid(ar[h + j]);
                let g = ar[2 * h + j].tanh();
                let o = sigmoid(ar[3 * h + j]);
                let c = f * cp[r * h + j] + i * g;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        let t = self.tracked(gates) || self.tracked(c_prev);
        Ok(self.push(
            Tensor::new(vec![rows, 2 * h], out)?,
            Op::LstmCell { gates, c_prev },
            t,
        ))
    }

    fn check_cross(
        &self,
        op: &'static str,
        left: Var,
        keys: Var,
        groups: &[usize],
        width: usize,
    ) -> Result<()> {
        let rows = self.value(left).rows();
        let key_rows = self.value(keys).rows();
        if groups.len() != rows || width == 0 || key_rows % width != 0 {
            return shape_err(
                op,
                format!(
                    "{} groups for {rows} rows, {key_rows} key rows, width {width}",
                    groups.len()
                ),
            );
        }
        let n_groups = key_rows / width;
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return shape_err(op, format!("group {g} of {n_groups}"));
        }
        Ok(())
    }

    /// `out[r, n] = query[r] · keys[groups[r]·width + n]`: per-row scores against a block of keys.
    pub fn cross_scores(
        &mut self,
        query: Var,
        keys: Var,
        groups: Vec<usize>,
        width: usize,
    ) -> Result<Var> {
        self.check_cross("cross_scores", query, keys, &groups, width)?;
        let d = self.value(query).cols();
        if self.value(keys).cols() != d {
            return shape_err("cross_scores", "query and key widths differ");
        }
        let rows = groups.len();
        let mut out = vec![F::zero(); rows * width];
        let q = self.value(query);
        let k = self.value(keys);
        for (r, &g) in groups.iter().enumerate() {
            let qr = q.row(r);
            for n in 0..width {
                let kr = k.row(g * width + n);
                out[r * width + n] = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum();
            }
        }
        let t = self.tracked(query) || self.tracked(keys);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::CrossScores {
                query,
                keys,
                groups,
                width,
            },
            t,
        ))
    }

    /// `out[r] = Σ_n weights[r, n] · keys[groups[r]·width + n]`.
    pub fn cross_context(
        &mut self,
        weights: Var,
        keys: Var,
        groups: Vec<usize>,
        width: usize,
    ) -> Result<Var> {
        self.check_cross("cross_context", weights, keys, &groups, width)?;
        if self.value(weights).cols() != width {
            return shape_err("cross_context", "weight width differs from block width");
        }
        let d = self.value(keys).cols();
        let rows = groups.len();
        let mut out = vec![F::zero(); rows * d];
        let w = self.value(weights);
        let k = self.value(keys);
        for (r, &g) in groups.iter().enumerate() {
            let o = &mut out[r * d..(r + 1) * d];
            for (n, &wn) in w.row(r).iter().enumerate() {
                if wn == F::zero() {
                    continue;
                }
                for (oo, &kk) in o.iter_mut().zip(k.row(g * width + n)) {
                    *oo += wn * kk;
                }
            }
        }
        let t = self.tracked(weights) || self.tracked(keys);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::CrossContext {
                weights,
                keys,
                groups,
                width,
            },
            t,
        ))
    }

    /// Weighted sum of per-row negative log-likelihoods `Σ_r w_r · (−log softmax(logits_r)[t_r])`.
    /// Rows with weight 0 contribute nothing (padding).
    pub fn softmax_nll(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
    ) -> Result<Var> {
        let (rows, classes) = rows_cols(self.value(logits));
        if targets.len() != rows || weights.len() != rows {
            return shape_err(
                "softmax_nll",
                format!(
                    "{} targets / {} weights for {rows} rows",
                    targets.len(),
                    weights.len()
                ),
            );
        }
        let x = self.value(logits).data();
        let mut probs = vec![F::zero(); rows * classes];
        let mut loss = F::zero();
        for r in 0..rows {
            if weights[r] == F::zero() {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(NnError::TargetOutOfRange { target: t, classes });
            }
            let row = &x[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            loss += weights[r] * (lse - row[t]);
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let t = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxNll {
                logits,
                targets,
                weights,
                probs,
            },
            t,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let t = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), t)
    }

    /// Inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[id].take() else { continue };
            self.backprop(id, &go, &mut grads);
            // Interior gradients are kept so callers can inspect them.
            grads[id] = Some(go);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop(&self, id: usize, go: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &self.nodes[id].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
            f(buf);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.value(*a));
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    F::gemm(m, n, k, go, false, bv, true, g, F::one())
                });
                acc(*b, &mut |g| {
                    F::gemm(k, m, n, av, true, go, false, g, F::one())
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, go));
                acc(*b, &mut |g| add_into(g, go));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, go));
                acc(*b, &mut |g| {
                    for (x, &y) in g.iter_mut().zip(go) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    for ((x, &y), &w) in g.iter_mut().zip(go).zip(bv) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, &y), &w) in g.iter_mut().zip(go).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*x).cols();
                acc(*x, &mut |g| add_into(g, go));
                acc(*bias, &mut |g| {
                    for row in go.chunks(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                for (a, &b) in g.iter_mut().zip(go) {
                    *a += b * *s;
                }
            }),
            Op::MulConst(x, c) => acc(*x, &mut |g| {
                for ((a, &b), &cc) in g.iter_mut().zip(go).zip(c) {
                    *a += b * cc;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((a, &b), &y) in g.iter_mut().zip(go).zip(out.data()) {
                    *a += b * y * (F::one() - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((a, &b), &y) in g.iter_mut().zip(go).zip(out.data()) {
                    *a += b * (F::one() - y * y);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |g| {
                for ((a, &b), &y) in g.iter_mut().zip(go).zip(out.data()) {
                    if y > F::zero() {
                        *a += b;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    acc(p, &mut |g| {
                        for (r, grow) in g.chunks_mut(c).enumerate() {
                            add_into(grow, &go[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let cols = self.value(*x).cols();
                let w = end - start;
                acc(*x, &mut |g| {
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        add_into(&mut grow[*start..*end], &go[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &go[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows(table, index) => {
                let cols = self.value(*table).cols();
                acc(*table, &mut |g| {
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(t) = ix {
                            add_into(
                                &mut g[t * cols..(t + 1) * cols],
                                &go[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                });
            }
            Op::BlendRows { new, old, keep_new } => {
                let cols = out.cols();
                for (v, want) in [(*new, true), (*old, false)] {
                    acc(v, &mut |g| {
                        for (r, &k) in keep_new.iter().enumerate() {
                            if k == want {
                                add_into(
                                    &mut g[r * cols..(r + 1) * cols],
                                    &go[r * cols..(r + 1) * cols],
                                );
                            }
                        }
                    });
                }
            }
            Op::Softmax(x, mask) => {
                let cols = out.cols();
                let y = out.data();
                acc(*x, &mut |g| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &go[r * cols..(r + 1) * cols];
                        let inner: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            if mask.as_ref().is_none_or(|m| m[r * cols + j]) {
                                g[r * cols + j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                });
            }
            Op::LstmCell { gates, c_prev } => {
                let h = self.value(*c_prev).cols();
                let a = self.value(*gates).data();
                let cp = self.value(*c_prev).data();
                let rows = out.rows();
                let mut d_gates = vec![F::zero(); rows * 4 * h];
                let mut d_cprev = vec![F::zero(); rows * h];
                for r in 0..rows {
                    let ar = &a[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let i = sigmoid(ar[j]);
                        let f = sigmoid(ar[h + j]);
                        let gg = ar[2 * h + j].tanh();
                        let o = sigmoid(ar[3 * h + j]);
                        let c = out.data()[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let dh = go[r * 2 * h + j];
                        let dc = go[r * 2 * h + h + j] + dh * o * (F::one() - tc * tc);
                        let base = r * 4 * h;
                        d_gates[base + j] = dc * gg * i * (F::one() - i);
                        d_gates[base + h + j] = dc * cp[r * h + j] * f * (F::one() - f);
                        d_gates[base + 2 * h + j] = dc * i * (F::one() - gg * gg);
                        d_gates[base + 3 * h + j] = dh * tc * o * (F::one() - o);
                        d_cprev[r * h + j] = dc * f;
                    }
                }
                acc(*gates, &mut |g| add_into(g, &d_gates));
                acc(*c_prev, &mut |g| add_into(g, &d_cprev));
            }
            Op::CrossScores {
                query,
                keys,
                groups,
                width,
            } => {
                let q = self.value(*query);
                let k = self.value(*keys);
                let d = q.cols();
                acc(*query, &mut |g| {
                    for (r, &grp) in groups.iter().enumerate() {
                        let gr = &mut g[r * d..(r + 1) * d];
                        for n in 0..*width {
                            let s = go[r * width + n];
                            if s != F::zero() {
                                for (a, &kk) in gr.iter_mut().zip(k.row(grp * width + n)) {
                                    *a += s * kk;
                                }
                            }
                        }
                    }
                });
                acc(*keys, &mut |g| {
                    for (r, &grp) in groups.iter().enumerate() {
                        for n in 0..*width {
                            let s = go[r * width + n];
                            if s != F::zero() {
                                let row = grp * width + n;
                                for (a, &qq) in g[row * d..(row + 1) * d].iter_mut().zip(q.row(r)) {
                                    *a += s * qq;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossContext {
                weights,
                keys,
                groups,
                width,
            } => {
                let w = self.value(*weights);
                let k = self.value(*keys);
                let d = k.cols();
                acc(*weights, &mut |g| {
                    for (r, &grp) in groups.iter().enumerate() {
                        let gor = &go[r * d..(r + 1) * d];
                        for n in 0..*width {
                            g[r * width + n] += gor
                                .iter()
                                .zip(k.row(grp * width + n))
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                });
                acc(*keys, &mut |g| {
                    for (r, &grp) in groups.iter().enumerate() {
                        let gor = &go[r * d..(r + 1) * d];
                        for (n, &wn) in w.row(r).iter().enumerate() {
                            if wn != F::zero() {
                                let row = grp * width + n;
                                for (a, &b) in g[row * d..(row + 1) * d].iter_mut().zip(gor) {
                                    *a += wn * b;
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxNll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                let s = go[0];
                acc(*logits, &mut |g| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let gr = &mut g[r * classes..(r + 1) * classes];
                        for (j, (a, &p)) in gr
                            .iter_mut()
                            .zip(&probs[r * classes..(r + 1) * classes])
                            .enumerate()
                        {
                            let y = if j == t { F::one() } else { F::zero() };
                            *a += s * w * (p - y);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = go[0];
                acc(*x, &mut |g| {
                    for a in g.iter_mut() {
                        *a += s;
                    }
                });
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let s: F = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn softmax_row<F: Real>(x: &[F], out: &mut [F], keep: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return;
    }
    let mut total = F::zero();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if keep(j) {
            *o = (v - max).exp();
            total += *o;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if keep(j) {
            *o = *o / total;
        }
    }
}

/// Softmax of a plain slice, outside any graph.
pub fn softmax_vec<F: Real>(x: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    softmax_row(x, &mut out, |_| true);
    out
}

/// `−log softmax(logits)[target]`, stabilized by max subtraction.
pub fn softmax_nll<F: Real>(logits: &[F], target: usize) -> Result<F> {
    if target >= logits.len() {
        return Err(NnError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}
