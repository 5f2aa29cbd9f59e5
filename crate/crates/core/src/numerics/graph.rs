use std::borrow::Cow;
use std::sync::Arc;

use super::scalar::{gemm_into, Layout};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse attention mask: for every query row, the key positions it may
/// attend to. Every row holds at least one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    n_keys: usize,
}

impl AttentionPattern {
    pub fn from_rows(rows: Vec<Vec<usize>>, n_keys: usize) -> Result<Self, NumericsError> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut keys = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        offsets.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            if row.is_empty() {
                return Err(NumericsError::DegenerateMask { row: r });
            }
            for &k in &row {
                if k >= n_keys {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "attention_pattern",
                        index: k,
                        bound: n_keys,
                    });
                }
            }
            keys.extend(row);
            offsets.push(keys.len());
        }
        Ok(AttentionPattern {
            offsets,
            keys,
            n_keys,
        })
    }

    /// Builds the pattern from a dense boolean mask, `true` = attendable.
    pub fn from_dense(mask: &[Vec<bool>]) -> Result<Self, NumericsError> {
        let n_keys = mask.first().map_or(0, Vec::len);
        let rows = mask
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter_map(|(j, &m)| m.then_some(j))
                    .collect()
            })
            .collect();
        Self::from_rows(rows, n_keys)
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.queries())
            .map(|q| {
                let mut row = vec![false; self.n_keys];
                for &k in self.keys(q) {
                    row[k] = true;
                }
                row
            })
            .collect()
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn keys(&self, query: usize) -> &[usize] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    fn nnz(&self) -> usize {
        self.keys.len()
    }
}

/// Softmax weights recorded by an attention node.
pub struct AttentionWeights<'g, F> {
    pub pattern: &'g AttentionPattern,
    pub heads: usize,
    probs: &'g [F],
}

impl<F: Scalar> AttentionWeights<'_, F> {
    /// Weights of `query` in `head`, aligned with `pattern.keys(query)`.
    pub fn row(&self, head: usize, query: usize) -> &[F] {
        let base = head * self.pattern.nnz();
        &self.probs[base + self.pattern.offsets[query]..base + self.pattern.offsets[query + 1]]
    }

    /// Dense `[n_keys]` vector of the head-averaged weights of `query`.
    pub fn mean_over_heads(&self, query: usize) -> Vec<F> {
        let mut out = vec![F::zero(); self.pattern.n_keys];
        let inv = F::one() / F::from_count(self.heads);
        for h in 0..self.heads {
            for (&k, &p) in self.pattern.keys(query).iter().zip(self.row(h, query)) {
                out[k] += p * inv;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cols = self.col_cols();
        for c in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    for oh in 0..self.out_h {
                        let ih = (oh * s + ki) as isize - p as isize;
                        for ow in 0..self.out_w {
                            let iw = (ow * s + kj) as isize - p as isize;
                            let src = (ih >= 0
                                && iw >= 0
                                && (ih as usize) < self.height
                                && (iw as usize) < self.width)
                                .then(|| (c * self.height + ih as usize) * self.width + iw as usize);
                            f(r * cols + oh * self.out_w + ow, r, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Arc<AttentionPattern>,
        probs: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<F>,
    },
    ChannelsLast(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<F>,
    },
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`]; retained for leaf nodes.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep. Leaf values
/// may be borrowed from the caller (`'a`) to avoid copying parameters.
pub struct Graph<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::from_real((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_real(0.044715);
    let half = F::from_real(0.5);
    let one = F::one();
    let x3 = x * x * x;
    let t = (c * (x + a * x3)).tanh();
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * c * (one + F::from_real(3.0) * a * x * x);
    (value, deriv)
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<F>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// Differentiable leaf borrowed from the caller.
    pub fn param(&mut self, value: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    pub fn param_owned(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn attention_weights(&self, var: Var) -> Option<AttentionWeights<'_, F>> {
        match &self.nodes[var.0].op {
            Op::Attention {
                pattern,
                probs,
                heads,
                ..
            } => Some(AttentionWeights {
                pattern,
                heads: *heads,
                probs,
            }),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_into(m, k, n, ta.data(), Layout::Plain, tb.data(), Layout::Plain, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of `a` (`[.. x n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, cols) = ta.as_matrix();
        if tb.len() != cols || tb.rank() != 1 {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, n) = tx.as_matrix();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let nf = F::from_count(n);
        let mut xhat = vec![F::zero(); rows * n];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax over the last dimension restricted to positions where
    /// `mask` is `true`. Masked positions behave as if their logit were
    /// `-inf`: they receive exactly zero weight and contribute nothing to the
    /// normalizer.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, n) = tx.as_matrix();
        if mask.len() != n {
            return Err(NumericsError::InvalidShape {
                op: "masked_softmax",
                shape: tx.shape().to_vec(),
                expected: "mask length equal to last dimension",
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::DegenerateMask { row: 0 });
        }
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = F::zero();
            for j in 0..n {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MaskedSoftmax(x), &[x]))
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    ///
    /// `q` is `[nq x d]`, `k`/`v` are `[nk x d]`; `d` splits into `heads`
    /// contiguous blocks. Query `i` mixes only the values of
    /// `pattern.keys(i)`, so tokens outside that set cannot influence it.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Arc<AttentionPattern>,
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.dims2("attention")?;
        let (nk, dk) = tk.dims2("attention")?;
        if tk.shape() != tv.shape() || dk != d {
            return Err(mismatch("attention", tk, tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::InvalidShape {
                op: "attention",
                shape: tq.shape().to_vec(),
                expected: "width divisible by head count",
            });
        }
        if pattern.queries() != nq || pattern.n_keys() != nk {
            return Err(NumericsError::InvalidShape {
                op: "attention",
                shape: vec![pattern.queries(), pattern.n_keys()],
                expected: "pattern matching [queries x keys]",
            });
        }
        let dh = d / heads;
        let scale = F::one() / F::from_count(dh).sqrt();
        let nnz = pattern.nnz();
        let mut probs = vec![F::zero(); heads * nnz];
        let mut out = vec![F::zero(); nq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let keys = pattern.keys(i);
                let base = h * nnz + pattern.offsets[i];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = F::neg_infinity();
                for (t, &j) in keys.iter().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    probs[base + t] = s;
                    max = max.max(s);
                }
                let mut total = F::zero();
                for t in 0..keys.len() {
                    let e = (probs[base + t] - max).exp();
                    probs[base + t] = e;
                    total += e;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (t, &j) in keys.iter().enumerate() {
                    let p = probs[base + t] / total;
                    probs[base + t] = p;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Gathers rows of a `[rows x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let (rows, d) = tt.dims2("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, k, k]` and bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NumericsError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, in_ch, height, width], &[out_ch, wc, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(NumericsError::InvalidShape {
                op: "conv2d",
                shape: tx.shape().to_vec(),
                expected: "input [B,C,H,W] and weight [O,C,k,k]",
            });
        };
        if wc != in_ch || kh != kw || tb.shape() != [out_ch] || stride == 0 {
            return Err(mismatch("conv2d", tx, tw));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let img = in_ch * height * width;
        let mut cols = vec![F::zero(); batch * cr * cc];
        let mut out = vec![F::zero(); batch * out_ch * cc];
        for bi in 0..batch {
            let src = &tx.data()[bi * img..(bi + 1) * img];
            let dst = &mut cols[bi * cr * cc..(bi + 1) * cr * cc];
            geom.for_each_tap(|ci, _, s| {
                if let Some(s) = s {
                    dst[ci] = src[s];
                }
            });
            let ob = &mut out[bi * out_ch * cc..(bi + 1) * out_ch * cc];
            gemm_into(out_ch, cr, cc, tw.data(), Layout::Plain, dst, Layout::Plain, ob, false);
            for (o, row) in ob.chunks_mut(cc).enumerate() {
                let bias = tb.data()[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// `[B, C, H, W]` feature maps to `[B*H*W, C]` tokens in raster order.
    pub fn channels_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let &[batch, ch, h, w] = tx.shape() else {
            return Err(NumericsError::InvalidShape {
                op: "channels_last",
                shape: tx.shape().to_vec(),
                expected: "[B,C,H,W]",
            });
        };
        let hw = h * w;
        let mut out = vec![F::zero(); batch * hw * ch];
        for b in 0..batch {
            for c in 0..ch {
                for s in 0..hw {
                    out[(b * hw + s) * ch + c] = tx.data()[(b * ch + c) * hw + s];
                }
            }
        }
        let value = Tensor::new(vec![batch * hw, ch], out)?;
        Ok(self.push(value, Op::ChannelsLast(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        self.value(x).dims2("select_rows")?;
        let value = self.value(x).select(rows)?;
        Ok(self.push(value, Op::SelectRows(x, rows.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / F::from_count(t.len().max(1)));
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if t.len() != labels.len() || labels.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "bce_with_logits",
                shape: t.shape().to_vec(),
                expected: "one label per logit",
            });
        }
        let total: F = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln())
            .sum();
        let value = Tensor::scalar(total / F::from_count(labels.len()));
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], var: Var, delta: Tensor<F>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a, F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix();
                let n = tb.as_matrix().1;
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_into(m, n, k, gd, Layout::Plain, tb.data(), Layout::Transposed, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_into(k, m, n, ta.data(), Layout::Transposed, gd, Layout::Plain, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*bias) {
                    let tb = self.value(*bias);
                    let cols = tb.len();
                    let mut db = vec![F::zero(); cols];
                    for row in gd.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.map(|x| x * *factor));
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| gv * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let rows = inv_std.len();
                let nf = F::from_count(n);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![F::zero(); n];
                    let mut db = vec![F::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                            db[j] += gd[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![n], dg).unwrap());
                    self.accumulate(grads, *beta, Tensor::new(vec![n], db).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![F::zero(); rows * n];
                    for r in 0..rows {
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for j in 0..n {
                            let dh = gd[r * n + j] * tg.data()[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = gd[r * n + j] * tg.data()[j];
                            dx[r * n + j] = inv_std[r] / nf * (nf * dh - sum_d - xhat[r * n + j] * sum_dx);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::MaskedSoftmax(x) => {
                let p = node.value.as_ref();
                let (rows, n) = p.as_matrix();
                let mut dx = vec![F::zero(); rows * n];
                for r in 0..rows {
                    let pr = &p.data()[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(p.shape().to_vec(), dx).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = tq.as_matrix();
                let nk = tk.as_matrix().0;
                let dh = d / heads;
                let scale = F::one() / F::from_count(dh).sqrt();
                let nnz = pattern.nnz();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![F::zero(); nq * d];
                let mut dk = vec![F::zero(); nk * d];
                let mut dv = vec![F::zero(); nk * d];
                let mut dp = Vec::new();
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let keys = pattern.keys(i);
                        let base = h * nnz + pattern.offsets[i];
                        let gi = &gd[i * d + off..i * d + off + dh];
                        dp.clear();
                        let mut weighted = F::zero();
                        for (t, &j) in keys.iter().enumerate() {
                            let p = probs[base + t];
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let dpt: F = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dp.push(dpt);
                            weighted += p * dpt;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (o, &x) in dvj.iter_mut().zip(gi) {
                                *o += p * x;
                            }
                        }
                        for (t, &j) in keys.iter().enumerate() {
                            let ds = probs[base + t] * (dp[t] - weighted) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(tq.shape().to_vec(), dq).unwrap());
                self.accumulate(grads, *k, Tensor::new(tk.shape().to_vec(), dk).unwrap());
                self.accumulate(grads, *v, Tensor::new(tv.shape().to_vec(), dv).unwrap());
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.as_matrix().1;
                let mut dt = Tensor::zeros(tt.shape());
                let data = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        data[id * d + c] += gd[r * d + c];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let oc = geom.out_ch;
                let img = geom.in_ch * geom.height * geom.width;
                let mut dw = vec![F::zero(); oc * cr];
                let mut db = vec![F::zero(); oc];
                let mut dx = vec![F::zero(); geom.batch * img];
                let mut dcols = vec![F::zero(); cr * cc];
                for bi in 0..geom.batch {
                    let gb = &gd[bi * oc * cc..(bi + 1) * oc * cc];
                    let cb = &cols[bi * cr * cc..(bi + 1) * cr * cc];
                    gemm_into(oc, cc, cr, gb, Layout::Plain, cb, Layout::Transposed, &mut dw, true);
                    for (o, row) in gb.chunks(cc).enumerate() {
                        db[o] += row.iter().copied().sum::<F>();
                    }
                    if self.wants(*x) {
                        gemm_into(cr, oc, cc, tw.data(), Layout::Transposed, gb, Layout::Plain, &mut dcols, false);
                        let dxb = &mut dx[bi * img..(bi + 1) * img];
                        geom.for_each_tap(|ci, _, s| {
                            if let Some(s) = s {
                                dxb[s] += dcols[ci];
                            }
                        });
                    }
                }
                self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![oc], db).unwrap());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::ChannelsLast(x) => {
                let tx = self.value(*x);
                let (batch, ch, hw) = (tx.shape()[0], tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
                let mut dx = vec![F::zero(); tx.len()];
                for b in 0..batch {
                    for c in 0..ch {
                        for s in 0..hw {
                            dx[(b * ch + c) * hw + s] = gd[(b * hw + s) * ch + c];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.len();
                    self.accumulate(grads, p, Tensor::new(t.shape().to_vec(), gd[start..start + len].to_vec()).unwrap());
                    start += len;
                }
            }
            Op::SelectRows(x, rows) => {
                let tx = self.value(*x);
                let cols = tx.as_matrix().1;
                let mut dx = Tensor::zeros(tx.shape());
                let data = dx.data_mut();
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..cols {
                        data[src * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = gd[0] / F::from_count(t.len().max(1));
                self.accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::BceWithLogits { logits, labels } => {
                let t = self.value(*logits);
                let inv = gd[0] / F::from_count(labels.len());
                let d = t
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * inv)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
