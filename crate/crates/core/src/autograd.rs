//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in construction order. Backward walks
//! the tape exactly in reverse, accumulating gradients additively where a
//! value fans out. Graphs are single-use: build a fresh one per step.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{
    matmul_at_into, matmul_bt_into, transpose_into, Tensor, TensorError,
    TensorResult,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<(Var, usize)>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    StraightThrough(Var),
    DivScalar {
        x: Var,
        s: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: &'static str,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    first_non_finite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a NaN or infinity, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push("leaf", t, Op::Leaf, rg)
    }

    /// Records a constant leaf (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.tensor(id).clone();
        let rg = store.is_trainable(id);
        let v = self.push("param", t.with_requires_grad(rg), Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push("detach", t.with_requires_grad(false), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("add", t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("sub", t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("mul", t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    /// `x[.., n] + bias[n]` broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let n = self.value(bias).numel();
        let tx = self.value(x);
        if tx.shape().last().copied() != Some(n) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let tb = self.value(bias).data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push("add_bias", t, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("matmul", t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push("transpose", t, Op::Transpose(a), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push("softmax", t, Op::Softmax { x, n, inner }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push("sqrt", t, Op::Sqrt(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Element-mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push("reshape", t, Op::Reshape(x), rg))
    }

    /// Concatenates 2-D values along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push("concat_cols", t, Op::ConcatCols(parts), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(TensorError::Contract(format!(
                "slice_cols: [{start}, {}) out of range for {cols} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(x);
        Ok(self.push("slice_cols", t, Op::SliceCols { x, start }, rg))
    }

    /// Stacks 2-D values along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(TensorError::Contract(format!(
                "slice_rows: [{start}, {}) out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(vec![len, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push("slice_rows", t, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup `table[ids[i], :]` (embedding / codebook retrieval).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> TensorResult<Var> {
        let (n, cols) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= n {
                return Err(TensorError::Contract(format!(
                    "gather_rows: index {id} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution: `x[N, Cin, L]`, `w[Cout, Cin, K]`, optional `b[Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        let (n, cin, len) = self.value(x).dims3()?;
        let (cout, cin_w, k) = self.value(w).dims3()?;
        if cin != cin_w || len + 2 * pad < k || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * cout * lout];
        for s in 0..n {
            for co in 0..cout {
                let orow = &mut out[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                if let Some(bs) = bs {
                    orow.iter_mut().for_each(|o| *o = bs[co]);
                }
                for ci in 0..cin {
                    let xrow = &xs[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                    let wrow = &ws[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (t, o) in orow.iter_mut().enumerate() {
                        let base = (t * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let pos = base + kk as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += wv * xrow[pos as usize];
                            }
                        }
                        *o += acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, cout, lout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            "conv1d",
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Forward value of `z_q`; the backward pass copies the incoming gradient
    /// to `h` unchanged and sends nothing to `z_q`.
    pub fn straight_through(&mut self, h: Var, z_q: Var) -> TensorResult<Var> {
        self.same_shape("straight_through", h, z_q)?;
        let t = self.value(z_q).clone();
        let rg = self.rg(h);
        Ok(self.push("straight_through", t, Op::StraightThrough(h), rg))
    }

    /// `x / s` for a scalar-valued `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        let sv = self.value(s).item().map_err(|_| TensorError::NotScalar {
            op: "div_scalar",
            shape: self.shape(s).to_vec(),
        })?;
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v / sv).collect(),
        )?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push("div_scalar", t, Op::DivScalar { x, s }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T, V]`. Rows with `None` targets contribute nothing, and their
    /// logits receive exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> TensorResult<Var> {
        let (t_len, v) = self.value(logits).dims2()?;
        if targets.len() != t_len {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Contract(
                "cross_entropy: no target positions".into(),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t_len * v];
        let mut loss = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= v {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: target {tgt} out of range for vocabulary {v}"
                )));
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            loss += lse - row[tgt];
        }
        let t = Tensor::scalar(loss / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss`. Every node reachable from the
    /// loss that requires gradients gets one; query with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(gout) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = before[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |g| add_into(g, gout));
                    acc(*b, &mut |g| add_into(g, gout));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |g| add_into(g, gout));
                    acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * vb[j];
                        }
                    });
                    acc(*b, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * va[j];
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |g| {
                    g.iter_mut().zip(gout).for_each(|(x, d)| *x += c * d)
                }),
                Op::AddBias(x, b) => {
                    acc(*x, &mut |g| add_into(g, gout));
                    acc(*b, &mut |g| {
                        let n = g.len();
                        for (j, d) in gout.iter().enumerate() {
                            g[j % n] += d;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    acc(*a, &mut |g| matmul_bt_into(gout, tb.data(), g, m, n, k));
                    acc(*b, &mut |g| matmul_at_into(ta.data(), gout, g, m, k, n));
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    acc(*a, &mut |g| {
                        let mut tmp = vec![0.0; g.len()];
                        transpose_into(gout, &mut tmp, r, c);
                        add_into(g, &tmp);
                    });
                }
                Op::Softmax { x, n, inner } => {
                    let y = node.value.data();
                    let (n, inner) = (*n, *inner);
                    let outer = y.len() / (n * inner);
                    acc(*x, &mut |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * n + j) * inner + i;
                                let dot: f64 = (0..n).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                                for j in 0..n {
                                    g[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = nodes[gamma.0].value.numel();
                    let gam = nodes[gamma.0].value.data();
                    let rows = inv_std.len();
                    acc(*gamma, &mut |g| {
                        for r in 0..rows {
                            for j in 0..n {
                                g[j] += gout[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                    acc(*beta, &mut |g| {
                        for r in 0..rows {
                            for j in 0..n {
                                g[j] += gout[r * n + j];
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        let nf = n as f64;
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                let dxh = gout[r * n + j] * gam[j];
                                s1 += dxh;
                                s2 += dxh * xhat[r * n + j];
                            }
                            for j in 0..n {
                                let dxh = gout[r * n + j] * gam[j];
                                g[r * n + j] +=
                                    inv_std[r] / nf * (nf * dxh - s1 - xhat[r * n + j] * s2);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * gelu_grad(xv[j]);
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let y = node.value.data();
                    // subgradient 0 at the origin
                    acc(*x, &mut |g| {
                        for j in 0..g.len() {
                            if y[j] > 0.0 {
                                g[j] += gout[j] / (2.0 * y[j]);
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
                Op::Mean(x) => acc(*x, &mut |g| {
                    let c = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|v| *v += c)
                }),
                Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
                Op::ConcatCols(parts) => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let rows = gout.len() / total;
                    let mut off = 0;
                    for &(p, w) in parts {
                        acc(p, &mut |g| {
                            for r in 0..rows {
                                for j in 0..w {
                                    g[r * w + j] += gout[r * total + off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let cols = nodes[x.0].value.shape()[1];
                    let len = node.value.shape()[1];
                    let rows = node.value.shape()[0];
                    acc(*x, &mut |g| {
                        for r in 0..rows {
                            for j in 0..len {
                                g[r * cols + start + j] += gout[r * len + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        acc(p, &mut |g| add_into(g, &gout[off..off + n]));
                        off += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = node.value.shape()[1];
                    acc(*x, &mut |g| {
                        add_into(&mut g[start * cols..start * cols + gout.len()], gout)
                    });
                }
                Op::GatherRows { table, ids } => {
                    let cols = node.value.shape()[1];
                    acc(*table, &mut |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * cols..(id + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (n, cin, len) = dims3(&nodes[x.0].value);
                    let (cout, _, k) = dims3(&nodes[w.0].value);
                    let lout = node.value.shape()[2];
                    let xs = nodes[x.0].value.data();
                    let ws = nodes[w.0].value.data();
                    let (stride, pad) = (*stride, *pad);
                    if let Some(b) = b {
                        acc(*b, &mut |g| {
                            for s in 0..n {
                                for co in 0..cout {
                                    let base = (s * cout + co) * lout;
                                    g[co] += gout[base..base + lout].iter().sum::<f64>();
                                }
                            }
                        });
                    }
                    acc(*w, &mut |g| {
                        for s in 0..n {
                            for co in 0..cout {
                                let grow = &gout[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                                for ci in 0..cin {
                                    let xrow = &xs[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                    for kk in 0..k {
                                        let mut a = 0.0;
                                        for (t, &d) in grow.iter().enumerate() {
                                            let pos = (t * stride + kk) as isize - pad as isize;
                                            if pos >= 0 && (pos as usize) < len {
                                                a += d * xrow[pos as usize];
                                            }
                                        }
                                        g[(co * cin + ci) * k + kk] += a;
                                    }
                                }
                            }
                        }
                    });
                    acc(*x, &mut |g| {
                        for s in 0..n {
                            for co in 0..cout {
                                let grow = &gout[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                                for ci in 0..cin {
                                    let wrow = &ws[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                    let gx = &mut g[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                    for (t, &d) in grow.iter().enumerate() {
                                        let base = (t * stride) as isize - pad as isize;
                                        for (kk, &wv) in wrow.iter().enumerate() {
                                            let pos = base + kk as isize;
                                            if pos >= 0 && (pos as usize) < len {
                                                gx[pos as usize] += d * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::StraightThrough(h) => acc(*h, &mut |g| add_into(g, gout)),
                Op::DivScalar { x, s } => {
                    let sv = nodes[s.0].value.data()[0];
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |g| {
                        g.iter_mut().zip(gout).for_each(|(v, d)| *v += d / sv)
                    });
                    acc(*s, &mut |g| {
                        let dot: f64 = gout.iter().zip(xv).map(|(d, x)| d * x).sum();
                        g[0] -= dot / (sv * sv);
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let v = nodes[logits.0].value.shape()[1];
                    let c = gout[0] / *count as f64;
                    acc(*logits, &mut |g| {
                        for (r, tgt) in targets.iter().enumerate() {
                            let Some(tgt) = *tgt else { continue };
                            for j in 0..v {
                                g[r * v + j] += c * probs[r * v + j];
                            }
                            g[r * v + tgt] -= c;
                        }
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter leaf registered through [`Graph::param`].
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.insert(id, g.to_vec());
            }
        }
        out
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.3, -1.0, 2.0]).with_requires_grad(true));
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dead_branch_gets_zero() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.3, -1.0, 2.0]).with_requires_grad(true));
        let z = g.scale(w, 0.0);
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let u = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let l = g.sum(w);
        g.backward(l).unwrap();
        assert!(g.grad(u).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let a = g.mul(w, w).unwrap();
        let b = g.add(a, w).unwrap();
        let l = g.sum(b);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[7.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0; 3]));
        assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_middle_axis_slices_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0));
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| d[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        // d/dx of sum(softmax(x) * c) for fixed c
        let c = [0.3, -1.2, 2.0];
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(t(&[3], x));
            let y = g.softmax(xv, 0).unwrap();
            let cv = g.constant(t(&[3], &c));
            let p = g.mul(y, cv).unwrap();
            let s = g.sum(p);
            g.value(s).item().unwrap()
        };
        let x0 = [1.0, 2.0, 3.0];
        let mut g = Graph::new();
        let xv = g.leaf(t(&[3], &x0).with_requires_grad(true));
        let y = g.softmax(xv, 0).unwrap();
        let cv = g.constant(t(&[3], &c));
        let p = g.mul(y, cv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let num = numeric_grad(&f, &x0, 1e-5);
        assert!(max_rel_error(g.grad(xv).unwrap(), &num) < 1e-6);
    }

    #[test]
    fn layer_norm_contract() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![3, 7]));
        let l = g.cross_entropy(logits, &[Some(1), None, Some(6)]).unwrap();
        assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_rows_get_zero_gradient() {
        let mut g = Graph::new();
        let logits =
            g.leaf(Tensor::from_fn(vec![3, 4], |i| (i as f64).cos()).with_requires_grad(true));
        let l = g.cross_entropy(logits, &[None, Some(2), None]).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(logits).unwrap();
        assert!(gr[0..4].iter().all(|&v| v == 0.0));
        assert!(gr[8..12].iter().all(|&v| v == 0.0));
        assert!(gr[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_contract() {
        let mut g = Graph::new();
        let h = g.leaf(t(&[1, 2], &[0.9, 0.8]).with_requires_grad(true));
        let zq = g.leaf(t(&[1, 2], &[1.0, 1.0]).with_requires_grad(true));
        let y = g.straight_through(h, zq).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(h).unwrap(), &[1.0, 1.0]);
        assert!(g.grad(zq).is_none());
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        let _ = g.sqrt(x);
        assert_eq!(g.non_finite(), Some("sqrt"));
    }
}
