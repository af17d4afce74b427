//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node; [`Var`] is a cheap handle to it. [`Tape::backward`]
//! walks nodes in exact reverse creation order, so gradient accumulation order
//! and therefore every gradient bit is fixed by the program.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::ops::Range;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    Slice { a: Var, rows: Range<usize>, cols: Range<usize> },
    Rows { a: Var, idx: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    Kl { logits: Var, p: Vec<f64>, logp: Vec<f64>, logq: Vec<f64>, kl: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` was on a differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|x| x.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.g.get_mut(v.0).and_then(|x| x.take())
    }
}

/// Recording of primitive ops. Single-threaded; independent tapes share nothing.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

fn mat_shape(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return dim_err(format!("{what} expects a matrix, got shape {:?}", t.shape));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn accumulate(slot: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_shape(self.value(a), "matmul")?;
        let (k2, n) = mat_shape(self.value(b), "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum of equal shapes, or a rank-1 `b` added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ng = self.ng(a) || self.ng(b);
        if sa == sb {
            let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), ng));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let c = sb[0];
            let bd = self.data(b).to_vec();
            let mut data = self.data(a).to_vec();
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(&bd) {
                    *x += y;
                }
            }
            return Ok(self.push(Tensor::new(sa, data)?, Op::AddRow(a, b), ng));
        }
        dim_err(format!("add shapes {sa:?} and {sb:?}"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return dim_err(format!("mul shapes {sa:?} and {:?}", self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(sa, data)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * c).collect(), requires_grad: false };
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = mat_shape(self.value(a), "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = mat_shape(self.value(a), "causal_softmax")?;
        if m != n {
            return dim_err(format!("causal_softmax needs a square matrix, got {m}x{n}"));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix()?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lim = if causal { i + 1 } else { n };
            let row = &src[i * n..i * n + lim];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..i * n + lim];
            let mut s = 0.0;
            for (d, x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of the row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix()?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return dim_err(format!("layer_norm affine params must have shape [{n}]"));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let v = Tensor { shape: t.shape.clone(), data, requires_grad: false };
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Rows of `table` picked by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = mat_shape(self.value(table), "embedding")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("embedding id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Stacks matrices along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let (_, c) = mat_shape(self.value(parts[0]), "concat")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = mat_shape(self.value(p), "concat")?;
            if c2 != c {
                return dim_err(format!("concat width {c2} vs {c}"));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Rectangular block `a[rows, cols]` of a matrix.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = mat_shape(self.value(a), "slice")?;
        if rows.end > m || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::Index(format!("slice {rows:?} x {cols:?} outside {m}x{n}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src[i * n + cols.start..i * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, rows, cols }, ng))
    }

    /// Gathers whole rows `idx` of a matrix (repeats allowed).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = mat_shape(self.value(a), "rows")?;
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index(format!("row {i} outside {m} rows")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::Rows { a, idx: idx.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// Mean of `-log softmax(logits[row])[tok]` over `targets`, max-subtracted.
    ///
    /// Rank-1 logits are treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        let (m, v) = self.value(logits).as_matrix()?;
        let src = self.data(logits);
        let mut probs = vec![0.0; m * v];
        let mut done = vec![false; m];
        let mut loss = 0.0;
        for &(r, t) in targets {
            if r >= m {
                return Err(Error::Index(format!("target row {r} outside {m} rows")));
            }
            if t >= v {
                return Err(Error::Index(format!("target token {t} outside vocabulary {v}")));
            }
            let row = &src[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            if !done[r] {
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
                done[r] = true;
            }
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// Mean over rows of `KL(softmax(logits) || q)`, where `q` is given as log-probabilities.
    ///
    /// The teacher side is a constant: no gradient flows into `logq`.
    pub fn kl_div(&mut self, logits: Var, logq: &Tensor) -> Result<Var> {
        let (m, v) = self.value(logits).as_matrix()?;
        if logq.numel() != m * v {
            return dim_err(format!("kl teacher has {} entries, expected {}", logq.numel(), m * v));
        }
        for i in 0..m {
            let s: f64 = logq.data[i * v..(i + 1) * v].iter().map(|x| x.exp()).sum();
            if !s.is_finite() || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("teacher row {i} sums to {s}")));
            }
        }
        let src = self.data(logits);
        let mut p = vec![0.0; m * v];
        let mut logp = vec![0.0; m * v];
        let mut kl = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            let mut k = 0.0;
            for j in 0..v {
                let lp = row[j] - lse;
                logp[i * v + j] = lp;
                p[i * v + j] = lp.exp();
                k += p[i * v + j] * (lp - logq.data[i * v + j]);
            }
            kl[i] = k;
        }
        let total = kl.iter().sum::<f64>() / m as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Kl { logits, p, logp, logq: logq.data.clone(), kl },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gi = match &node.op {
                Op::Leaf => continue,
                _ => match g[i].take() {
                    Some(x) => x,
                    None => continue,
                },
            };
            self.backprop_node(node, &gi, &mut g);
        }
        Ok(Grads { g })
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn backprop_node(&self, node: &Node, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let bd = self.data(*b);
                    accumulate(&mut g[a.0], m * k, |buf| gemm(m, n, k, gi, false, bd, true, 1.0, buf));
                }
                if self.ng(*b) {
                    let ad = self.data(*a);
                    accumulate(&mut g[b.0], k * n, |buf| gemm(k, m, n, ad, true, gi, false, 1.0, buf));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        accumulate(&mut g[v.0], gi.len(), |buf| {
                            for (x, y) in buf.iter_mut().zip(gi) {
                                *x += y;
                            }
                        });
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for (x, y) in buf.iter_mut().zip(gi) {
                            *x += y;
                        }
                    });
                }
                if self.ng(*b) {
                    let c = self.numel(*b);
                    accumulate(&mut g[b.0], c, |buf| {
                        for row in gi.chunks(c) {
                            for (x, y) in buf.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bd = self.data(*b);
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for ((x, y), z) in buf.iter_mut().zip(gi).zip(bd) {
                            *x += y * z;
                        }
                    });
                }
                if self.ng(*b) {
                    let ad = self.data(*a);
                    accumulate(&mut g[b.0], gi.len(), |buf| {
                        for ((x, y), z) in buf.iter_mut().zip(gi).zip(ad) {
                            *x += y * z;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for (x, y) in buf.iter_mut().zip(gi) {
                            *x += y * c;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    accumulate(&mut g[a.0], m * n, |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[i * n + j] += gi[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for (x, y) in buf.iter_mut().zip(gi) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let n = *node.value.shape.last().unwrap_or(&1);
                    let p = &node.value.data;
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for ((brow, prow), grow) in buf.chunks_mut(n).zip(p.chunks(n)).zip(gi.chunks(n)) {
                            let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                            for j in 0..n {
                                brow[j] += prow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.numel(*gamma);
                let gam = self.data(*gamma);
                if self.ng(*gamma) {
                    accumulate(&mut g[gamma.0], n, |buf| {
                        for (grow, hrow) in gi.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                buf[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if self.ng(*beta) {
                    accumulate(&mut g[beta.0], n, |buf| {
                        for grow in gi.chunks(n) {
                            for j in 0..n {
                                buf[j] += grow[j];
                            }
                        }
                    });
                }
                if self.ng(*x) {
                    accumulate(&mut g[x.0], gi.len(), |buf| {
                        for (i, (grow, hrow)) in gi.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let dh = grow[j] * gam[j];
                                m1 += dh;
                                m2 += dh * hrow[j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            let brow = &mut buf[i * n..(i + 1) * n];
                            for j in 0..n {
                                let dh = grow[j] * gam[j];
                                brow[j] += rstd[i] * (dh - m1 - hrow[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let xs = self.data(*a);
                    accumulate(&mut g[a.0], gi.len(), |buf| {
                        for ((b, &x), y) in buf.iter_mut().zip(xs).zip(gi) {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            *b += y * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let d = self.shape(*table)[1];
                    let n = self.numel(*table);
                    accumulate(&mut g[table.0], n, |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                buf[id * d + j] += gi[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.numel(*p);
                    if self.ng(*p) {
                        let src = &gi[off..off + n];
                        accumulate(&mut g[p.0], n, |buf| {
                            for (x, y) in buf.iter_mut().zip(src) {
                                *x += y;
                            }
                        });
                    }
                    off += n;
                }
            }
            Op::Slice { a, rows, cols } => {
                if self.ng(*a) {
                    let n = self.shape(*a)[1];
                    let w = cols.len();
                    let total = self.numel(*a);
                    accumulate(&mut g[a.0], total, |buf| {
                        for (r, i) in rows.clone().enumerate() {
                            let dst = &mut buf[i * n + cols.start..i * n + cols.end];
                            for (x, y) in dst.iter_mut().zip(&gi[r * w..(r + 1) * w]) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Rows { a, idx } => {
                if self.ng(*a) {
                    let n = self.shape(*a)[1];
                    let total = self.numel(*a);
                    accumulate(&mut g[a.0], total, |buf| {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..n {
                                buf[i * n + j] += gi[r * n + j];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let s = gi[0];
                    accumulate(&mut g[a.0], self.numel(*a), |buf| {
                        for x in buf.iter_mut() {
                            *x += s;
                        }
                    });
                }
            }
            Op::SumSquares(a) => {
                if self.ng(*a) {
                    let s = gi[0];
                    let xs = self.data(*a);
                    accumulate(&mut g[a.0], xs.len(), |buf| {
                        for (b, x) in buf.iter_mut().zip(xs) {
                            *b += 2.0 * s * x;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.ng(*logits) {
                    let v = *self.shape(*logits).last().unwrap_or(&1);
                    let s = gi[0] / targets.len() as f64;
                    accumulate(&mut g[logits.0], probs.len(), |buf| {
                        for &(r, t) in targets {
                            for j in 0..v {
                                buf[r * v + j] += s * probs[r * v + j];
                            }
                            buf[r * v + t] -= s;
                        }
                    });
                }
            }
            Op::Kl { logits, p, logp, logq, kl } => {
                if self.ng(*logits) {
                    let m = kl.len();
                    let v = p.len() / m;
                    let s = gi[0] / m as f64;
                    accumulate(&mut g[logits.0], p.len(), |buf| {
                        for i in 0..m {
                            for j in 0..v {
                                let o = i * v + j;
                                buf[o] += s * p[o] * (logp[o] - logq[o] - kl[i]);
                            }
                        }
                    });
                }
            }
        }
    }
}
