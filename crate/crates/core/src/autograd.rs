//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] read-only while the forward pass is
//! recorded; [`Graph::backward`] returns the parameter gradients, which
//! [`ParamStore::accumulate`] adds into the gradient buffers. Attention is a fused
//! op whose forward kernel is shared with the cached inference path.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{
    self, gelu_grad_scalar, gemm, layer_norm_raw, softmax_in_place, MatView, ParamId,
    ParamStore, Tensor,
};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Shape of an attention call. Queries sit at absolute positions
/// `query_offset..query_offset + n_queries`; with `causal`, query `i` sees key `j`
/// only if `j <= query_offset + i`. The optional memory slot is always visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    pub query_offset: usize,
}

/// Multi-head attention forward. `q` is `nq × d`, `k`/`v` are `nk × d`, `memory`
/// holds one key row and one value row. Returns the `nq × d` output and the
/// attention probabilities laid out as `[head][query][column]`, where column 0 is the
/// memory slot when present.
pub(crate) fn attention_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    memory: Option<(&[f64], &[f64])>,
    d: usize,
    spec: AttnSpec,
) -> (Vec<f64>, Vec<f64>) {
    let nq = q.len() / d;
    let nk = k.len() / d;
    let dh = d / spec.heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let m = usize::from(memory.is_some());
    let cols = m + nk;
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; spec.heads * nq * cols];
    let mut scores = vec![0.0; cols];
    for h in 0..spec.heads {
        let hs = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + hs..i * d + hs + dh];
            let visible = if spec.causal {
                (spec.query_offset + i + 1).min(nk)
            } else {
                nk
            };
            let n = m + visible;
            if let Some((mk, _)) = memory {
                scores[0] = dot(qi, &mk[hs..hs + dh]) * scale;
            }
            for j in 0..visible {
                scores[m + j] = dot(qi, &k[j * d + hs..j * d + hs + dh]) * scale;
            }
            softmax_in_place(&mut scores[..n]);
            let o = &mut out[i * d + hs..i * d + hs + dh];
            if let Some((_, mv)) = memory {
                axpy(scores[0], &mv[hs..hs + dh], o);
            }
            for j in 0..visible {
                axpy(scores[m + j], &v[j * d + hs..j * d + hs + dh], o);
            }
            let base = (h * nq + i) * cols;
            probs[base..base + n].copy_from_slice(&scores[..n]);
        }
    }
    (out, probs)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Map {
        x: Var,
        df: fn(f64) -> f64,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    SelectRow {
        x: Var,
        row: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        memory: Option<(Var, Var)>,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        scale: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }
}

impl ParamStore {
    /// Adds a backward pass's gradients into the gradient buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in grads.iter() {
            self.grad_mut(id).add_assign(g)?;
        }
        Ok(())
    }
}

/// Records a forward computation for later differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::Detached)
    }

    /// Forward value of a variable.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let node = self.node(v)?;
        Ok(match node.op {
            Op::Param(id) => self.params.value(id),
            _ => &node.value,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// The (deduplicated) node for a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = tensor::matmul(self.value(a)?, self.value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let out = tensor::linear(self.value(x)?, self.value(w)?, self.value(b)?)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = tensor::add(self.value(a)?, self.value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(&[x])?;
        let mut out = self.value(x)?.clone();
        out.scale(factor);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, factor), needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let (out, stats) = layer_norm_raw(self.value(x)?, self.value(gamma)?, self.value(beta)?)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized: stats.normalized,
                rstd: stats.rstd,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = tensor::gelu(self.value(x)?);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Gelu(x), needs))
    }

    /// Elementwise `f` whose derivative is supplied as `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.check(&[x])?;
        let src = self.value(x)?;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Map { x, df }, needs))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = tensor::softmax_lastdim(self.value(x)?);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.check(&[table])?;
        let out = tensor::embedding_lookup(self.value(table)?, ids)?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = tensor::concat_lastdim(self.value(a)?, self.value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), needs))
    }

    /// Repeats a single-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        self.check(&[x])?;
        let src = self.value(x)?;
        if src.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: src.shape().to_vec(),
                rhs: vec![1, src.cols()],
            });
        }
        let mut data = Vec::with_capacity(rows * src.cols());
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::matrix(rows, src.cols(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::BroadcastRows(x), needs))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.check(&[x])?;
        let src = self.value(x)?;
        if row >= src.rows() {
            return Err(Error::Shape {
                op: "select_row",
                lhs: src.shape().to_vec(),
                rhs: vec![row],
            });
        }
        let out = Tensor::row_vector(src.row(row).to_vec());
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectRow { x, row }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x)?.clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Fused multi-head attention; see [`AttnSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, memory: Option<(Var, Var)>, spec: AttnSpec) -> Result<Var> {
        self.check(&[q, k, v])?;
        let (qt, kt, vt) = (self.value(q)?, self.value(k)?, self.value(v)?);
        let d = qt.cols();
        if kt.cols() != d || vt.cols() != d || kt.rows() != vt.rows() || spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: qt.shape().to_vec(),
                rhs: kt.shape().to_vec(),
            });
        }
        let mem = match memory {
            Some((mk, mv)) => {
                self.check(&[mk, mv])?;
                let (a, b) = (self.value(mk)?, self.value(mv)?);
                if a.len() != d || b.len() != d {
                    return Err(Error::Shape {
                        op: "attention.memory",
                        lhs: a.shape().to_vec(),
                        rhs: vec![1, d],
                    });
                }
                Some((a.data(), b.data()))
            }
            None => None,
        };
        let (out, probs) = attention_kernel(qt.data(), kt.data(), vt.data(), mem, d, spec);
        let out = Tensor::matrix(qt.rows(), d, out)?;
        let needs = self.needs(q)
            || self.needs(k)
            || self.needs(v)
            || memory.is_some_and(|(a, b)| self.needs(a) || self.needs(b));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                memory,
                spec,
                probs,
            },
            needs,
        ))
    }

    /// `scale * Σ_r -ln softmax(logits_r)[target_r]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>], scale: f64) -> Result<Var> {
        self.check(&[logits])?;
        let lt = self.value(logits)?;
        let vocab = lt.cols();
        if targets.len() != lt.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lt.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; lt.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t as usize >= vocab {
                return Err(Error::UnknownToken { id: t, vocab });
            }
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(lt.row(r));
            softmax_in_place(p);
            total -= libm::log(p[t as usize]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x)?.sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x)?.data().iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(x), needs))
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v)?;
        if t.len() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                lhs: t.shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(t.data()[0])
    }

    /// Differentiates a scalar `loss` with respect to every parameter it depends on.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let root = self.node(loss)?;
        if root.value.len() != 1 || matches!(root.op, Op::Param(_)) {
            return Err(Error::Shape {
                op: "backward",
                lhs: root.value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = ParamGrads::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn acc_with<F>(&self, grads: &mut [Option<Tensor>], v: Var, f: F) -> Result<()>
    where
        F: FnOnce(&mut [f64]) -> Result<()>,
    {
        if !self.needs(v) {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v)?.shape()));
        }
        f(slot.as_mut().expect("initialized above").data_mut())
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut ParamGrads) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match out.grads.get_mut(id) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    out.grads.insert(*id, g);
                }
            },
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a)?, self.value(*b)?);
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                self.acc_with(grads, *a, |ga| {
                    gemm(MatView::of(g.data(), m, n), MatView::of(bt.data(), k, n).t(), ga, 1.0);
                    Ok(())
                })?;
                self.acc_with(grads, *b, |gb| {
                    gemm(MatView::of(at.data(), m, k).t(), MatView::of(g.data(), m, n), gb, 1.0);
                    Ok(())
                })?;
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x)?, self.value(*w)?);
                let (m, k, n) = (xt.rows(), xt.cols(), wt.cols());
                self.acc_with(grads, *x, |gx| {
                    gemm(MatView::of(g.data(), m, n), MatView::of(wt.data(), k, n).t(), gx, 1.0);
                    Ok(())
                })?;
                self.acc_with(grads, *w, |gw| {
                    gemm(MatView::of(xt.data(), m, k).t(), MatView::of(g.data(), m, n), gw, 1.0);
                    Ok(())
                })?;
                self.acc_with(grads, *b, |gb| {
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Ok(())
                })?;
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g)?;
            }
            Op::Scale(x, f) => {
                let mut g = g;
                g.scale(*f);
                self.acc(grads, *x, g)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let gam = self.value(*gamma)?;
                let n = gam.len();
                let rows = g.rows();
                self.acc_with(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g.data()[r * n + j] * normalized[r * n + j];
                        }
                    }
                    Ok(())
                })?;
                self.acc_with(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    Ok(())
                })?;
                self.acc_with(grads, *x, |gx| {
                    let mut dxh = vec![0.0; n];
                    for r in 0..rows {
                        let xh = &normalized[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxh[j] = g.data()[r * n + j] * gam.data()[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    Ok(())
                })?;
            }
            Op::Gelu(x) => {
                let xt = self.value(*x)?;
                let mut g = g;
                for (gi, &xi) in g.data_mut().iter_mut().zip(xt.data()) {
                    *gi *= gelu_grad_scalar(xi);
                }
                self.acc(grads, *x, g)?;
            }
            Op::Map { x, df } => {
                let xt = self.value(*x)?;
                let mut g = g;
                for (gi, &xi) in g.data_mut().iter_mut().zip(xt.data()) {
                    *gi *= df(xi);
                }
                self.acc(grads, *x, g)?;
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let n = p.cols();
                let mut gx = g;
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = gx.row_mut(r);
                    let s: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = pr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, gx)?;
            }
            Op::Embedding { table, ids } => {
                let d = g.cols();
                self.acc_with(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (o, v) in dst.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    Ok(())
                })?;
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a)?.cols();
                let q = self.value(*b)?.cols();
                let rows = g.rows();
                self.acc_with(grads, *a, |ga| {
                    for r in 0..rows {
                        for (o, v) in ga[r * p..(r + 1) * p].iter_mut().zip(&g.row(r)[..p]) {
                            *o += v;
                        }
                    }
                    Ok(())
                })?;
                self.acc_with(grads, *b, |gb| {
                    for r in 0..rows {
                        for (o, v) in gb[r * q..(r + 1) * q].iter_mut().zip(&g.row(r)[p..]) {
                            *o += v;
                        }
                    }
                    Ok(())
                })?;
            }
            Op::BroadcastRows(x) => {
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (o, v) in gx.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    Ok(())
                })?;
            }
            Op::SelectRow { x, row } => {
                let row = *row;
                self.acc_with(grads, *x, |gx| {
                    let c = g.len();
                    for (o, v) in gx[row * c..(row + 1) * c].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                    Ok(())
                })?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x)?.shape().to_vec();
                self.acc(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Attention {
                q,
                k,
                v,
                memory,
                spec,
                probs,
            } => self.attention_backward(&g, *q, *k, *v, *memory, *spec, probs, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let upstream = g.data()[0] * scale;
                let vocab = self.value(*logits)?.cols();
                self.acc_with(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            dst[j] += upstream * p[j];
                        }
                        dst[t as usize] -= upstream;
                    }
                    Ok(())
                })?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x)?.shape().to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::SumSquares(x) => {
                let mut gx = self.value(*x)?.clone();
                gx.scale(2.0 * g.data()[0]);
                self.acc(grads, *x, gx)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        memory: Option<(Var, Var)>,
        spec: AttnSpec,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qt, kt, vt) = (self.value(q)?, self.value(k)?, self.value(v)?);
        let d = qt.cols();
        let nq = qt.rows();
        let nk = kt.rows();
        let dh = d / spec.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let m = usize::from(memory.is_some());
        let cols = m + nk;
        let mem = match memory {
            Some((a, b)) => Some((self.value(a)?.data(), self.value(b)?.data())),
            None => None,
        };

        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut gmk = vec![0.0; d];
        let mut gmv = vec![0.0; d];
        let mut dp = vec![0.0; cols];
        for h in 0..spec.heads {
            let hs = h * dh;
            for i in 0..nq {
                let visible = if spec.causal {
                    (spec.query_offset + i + 1).min(nk)
                } else {
                    nk
                };
                let n = m + visible;
                let p = &probs[(h * nq + i) * cols..(h * nq + i) * cols + n];
                let go = &g.data()[i * d + hs..i * d + hs + dh];
                if let Some((_, mv)) = mem {
                    dp[0] = dot(go, &mv[hs..hs + dh]);
                    axpy(p[0], go, &mut gmv[hs..hs + dh]);
                }
                for j in 0..visible {
                    dp[m + j] = dot(go, &vt.data()[j * d + hs..j * d + hs + dh]);
                    axpy(p[m + j], go, &mut gv[j * d + hs..j * d + hs + dh]);
                }
                let s: f64 = p.iter().zip(&dp[..n]).map(|(a, b)| a * b).sum();
                let qi = &qt.data()[i * d + hs..i * d + hs + dh];
                let gqi = &mut gq[i * d + hs..i * d + hs + dh];
                if let Some((mk, _)) = mem {
                    let ds = p[0] * (dp[0] - s) * scale;
                    axpy(ds, &mk[hs..hs + dh], gqi);
                    axpy(ds, qi, &mut gmk[hs..hs + dh]);
                }
                for j in 0..visible {
                    let ds = p[m + j] * (dp[m + j] - s) * scale;
                    axpy(ds, &kt.data()[j * d + hs..j * d + hs + dh], gqi);
                    axpy(ds, qi, &mut gk[j * d + hs..j * d + hs + dh]);
                }
            }
        }
        self.acc(grads, q, Tensor::new(qt.shape().to_vec(), gq)?)?;
        self.acc(grads, k, Tensor::new(kt.shape().to_vec(), gk)?)?;
        self.acc(grads, v, Tensor::new(vt.shape().to_vec(), gv)?)?;
        if let Some((a, b)) = memory {
            let sa = self.value(a)?.shape().to_vec();
            let sb = self.value(b)?.shape().to_vec();
            self.acc(grads, a, Tensor::new(sa, gmk)?)?;
            self.acc(grads, b, Tensor::new(sb, gmv)?)?;
        }
        Ok(())
    }
}

/// Runs backward on `loss` and adds the result into the store's gradient buffers.
pub fn backward(graph: &Graph<'_>, loss: Var, params: &mut ParamStore) -> Result<()> {
    let grads = graph.backward(loss)?;
    params.accumulate(&grads)
}
