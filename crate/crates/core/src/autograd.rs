//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] walks the record in reverse and adds parameter
//! gradients into a [`GradientTape`].

use crate::error::{Error, Result};
use crate::params::{GradientTape, ParamId, ParamStore};
use crate::tensor::{self, axpy, dot, Matrix};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Scale(Var, T),
    Gather(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Attention(Box<AttentionRecord<T>>),
    LogSoftmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Pick(Var, usize),
    Sum(Var),
}

struct AttentionRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<(usize, usize)>,
    key_mask: Vec<bool>,
    /// Attention weights per segment and head, `len × len` row-major within each block.
    probs: Vec<Vec<T>>,
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a graph input; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` with the `1×n` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, out.cols()), "add_row shape mismatch");
        let bias = bias.data().to_vec();
        for r in 0..out.rows() {
            axpy(T::one(), &bias, out.row_mut(r));
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Rows `idx` of `a`, in order; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Matrix::from_vec(idx.len(), cols, data);
        self.push(out, Op::Gather(a, idx))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather(a, vec![i])
    }

    /// Mean of rows `idx` as a `1×n` row; `idx` must be non-empty.
    pub fn mean_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        assert!(!idx.is_empty(), "mean over no rows");
        let src = self.value(a);
        let inv = T::one() / T::of(idx.len() as f64);
        let mut out = vec![T::zero(); src.cols()];
        for &i in &idx {
            axpy(inv, src.row(i), &mut out);
        }
        let out = Matrix::row_vector(out);
        self.push(out, Op::MeanRows(a, idx))
    }

    /// Stacks the rows of several nodes with equal column count.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data);
        self.push(out, Op::Concat(parts))
    }

    /// Row-wise layer normalisation with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            let hrow = xhat.row_mut(r);
            for (h, &v) in hrow.iter_mut().zip(row) {
                *h = (v - mean) * istd;
            }
            let hrow = xhat.row(r).to_vec();
            let orow = out.row_mut(r);
            for c in 0..cols {
                orow[c] = hrow[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        for v in out.data_mut() {
            let x = *v;
            let u = c * (x + a * x * x * x);
            *v = half * x * (T::one() + u.tanh());
        }
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `segments` lists `[start, end)` row ranges; rows only attend within their
    /// own segment and only to keys whose `key_mask` entry is true. Every
    /// segment needs at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        key_mask: Vec<bool>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(key_mask.len(), rows);
        assert!(d % heads == 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(s, e) in &segments {
            let n = e - s;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![T::zero(); n * n];
                for i in 0..n {
                    let qi = &qv.row(s + i)[cols.clone()];
                    let prow = &mut p[i * n..(i + 1) * n];
                    let mut max = T::neg_infinity();
                    for j in 0..n {
                        if key_mask[s + j] {
                            let sc = dot(qi, &kv.row(s + j)[cols.clone()]) * scale;
                            prow[j] = sc;
                            if sc > max {
                                max = sc;
                            }
                        }
                    }
                    assert!(max > T::neg_infinity(), "segment without attendable keys");
                    let mut z = T::zero();
                    for j in 0..n {
                        if key_mask[s + j] {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        } else {
                            prow[j] = T::zero();
                        }
                    }
                    let inv = T::one() / z;
                    prow.iter_mut().for_each(|x| *x *= inv);
                    let orow = &mut out.row_mut(s + i)[cols.clone()];
                    for j in 0..n {
                        let w = prow[j];
                        if w != T::zero() {
                            axpy(w, &vv.row(s + j)[cols.clone()], orow);
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                segments,
                key_mask,
                probs,
            })),
        )
    }

    /// Log-softmax over all entries of `x`, restricted to `mask` when given.
    /// Masked entries come out as `-inf` and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let xv = self.value(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), xv.len(), "mask length");
        }
        let active = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let lse = tensor::log_sum_exp(
            xv.data()
                .iter()
                .enumerate()
                .filter(|(i, _)| active(*i))
                .map(|(_, &v)| v)
                .collect::<Vec<_>>(),
        );
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if active(i) { v - lse } else { T::neg_infinity() })
            .collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::LogSoftmax { x, mask })
    }

    /// Entry `i` (row-major) of `x` as a 1×1 node.
    pub fn pick(&mut self, x: Var, i: usize) -> Var {
        let out = Matrix::scalar(self.value(x).data()[i]);
        self.push(out, Op::Pick(x, i))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    /// Sum of several 1×1 nodes; `None` for an empty list.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Option<Var> {
        let mut it = xs.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, x| self.add(acc, x)))
    }

    /// Adds `∂loss/∂θ` for every parameter reachable from `loss` into `tape`.
    pub fn backward(&self, loss: Var, tape: &mut GradientTape<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {} ({} graph nodes)",
                lv.item(),
                self.nodes.len()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => tape.accumulate(*id, &g),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *a, &g);
                    let mut gb = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        axpy(T::one(), g.row(r), &mut gb);
                    }
                    acc(&mut grads, *b, &Matrix::row_vector(gb));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    tensor::matmul_nt_acc(&g, bv, &mut ga);
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    tensor::matmul_tn_acc(av, &g, &mut gb);
                    acc_owned(&mut grads, *a, ga);
                    acc_owned(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = tensor::matmul(&g, bv);
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    tensor::matmul_tn_acc(&g, av, &mut gb);
                    acc_owned(&mut grads, *a, ga);
                    acc_owned(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale(*s);
                    acc_owned(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(T::one(), g.row(k), ga.row_mut(i));
                    }
                    acc_owned(&mut grads, *a, ga);
                }
                Op::MeanRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let inv = T::one() / T::of(idx.len() as f64);
                    let mut ga = Matrix::zeros(r, c);
                    for &i in idx {
                        axpy(inv, g.row(0), ga.row_mut(i));
                    }
                    acc_owned(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        acc_owned(&mut grads, p, Matrix::from_vec(r, c, slice));
                        offset += r;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gam = self.value(*gamma).data();
                    let n = T::of(cols as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = vec![T::zero(); cols];
                    let mut gbeta = vec![T::zero(); cols];
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbeta[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        let f = inv_std[r] / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = f * (n * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                    acc_owned(&mut grads, *gamma, Matrix::row_vector(gg));
                    acc_owned(&mut grads, *beta, Matrix::row_vector(gbeta));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let c = T::of(GELU_C);
                    let a = T::of(GELU_A);
                    let half = T::of(0.5);
                    let three_a = T::of(3.0 * GELU_A);
                    let mut gx = g;
                    for (gv, &x) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let t = (c * (x + a * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three_a * x * x);
                        *gv *= d;
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Attention(rec) => {
                    let (gq, gk, gv) = self.attention_backward(rec, &g);
                    acc_owned(&mut grads, rec.q, gq);
                    acc_owned(&mut grads, rec.k, gk);
                    acc_owned(&mut grads, rec.v, gv);
                }
                Op::LogSoftmax { x, mask } => {
                    let out = self.nodes[idx].value.as_ref().expect("log_softmax value");
                    let active = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                    let total: T = g
                        .data()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| active(*i))
                        .map(|(_, &v)| v)
                        .sum();
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for (i, gxv) in gx.data_mut().iter_mut().enumerate() {
                        if active(i) {
                            *gxv = g.data()[i] - out.data()[i].exp() * total;
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Pick(x, i) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    gx.data_mut()[*i] = g.item();
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    gx.fill(g.item());
                    acc_owned(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        rec: &AttentionRecord<T>,
        g: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let (rows, d) = qv.shape();
        let dh = d / rec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gv = Matrix::zeros(rows, d);
        let mut dp = Vec::new();
        for (si, &(s, e)) in rec.segments.iter().enumerate() {
            let n = e - s;
            for h in 0..rec.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &rec.probs[si * rec.heads + h];
                dp.clear();
                dp.resize(n, T::zero());
                for i in 0..n {
                    let gi = &g.row(s + i)[cols.clone()];
                    let prow = &p[i * n..(i + 1) * n];
                    // dP_ij = gO_i · v_j ; dV_j += P_ij gO_i
                    let mut wsum = T::zero();
                    for j in 0..n {
                        if rec.key_mask[s + j] {
                            let dpij = dot(gi, &vv.row(s + j)[cols.clone()]);
                            dp[j] = dpij;
                            wsum += prow[j] * dpij;
                            if prow[j] != T::zero() {
                                axpy(prow[j], gi, &mut gv.row_mut(s + j)[cols.clone()]);
                            }
                        }
                    }
                    // dS_ij = P_ij (dP_ij - Σ_j P_ij dP_ij)
                    for j in 0..n {
                        if !rec.key_mask[s + j] {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - wsum) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        axpy(ds, &kv.row(s + j)[cols.clone()], &mut gq.row_mut(s + i)[cols.clone()]);
                        axpy(ds, &qv.row(s + i)[cols.clone()], &mut gk.row_mut(s + j)[cols.clone()]);
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: &Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_owned<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
