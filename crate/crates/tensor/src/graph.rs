//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! creation order, which is a topological order by construction. Calling
//! [`Graph::backward`] walks the nodes in reverse exactly once and
//! accumulates gradients into the leaves that were created with
//! `requires_grad`.
//!
//! Operations are deliberately few and shape-strict: apart from scalar
//! broadcasting, the only broadcasts are the named row/group ops
//! ([`Graph::add_bias`], [`Graph::group_mul`], [`Graph::group_add`]).

use crate::gemm::{gemm, MatMut, MatRef};
use crate::{Result, Tensor, TensorError};

/// RMS-norm epsilon inside the square root.
pub const RMS_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    GroupMul {
        x: Var,
        s: Var,
        rows_per_group: usize,
    },
    GroupAdd {
        x: Var,
        s: Var,
        rows_per_group: usize,
    },
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
    },
    SliceSeq {
        x: Var,
        batch: usize,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass plus the accumulated leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::dense(ta.data(), m, k),
            MatRef::dense(tb.data(), k, n),
            MatMut::dense(&mut out, m, n),
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds `b[n]` to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        if tb.rank() != 1 || tx.last_dim() != n || tx.rank() == 0 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            add_into(row, tb.data());
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn group_check(&self, name: &'static str, x: Var, s: Var, rows_per_group: usize) -> Result<()> {
        let (tx, ts) = (self.value(x), self.value(s));
        match (tx.dims2(), ts.dims2()) {
            (Some((r, c)), Some((g, c2)))
                if c == c2 && rows_per_group > 0 && r == g * rows_per_group =>
            {
                Ok(())
            }
            _ => Err(shape_err(name, tx, ts)),
        }
    }

    /// `x[(g·r)×n] ⊙ s[g×n]`, each row of `s` applied to its group of `r` rows.
    pub fn group_mul(&mut self, x: Var, s: Var, rows_per_group: usize) -> Result<Var> {
        self.group_check("group_mul", x, s, rows_per_group)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let n = ts.last_dim();
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let srow = &ts.data()[(r / rows_per_group) * n..][..n];
            row.iter_mut().zip(srow).for_each(|(v, s)| *v *= s);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(
            out,
            Op::GroupMul {
                x,
                s,
                rows_per_group,
            },
            rg,
        ))
    }

    /// `x[(g·r)×n] + s[g×n]`, each row of `s` added to its group of `r` rows.
    pub fn group_add(&mut self, x: Var, s: Var, rows_per_group: usize) -> Result<Var> {
        self.group_check("group_add", x, s, rows_per_group)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let n = ts.last_dim();
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            add_into(row, &ts.data()[(r / rows_per_group) * n..][..n]);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(
            out,
            Op::GroupAdd {
                x,
                s,
                rows_per_group,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.clone();
        out.data_mut()
            .chunks_exact_mut(c)
            .for_each(softmax_in_place);
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `x / sqrt(mean(x²) + 1e-6) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tg.len();
        if tg.rank() != 1 || tx.last_dim() != d || tx.rank() == 0 {
            return Err(shape_err("rms_norm", tx, tg));
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.len() / d);
        for row in out.data_mut().chunks_exact_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().zip(tg.data()).for_each(|(v, g)| *v *= r * g);
            inv_rms.push(r);
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences. `q` is `[batch·tq × d]`, `k` and `v` are `[batch·tk × d]`;
    /// `d` splits into `heads` contiguous head slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let dims = (tq_.dims2(), tk_.dims2(), tv_.dims2());
        let (rq, d, rk) = match dims {
            (Some((rq, d)), Some((rk, dk)), Some((rv, dv)))
                if d == dk
                    && d == dv
                    && rk == rv
                    && batch > 0
                    && heads > 0
                    && d % heads == 0
                    && rq % batch == 0
                    && rk % batch == 0 =>
            {
                (rq, d, rk)
            }
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: tq_.shape().to_vec(),
                    rhs: tk_.shape().to_vec(),
                })
            }
        };
        let (tq, tk, dh) = (rq / batch, rk / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        for b in 0..batch {
            for h in 0..heads {
                let qv = head_view(tq_.data(), b * tq * d + h * dh, tq, dh, d);
                let kv = head_view(tk_.data(), b * tk * d + h * dh, tk, dh, d);
                let vv = head_view(tv_.data(), b * tk * d + h * dh, tk, dh, d);
                let p = &mut probs[(b * heads + h) * tq * tk..][..tq * tk];
                gemm(qv, kv.t(), MatMut::dense(p, tq, tk), 0.0);
                for row in p.chunks_exact_mut(tk) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let o = head_view_mut(&mut out, b * tq * d + h * dh, tq, dh, d);
                gemm(MatRef::dense(p, tq, tk), vv, o, 0.0);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new([rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Per-sample concatenation along the sequence axis:
    /// `a[batch·ta × d]`, `b[batch·tb × d]` → `[batch·(ta+tb) × d]`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, d, rb) = match (ta.dims2(), tb.dims2()) {
            (Some((ra, d)), Some((rb, d2)))
                if d == d2 && batch > 0 && ra % batch == 0 && rb % batch == 0 =>
            {
                (ra, d, rb)
            }
            _ => return Err(shape_err("concat_seq", ta, tb)),
        };
        let (na, nb) = (ra / batch * d, rb / batch * d);
        let mut out = Vec::with_capacity((ra + rb) * d);
        for s in 0..batch {
            out.extend_from_slice(&ta.data()[s * na..][..na]);
            out.extend_from_slice(&tb.data()[s * nb..][..nb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new([ra + rb, d], out)?,
            Op::ConcatSeq { a, b, batch },
            rg,
        ))
    }

    /// Rows `start..start+len` of every sample in `x[batch·t × d]`.
    pub fn slice_seq(&mut self, x: Var, batch: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = tx.dims2().ok_or_else(|| shape_err("slice_seq", tx, tx))?;
        if batch == 0 || r % batch != 0 || len == 0 || start + len > r / batch {
            return Err(TensorError::OutOfRange {
                op: "slice_seq",
                detail: format!(
                    "rows {start}..{} of {} per sample",
                    start + len,
                    r / batch.max(1)
                ),
            });
        }
        let t = r / batch;
        let mut out = Vec::with_capacity(batch * len * d);
        for s in 0..batch {
            out.extend_from_slice(&tx.data()[(s * t + start) * d..][..len * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new([batch * len, d], out)?,
            Op::SliceSeq { x, batch, start },
            rg,
        ))
    }

    /// Columns `start..start+len` of `x[r × c]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2().ok_or_else(|| shape_err("slice_cols", tx, tx))?;
        if len == 0 || start + len > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {c}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Rows of `table[v × d]` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2().ok_or_else(|| shape_err("gather_rows", tt, tt))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(TensorError::OutOfRange {
                op: "gather_rows",
                detail: format!("index {bad} of {v} rows"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tt.data()[i * d..][..d]);
        }
        let rg = self.rg(&[table]);
        let value = Tensor::new([idx.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::scalar(tx.sum() / tx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    // ----------------------------------------------------------- backward

    /// Propagates `d(loss)/d(leaf)` into every `requires_grad` leaf.
    /// Repeated calls add to the leaf gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::dense(&g, m, n),
                        MatRef::dense(tb.data(), k, n).t(),
                        MatMut::dense(&mut ga, m, k),
                        0.0,
                    );
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        MatRef::dense(ta.data(), m, k).t(),
                        MatRef::dense(&g, m, n),
                        MatMut::dense(&mut gb, k, n),
                        0.0,
                    );
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) && wants(*b) {
                    send(*a, g.clone());
                    send(*b, g);
                } else if wants(*a) {
                    send(*a, g);
                } else if wants(*b) {
                    send(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    send(*b, g.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    send(*a, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(
                        *a,
                        g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect(),
                    );
                }
                if wants(*b) {
                    send(
                        *b,
                        g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::AddScalar(a) => send(*a, g),
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, b) => {
                if wants(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    g.chunks_exact(n).for_each(|row| add_into(&mut gb, row));
                    send(*b, gb);
                }
                if wants(*x) {
                    send(*x, g);
                }
            }
            Op::GroupMul {
                x,
                s,
                rows_per_group,
            } => {
                let (tx, ts) = (val(*x), val(*s));
                let n = ts.last_dim();
                if wants(*s) {
                    let mut gs = vec![0.0; ts.len()];
                    for (r, (grow, xrow)) in
                        g.chunks_exact(n).zip(tx.data().chunks_exact(n)).enumerate()
                    {
                        let dst = &mut gs[(r / rows_per_group) * n..][..n];
                        for ((d, gv), xv) in dst.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                    send(*s, gs);
                }
                if wants(*x) {
                    let mut gx = g;
                    for (r, row) in gx.chunks_exact_mut(n).enumerate() {
                        let srow = &ts.data()[(r / rows_per_group) * n..][..n];
                        row.iter_mut().zip(srow).for_each(|(v, s)| *v *= s);
                    }
                    send(*x, gx);
                }
            }
            Op::GroupAdd {
                x,
                s,
                rows_per_group,
            } => {
                let ts = val(*s);
                let n = ts.last_dim();
                if wants(*s) {
                    let mut gs = vec![0.0; ts.len()];
                    for (r, grow) in g.chunks_exact(n).enumerate() {
                        add_into(&mut gs[(r / rows_per_group) * n..][..n], grow);
                    }
                    send(*s, gs);
                }
                if wants(*x) {
                    send(*x, g);
                }
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let c = p.last_dim();
                let mut gx = g;
                for (grow, prow) in gx.chunks_exact_mut(c).zip(p.data().chunks_exact(c)) {
                    softmax_backward_row(grow, prow);
                }
                send(*x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let d = tg.len();
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for ((grow, xrow), r) in g
                        .chunks_exact(d)
                        .zip(tx.data().chunks_exact(d))
                        .zip(inv_rms)
                    {
                        for ((acc, gv), xv) in gg.iter_mut().zip(grow).zip(xrow) {
                            *acc += gv * xv * r;
                        }
                    }
                    send(*gain, gg);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; tx.len()];
                    for (((dst, grow), xrow), &r) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(tx.data().chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let dot: f64 = grow
                            .iter()
                            .zip(tg.data())
                            .zip(xrow)
                            .map(|((gv, gn), xv)| gv * gn * xv)
                            .sum();
                        let k = r * r * r * dot / d as f64;
                        for (((o, gv), gn), xv) in dst.iter_mut().zip(grow).zip(tg.data()).zip(xrow)
                        {
                            *o = r * gv * gn - k * xv;
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (tq_, tk_, tv_) = (val(*q), val(*k), val(*v));
                let (rq, d) = tq_.dims2().unwrap();
                let rk = tk_.dims2().unwrap().0;
                let (batch, heads) = (*batch, *heads);
                let (tq, tk, dh) = (rq / batch, rk / batch, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; rq * d];
                let mut gk = vec![0.0; rk * d];
                let mut gv = vec![0.0; rk * d];
                let mut dp = vec![0.0; tq * tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let q_off = b * tq * d + h * dh;
                        let k_off = b * tk * d + h * dh;
                        let go = head_view(&g, q_off, tq, dh, d);
                        let p = &probs[(b * heads + h) * tq * tk..][..tq * tk];
                        let pm = MatRef::dense(p, tq, tk);
                        gemm(pm.t(), go, head_view_mut(&mut gv, k_off, tk, dh, d), 0.0);
                        gemm(
                            go,
                            head_view(tv_.data(), k_off, tk, dh, d).t(),
                            MatMut::dense(&mut dp, tq, tk),
                            0.0,
                        );
                        for (drow, prow) in dp.chunks_exact_mut(tk).zip(p.chunks_exact(tk)) {
                            softmax_backward_row(drow, prow);
                            drow.iter_mut().for_each(|v| *v *= scale);
                        }
                        let ds = MatRef::dense(&dp, tq, tk);
                        gemm(
                            ds,
                            head_view(tk_.data(), k_off, tk, dh, d),
                            head_view_mut(&mut gq, q_off, tq, dh, d),
                            0.0,
                        );
                        gemm(
                            ds.t(),
                            head_view(tq_.data(), q_off, tq, dh, d),
                            head_view_mut(&mut gk, k_off, tk, dh, d),
                            0.0,
                        );
                    }
                }
                if wants(*q) {
                    send(*q, gq);
                }
                if wants(*k) {
                    send(*k, gk);
                }
                if wants(*v) {
                    send(*v, gv);
                }
            }
            Op::ConcatSeq { a, b, batch } => {
                let (na, nb) = (val(*a).len() / batch, val(*b).len() / batch);
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for chunk in g.chunks_exact(na + nb) {
                    ga.extend_from_slice(&chunk[..na]);
                    gb.extend_from_slice(&chunk[na..]);
                }
                if wants(*a) {
                    send(*a, ga);
                }
                if wants(*b) {
                    send(*b, gb);
                }
            }
            Op::SliceSeq { x, batch, start } => {
                let tx = val(*x);
                let (r, d) = tx.dims2().unwrap();
                let t = r / batch;
                let len = node.value.dims2().unwrap().0 / batch;
                let mut gx = vec![0.0; tx.len()];
                for s in 0..*batch {
                    gx[(s * t + start) * d..][..len * d]
                        .copy_from_slice(&g[s * len * d..][..len * d]);
                }
                send(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2().unwrap();
                let len = node.value.dims2().unwrap().1;
                let mut gx = vec![0.0; r * c];
                for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                send(*x, gx);
            }
            Op::GatherRows { table, idx } => {
                let tt = val(*table);
                let d = tt.last_dim();
                let mut gt = vec![0.0; tt.len()];
                for (&i, grow) in idx.iter().zip(g.chunks_exact(d)) {
                    add_into(&mut gt[i * d..][..d], grow);
                }
                send(*table, gt);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn head_view(
    data: &[f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
) -> MatRef<'_> {
    MatRef {
        data,
        offset,
        rows,
        cols,
        row_stride,
        col_stride: 1,
    }
}

fn head_view_mut(
    data: &mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
) -> MatMut<'_> {
    MatMut {
        data,
        offset,
        rows,
        cols,
        row_stride,
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Overwrites `g` (upstream gradient) with the softmax input gradient.
fn softmax_backward_row(g: &mut [f64], p: &[f64]) {
    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    g.iter_mut()
        .zip(p)
        .for_each(|(gv, pv)| *gv = pv * (*gv - dot));
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
