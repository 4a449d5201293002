use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{DadaError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `[m]` or `[1, m]` operand repeated over the rows of `[n, m]`.
    Row,
    /// `[n, 1]` operand repeated over the columns of `[n, m]`.
    Col,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        ba: Bcast,
        bb: Bcast,
        cols: usize,
    },
    MatMul(usize, usize),
    Affine(usize, f64),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SelectCols(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in creation order, so reverse index order is a valid
/// topological order for backward. A tape is built per optimization step and
/// dropped afterwards.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("variable from another tape")].value
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.check(v).ok()?;
        self.nodes[i].value.grad.as_deref()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(DadaError::Backward(
                "variable is not recorded on this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Result<Var> {
        let i = self.check(x)?;
        let needs = self.nodes[i].needs_grad;
        Ok(self.push(value, op, needs))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (out_shape, ba, bb) = broadcast(ta.shape(), tb.shape()).ok_or_else(|| {
            DadaError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            }
        })?;
        let numel: usize = out_shape.iter().product();
        let cols = out_shape.last().copied().unwrap_or(1);
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = da[ba.index(i, cols)];
            let y = db[bb.index(i, cols)];
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            });
        }
        let needs = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                ba,
                bb,
                cols,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DadaError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        let needs = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(ia, ib), needs))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Affine(x.index, scale))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Relu(x.index))
    }

    /// Natural log. Non-positive entries are rejected rather than producing
    /// `-inf`; callers clamp first.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        if let Some(bad) = t.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(DadaError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}; clamp before taking the log"),
            });
        }
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Log(x.index))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Exp(x.index))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(DadaError::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let t = &self.nodes[self.check(x)?].value;
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Clamp(x.index, lo, hi))
    }

    /// Row-wise softmax. A 1-D tensor is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let (rows, cols) = t.rows_cols();
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.unary(x, value, Op::Softmax(x.index))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let value = Tensor::scalar(t.data().iter().sum());
        self.unary(x, value, Op::Sum(x.index))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.unary(x, value, Op::Mean(x.index))
    }

    /// `[n, m] -> [n, 1]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let (rows, cols) = t.rows_cols();
        let data = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::new(vec![rows, 1], data)?;
        self.unary(x, value, Op::SumRows(x.index))
    }

    /// `[n, m] -> [n, cols.len()]`.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let (rows, m) = t.rows_cols();
        if cols.is_empty() || cols.iter().any(|&c| c >= m) {
            return Err(DadaError::ShapeMismatch {
                op: "select_cols",
                left: t.shape().to_vec(),
                right: cols.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            for &c in cols {
                data.push(t.data()[r * m + c]);
            }
        }
        let value = Tensor::new(vec![rows, cols.len()], data)?;
        self.unary(x, value, Op::SelectCols(x.index, cols.to_vec()))
    }

    /// Picks `x[i, idx[i]]` from each row: `[n, m] -> [n, 1]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[self.check(x)?].value;
        let (rows, m) = t.rows_cols();
        if idx.len() != rows || idx.iter().any(|&c| c >= m) {
            return Err(DadaError::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * m + c])
            .collect();
        let value = Tensor::new(vec![rows, 1], data)?;
        self.unary(x, value, Op::Gather(x.index, idx.to_vec()))
    }

    /// Clears gradients so that another root can be differentiated on the
    /// same recorded graph.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Afterwards every node with a path to a `requires_grad` leaf holds
    /// `d root / d node`. A second call needs [`Tape::reset_grads`] first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.backward_done {
            return Err(DadaError::Backward(
                "gradients already computed; call reset_grads first".into(),
            ));
        }
        if !self.nodes[r].value.is_scalar() {
            return Err(DadaError::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[r].needs_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Binary {
                kind,
                a,
                b,
                ba,
                bb,
                cols,
            } => {
                let (xa, xb) = (nodes[a].value.data(), nodes[b].value.data());
                acc(a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        let ia = ba.index(k, cols);
                        let ib = bb.index(k, cols);
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => *gk,
                            BinKind::Mul => gk * xb[ib],
                            BinKind::Div => gk / xb[ib],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        let ia = ba.index(k, cols);
                        let ib = bb.index(k, cols);
                        gb[ib] += match kind {
                            BinKind::Add => *gk,
                            BinKind::Sub => -gk,
                            BinKind::Mul => gk * xa[ia],
                            BinKind::Div => -gk * xa[ia] / (xb[ib] * xb[ib]),
                        };
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (nodes[a].value.data(), nodes[b].value.data());
                // dA = G B^T
                acc(a, &mut |ga| {
                    for r in 0..n {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[r * m + j] * xb[c * m + j];
                            }
                            ga[r * k + c] += s;
                        }
                    }
                });
                // dB = A^T G
                acc(b, &mut |gb| {
                    for r in 0..n {
                        for c in 0..k {
                            let av = xa[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[c * m + j] += av * g[r * m + j];
                            }
                        }
                    }
                });
            }
            &Op::Affine(x, scale) => acc(x, &mut |gx| {
                for (d, gk) in gx.iter_mut().zip(g) {
                    *d += scale * gk;
                }
            }),
            &Op::Relu(x) => {
                let xv = nodes[x].value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            &Op::Log(x) => {
                let xv = nodes[x].value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                });
            }
            &Op::Exp(x) => {
                let y = out.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k];
                    }
                });
            }
            &Op::Clamp(x, lo, hi) => {
                let xv = nodes[x].value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if xv[k] >= lo && xv[k] <= hi {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = out.data();
                let (rows, cols) = out.rows_cols();
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for k in span {
                            gx[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::Mean(x) => acc(x, &mut |gx| {
                let w = g[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += w;
                }
            }),
            &Op::SumRows(x) => {
                let (_, cols) = nodes[x].value.rows_cols();
                acc(x, &mut |gx| {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / cols];
                    }
                });
            }
            Op::SelectCols(x, sel) => {
                let (_, m) = nodes[*x].value.rows_cols();
                acc(*x, &mut |gx| {
                    for (k, gk) in g.iter().enumerate() {
                        let (r, c) = (k / sel.len(), k % sel.len());
                        gx[r * m + sel[c]] += gk;
                    }
                });
            }
            Op::Gather(x, idx) => {
                let (_, m) = nodes[*x].value.rows_cols();
                acc(*x, &mut |gx| {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * m + c] += g[r];
                    }
                });
            }
        }
    }
}

fn broadcast(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Bcast, Bcast)> {
    if a == b {
        return Some((a.to_vec(), Bcast::Same, Bcast::Same));
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(b) == 1 {
        return Some((a.to_vec(), Bcast::Same, Bcast::Scalar));
    }
    if numel(a) == 1 {
        return Some((b.to_vec(), Bcast::Scalar, Bcast::Same));
    }
    let against = |full: &[usize], part: &[usize]| -> Option<Bcast> {
        if full.len() != 2 {
            return None;
        }
        let (n, m) = (full[0], full[1]);
        match part {
            [x] if *x == m => Some(Bcast::Row),
            [1, x] if *x == m => Some(Bcast::Row),
            [x, 1] if *x == n => Some(Bcast::Col),
            _ => None,
        }
    };
    if let Some(kind) = against(a, b) {
        return Some((a.to_vec(), Bcast::Same, kind));
    }
    if let Some(kind) = against(b, a) {
        return Some((b.to_vec(), kind, Bcast::Same));
    }
    None
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            let brow = &b[c * m..(c + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
