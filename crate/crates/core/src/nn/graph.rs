//! Reverse-mode differentiation over a computation record.
//!
//! A [`Graph`] is built per forward pass. Nodes are appended in evaluation
//! order, so walking them backwards is a valid reverse topological order.
//! Parameter values stay in the borrowed [`ParamStore`]; their gradients are
//! accumulated straight into a [`Gradients`] buffer by [`Graph::backward`].

use super::kernels::{self, sigmoid, softmax_row};
use super::loss::{focal_loss, focal_loss_grad, PROB_EPS};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct LstmCache {
    hidden: usize,
    /// Activated gates per position, layout `[i | f | g | o]`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        idx: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Lstm {
        xproj: Var,
        w_hh: Var,
        c0: Var,
        h0: Var,
        reverse: bool,
        cache: LstmCache,
    },
    Focal {
        p: Var,
        targets: Vec<f64>,
        gamma: f64,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

/// One LSTM step given the input projection `W_ih·x + b` already computed.
///
/// `pre` holds the input projection on entry and the activated gates on
/// exit (`[i | f | g | o]`). Returns nothing; writes `c` and `h`.
pub(crate) fn lstm_cell_forward(
    pre: &mut [f64],
    w_hh: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let hs = h_prev.len();
    for (j, p) in pre.iter_mut().enumerate() {
        *p += kernels::dot(&w_hh[j * hs..(j + 1) * hs], h_prev);
    }
    for k in 0..hs {
        let i = sigmoid(pre[k]);
        let f = sigmoid(pre[hs + k]);
        let g = pre[2 * hs + k].tanh();
        let o = sigmoid(pre[3 * hs + k]);
        pre[k] = i;
        pre[hs + k] = f;
        pre[2 * hs + k] = g;
        pre[3 * hs + k] = o;
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
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
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let rg = self.params.get(id).trainable;
        self.push(Tensor::zeros(&[0]), Op::Param(id), rg)
    }

    /// Rows of an embedding table, one per index.
    pub fn gather(&mut self, table: ParamId, idx: &[usize]) -> Result<Var> {
        let t = self.params.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            check(i < rows, || format!("gather index {i} out of {rows} rows"))?;
            out.extend_from_slice(t.row(i));
        }
        let rg = self.params.get(table).trainable;
        Ok(self.push(
            Tensor::from_parts(idx.len(), cols, out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims(x);
        let (m, wk) = self.dims(w);
        check(k == wk, || {
            format!("linear: input width {k} vs weight {m}x{wk}")
        })?;
        if let Some(b) = b {
            check(self.value(b).len() == m, || {
                format!("linear: bias of {} for {m} outputs", self.value(b).len())
            })?;
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_nt(
            self.value(x).data(),
            n,
            k,
            self.value(w).data(),
            m,
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(n, m, out), Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        check(sa == sb, || format!("{what}: {sa:?} vs {sb:?}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(r, c, data), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(r, c, data), Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(r, c, data), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let rows = self.dims(parts[0]).0;
        for &p in parts {
            check(self.dims(p).0 == rows, || {
                format!("concat_cols: {} rows vs {rows}", self.dims(p).0)
            })?;
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(rows, cols, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "stack of nothing".into())?;
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            check(c == cols, || format!("stack_rows: {c} cols vs {cols}"))?;
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(rows, cols, out),
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        check(len > 0 && start + len <= r, || {
            format!("rows {start}..{} of a {r}-row matrix", start + len)
        })?;
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(len, c, data), Op::Rows { x, start }, rg))
    }

    /// Rows of `x` picked by `idx`, repeats allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        check(!idx.is_empty(), || "select_rows with no indices".into())?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            check(i < r, || {
                format!("select_rows index {i} of a {r}-row matrix")
            })?;
            data.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(idx.len(), c, data),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Unidirectional LSTM over a sequence.
    ///
    /// `xproj: [T, 4h]` is the input projection `x_t · W_ihᵀ + b` for every
    /// position; `w_hh: [4h, h]`; `c0`, `h0`: `[1, h]`. Output is `[T, h]`
    /// hidden states in input order. With `reverse` the sequence is consumed
    /// from the last position to the first.
    pub fn lstm(&mut self, xproj: Var, w_hh: Var, c0: Var, h0: Var, reverse: bool) -> Result<Var> {
        let (t_len, four_h) = self.dims(xproj);
        let (wr, hs) = self.dims(w_hh);
        check(four_h == 4 * hs && wr == four_h, || {
            format!("lstm: projection width {four_h}, recurrent weight {wr}x{hs}")
        })?;
        check(
            self.value(c0).len() == hs && self.value(h0).len() == hs,
            || {
                format!(
                    "lstm: initial state sizes {} / {} for hidden {hs}",
                    self.value(c0).len(),
                    self.value(h0).len()
                )
            },
        )?;
        let mut gates = self.value(xproj).data().to_vec();
        let mut cells = vec![0.0; t_len * hs];
        let mut tanh_cells = vec![0.0; t_len * hs];
        let mut hidden = vec![0.0; t_len * hs];
        {
            let whh = self.value(w_hh).data();
            let c0v = self.value(c0).data();
            let h0v = self.value(h0).data();
            let mut h_prev = h0v.to_vec();
            let mut c_prev = c0v.to_vec();
            for s in 0..t_len {
                let p = if reverse { t_len - 1 - s } else { s };
                let (hslice, cslice, tslice) = (
                    &mut hidden[p * hs..(p + 1) * hs],
                    &mut cells[p * hs..(p + 1) * hs],
                    &mut tanh_cells[p * hs..(p + 1) * hs],
                );
                lstm_cell_forward(
                    &mut gates[p * four_h..(p + 1) * four_h],
                    whh,
                    &h_prev,
                    &c_prev,
                    cslice,
                    tslice,
                    hslice,
                );
                h_prev.copy_from_slice(hslice);
                c_prev.copy_from_slice(cslice);
            }
        }
        let rg = self.rg(xproj) || self.rg(w_hh) || self.rg(c0) || self.rg(h0);
        Ok(self.push(
            Tensor::from_parts(t_len, hs, hidden),
            Op::Lstm {
                xproj,
                w_hh,
                c0,
                h0,
                reverse,
                cache: LstmCache {
                    hidden: hs,
                    gates,
                    cells,
                    tanh_cells,
                },
            },
            rg,
        ))
    }

    /// Summed focal loss of probabilities `p` against binary targets.
    pub fn focal_loss(&mut self, p: Var, targets: &[f64], gamma: f64) -> Result<Var> {
        check(self.value(p).len() == targets.len(), || {
            format!(
                "focal: {} scores vs {} labels",
                self.value(p).len(),
                targets.len()
            )
        })?;
        let total = self
            .value(p)
            .data()
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| focal_loss(pi, y, gamma))
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                p,
                targets: targets.to_vec(),
                gamma,
            },
            rg,
        ))
    }

    /// Summed cross-entropy of row-wise softmax(logits) against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, k) = self.dims(logits);
        check(r == targets.len(), || {
            format!("cross-entropy: {r} rows vs {} targets", targets.len())
        })?;
        let mut probs = vec![0.0; r * k];
        let mut total = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            check(y < k, || format!("target class {y} outside {k} classes"))?;
            let row = &mut probs[t * k..(t + 1) * k];
            softmax_row(self.value(logits).row(t), row);
            total -= row[y].max(PROB_EPS).ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ wᵢ · xᵢ` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        check(!terms.is_empty(), || "weighted sum of nothing".into())?;
        let (r, c) = self.dims(terms[0].0);
        let mut out = vec![0.0; r * c];
        for &(v, w) in terms {
            check(self.dims(v) == (r, c), || {
                "weighted_sum: shape mismatch".into()
            })?;
            kernels::axpy(w, self.value(v).data(), &mut out);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(r, c, out),
            Op::WeightedSum(terms.to_vec()),
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Backpropagates from a single-element `root`, adding `seed · ∂root/∂θ`
    /// into `grads` for every trainable parameter reached.
    pub fn backward_scaled(&self, root: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(vec![seed]);
        let mut sink = Sink {
            graph: self,
            node_grads: &mut node_grads,
            grads,
        };
        for i in (0..=root.0).rev() {
            let Some(g) = sink.node_grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut sink);
        }
    }

    pub fn backward(&self, root: Var, grads: &mut Gradients) {
        self.backward_scaled(root, 1.0, grads)
    }

    fn backward_node(&self, i: usize, g: &[f64], sink: &mut Sink<'_, '_>) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Gather { table, idx } => {
                let cols = out.cols();
                let dst = sink.grads.get_mut(*table);
                for (r, &ix) in idx.iter().enumerate() {
                    kernels::axpy(
                        1.0,
                        &g[r * cols..(r + 1) * cols],
                        &mut dst[ix * cols..(ix + 1) * cols],
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.dims(*x);
                let m = self.dims(*w).0;
                if let Some(b) = b {
                    if let Some(db) = sink.slot(*b) {
                        for r in 0..n {
                            kernels::axpy(1.0, &g[r * m..(r + 1) * m], db);
                        }
                    }
                }
                let wv = self.value(*w).data();
                if let Some(dx) = sink.slot(*x) {
                    kernels::matmul_nn_acc(g, n, m, wv, k, dx);
                }
                let xv = self.value(*x).data();
                if let Some(dw) = sink.slot(*w) {
                    kernels::matmul_tn_acc(g, n, m, xv, k, dw);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = sink.slot(*v) {
                        kernels::axpy(1.0, g, d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = sink.slot(*a) {
                    for ((d, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(d) = sink.slot(*b) {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = sink.slot(*x) {
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(out.data()) {
                        if *o > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = sink.slot(*x) {
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * o * (1.0 - o);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = sink.slot(*x) {
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (1.0 - o * o);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(d) = sink.slot(p) {
                        for r in 0..out.rows() {
                            kernels::axpy(
                                1.0,
                                &g[r * cols + offset..r * cols + offset + pc],
                                &mut d[r * pc..(r + 1) * pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = sink.slot(p) {
                        kernels::axpy(1.0, &g[offset..offset + len], d);
                    }
                    offset += len;
                }
            }
            Op::Rows { x, start } => {
                let c = out.cols();
                if let Some(d) = sink.slot(*x) {
                    kernels::axpy(1.0, g, &mut d[start * c..start * c + g.len()]);
                }
            }
            Op::SelectRows { x, idx } => {
                let c = out.cols();
                if let Some(d) = sink.slot(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut d[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Lstm {
                xproj,
                w_hh,
                c0,
                h0,
                reverse,
                cache,
            } => self.backward_lstm(g, *xproj, *w_hh, *c0, *h0, *reverse, cache, out, sink),
            Op::Focal { p, targets, gamma } => {
                let pv = self.value(*p).data();
                if let Some(d) = sink.slot(*p) {
                    for ((d, &pi), &y) in d.iter_mut().zip(pv).zip(targets) {
                        *d += g[0] * focal_loss_grad(pi, y, *gamma);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let k = self.dims(*logits).1;
                if let Some(d) = sink.slot(*logits) {
                    for (t, &y) in targets.iter().enumerate() {
                        let row = &probs[t * k..(t + 1) * k];
                        if row[y] < PROB_EPS {
                            continue;
                        }
                        let drow = &mut d[t * k..(t + 1) * k];
                        for (j, (dj, pj)) in drow.iter_mut().zip(row).enumerate() {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            *dj += g[0] * (pj - onehot);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(d) = sink.slot(v) {
                        kernels::axpy(w, g, d);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(d) = sink.slot(*x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &self,
        g: &[f64],
        xproj: Var,
        w_hh: Var,
        c0: Var,
        h0: Var,
        reverse: bool,
        cache: &LstmCache,
        out: &Tensor,
        sink: &mut Sink<'_, '_>,
    ) {
        let hs = cache.hidden;
        let four_h = 4 * hs;
        let t_len = out.rows();
        let whh = self.value(w_hh).data();
        let h0v = self.value(h0).data();
        let c0v = self.value(c0).data();
        let hidden = out.data();

        let mut dpre = vec![0.0; t_len * four_h];
        // Row p holds the hidden state that was fed into position p.
        let mut h_in = vec![0.0; t_len * hs];
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let pos = |s: usize| if reverse { t_len - 1 - s } else { s };

        for s in (0..t_len).rev() {
            let p = pos(s);
            let gates = &cache.gates[p * four_h..(p + 1) * four_h];
            let tanh_c = &cache.tanh_cells[p * hs..(p + 1) * hs];
            let c_prev = if s == 0 {
                c0v
            } else {
                let q = pos(s - 1);
                &cache.cells[q * hs..(q + 1) * hs]
            };
            let h_prev = if s == 0 {
                h0v
            } else {
                let q = pos(s - 1);
                &hidden[q * hs..(q + 1) * hs]
            };
            h_in[p * hs..(p + 1) * hs].copy_from_slice(h_prev);
            let dp = &mut dpre[p * four_h..(p + 1) * four_h];
            for k in 0..hs {
                let (i, f, gg, o) = (
                    gates[k],
                    gates[hs + k],
                    gates[2 * hs + k],
                    gates[3 * hs + k],
                );
                let dh = g[p * hs + k] + dh_next[k];
                let d_o = dh * tanh_c[k];
                let dc = dc_next[k] + dh * o * (1.0 - tanh_c[k] * tanh_c[k]);
                dp[k] = dc * gg * i * (1.0 - i);
                dp[hs + k] = dc * c_prev[k] * f * (1.0 - f);
                dp[2 * hs + k] = dc * i * (1.0 - gg * gg);
                dp[3 * hs + k] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            kernels::matmul_nn_acc(dp, 1, four_h, whh, hs, &mut dh_next);
        }

        if let Some(d) = sink.slot(xproj) {
            kernels::axpy(1.0, &dpre, d);
        }
        if let Some(d) = sink.slot(w_hh) {
            kernels::matmul_tn_acc(&dpre, t_len, four_h, &h_in, hs, d);
        }
        if let Some(d) = sink.slot(h0) {
            kernels::axpy(1.0, &dh_next, d);
        }
        if let Some(d) = sink.slot(c0) {
            kernels::axpy(1.0, &dc_next, d);
        }
    }
}

/// Where backward contributions land: per-node buffers for intermediate
/// values, the shared gradient store for parameters.
struct Sink<'g, 'p> {
    graph: &'g Graph<'p>,
    node_grads: &'g mut Vec<Option<Vec<f64>>>,
    grads: &'g mut Gradients,
}

impl Sink<'_, '_> {
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.graph.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(self.grads.get_mut(id)),
            _ => {
                let len = node.value.len();
                Some(
                    self.node_grads[v.0]
                        .get_or_insert_with(|| vec![0.0; len])
                        .as_mut_slice(),
                )
            }
        }
    }
}
