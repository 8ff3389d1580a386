use crate::error::{Error, Result};

use super::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` returns one optional gradient per input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    RowMax(Var, Vec<usize>),
    WeightedSqErr(Var, Var, Vec<f64>),
    WeightedSum(Var, Vec<f64>),
    LstmCell {
        gates: Var,
        c_prev: Var,
        acts: Tensor,
        tanh_c: Tensor,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations over [`Tensor`]s supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Every op checks shapes up front and rejects non-finite
/// results.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::contract(format!(
        "{op}: shape mismatch {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
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

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable leaf: receives a gradient on every backward pass.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a `1 x n` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let out = Tensor::new(ta.rows(), ta.cols(), data)?;
            self.push("add", out, Op::Add(a, b), &[a, b])
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut out = ta.clone();
            for r in 0..out.rows() {
                for (o, &y) in out.row_mut(r).iter_mut().zip(tb.data()) {
                    *o += y;
                }
            }
            self.push("add", out, Op::AddRowBroadcast(a, b), &[a, b])
        } else {
            Err(shape_err("add", ta, tb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push("affine", out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            softmax_row(ta.row(r), out.row_mut(r));
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            log_softmax_row(ta.row(r), out.row_mut(r));
        }
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols: no inputs"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows: no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{end} invalid for {} columns",
                ta.cols()
            )));
        }
        let out = Tensor::from_fn(ta.rows(), end - start, |r, c| ta.get(r, start + c));
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.rows() {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{end} invalid for {} rows",
                ta.rows()
            )));
        }
        let cols = ta.cols();
        let out = Tensor::new(
            end - start,
            cols,
            ta.data()[start * cols..end * cols].to_vec(),
        )?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    /// Row `i` of the output is row `indices[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {} rows",
                ta.rows()
            )));
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(indices.len(), cols, data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        )
    }

    /// Mean over rows (axis 0), giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(Error::contract("mean_rows: no rows"));
        }
        let mut out = Tensor::zeros(1, ta.cols());
        for row in ta.row_iter() {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        let m = ta.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= m);
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    /// Maximum of each row, as an `m x 1` column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut arg = Vec::with_capacity(ta.rows());
        let mut out = Tensor::zeros(ta.rows(), 1);
        for (r, row) in ta.row_iter().enumerate() {
            let (i, &v) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, cur| {
                    if cur.1 > best.1 {
                        cur
                    } else {
                        best
                    }
                });
            arg.push(i);
            out.set(r, 0, v);
        }
        self.push("row_max", out, Op::RowMax(a, arg), &[a])
    }

    /// `sum_r w_r * sum_c (a - b)^2`, a `1 x 1` scalar.
    pub fn weighted_sq_err(&mut self, a: Var, b: Var, row_weights: &[f64]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("weighted_sq_err", ta, tb));
        }
        if row_weights.len() != ta.rows() {
            return Err(Error::contract(
                "weighted_sq_err: one weight per row required",
            ));
        }
        let mut total = 0.0;
        for (r, &w) in row_weights.iter().enumerate() {
            let s: f64 = ta
                .row(r)
                .iter()
                .zip(tb.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += w * s;
        }
        self.push(
            "weighted_sq_err",
            Tensor::scalar(total),
            Op::WeightedSqErr(a, b, row_weights.to_vec()),
            &[a, b],
        )
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.len();
        if n == 0 {
            return Err(Error::contract("mse: empty input"));
        }
        let w = vec![1.0 / n as f64; t.rows()];
        self.weighted_sq_err(a, b, &w)
    }

    /// `sum_r w_r * sum_c a`, a `1 x 1` scalar.
    pub fn weighted_sum(&mut self, a: Var, row_weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if row_weights.len() != ta.rows() {
            return Err(Error::contract("weighted_sum: one weight per row required"));
        }
        let total = ta
            .row_iter()
            .zip(row_weights)
            .map(|(row, w)| w * row.iter().sum::<f64>())
            .sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum(a, row_weights.to_vec()),
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let w = vec![1.0; self.value(a).rows()];
        self.weighted_sum(a, &w)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean: empty input"));
        }
        let w = vec![1.0 / t.len() as f64; t.rows()];
        self.weighted_sum(a, &w)
    }

    /// One LSTM step.
    ///
    /// `gates` holds pre-activations `[input | forget | cell | output]`
    /// (`B x 4H`), `c_prev` is `B x H`. Returns `[h | c]` as `B x 2H`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (tg, tc) = (self.value(gates), self.value(c_prev));
        let h = tc.cols();
        if tg.rows() != tc.rows() || tg.cols() != 4 * h {
            return Err(shape_err("lstm_cell", tg, tc));
        }
        let b = tg.rows();
        let mut acts = Tensor::zeros(b, 4 * h);
        let mut tanh_c = Tensor::zeros(b, h);
        let mut out = Tensor::zeros(b, 2 * h);
        for r in 0..b {
            let g = tg.row(r);
            let cp = tc.row(r);
            let a = acts.row_mut(r);
            for j in 0..h {
                a[j] = sigmoid(g[j]);
                a[h + j] = sigmoid(g[h + j]);
                a[2 * h + j] = g[2 * h + j].tanh();
                a[3 * h + j] = sigmoid(g[3 * h + j]);
            }
            let a = acts.row(r);
            let o = out.row_mut(r);
            let tcr = tanh_c.row_mut(r);
            for j in 0..h {
                let c = a[h + j] * cp[j] + a[j] * a[2 * h + j];
                tcr[j] = c.tanh();
                o[j] = a[3 * h + j] * tcr[j];
                o[h + j] = c;
            }
        }
        self.push(
            "lstm_cell",
            out,
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            },
            &[gates, c_prev],
        )
    }

    /// Records an externally computed op. `output` must already hold the forward value.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Allows another [`Graph::backward`] on the same tape.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset"));
        }
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward: loss must be 1x1, got {}x{}",
                lt.rows(),
                lt.cols()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let shape = node.value.shape();
                match (g, &node.op, node.requires_grad) {
                    (Some(g), _, true) => {
                        Some(Tensor::new(shape[0], shape[1], g).expect("grad shape"))
                    }
                    (None, Op::Leaf, true) => Some(Tensor::zeros(shape[0], shape[1])),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &node.value;

        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g = Tensor::new(out.rows(), out.cols(), gout.to_vec()).expect("shape");
                if needs(*a) {
                    gemm(&g, false, val(*b), true, buf(grads, nodes, *a), 1.0);
                }
                if needs(*b) {
                    gemm(val(*a), true, &g, false, buf(grads, nodes, *b), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        buf(grads, nodes, v)
                            .iter_mut()
                            .zip(gout)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if needs(*a) {
                    buf(grads, nodes, *a)
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(d, g)| *d += g);
                }
                if needs(*b) {
                    let cols = out.cols();
                    let db = buf(grads, nodes, *b);
                    for row in gout.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    buf(grads, nodes, *a)
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(d, g)| *d += g);
                }
                if needs(*b) {
                    buf(grads, nodes, *b)
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b).data();
                    buf(grads, nodes, *a)
                        .iter_mut()
                        .zip(gout.iter().zip(vb))
                        .for_each(|(d, (g, y))| *d += g * y);
                }
                if needs(*b) {
                    let va = val(*a).data();
                    buf(grads, nodes, *b)
                        .iter_mut()
                        .zip(gout.iter().zip(va))
                        .for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::Affine(a, s) => {
                buf(grads, nodes, *a)
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(d, g)| *d += s * g);
            }
            Op::Sigmoid(a) => {
                buf(grads, nodes, *a)
                    .iter_mut()
                    .zip(gout.iter().zip(out.data()))
                    .for_each(|(d, (g, y))| *d += g * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                buf(grads, nodes, *a)
                    .iter_mut()
                    .zip(gout.iter().zip(out.data()))
                    .for_each(|(d, (g, y))| *d += g * (1.0 - y * y));
            }
            Op::Exp(a) => {
                buf(grads, nodes, *a)
                    .iter_mut()
                    .zip(gout.iter().zip(out.data()))
                    .for_each(|(d, (g, y))| *d += g * y);
            }
            Op::Log(a) => {
                let x = val(*a).data();
                buf(grads, nodes, *a)
                    .iter_mut()
                    .zip(gout.iter().zip(x))
                    .for_each(|(d, (g, x))| *d += g / x);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let da = buf(grads, nodes, *a);
                for ((d, g), y) in da
                    .chunks_exact_mut(cols)
                    .zip(gout.chunks_exact(cols))
                    .zip(out.data().chunks_exact(cols))
                {
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for j in 0..cols {
                        d[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let da = buf(grads, nodes, *a);
                for ((d, g), y) in da
                    .chunks_exact_mut(cols)
                    .zip(gout.chunks_exact(cols))
                    .zip(out.data().chunks_exact(cols))
                {
                    let total: f64 = g.iter().sum();
                    for j in 0..cols {
                        d[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if needs(p) {
                        let dp = buf(grads, nodes, p);
                        for (d, g) in dp.chunks_exact_mut(pc).zip(gout.chunks_exact(cols)) {
                            d.iter_mut()
                                .zip(&g[off..off + pc])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        buf(grads, nodes, p)
                            .iter_mut()
                            .zip(&gout[off..off + len])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (cols, src_cols) = (out.cols(), val(*a).cols());
                let da = buf(grads, nodes, *a);
                for (d, g) in da.chunks_exact_mut(src_cols).zip(gout.chunks_exact(cols)) {
                    d[*start..start + cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceRows(a, start) => {
                let cols = out.cols();
                let da = buf(grads, nodes, *a);
                da[start * cols..start * cols + gout.len()]
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(d, g)| *d += g);
            }
            Op::GatherRows(a, indices) => {
                let cols = out.cols();
                let da = buf(grads, nodes, *a);
                for (&i, g) in indices.iter().zip(gout.chunks_exact(cols.max(1))) {
                    da[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::MeanRows(a) => {
                let cols = out.cols();
                let m = val(*a).rows() as f64;
                let da = buf(grads, nodes, *a);
                for d in da.chunks_exact_mut(cols) {
                    d.iter_mut().zip(gout).for_each(|(d, g)| *d += g / m);
                }
            }
            Op::RowMax(a, arg) => {
                let cols = val(*a).cols();
                let da = buf(grads, nodes, *a);
                for (r, (&i, g)) in arg.iter().zip(gout).enumerate() {
                    da[r * cols + i] += g;
                }
            }
            Op::WeightedSqErr(a, b, w) => {
                let g = gout[0];
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(i, (x, y))| 2.0 * w[i / cols.max(1)] * (x - y) * g)
                    .collect();
                if needs(*a) {
                    buf(grads, nodes, *a)
                        .iter_mut()
                        .zip(&diff)
                        .for_each(|(d, v)| *d += v);
                }
                if needs(*b) {
                    buf(grads, nodes, *b)
                        .iter_mut()
                        .zip(&diff)
                        .for_each(|(d, v)| *d -= v);
                }
            }
            Op::WeightedSum(a, w) => {
                let g = gout[0];
                let cols = val(*a).cols();
                let da = buf(grads, nodes, *a);
                for (d, wr) in da.chunks_exact_mut(cols.max(1)).zip(w) {
                    d.iter_mut().for_each(|d| *d += wr * g);
                }
            }
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            } => {
                let h = tanh_c.cols();
                let b = tanh_c.rows();
                let cp = val(*c_prev);
                let mut dgates = vec![0.0; b * 4 * h];
                let mut dcp = vec![0.0; b * h];
                for r in 0..b {
                    let a = acts.row(r);
                    let tc = tanh_c.row(r);
                    let g = &gout[r * 2 * h..(r + 1) * 2 * h];
                    let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, cc, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let dh = g[j];
                        let dc = g[h + j] + dh * o * (1.0 - tc[j] * tc[j]);
                        dg[j] = dc * cc * i * (1.0 - i);
                        dg[h + j] = dc * cp.get(r, j) * f * (1.0 - f);
                        dg[2 * h + j] = dc * i * (1.0 - cc * cc);
                        dg[3 * h + j] = dh * tc[j] * o * (1.0 - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                if needs(*gates) {
                    buf(grads, nodes, *gates)
                        .iter_mut()
                        .zip(&dgates)
                        .for_each(|(d, v)| *d += v);
                }
                if needs(*c_prev) {
                    buf(grads, nodes, *c_prev)
                        .iter_mut()
                        .zip(&dcp)
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::Custom(inputs, op) => {
                let g = Tensor::new(out.rows(), out.cols(), gout.to_vec()).expect("shape");
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let local = op.backward(&ins, out, &g);
                for (&v, lg) in inputs.iter().zip(local) {
                    if let (true, Some(lg)) = (needs(v), lg) {
                        buf(grads, nodes, v)
                            .iter_mut()
                            .zip(lg.data())
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
    }
}
