//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! Values live in one contiguous arena; every node records its op and operand
//! handles. Parameter-reading ops refer to tensors of [`ModelParams`] by index,
//! and [`Tape::backward`] accumulates their gradients into a [`Gradients`].

use std::collections::BTreeMap;

use crate::model::{ModelParams, EMBEDDING, OMEGA};
use crate::tensor::{dot, matvec_into, sigmoid, softmax_in_place, Tensor};
use crate::time_encoding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    /// Row of the embedding table.
    EmbRow(u32),
    /// Row `row` of tensor `tensor` (biases are row 0 of a `1 × n` tensor).
    ParamRow { tensor: u32, row: u32 },
    MatVec { tensor: u32, x: Var },
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Dot(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Slice { a: Var, start: u32 },
    /// Scalars gathered into a vector; operands in `aux[start..start+count]`.
    Stack { start: u32, count: u32 },
    Softmax(Var),
    /// `Σ_s w_s · rows_s`; rows in `aux[start..start+count]`.
    WeightedSum { weights: Var, start: u32, count: u32 },
    /// Harmonic encoding of `t` using the model frequencies.
    TimeEncode(f64),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    off: u32,
    len: u32,
    op: Op,
}

/// Sparse-row embedding gradient plus dense gradients for every other tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embedding_rows: BTreeMap<usize, Vec<f64>>,
    /// Aligned with [`ModelParams::tensor`]; entry 0 (the embedding) stays empty.
    pub dense: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let dense = (0..params.num_tensors())
            .map(|k| {
                if k == EMBEDDING {
                    Tensor::zeros(0, 0)
                } else {
                    let t = params.tensor(k);
                    Tensor::zeros(t.rows, t.cols)
                }
            })
            .collect();
        Gradients {
            embedding_rows: BTreeMap::new(),
            dense,
        }
    }

    pub fn embedding_row_mut(&mut self, row: usize, d: usize) -> &mut Vec<f64> {
        self.embedding_rows.entry(row).or_insert_with(|| vec![0.0; d])
    }

    /// `self += other · factor`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (row, g) in &other.embedding_rows {
            let mine = self.embedding_rows.entry(*row).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in mine.iter_mut().zip(g) {
                *a += factor * b;
            }
        }
        for (mine, theirs) in self.dense.iter_mut().zip(&other.dense) {
            for (a, b) in mine.data.iter_mut().zip(&theirs.data) {
                *a += factor * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.embedding_rows.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        for t in &mut self.dense {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flat value of the gradient for element `index` of tensor `tensor`.
    pub fn get(&self, tensor: usize, index: usize, embedding_cols: usize) -> f64 {
        if tensor == EMBEDDING {
            let (row, col) = (index / embedding_cols, index % embedding_cols);
            self.embedding_rows.get(&row).map_or(0.0, |g| g[col])
        } else {
            self.dense[tensor].data[index]
        }
    }
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    values: Vec<f64>,
    aux: Vec<Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            values: Vec::with_capacity(16 * 1024),
            aux: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.aux.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = self.nodes[v.0 as usize];
        &self.values[n.off as usize..(n.off + n.len) as usize]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0 as usize].len as usize
    }

    /// Appends a node of width `len`; `fill` sees every earlier value and the new slot.
    fn push_with(&mut self, len: usize, op: Op, fill: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let off = self.values.len();
        self.values.resize(off + len, 0.0);
        let (before, out) = self.values.split_at_mut(off);
        fill(before, out);
        self.nodes.push(Node {
            off: off as u32,
            len: len as u32,
            op,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn range(&self, v: Var) -> std::ops::Range<usize> {
        let n = self.nodes[v.0 as usize];
        n.off as usize..(n.off + n.len) as usize
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        let off = self.values.len();
        self.values.extend_from_slice(values);
        self.nodes.push(Node {
            off: off as u32,
            len: values.len() as u32,
            op: Op::Const,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.push_with(len, Op::Const, |_, _| {})
    }

    pub fn embedding_row(&mut self, row: usize) -> Var {
        let params = self.params;
        let src = params.tensor(EMBEDDING).row(row);
        self.push_with(src.len(), Op::EmbRow(row as u32), |_, out| out.copy_from_slice(src))
    }

    pub fn param_row(&mut self, tensor: usize, row: usize) -> Var {
        let params = self.params;
        let src = params.tensor(tensor).row(row);
        self.push_with(
            src.len(),
            Op::ParamRow {
                tensor: tensor as u32,
                row: row as u32,
            },
            |_, out| out.copy_from_slice(src),
        )
    }

    pub fn matvec(&mut self, tensor: usize, x: Var) -> Var {
        let params = self.params;
        let w = params.tensor(tensor);
        assert_eq!(w.cols, self.len_of(x), "matvec shape mismatch for tensor {tensor}");
        let xr = self.range(x);
        self.push_with(
            w.rows,
            Op::MatVec {
                tensor: tensor as u32,
                x,
            },
            |vals, out| matvec_into(&w.data, w.rows, w.cols, &vals[xr], out),
        )
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ra, rb) = (self.range(a), self.range(b));
        let la = ra.len();
        self.push_with(la + rb.len(), Op::Concat(a, b), |vals, out| {
            out[..la].copy_from_slice(&vals[ra]);
            out[la..].copy_from_slice(&vals[rb]);
        })
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ra, rb) = (self.range(a), self.range(b));
        assert_eq!(ra.len(), rb.len(), "elementwise shape mismatch");
        self.push_with(ra.len(), op, |vals, out| {
            for ((o, x), y) in out.iter_mut().zip(&vals[ra]).zip(&vals[rb]) {
                *o = f(*x, *y);
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ra, rb) = (self.range(a), self.range(b));
        assert_eq!(ra.len(), rb.len(), "dot shape mismatch");
        self.push_with(1, Op::Dot(a, b), |vals, out| {
            out[0] = dot(&vals[ra], &vals[rb])
        })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ra = self.range(a);
        self.push_with(ra.len(), op, |vals, out| {
            for (o, x) in out.iter_mut().zip(&vals[ra]) {
                *o = f(*x);
            }
        })
    }

    pub fn scale(&mut self, a: Var, by: f64) -> Var {
        self.unary(a, Op::Scale(a, by), |x| x * by)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), crate::tensor::log_sigmoid)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ra = self.range(a);
        assert!(start + len <= ra.len(), "slice out of bounds");
        let src = ra.start + start..ra.start + start + len;
        self.push_with(
            len,
            Op::Slice {
                a,
                start: start as u32,
            },
            |vals, out| out.copy_from_slice(&vals[src]),
        )
    }

    /// Gathers scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let start = self.aux.len() as u32;
        self.aux.extend_from_slice(scalars);
        let offsets: Vec<usize> = scalars.iter().map(|v| self.nodes[v.0 as usize].off as usize).collect();
        self.push_with(
            scalars.len(),
            Op::Stack {
                start,
                count: scalars.len() as u32,
            },
            |vals, out| {
                for (o, at) in out.iter_mut().zip(offsets) {
                    *o = vals[at];
                }
            },
        )
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        self.push_with(ra.len(), Op::Softmax(a), |vals, out| {
            out.copy_from_slice(&vals[ra]);
            softmax_in_place(out);
        })
    }

    pub fn weighted_sum(&mut self, weights: Var, rows: &[Var]) -> Var {
        assert_eq!(self.len_of(weights), rows.len(), "one weight per row");
        assert!(!rows.is_empty(), "weighted sum of nothing");
        let width = self.len_of(rows[0]);
        let start = self.aux.len() as u32;
        self.aux.extend_from_slice(rows);
        let wr = self.range(weights);
        let row_ranges: Vec<_> = rows.iter().map(|r| self.range(*r)).collect();
        self.push_with(
            width,
            Op::WeightedSum {
                weights,
                start,
                count: rows.len() as u32,
            },
            |vals, out| {
                for (w, rr) in vals[wr].iter().zip(row_ranges) {
                    for (o, x) in out.iter_mut().zip(&vals[rr]) {
                        *o += w * x;
                    }
                }
            },
        )
    }

    pub fn time_encode(&mut self, t: f64) -> Var {
        let params = self.params;
        let omega = &params.tensor(OMEGA).data;
        self.push_with(2 * omega.len(), Op::TimeEncode(t), |_, out| {
            time_encoding::encode_into(omega, t, out)
        })
    }

    /// Backpropagates `d out / d ·` scaled by `seed` into `grads`.
    ///
    /// `trainable_omega = false` leaves the frequency gradient untouched.
    pub fn backward(&self, out: Var, seed: f64, grads: &mut Gradients, trainable_omega: bool) {
        let mut g = vec![0.0; self.values.len()];
        g[self.range(out)].iter_mut().for_each(|v| *v = seed);
        let params = self.params;
        for idx in (0..=out.0 as usize).rev() {
            let node = self.nodes[idx];
            let r = node.off as usize..(node.off + node.len) as usize;
            if g[r.clone()].iter().all(|v| *v == 0.0) {
                continue;
            }
            match node.op {
                Op::Const => {}
                Op::EmbRow(row) => {
                    let dst = grads.embedding_row_mut(row as usize, r.len());
                    for (a, b) in dst.iter_mut().zip(&g[r]) {
                        *a += b;
                    }
                }
                Op::ParamRow { tensor, row } => {
                    let dst = grads.dense[tensor as usize].row_mut(row as usize);
                    for (a, b) in dst.iter_mut().zip(&g[r]) {
                        *a += b;
                    }
                }
                Op::MatVec { tensor, x } => {
                    let w = params.tensor(tensor as usize);
                    let xr = self.range(x);
                    let dw = &mut grads.dense[tensor as usize].data;
                    for (i, gi) in r.clone().enumerate() {
                        let go = g[gi];
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &w.data[i * w.cols..(i + 1) * w.cols];
                        let dwrow = &mut dw[i * w.cols..(i + 1) * w.cols];
                        for c in 0..w.cols {
                            dwrow[c] += go * self.values[xr.start + c];
                            g[xr.start + c] += go * wrow[c];
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let (ra, rb) = (self.range(a), self.range(b));
                    let la = ra.len();
                    for k in 0..la {
                        g[ra.start + k] += g[r.start + k];
                    }
                    for k in 0..rb.len() {
                        g[rb.start + k] += g[r.start + la + k];
                    }
                }
                Op::Add(a, b) => {
                    let (ra, rb) = (self.range(a), self.range(b));
                    for k in 0..r.len() {
                        let go = g[r.start + k];
                        g[ra.start + k] += go;
                        g[rb.start + k] += go;
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (self.range(a), self.range(b));
                    for k in 0..r.len() {
                        let go = g[r.start + k];
                        let (va, vb) = (self.values[ra.start + k], self.values[rb.start + k]);
                        g[ra.start + k] += go * vb;
                        g[rb.start + k] += go * va;
                    }
                }
                Op::Dot(a, b) => {
                    let go = g[r.start];
                    let (ra, rb) = (self.range(a), self.range(b));
                    for k in 0..ra.len() {
                        let (va, vb) = (self.values[ra.start + k], self.values[rb.start + k]);
                        g[ra.start + k] += go * vb;
                        g[rb.start + k] += go * va;
                    }
                }
                Op::Scale(a, by) => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        g[ra.start + k] += by * g[r.start + k];
                    }
                }
                Op::Relu(a) => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        if self.values[ra.start + k] > 0.0 {
                            g[ra.start + k] += g[r.start + k];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        let y = self.values[r.start + k];
                        g[ra.start + k] += g[r.start + k] * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        let y = self.values[r.start + k];
                        g[ra.start + k] += g[r.start + k] * (1.0 - y * y);
                    }
                }
                Op::LogSigmoid(a) => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        let x = self.values[ra.start + k];
                        g[ra.start + k] += g[r.start + k] * sigmoid(-x);
                    }
                }
                Op::Slice { a, start } => {
                    let ra = self.range(a);
                    for k in 0..r.len() {
                        g[ra.start + start as usize + k] += g[r.start + k];
                    }
                }
                Op::Stack { start, count } => {
                    for k in 0..count as usize {
                        let v = self.aux[start as usize + k];
                        let at = self.nodes[v.0 as usize].off as usize;
                        g[at] += g[r.start + k];
                    }
                }
                Op::Softmax(a) => {
                    let ra = self.range(a);
                    let y = &self.values[r.clone()];
                    let gy: f64 = y.iter().zip(&g[r.clone()]).map(|(y, g)| y * g).sum();
                    for k in 0..r.len() {
                        g[ra.start + k] += y[k] * (g[r.start + k] - gy);
                    }
                }
                Op::WeightedSum { weights, start, count } => {
                    let wr = self.range(weights);
                    for k in 0..count as usize {
                        let row = self.range(self.aux[start as usize + k]);
                        let w = self.values[wr.start + k];
                        let mut gw = 0.0;
                        for c in 0..r.len() {
                            let go = g[r.start + c];
                            gw += go * self.values[row.start + c];
                            g[row.start + c] += w * go;
                        }
                        g[wr.start + k] += gw;
                    }
                }
                Op::TimeEncode(t) => {
                    if trainable_omega {
                        let omega = &params.tensor(OMEGA).data;
                        let c = time_encoding::scale(r.len());
                        let dst = &mut grads.dense[OMEGA].data;
                        for (k, w) in omega.iter().enumerate() {
                            let (s, co) = (w * t).sin_cos();
                            dst[k] += g[r.start + 2 * k] * (-c * t * s) + g[r.start + 2 * k + 1] * (c * t * co);
                        }
                    }
                }
            }
        }
    }
}
