//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound
//! lazily from a borrowed [`ParamStore`]; [`Graph::backward`] returns one
//! gradient matrix per stored parameter.

use super::matrix::{self, matmul, matmul_nt, matmul_tn, softmax_in_place, Matrix};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
/// Denominators below this make [`Graph::share_or_half`] fall back to 0.5.
pub const SHARE_ZERO_THRESHOLD: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm(Var, Vec<f64>),
    RowAbsSum(Var),
    ShareOrHalf(Var, Var),
    ConcatCols(Vec<Var>),
    ShiftRows(Var, isize),
    Gather(Var, Vec<usize>),
    CrossEntropy(Var, usize),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            bound: vec![None; store.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Binds a parameter on first use; later calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, true);
        self.bound[id.0] = Some(v);
        v
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = broadcast_row(self.value(a), self.value(row), "add_row", |x, y| x + y)?;
        let g = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), g))
    }

    /// Multiplies every row of an r×c matrix by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = broadcast_row(self.value(a), self.value(row), "mul_row", |x, y| x * y)?;
        let g = self.grad_of(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), g))
    }

    /// Scales row `r` of an r×c matrix by entry `r` of an r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(col));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(Error::shape("mul_col", am.shape_str(), cm.shape_str()));
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            let s = cm.get(r, 0);
            for v in value.row_mut(r) {
                *v *= s;
            }
        }
        let g = self.grad_of(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `factor · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| factor * v + shift);
        let g = self.grad_of(&[a]);
        self.push(value, Op::Affine(a, factor), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = matrix::softmax_rows(self.value(a));
        let g = self.grad_of(&[a]);
        self.push(value, Op::SoftmaxRows(a), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let g = self.grad_of(&[a]);
        self.push(value, Op::Gelu(a), g)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = value.cols() as f64;
        let mut inv_std = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.grad_of(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), g)
    }

    /// L1 norm of each row, as an r×1 column.
    pub fn row_abs_sum(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let value = Matrix::from_fn(am.rows(), 1, |r, _| am.row(r).iter().map(|v| v.abs()).sum());
        let g = self.grad_of(&[a]);
        self.push(value, Op::RowAbsSum(a), g)
    }

    /// Elementwise `a / (a + b)` for non-negative inputs, or 0.5 where the
    /// denominator is below [`SHARE_ZERO_THRESHOLD`].
    pub fn share_or_half(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "share_or_half", share_or_half)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::ShareOrHalf(a, b), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "0 parts", "at least 1"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(first).shape_str(), m.shape_str()));
            }
            cols += m.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Row `r` of the output is row `r - offset` of the input, zero outside.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let am = self.value(a);
        let mut value = Matrix::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            let src = r as isize - offset;
            if src >= 0 && (src as usize) < am.rows() {
                value.row_mut(r).copy_from_slice(am.row(src as usize));
            }
        }
        let g = self.grad_of(&[a]);
        self.push(value, Op::ShiftRows(a, offset), g)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tm = self.value(table);
        if ids.is_empty() {
            return Err(Error::shape("gather", tm.shape_str(), "0 ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tm.rows()) {
            return Err(Error::shape("gather", tm.shape_str(), format!("id {bad}")));
        }
        let mut value = Matrix::zeros(ids.len(), tm.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tm.row(id));
        }
        let g = self.grad_of(&[table]);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), g))
    }

    /// Cross-entropy of a 1×C logit row against `label`, as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lm = self.value(logits);
        if lm.rows() != 1 {
            return Err(Error::shape("cross_entropy", lm.shape_str(), "1xC"));
        }
        let loss = matrix::cross_entropy(lm.row(0), label)?;
        let g = self.grad_of(&[logits]);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::CrossEntropy(logits, label), g))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(value, Op::SumAll(a), g)
    }

    /// `x · w + b` with `b` a 1×d_out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Backpropagates from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.value(loss).shape_str(), "1x1"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(up);
                }
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let da = matmul_nt(&up, self.value(*b))?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        let db = matmul_tn(self.value(*a), &up)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.wants(*a) {
                        let da = matmul(&up, self.value(*b))?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        let db = matmul_tn(&up, self.value(*a))?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, up.clone());
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads, *b, up);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        let da = up.zip_map(self.value(*b), "mul", |g, y| g * y)?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        let db = up.zip_map(self.value(*a), "mul", |g, x| g * x)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.wants(*row) {
                        let mut dr = Matrix::zeros(1, up.cols());
                        for r in 0..up.rows() {
                            for (d, g) in dr.row_mut(0).iter_mut().zip(up.row(r)) {
                                *d += g;
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, up);
                    }
                }
                Op::MulRow(a, row) => {
                    let (am, rm) = (self.value(*a), self.value(*row));
                    if self.wants(*row) {
                        let mut dr = Matrix::zeros(1, up.cols());
                        for r in 0..up.rows() {
                            let d = dr.row_mut(0);
                            for c in 0..up.cols() {
                                d[c] += up.get(r, c) * am.get(r, c);
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.wants(*a) {
                        let da = broadcast_row(&up, rm, "mul_row", |g, y| g * y)?;
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::MulCol(a, col) => {
                    let (am, cm) = (self.value(*a), self.value(*col));
                    if self.wants(*col) {
                        let dc = Matrix::from_fn(up.rows(), 1, |r, _| {
                            up.row(r).iter().zip(am.row(r)).map(|(g, x)| g * x).sum()
                        });
                        accumulate(&mut grads, *col, dc);
                    }
                    if self.wants(*a) {
                        let da = Matrix::from_fn(up.rows(), up.cols(), |r, c| up.get(r, c) * cm.get(r, 0));
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Affine(a, factor) => {
                    accumulate(&mut grads, *a, up.scale(*factor));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(up.row(r)).map(|(p, g)| p * g).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (up.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = up.zip_map(self.value(*a), "gelu", |g, x| g * gelu_derivative(x))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let g_mean = up.row(r).iter().sum::<f64>() / n;
                        let gy_mean = up.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum::<f64>() / n;
                        for c in 0..y.cols() {
                            da.set(r, c, inv_std[r] * (up.get(r, c) - g_mean - y.get(r, c) * gy_mean));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowAbsSum(a) => {
                    let am = self.value(*a);
                    let da = Matrix::from_fn(am.rows(), am.cols(), |r, c| up.get(r, 0) * sign(am.get(r, c)));
                    accumulate(&mut grads, *a, da);
                }
                Op::ShareOrHalf(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    let mut db = Matrix::zeros(am.rows(), am.cols());
                    for idx in 0..am.data().len() {
                        let (x, y) = (am.data()[idx], bm.data()[idx]);
                        let s = x + y;
                        if s >= SHARE_ZERO_THRESHOLD {
                            let g = up.data()[idx];
                            da.data_mut()[idx] = g * y / (s * s);
                            db.data_mut()[idx] = -g * x / (s * s);
                        }
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        if self.wants(p) {
                            let dp = Matrix::from_fn(up.rows(), width, |r, c| up.get(r, offset + c));
                            accumulate(&mut grads, p, dp);
                        }
                        offset += width;
                    }
                }
                Op::ShiftRows(a, offset) => {
                    let rows = up.rows();
                    let mut da = Matrix::zeros(rows, up.cols());
                    for r in 0..rows {
                        let dst = r as isize + offset;
                        if dst >= 0 && (dst as usize) < rows {
                            da.row_mut(r).copy_from_slice(up.row(dst as usize));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(table, ids) => {
                    let tm = self.value(*table);
                    let mut dt = Matrix::zeros(tm.rows(), tm.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, g) in dt.row_mut(id).iter_mut().zip(up.row(i)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy(logits, label) => {
                    let g = up.data()[0];
                    let mut probs = self.value(*logits).clone();
                    softmax_in_place(probs.row_mut(0));
                    let row = probs.row_mut(0);
                    row[*label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                    accumulate(&mut grads, *logits, probs);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, up.data()[0]));
                }
            }
        }

        let out = self
            .store
            .iter()
            .map(|(id, _, m)| match self.bound[id.0] {
                Some(v) => grads[v.0].take().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())),
                None => Matrix::zeros(m.rows(), m.cols()),
            })
            .collect();
        Ok(Gradients::from_vec(out))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_row(a: &Matrix, row: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::shape(op, a.shape_str(), row.shape_str()));
    }
    Ok(Matrix::from_fn(a.rows(), a.cols(), |r, c| f(a.get(r, c), row.get(0, c))))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn share_or_half(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s < SHARE_ZERO_THRESHOLD {
        0.5
    } else {
        a / s
    }
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
