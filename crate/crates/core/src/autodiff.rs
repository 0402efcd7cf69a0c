//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a node
//! holding its forward value and the indices of its parents, so parents always
//! precede children and the backward sweep is a single pass in decreasing
//! index order. Tapes are cheap and meant to be rebuilt every training step.
//!
//! ```
//! use dlmpc::autodiff::Tape;
//! use dlmpc::linalg::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Matrix::row(&[2.0]));
//! let x = tape.constant(Matrix::row(&[3.0]));
//! let wx = tape.hadamard(w, x).unwrap();
//! let loss = tape.sum_sq(wx);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w)[(0, 0)], 36.0);
//! ```

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// `a + 1 * b` with `b` a single row broadcast over the rows of `a`.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Per-column `a[:, j] * scale[j]`.
    ScaleCols(usize, Vec<f64>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    SoftmaxRows(usize),
    Mse(usize, usize),
    SumSq(usize),
    Sum(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `d loss / d var`; zero for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same storage as a leaf; the distinction is only in intent.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).try_matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    /// `a * b^T`; batch layers use it with row-major samples.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).try_matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).try_add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).try_sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).try_hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a.0, b.0)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(row));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + broadcast {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut v = va.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_slice_mut(i).iter_mut().zip(vb.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a.0, row.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn scale_cols(&mut self, a: Var, scale: &[f64]) -> Result<Var> {
        let va = self.value(a);
        if scale.len() != va.cols() {
            return Err(Error::dim(
                "scale_cols",
                format!("{:?} with {} column scales", va.shape(), scale.len()),
            ));
        }
        let mut v = va.clone();
        for i in 0..v.rows() {
            for (o, s) in v.row_slice_mut(i).iter_mut().zip(scale) {
                *o *= s;
            }
        }
        Ok(self.push(v, Op::ScaleCols(a.0, scale.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::try_concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::try_concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, va.shape()),
            ));
        }
        let v = va.slice_rows(start, len);
        Ok(self.push(v, Op::SliceRows(a.0, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {}..{} of {:?}", start, start + len, va.shape()),
            ));
        }
        let v = va.slice_cols(start, len);
        Ok(self.push(v, Op::SliceCols(a.0, start)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(Error::dim("softmax_rows", "needs at least one column"));
        }
        let v = softmax_rows(va);
        Ok(self.push(v, Op::SoftmaxRows(a.0)))
    }

    /// Mean of squared differences over all entries, as a 1x1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).try_sub(self.value(b))?;
        let n = d.len().max(1) as f64;
        let v = Matrix::filled(1, 1, d.sum_sq() / n);
        Ok(self.push(v, Op::Mse(a.0, b.0)))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum_sq());
        self.push(v, Op::SumSq(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    /// Propagates adjoints from a 1x1 `loss` back to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.try_matmul_t(val(*b)).expect("matmul adjoint"));
                accumulate(grads, *b, val(*a).try_t_matmul(g).expect("matmul adjoint"));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.try_matmul(val(*b)).expect("matmul_t adjoint"));
                accumulate(grads, *b, g.try_t_matmul(val(*a)).expect("matmul_t adjoint"));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                accumulate(grads, *a, g.try_hadamard(val(*b)).expect("hadamard adjoint"));
                accumulate(grads, *b, g.try_hadamard(val(*a)).expect("hadamard adjoint"));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let mut col = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in col.as_mut_slice().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, col);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleCols(a, s) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for (o, sj) in d.row_slice_mut(r).iter_mut().zip(s) {
                        *o *= sj;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = val(*p).rows();
                    accumulate(grads, *p, g.slice_rows(start, r));
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = val(*p).cols();
                    accumulate(grads, *p, g.slice_cols(start, c));
                    start += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.set_block(*start, 0, g);
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                d.set_block(0, *start, g);
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .try_zip_map(val(*a), "relu adjoint", |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("relu adjoint");
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .try_zip_map(&node.value, "sigmoid adjoint", |gi, y| gi * y * (1.0 - y))
                    .expect("sigmoid adjoint");
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .try_zip_map(&node.value, "tanh adjoint", |gi, y| gi * (1.0 - y * y))
                    .expect("tanh adjoint");
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.try_hadamard(&node.value).expect("exp adjoint");
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (yi, gi)) in d.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Mse(a, b) => {
                let diff = val(*a).try_sub(val(*b)).expect("mse adjoint");
                let n = diff.len().max(1) as f64;
                let da = diff.scale(2.0 * g[(0, 0)] / n);
                accumulate(grads, *b, da.scale(-1.0));
                accumulate(grads, *a, da);
            }
            Op::SumSq(a) => accumulate(grads, *a, val(*a).scale(2.0 * g[(0, 0)])),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], j: usize, contribution: Matrix) {
    match &mut grads[j] {
        Some(existing) => existing.add_assign_scaled(&contribution, 1.0),
        slot @ None => *slot = Some(contribution),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
