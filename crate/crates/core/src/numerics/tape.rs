//! Reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! A [`Tape`] records each primitive as it is evaluated; [`Tape::backward`]
//! walks the records in reverse and applies the primitive backward rules
//! from [`super::ops`]. Nodes built only from constants never receive a
//! gradient, which is how frozen inputs (bag embeddings) stay frozen.

use super::matrix::DenseMatrix;
use super::ops;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SegmentMeans(Var),
    Pinv { a: Var, iters: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Relu(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves, indexed by [`Var`]; `None` for constants and
/// for interior nodes (their gradients are consumed during the sweep).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization; `gamma` and `beta` are `1 x cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let value = ops::layer_norm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            ops::LAYER_NORM_EPS,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, rg))
    }

    pub fn segment_means(&mut self, x: Var, m: usize) -> Result<Var> {
        let value = ops::segment_means(self.value(x), m)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SegmentMeans(x), rg))
    }

    pub fn iterative_pinv(&mut self, a: Var, iters: usize) -> Result<Var> {
        let value = ops::iterative_pinv(self.value(a), iters)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Pinv { a, iters }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if start > end || end > rows {
            return Err(Error::arg(format!("row range {start}..{end} outside 0..{rows}")));
        }
        let value = self.value(x).slice_rows(start, end);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(x).cols();
        if start > end || end > cols {
            return Err(Error::arg(format!("column range {start}..{end} outside 0..{cols}")));
        }
        let value = self.value(x).slice_cols(start, end);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = DenseMatrix::concat_rows(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = DenseMatrix::concat_cols(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Gradients of a `1 x 1` output with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward (scalar output)", shape, (1, 1)));
        }
        self.backward_with(output, DenseMatrix::filled(1, 1, 1.0))
    }

    /// Propagates an arbitrary upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: DenseMatrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward seed", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, delta: DenseMatrix| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => {
                        *slot = Some(delta);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves keep their gradient"),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        acc(*a, ops::matmul_nt(&g, vb)?)?;
                    }
                    if self.requires_grad(*b) {
                        acc(*b, ops::matmul_tn(va, &g)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    // c = a bᵀ: ∂a = g b, ∂b = gᵀ a
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        acc(*a, ops::matmul(&g, vb)?)?;
                    }
                    if self.requires_grad(*b) {
                        acc(*b, ops::matmul_tn(&g, va)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        acc(*a, g.clone())?;
                    }
                    acc(*b, g)?;
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::Softmax(a) => acc(*a, ops::softmax_rows_backward(&node.value, &g)?)?,
                Op::LayerNorm { x, gamma, beta } => {
                    let lg = ops::layer_norm_backward(
                        self.value(*x),
                        self.value(*gamma).data(),
                        ops::LAYER_NORM_EPS,
                        &g,
                    )?;
                    acc(*x, lg.x)?;
                    acc(*gamma, DenseMatrix::row_vector(lg.gamma))?;
                    acc(*beta, DenseMatrix::row_vector(lg.beta))?;
                }
                Op::SegmentMeans(x) => {
                    acc(*x, ops::segment_means_backward(self.value(*x).rows(), &g)?)?
                }
                Op::Pinv { a, iters } => {
                    acc(*a, ops::iterative_pinv_backward(self.value(*a), *iters, &g)?)?
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut full = DenseMatrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*x, full)?;
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut full = DenseMatrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*x, full)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.requires_grad(*p) {
                            acc(*p, g.slice_rows(offset, offset + rows))?;
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if self.requires_grad(*p) {
                            acc(*p, g.slice_cols(offset, offset + cols))?;
                        }
                        offset += cols;
                    }
                }
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &g)?)?,
            }
        }
        Ok(Gradients { grads })
    }
}
