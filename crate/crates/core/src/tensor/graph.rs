// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computation record for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use super::ops::{self, LayerNormCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, with whatever the VJP needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Softmax { x: Var, temperature: f64 },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    /// `Σ_k c_k · x[i_k]` over a sparse list of (flat index, coefficient).
    Select { x: Var, terms: Vec<(usize, f64)> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Reshape(Var),
}

/// One recorded forward step.
#[derive(Debug, Clone)]
pub struct VjpNode {
    pub op: Op,
    pub value: Tensor,
    requires_grad: bool,
}

/// Append-only forward record.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<VjpNode>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; errors if `v` did not feed the root.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::Lookup(format!("node {} does not feed the differentiated root", v.0)))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .ok_or_else(|| Error::Lookup(format!("node {} does not feed the differentiated root", v.0)))
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

    pub fn node(&self, v: Var) -> &VjpNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite value produced by {op:?}")));
        }
        self.nodes.push(VjpNode { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Lookup(format!("node {} is not part of this graph", v.0)));
        }
        Ok(())
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(VjpNode { op: Op::Leaf, value: t, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(VjpNode { op: Op::Leaf, value: t, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNt(a, b), v, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n || xv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "row bias: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(Op::AddRowBias(x, bias), v, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(Op::Gelu(x), v, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            ops::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Op::LayerNorm { x, gain, bias, cache }, v, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let v = ops::softmax_rows(self.value(x), temperature)?;
        let rg = self.rg(x);
        self.push(Op::Softmax { x, temperature }, v, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.rows() {
            return Err(Error::Shape(format!("slice rows {start}..{end} of {:?}", xv.shape())));
        }
        let c = xv.cols();
        let v = Tensor::matrix(end - start, c, xv.data()[start * c..end * c].to_vec());
        let rg = self.rg(x);
        self.push(Op::SliceRows { x, start }, v, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.cols() {
            return Err(Error::Shape(format!("slice cols {start}..{end} of {:?}", xv.shape())));
        }
        let c = xv.cols();
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let v = Tensor::matrix(xv.rows(), w, data);
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start }, v, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.cols() != c {
                return Err(Error::Shape(format!("concat rows: width {c} vs {:?}", pv.shape())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::matrix(rows, c, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let r = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != r {
                return Err(Error::Shape(format!("concat cols: height {r} vs {:?}", pv.shape())));
            }
            width += pv.cols();
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(r, width, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    /// Stacks the given rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::Input("gather of no rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("row {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::matrix(ids.len(), c, data);
        let rg = self.rg(table);
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), v, rg)
    }

    /// Scalar linear functional `Σ c_k · x[i_k]` over flat indices.
    pub fn select(&mut self, x: Var, terms: &[(usize, f64)]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&(bad, _)) = terms.iter().find(|(i, _)| *i >= xv.len()) {
            return Err(Error::Input(format!("index {bad} out of range for {:?}", xv.shape())));
        }
        let v = Tensor::scalar(terms.iter().map(|&(i, c)| c * xv.data()[i]).sum());
        let rg = self.rg(x);
        self.push(Op::Select { x, terms: terms.to_vec() }, v, rg)
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_rows(self.value(logits), targets)?;
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            Tensor::scalar(loss),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(Op::Reshape(x), v, rg)
    }

    /// Gradient of a scalar `root` with respect to `wrt`.
    pub fn grad(&self, root: Var, wrt: Var) -> Result<Tensor> {
        self.check(wrt)?;
        let mut grads = self.backward(root)?;
        grads.take(wrt)
    }

    /// Reverse pass from a scalar root with unit cotangent.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let seed = Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?;
        self.backward_with(root, seed)
    }

    /// Reverse pass with an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.check(root)?;
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed {:?} for root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        // Constants never report gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, bv)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(av, g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, ops::matmul(g, bv)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(g, av)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.accumulate(grads, *a, g.mul(&bv)?)?;
                self.accumulate(grads, *b, g.mul(&av)?)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*bias) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Gelu(x) => {
                let gx = ops::gelu_vjp(self.value(*x), g)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = ops::relu_vjp(self.value(*x), g)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (gx, ggain, gbias) = ops::layer_norm_vjp(cache, self.value(*gain), g)?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *gain, ggain)?;
                self.accumulate(grads, *bias, gbias)?;
            }
            Op::Softmax { x, temperature } => {
                let gx = ops::softmax_vjp(&self.nodes[i].value, g, *temperature)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut data = vec![0.0; xv.len()];
                data[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = g.cols();
                let mut data = vec![0.0; xv.len()];
                for (r, grow) in g.data().chunks(w).enumerate() {
                    data[r * c + start..r * c + start + w].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let piece = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        self.accumulate(grads, p, piece)?;
                    }
                    offset += n;
                    debug_assert_eq!(n % c, 0);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(pv.len());
                        for row in g.data().chunks(total) {
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut data = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in data[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), data)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::Select { x, terms } => {
                let xv = self.value(*x);
                let mut data = vec![0.0; xv.len()];
                for &(idx, c) in terms {
                    data[idx] += c * g.data()[0];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gl = ops::cross_entropy_vjp(probs, targets, g.data()[0]);
                self.accumulate(grads, *logits, gl)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
        }
        Ok(())
    }
}
