//! Reverse-mode differentiation over dense matrices.
//!
//! Operations are evaluated eagerly as they are recorded; [`Graph::backward`]
//! then walks the record in reverse and accumulates vector-Jacobian products.
//! A graph is built per mini-batch and thrown away afterwards.

use super::matrix::{
    matmul, matmul_nt, matmul_tn, sigmoid_scalar, softmax_rows, softplus, Matrix2D,
};
use crate::error::{LemofError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Unfold1d {
        src: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BceWithLogits {
        logit: NodeId,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix2D,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Matrix2D>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix2D> {
        self.grads.get(id.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Matrix2D, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix2D {
        &self.nodes[id.0].value
    }

    /// Leaf node (input or parameter).
    pub fn leaf(&mut self, value: Matrix2D) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A new leaf holding a copy of `id`'s value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(LemofError::dim("matmul_nt", av.shape(), bv.shape()));
        }
        let v = matmul_nt(av, bv);
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    /// `a + bias`, with the 1×c `bias` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(LemofError::dim("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Mean over the token (row) axis.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(LemofError::Data("mean over an empty token sequence".into()));
        }
        let v = av.mean_rows();
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| LemofError::Data("concat of zero parts".into()))?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(LemofError::dim("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Matrix2D::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                offset += v.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| LemofError::Data("sum of zero terms".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p))?;
        }
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    /// Sliding-window unfold along the token axis with zero padding on both
    /// sides. Output row `t` holds the `kernel` input rows starting at
    /// `t * stride - pad`, flattened token-major.
    pub fn unfold1d(&mut self, src: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let x = self.value(src);
        let (len, ch) = x.shape();
        let out_len = unfold_len(len, kernel, stride, pad);
        let mut out = Matrix2D::zeros(out_len, kernel * ch);
        for t in 0..out_len {
            let row = out.row_mut(t);
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                row[j * ch..(j + 1) * ch].copy_from_slice(x.row(pos as usize));
            }
        }
        self.push(
            out,
            Op::Unfold1d {
                src,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Binary cross-entropy of a 1×1 logit against a target in [0, 1].
    pub fn bce_with_logits(&mut self, logit: NodeId, target: f64) -> Result<NodeId> {
        let z = self.value(logit);
        if z.shape() != (1, 1) {
            return Err(LemofError::dim("bce_with_logits", z.shape(), (1, 1)));
        }
        let z = z.item();
        let loss = softplus(z) - target * z;
        Ok(self.push(Matrix2D::scalar(loss), Op::BceWithLogits { logit, target }))
    }

    /// Reverse pass from a 1×1 `output`.
    pub fn backward(&self, output: NodeId) -> Gradients {
        let mut grads: Vec<Option<Matrix2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix2D::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b));
                    let db = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = matmul(&g, self.value(*b)).expect("shapes recorded forward");
                    let db = matmul_tn(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.mean_rows().scale(g.rows() as f64));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut d = g;
                    for r in 0..d.rows() {
                        let sr = s.row(r);
                        let dot: f64 = d.row(r).iter().zip(sr).map(|(x, y)| x * y).sum();
                        for (dv, &sv) in d.row_mut(r).iter_mut().zip(sr) {
                            *dv = sv * (*dv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let inv = 1.0 / rows as f64;
                    let mut d = Matrix2D::zeros(rows, g.cols());
                    for r in 0..rows {
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *dv = gv * inv;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut d = Matrix2D::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
                Op::Unfold1d {
                    src,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (len, ch) = self.value(*src).shape();
                    let mut d = Matrix2D::zeros(len, ch);
                    for t in 0..g.rows() {
                        let grow = g.row(t);
                        for j in 0..*kernel {
                            let pos = (t * stride + j) as isize - *pad as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            for (dv, gv) in d
                                .row_mut(pos as usize)
                                .iter_mut()
                                .zip(&grow[j * ch..(j + 1) * ch])
                            {
                                *dv += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::BceWithLogits { logit, target } => {
                    let z = self.value(*logit).item();
                    let d = Matrix2D::scalar(g.item() * (sigmoid_scalar(z) - target));
                    accumulate(&mut grads, *logit, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix2D>], id: NodeId, d: Matrix2D) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .add_assign(&d)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(d),
    }
}

/// Number of output positions of a strided 1-D window with symmetric padding.
pub fn unfold_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}
