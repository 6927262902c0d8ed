//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value and enough context to compute the vector-Jacobian product.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only reference earlier nodes.
//!
//! ```
//! use isr_core::numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
//! let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap());
//! let loss = w.matmul(x).unwrap().sum_all();
//! let grads = tape.backward(loss).unwrap();
//! // d/dW sum(W x) = 1 x^T
//! assert_eq!(grads.get(w).data(), &[1.0, -1.0, 1.0, -1.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Records operations for one forward pass.
///
/// A tape is single-threaded and cheap to create; build one per training
/// step or per decoding step and drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    MeanRows(usize),
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// contribute to the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = self.needs(inputs);
        self.push(value, op, requires_grad)
    }

    /// Propagates gradients from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_nt(g.data(), bv.data(), &mut ga, m, n, k);
                        acc(a, Tensor::new(vec![m, k], ga).unwrap());
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_tn(av.data(), g.data(), &mut gb, m, k, n);
                        acc(b, Tensor::new(vec![k, n], gb).unwrap());
                    }
                }
                &Op::MatMulNt(a, b) => {
                    // out[m,n] = a[m,k] b[n,k]^T
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    if nodes[a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul(g.data(), bv.data(), &mut ga, m, n, k);
                        acc(a, Tensor::new(vec![m, k], ga).unwrap());
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![0.0; n * k];
                        kernels::matmul_tn(g.data(), av.data(), &mut gb, m, n, k);
                        acc(b, Tensor::new(vec![n, k], gb).unwrap());
                    }
                }
                &Op::Transpose(a) => acc(a, g.transpose()),
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Sub(a, b) => {
                    acc(b, g.map(|v| -v));
                    acc(a, g);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    acc(a, zip_with(&g, bv, |x, y| x * y));
                    acc(b, zip_with(&g, av, |x, y| x * y));
                }
                &Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(b, Tensor::new(nodes[b].value.shape().to_vec(), gb).unwrap());
                    acc(a, g);
                }
                &Op::Scale(a, c) => acc(a, g.map(|v| v * c)),
                &Op::ScaleBy(a, s) => {
                    let av = &nodes[a].value;
                    let sv = nodes[s].value.item();
                    let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    acc(s, Tensor::new(nodes[s].value.shape().to_vec(), vec![gs]).unwrap());
                    acc(a, g.map(|v| v * sv));
                }
                &Op::Relu(a) => {
                    let av = &nodes[a].value;
                    acc(a, zip_with(&g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(a, zip_with(&g, y, |gv, s| gv * s * (1.0 - s)));
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let mut out = vec![0.0; y.len()];
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            out[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(a, Tensor::new(y.shape().to_vec(), out).unwrap());
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &nodes[*gamma].value;
                    let d = g.cols();
                    let rows = g.rows();
                    let mut gg = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                            gbeta[j] += gr[j];
                            let dxh = gr[j] * gv.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let s = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            gx[r * d + j] = s * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    acc(*gamma, Tensor::new(gv.shape().to_vec(), gg).unwrap());
                    acc(
                        *beta,
                        Tensor::new(nodes[*beta].value.shape().to_vec(), gbeta).unwrap(),
                    );
                    acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        let piece = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        acc(p, Tensor::new(nodes[p].value.shape().to_vec(), piece).unwrap());
                    }
                    debug_assert_eq!(offset % c, 0);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut col0 = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        let mut piece = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            piece.extend_from_slice(&g.row(r)[col0..col0 + pc]);
                        }
                        col0 += pc;
                        acc(p, Tensor::new(nodes[p].value.shape().to_vec(), piece).unwrap());
                    }
                }
                &Op::SliceRows(a, start) => {
                    let src = &nodes[a].value;
                    let mut full = Tensor::zeros(src.shape());
                    let c = src.cols();
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(a, full);
                }
                &Op::SliceCols(a, start) => {
                    let src = &nodes[a].value;
                    let mut full = Tensor::zeros(src.shape());
                    let gc = g.cols();
                    for r in 0..g.rows() {
                        full.row_mut(r)[start..start + gc].copy_from_slice(g.row(r));
                    }
                    acc(a, full);
                }
                Op::GatherRows(a, ids) => {
                    let src = &nodes[*a].value;
                    let mut full = Tensor::zeros(src.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in full.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, full);
                }
                &Op::SumAll(a) => {
                    acc(a, Tensor::full(nodes[a].value.shape(), g.item()));
                }
                &Op::MeanRows(a) => {
                    let src = &nodes[a].value;
                    let n = src.rows() as f64;
                    let mut full = Tensor::zeros(src.shape());
                    for r in 0..src.rows() {
                        for (o, v) in full.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v / n;
                        }
                    }
                    acc(a, full);
                }
                &Op::Reshape(a) => {
                    acc(a, g.reshape(nodes[a].value.shape()).unwrap());
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = &nodes[*logits].value;
                    let c = lv.cols();
                    let scale = g.item();
                    let mut out = vec![0.0; lv.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            out[r * c + j] = scale * probs[r * c + j];
                        }
                        out[r * c + t] -= scale;
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), out).unwrap());
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Numerically stable softmax of one row; `allowed` entries that are false
/// come out exactly zero.
pub(crate) fn softmax_row(x: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    true
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check(&self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other);
        let out = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix("matmul_nt", &a)?;
        let (n, k2) = matrix("matmul_nt", &b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self
            .tape
            .record(out, Op::MatMulNt(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.record(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other);
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x + y);
        Ok(self
            .tape
            .record(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other);
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x - y);
        Ok(self
            .tape
            .record(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other);
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x * y);
        Ok(self
            .tape
            .record(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.check(bias);
        let (a, b) = (self.value(), bias.value());
        if b.len() != a.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*a).clone();
        let c = a.cols();
        for r in 0..a.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        debug_assert_eq!(out.cols(), c);
        Ok(self
            .tape
            .record(out, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.record(out, Op::Scale(self.id, c), &[self.id])
    }

    /// Multiplies every entry by a scalar node.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.check(s);
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let out = self.value().map(|v| v * k);
        Ok(self
            .tape
            .record(out, Op::ScaleBy(self.id, s.id), &[self.id, s.id]))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.record(out, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.tape.record(out, Op::Sigmoid(self.id), &[self.id])
    }

    /// Softmax over the last axis with an optional mask. The mask has either
    /// one entry per column (shared by all rows) or one entry per element;
    /// `true` marks entries that take part.
    pub fn softmax(self, allowed: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = allowed {
            if m.len() != cols && m.len() != x.len() {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    lhs: x.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let ok = softmax_row(
                x.row(r),
                |j| match allowed {
                    None => true,
                    Some(m) if m.len() == cols => m[j],
                    Some(m) => m[r * cols + j],
                },
                &mut out[r * cols..(r + 1) * cols],
            );
            if !ok {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, Op::Softmax(self.id), &[self.id]))
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.check(gamma);
        self.check(beta);
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = x.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let tape = first.tape;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.check(*p);
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(tape.record(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let tape = first.tape;
        let rows = first.value().rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.check(*p);
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(tape.record(out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        assert!(start < end && end <= x.rows(), "row slice {start}..{end} of {}", x.rows());
        let c = x.cols();
        let out = Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec()).unwrap();
        self.tape.record(out, Op::SliceRows(self.id, start), &[self.id])
    }

    pub fn row(self, i: usize) -> Var<'t> {
        self.slice_rows(i, i + 1)
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        assert!(start < end && end <= x.cols(), "column slice {start}..{end} of {}", x.cols());
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::new(vec![x.rows(), end - start], data).unwrap();
        self.tape.record(out, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Selects rows by index (embedding lookup when `self` is a table).
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.rows();
        if ids.is_empty() {
            return Err(Error::Input("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * x.cols());
        for &id in ids {
            if id >= rows {
                return Err(Error::Lookup { id, size: rows });
            }
            data.extend_from_slice(x.row(id));
        }
        let out = Tensor::new(vec![ids.len(), x.cols()], data)?;
        Ok(self
            .tape
            .record(out, Op::GatherRows(self.id, ids.to_vec()), &[self.id]))
    }

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::SumAll(self.id), &[self.id])
    }

    /// Mean over the first axis, as a `[1, cols]` matrix.
    pub fn mean_rows(self) -> Var<'t> {
        let out = self.value().avgpool_axis0();
        self.tape.record(out, Op::MeanRows(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `self`. Rows whose target is `None` are skipped.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = x.row(r);
            softmax_row(row, |_| true, &mut probs[r * cols..(r + 1) * cols]);
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::Lookup { id: t, size: cols });
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let y = tape.constant(m(&[&[0.0, 0.0, 0.0]])).softmax(None).unwrap();
        for v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(m(&[&[1000.0, 0.0]])).softmax(None).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 1.0).abs() < 1e-12 && v.data()[1] >= 0.0 && v.is_finite());
    }

    #[test]
    fn softmax_mask_zeroes_and_rejects_empty_rows() {
        let tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 9.0]]));
        let y = x.softmax(Some(&[true, true, false])).unwrap();
        let v = y.value();
        assert_eq!(v.at(0, 2), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert!((v.row(1)[0] - 0.5).abs() < 1e-15);
        assert!(matches!(
            x.softmax(Some(&[false; 3])),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let y = tape
            .constant(m(&[&[5.0, 5.0, 5.0, 5.0]]))
            .layer_norm(ones, zeros, 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let sevens = tape.constant(Tensor::full(&[4], 7.0));
        let y = tape
            .constant(m(&[&[1.0, -3.0, 2.5, 8.0]]))
            .layer_norm(zeros, sevens, 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn layer_norm_hand_normalisation() {
        // [1,2,3]: mean 2, population variance 2/3
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.constant(m(&[&[1.0, 2.0, 3.0]])).layer_norm(g, b, 0.0).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, e) in y.value().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_detached_and_non_scalar() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        assert!(matches!(tape.backward(c.scale(3.0)), Err(Error::Detached)));
        let p = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let tape = Tape::new();
        let used = tape.param(m(&[&[1.0, 2.0]]));
        let unused = tape.param(m(&[&[3.0]]));
        let grads = tape.backward(used.sum_all()).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0]);
        assert_eq!(grads.get(used).data(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let tape = Tape::new();
        let t = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.gather_rows(&[3]), Err(Error::Lookup { id: 3, size: 3 })));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[3, 5]));
        let loss = logits.cross_entropy(&[Some(1), None, Some(4)]).unwrap();
        assert!((loss.value().item() - 2.0 * 5f64.ln()).abs() < 1e-12);
    }
}
