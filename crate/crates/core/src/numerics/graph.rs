//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! reverse sweep is a single backwards walk over it.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    /// Right operand repeats over the left operand's leading axes.
    Rhs,
    /// Left operand repeats over the right operand's leading axes.
    Lhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    MatMul { a: usize, b: usize, trans_b: bool },
    Relu(usize),
    Softmax(usize),
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Single-threaded, rebuilt per forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`; exact zeros when the
    /// node is not connected to the output.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields all-zero gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        for v in &vals {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        for v in &vals {
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        if out_val.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: out_val.shape().to_vec(),
                rhs: vec![],
            });
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0])?);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g` over the leading repetitions down to `n_small` elements.
fn reduce_broadcast(g: &[f64], n_small: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n_small];
    for chunk in g.chunks(n_small.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let ga = match bc {
                Bcast::Lhs => reduce_broadcast(g.data(), va.len(), va.shape()),
                _ => g.clone(),
            };
            let mut gb = match bc {
                Bcast::Rhs => reduce_broadcast(g.data(), vb.len(), vb.shape()),
                _ => g.clone(),
            };
            if sign < 0.0 {
                gb = gb.scale(-1.0);
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Mul(a, b, bc) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (na, nb) = (va.len().max(1), vb.len().max(1));
            if nodes[*a].needs_grad {
                // d/da = g * b (b broadcast if smaller)
                let full: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * vb.data()[i % nb])
                    .collect();
                let ga = if *bc == Bcast::Lhs {
                    reduce_broadcast(&full, va.len(), va.shape())
                } else {
                    Tensor::new(va.shape().to_vec(), full).expect("mul grad")
                };
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].needs_grad {
                let full: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * va.data()[i % na])
                    .collect();
                let gb = if *bc == Bcast::Rhs {
                    reduce_broadcast(&full, vb.len(), vb.shape())
                } else {
                    Tensor::new(vb.shape().to_vec(), full).expect("mul grad")
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = g.shape()[1];
            if nodes[*a].needs_grad {
                // dA = G · B^T   (or G · B when B was used transposed)
                let mut ga = vec![0.0; m * k];
                if *trans_b {
                    // B is n x k
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (k, 1), &mut ga, 0.0);
                } else {
                    // B is k x n, B^T strides
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), &mut ga, 0.0);
                }
                accumulate(grads, nodes, *a, Tensor::new(vec![m, k], ga).expect("dA"));
            }
            if nodes[*b].needs_grad {
                if *trans_b {
                    // C = A B^T, B is n x k: dB = G^T · A
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), va.data(), (k, 1), &mut gb, 0.0);
                    accumulate(grads, nodes, *b, Tensor::new(vec![n, k], gb).expect("dB"));
                } else {
                    // dB = A^T · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), &mut gb, 0.0);
                    accumulate(grads, nodes, *b, Tensor::new(vec![k, n], gb).expect("dB"));
                }
            }
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            let data = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), data).expect("relu"));
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    out[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(y.shape().to_vec(), out).expect("softmax"));
        }
        Op::LayerNorm { a, inv_std } => {
            let y = &node.value;
            let c = y.cols();
            let cf = c as f64;
            let mut out = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let mean_g: f64 = gr.iter().sum::<f64>() / cf;
                let mean_gy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cf;
                for j in 0..c {
                    out[r * c + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(y.shape().to_vec(), out).expect("ln"));
        }
        Op::Sum(a) | Op::Mean(a) => {
            let va = &nodes[*a].value;
            let scale = if matches!(node.op, Op::Mean(_)) {
                1.0 / va.len().max(1) as f64
            } else {
                1.0
            };
            accumulate(grads, nodes, *a, Tensor::full(va.shape(), g.item() * scale));
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let vp = &nodes[p].value;
                let c = vp.cols();
                if nodes[p].needs_grad {
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(vp.shape().to_vec(), data).expect("cc"));
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let vp = &nodes[p].value;
                let r = vp.rows();
                if nodes[p].needs_grad {
                    let data = g.data()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, nodes, p, Tensor::new(vp.shape().to_vec(), data).expect("cr"));
                }
                offset += r;
            }
        }
        Op::SliceCols { a, start } => {
            let va = &nodes[*a].value;
            let (rows, full) = (va.rows(), va.cols());
            let w = g.cols();
            let mut data = vec![0.0; va.len()];
            for r in 0..rows {
                data[r * full + start..r * full + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), data).expect("sc"));
        }
        Op::SliceRows { a, start } => {
            let va = &nodes[*a].value;
            let c = va.cols();
            let mut data = vec![0.0; va.len()];
            data[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), data).expect("sr"));
        }
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        Ok(Bcast::None)
    } else if sa.len() > sb.len() && sa.ends_with(sb) {
        Ok(Bcast::Rhs)
    } else if sb.len() > sa.len() && sb.ends_with(sa) {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (big_shape, n) = match bc {
        Bcast::Lhs => (b.shape().to_vec(), b.len()),
        _ => (a.shape().to_vec(), a.len()),
    };
    let (na, nb) = (a.len().max(1), b.len().max(1));
    let data = (0..n).map(|i| f(a.data()[i % na], b.data()[i % nb])).collect();
    Tensor::new(big_shape, data).expect("binary shape")
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    /// Borrow of the node value without bumping the refcount.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.graph.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|v| v.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|v| v.cols())
    }

    fn needs(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn bin(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'g>> {
        let (va, vb) = (self.value(), other.value());
        let bc = broadcast_kind(name, &va, &vb)?;
        let out = binary(&va, &vb, bc, f);
        let needs = self.needs() || other.needs();
        Ok(self.graph.push(out, mk(self.id, other.id, bc), needs))
    }

    /// Elementwise sum; `other` may be smaller and broadcast over leading axes.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "mul", |a, b| a * b, Op::Mul)
    }

    fn mm(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let (va, vb) = (self.value(), other.value());
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let mismatch = || Error::ShapeMismatch {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (n, kb) = if trans_b {
            (vb.shape()[0], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[0])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, va.data(), (k, 1), vb.data(), b_strides, &mut out, 0.0);
        let needs = self.needs() || other.needs();
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.graph.push(
            t,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            needs,
        ))
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.mm(other, false)
    }

    /// `self · otherᵀ` for 2-D operands.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.mm(other, true)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs();
        self.graph.push(out, Op::Relu(self.id), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let v = self.value();
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let needs = self.needs();
        let t = Tensor::new(v.shape().to_vec(), out).expect("softmax");
        self.graph.push(t, Op::Softmax(self.id), needs)
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(self) -> Var<'g> {
        let v = self.value();
        let c = v.cols();
        let cf = c as f64;
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / cf;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cf;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let needs = self.needs();
        let t = Tensor::new(v.shape().to_vec(), out).expect("ln");
        self.graph.push(t, Op::LayerNorm { a: self.id, inv_std }, needs)
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        let needs = self.needs();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), needs)
    }

    /// Mean over all elements (0 for an empty tensor).
    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        let needs = self.needs();
        self.graph.push(Tensor::scalar(m), Op::Mean(self.id), needs)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        let needs = self.needs();
        self.graph.push(out, Op::Scale(self.id, s), needs)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// `|x|` expressed as `relu(x) + relu(-x)`.
    pub fn abs(self) -> Result<Var<'g>> {
        self.relu().add(self.neg().relu())
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape().len() != 2 || start > end || end > v.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let (rows, c) = (v.rows(), v.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * c + start..r * c + end]);
        }
        let needs = self.needs();
        let t = Tensor::new(vec![rows, w], data)?;
        Ok(self.graph.push(t, Op::SliceCols { a: self.id, start }, needs))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape().len() != 2 || start > end || end > v.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let t = v.slice_rows(start, end);
        let needs = self.needs();
        Ok(self.graph.push(t, Op::SliceRows { a: self.id, start }, needs))
    }
}
