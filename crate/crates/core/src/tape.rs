//! Reverse-mode differentiation over a recorded tape.
//!
//! The tape covers exactly the primitives the encoder, decoders, and loss
//! are built from. Forward values are computed eagerly and checked finite;
//! [`Tape::backward`] walks the record in reverse and returns gradients
//! keyed by parameter, sparse by construction: parameters that the loss
//! never reached are absent, and matrix leaves report only the rows that
//! were actually gathered.
//!
//! Subgradient conventions at kinks are pinned so tests can rely on them:
//! `hinge'(0) = 0`, `leaky_relu'(0) = slope`, `d|x|/dx = 0` at `x = 0`,
//! and the L2-norm gradient at the origin is zero.

use std::collections::HashMap;

use crate::error::{KgError, Result};
use crate::params::ParamKey;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatrixLeaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Softmax(NodeId),
    L1Norm(NodeId),
    L2Norm(NodeId),
    Dot(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    Row(NodeId, usize),
    Index(NodeId, usize),
    ScaleBy(NodeId, NodeId),
    Hinge(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    key: Option<ParamKey>,
    row_keys: Option<Vec<ParamKey>>,
}

/// Gradients keyed by parameter, produced by one backward pass.
pub type GradMap = HashMap<ParamKey, Tensor>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(KgError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            key: None,
            row_keys: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf bound to a parameter key.
    pub fn parameter(&mut self, key: ParamKey, value: Tensor) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, true)?;
        self.nodes[id.0].key = Some(key);
        id_ok(id)
    }

    /// A trainable matrix leaf whose rows are individually keyed
    /// parameters; gradients are reported per gathered row.
    pub fn matrix_parameter(&mut self, row_keys: Vec<ParamKey>, value: Tensor) -> Result<NodeId> {
        if !value.is_matrix() || value.rows() != row_keys.len() {
            return Err(KgError::Dimension(format!(
                "matrix leaf needs one key per row: {} keys, shape {:?}",
                row_keys.len(),
                value.shape()
            )));
        }
        let id = self.push(value, Op::MatrixLeaf, true)?;
        self.nodes[id.0].row_keys = Some(row_keys);
        id_ok(id)
    }

    fn grad_of(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(KgError::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), self.grad_of(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), self.grad_of(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), self.grad_of(a, b))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Matrix-vector product `m[r×c] · v[c] -> [r]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if !mv.is_matrix() || !vv.is_vector() || mv.cols() != vv.numel() {
            return Err(KgError::Dimension(format!(
                "matvec: {:?} × {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let rows = mv.rows();
        let mut data = vec![0.0; rows];
        for (r, out) in data.iter_mut().enumerate() {
            *out = dot_slice(mv.row(r), vv.data());
        }
        let out = Tensor::vector(data);
        self.push(out, Op::MatVec(m, v), self.grad_of(m, v))
    }

    /// Matrix product `a[m×n] · b[n×p] -> [m×p]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(KgError::Dimension(format!(
                "matmul: {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, n, p) = (av.rows(), av.cols(), bv.cols());
        let mut data = vec![0.0; m * p];
        for i in 0..m {
            for k in 0..n {
                let aik = av.data()[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..p {
                    data[i * p + j] += aik * bv.data()[k * p + j];
                }
            }
        }
        let out = Tensor::matrix(m, p, data)?;
        self.push(out, Op::MatMul(a, b), self.grad_of(a, b))
    }

    /// Concatenates scalars and vectors into one vector, in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KgError::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.is_matrix() {
                return Err(KgError::Dimension(
                    "concat accepts scalars and vectors only".into(),
                ));
            }
            data.extend_from_slice(t.data());
            rg |= self.nodes[p.0].requires_grad;
        }
        let out = Tensor::vector(data);
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu_leaky(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if !v.is_vector() || v.numel() == 0 {
            return Err(KgError::Dimension(format!(
                "softmax: need non-empty vector, got {:?}",
                v.shape()
            )));
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.into_iter().map(|e| e / z).collect());
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::L1Norm(a), rg)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).l2();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::L2Norm(a), rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot")?;
        let s = dot_slice(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(s), Op::Dot(a, b), self.grad_of(a, b))
    }

    /// Copies the listed rows of a matrix into a new `[k×c]` matrix.
    pub fn gather_rows(&mut self, m: NodeId, indices: &[usize]) -> Result<NodeId> {
        let mv = self.value(m);
        if !mv.is_matrix() {
            return Err(KgError::Dimension("gather_rows: need a matrix".into()));
        }
        let c = mv.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= mv.rows() {
                return Err(KgError::Lookup(format!(
                    "gather_rows: row {i} out of {}",
                    mv.rows()
                )));
            }
            data.extend_from_slice(mv.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        let rg = self.nodes[m.0].requires_grad;
        self.push(out, Op::GatherRows(m, indices.to_vec()), rg)
    }

    /// One matrix row as a vector.
    pub fn row(&mut self, m: NodeId, r: usize) -> Result<NodeId> {
        let mv = self.value(m);
        if !mv.is_matrix() || r >= mv.rows() {
            return Err(KgError::Lookup(format!(
                "row {r} of matrix with shape {:?}",
                mv.shape()
            )));
        }
        let out = Tensor::vector(mv.row(r).to_vec());
        let rg = self.nodes[m.0].requires_grad;
        self.push(out, Op::Row(m, r), rg)
    }

    /// One vector element as a scalar.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if !vv.is_vector() || i >= vv.numel() {
            return Err(KgError::Lookup(format!(
                "index {i} of vector with shape {:?}",
                vv.shape()
            )));
        }
        let out = Tensor::scalar(vv.data()[i]);
        let rg = self.nodes[v.0].requires_grad;
        self.push(out, Op::Index(v, i), rg)
    }

    /// Vector (or scalar) scaled by a scalar node.
    pub fn scale_by(&mut self, v: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(KgError::Dimension("scale_by: scale must be scalar".into()));
        }
        let c = self.value(s).item();
        let data = self.value(v).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(v).shape().to_vec(), data)?;
        self.push(out, Op::ScaleBy(v, s), self.grad_of(v, s))
    }

    /// Elementwise `max(0, x)`.
    pub fn hinge(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Hinge(a), rg)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter the loss reaches; unreached parameters are absent.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if !self.value(loss).is_scalar() {
            return Err(KgError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut reached = vec![false; n];
        // Rows of matrix leaves touched by reached gather/row ops.
        let mut rows_touched: HashMap<usize, Vec<bool>> = HashMap::new();

        if !self.nodes[loss.0].requires_grad {
            return Ok(GradMap::new());
        }
        grads[loss.0] = Some(vec![1.0]);
        reached[loss.0] = true;

        for i in (0..n).rev() {
            if !reached[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let flow = |tape: &Tape,
                            grads: &mut Vec<Option<Vec<f64>>>,
                            reached: &mut Vec<bool>,
                            to: NodeId,
                            add: &dyn Fn(&mut [f64])| {
                if !tape.nodes[to.0].requires_grad {
                    return;
                }
                reached[to.0] = true;
                let buf = grads[to.0]
                    .get_or_insert_with(|| vec![0.0; tape.nodes[to.0].value.numel()]);
                add(buf.as_mut_slice());
            };
            match &node.op {
                Op::Leaf | Op::MatrixLeaf => {
                    grads[i] = Some(g); // keep for collection
                }
                Op::Add(a, b) => {
                    flow(self, &mut grads, &mut reached, *a, &|buf| axpy(buf, &g, 1.0));
                    flow(self, &mut grads, &mut reached, *b, &|buf| axpy(buf, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    flow(self, &mut grads, &mut reached, *a, &|buf| axpy(buf, &g, 1.0));
                    flow(self, &mut grads, &mut reached, *b, &|buf| {
                        axpy(buf, &g, -1.0)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * bv[k];
                        }
                    });
                    flow(self, &mut grads, &mut reached, *b, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * av[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    flow(self, &mut grads, &mut reached, *a, &|buf| axpy(buf, &g, c));
                }
                Op::MatVec(m, v) => {
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    let (rows, cols) = (mv.rows(), mv.cols());
                    flow(self, &mut grads, &mut reached, *m, &|buf| {
                        for (r, &gr) in g.iter().enumerate().take(rows) {
                            if gr == 0.0 {
                                continue;
                            }
                            for (c, bv) in buf[r * cols..(r + 1) * cols].iter_mut().enumerate()
                            {
                                *bv += gr * vv.data()[c];
                            }
                        }
                    });
                    flow(self, &mut grads, &mut reached, *v, &|buf| {
                        for (r, &gr) in g.iter().enumerate().take(rows) {
                            if gr == 0.0 {
                                continue;
                            }
                            for (c, bv) in buf.iter_mut().enumerate() {
                                *bv += gr * mv.data()[r * cols + c];
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, nn, p) = (av.rows(), av.cols(), bv.cols());
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for i2 in 0..m {
                            for k in 0..nn {
                                let mut acc = 0.0;
                                for j in 0..p {
                                    acc += g[i2 * p + j] * bv.data()[k * p + j];
                                }
                                buf[i2 * nn + k] += acc;
                            }
                        }
                    });
                    flow(self, &mut grads, &mut reached, *b, &|buf| {
                        for k in 0..nn {
                            for j in 0..p {
                                let mut acc = 0.0;
                                for i2 in 0..m {
                                    acc += av.data()[i2 * nn + k] * g[i2 * p + j];
                                }
                                buf[k * p + j] += acc;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        let seg = g[offset..offset + len].to_vec();
                        flow(self, &mut grads, &mut reached, p, &|buf| {
                            axpy(buf, &seg, 1.0)
                        });
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let gs = g[0];
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for gb in buf.iter_mut() {
                            *gb += gs;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * y[k] * (1.0 - y[k]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * (1.0 - y[k] * y[k]);
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a).data();
                    let slope = *slope;
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * if x[k] > 0.0 { 1.0 } else { slope };
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let inner: f64 = y.iter().zip(g.iter()).map(|(yi, gi)| yi * gi).sum();
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += y[k] * (g[k] - inner);
                        }
                    });
                }
                Op::L1Norm(a) => {
                    let x = self.value(*a).data();
                    let gs = g[0];
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += gs * sign0(x[k]);
                        }
                    });
                }
                Op::L2Norm(a) => {
                    let x = self.value(*a).data();
                    let norm = node.value.item();
                    let gs = g[0];
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        if norm > 0.0 {
                            for (k, gb) in buf.iter_mut().enumerate() {
                                *gb += gs * x[k] / norm;
                            }
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let gs = g[0];
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += gs * bv[k];
                        }
                    });
                    flow(self, &mut grads, &mut reached, *b, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += gs * av[k];
                        }
                    });
                }
                Op::GatherRows(m, indices) => {
                    let cols = self.value(*m).cols();
                    flow(self, &mut grads, &mut reached, *m, &|buf| {
                        for (j, &ri) in indices.iter().enumerate() {
                            for c in 0..cols {
                                buf[ri * cols + c] += g[j * cols + c];
                            }
                        }
                    });
                    self.touch_rows(&mut rows_touched, *m, indices);
                }
                Op::Row(m, r) => {
                    let cols = self.value(*m).cols();
                    let r = *r;
                    flow(self, &mut grads, &mut reached, *m, &|buf| {
                        for c in 0..cols {
                            buf[r * cols + c] += g[c];
                        }
                    });
                    self.touch_rows(&mut rows_touched, *m, &[r]);
                }
                Op::Index(v, idx) => {
                    let idx = *idx;
                    flow(self, &mut grads, &mut reached, *v, &|buf| {
                        buf[idx] += g[0];
                    });
                }
                Op::ScaleBy(v, s) => {
                    let sv = self.value(*s).item();
                    let vv = self.value(*v).data();
                    flow(self, &mut grads, &mut reached, *v, &|buf| {
                        axpy(buf, &g, sv)
                    });
                    flow(self, &mut grads, &mut reached, *s, &|buf| {
                        buf[0] += dot_slice(vv, &g);
                    });
                }
                Op::Hinge(a) => {
                    let x = self.value(*a).data();
                    flow(self, &mut grads, &mut reached, *a, &|buf| {
                        for (k, gb) in buf.iter_mut().enumerate() {
                            *gb += g[k] * if x[k] > 0.0 { 1.0 } else { 0.0 };
                        }
                    });
                }
            }
        }

        // Collect parameter gradients.
        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().take(n).enumerate() {
            if !reached[i] {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            if let Some(key) = node.key {
                accumulate(
                    &mut out,
                    key,
                    Tensor::new(node.value.shape().to_vec(), g.clone())?,
                );
            } else if let Some(row_keys) = &node.row_keys {
                let cols = node.value.cols();
                let touched = rows_touched.get(&i);
                for (r, key) in row_keys.iter().enumerate() {
                    let include = match touched {
                        Some(t) => t[r],
                        // Matrix leaf consumed whole (no gather record):
                        // every row is reachable.
                        None => true,
                    };
                    if include {
                        accumulate(
                            &mut out,
                            *key,
                            Tensor::vector(g[r * cols..(r + 1) * cols].to_vec()),
                        );
                    }
                }
            }
        }
        Ok(out)
    }

    fn touch_rows(
        &self,
        rows_touched: &mut HashMap<usize, Vec<bool>>,
        m: NodeId,
        rows: &[usize],
    ) {
        if self.nodes[m.0].row_keys.is_some() {
            let nrows = self.nodes[m.0].value.rows();
            let t = rows_touched
                .entry(m.0)
                .or_insert_with(|| vec![false; nrows]);
            for &r in rows {
                t[r] = true;
            }
        }
    }
}

/// Weights of one 4-gate LSTM cell, as tape nodes. Gate order is
/// input, forget, cell, output; each `w` maps `[x; h_prev]`.
pub struct LstmWeights {
    pub w: [NodeId; 4],
    pub b: [NodeId; 4],
}

/// Standard LSTM cell step: gates from affine maps of `[x; h_prev]`,
/// then `c = f⊙c_prev + i⊙g` and `h = o⊙tanh(c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    weights: &LstmWeights,
) -> Result<(NodeId, NodeId)> {
    let z = tape.concat(&[x, h_prev])?;
    let mut pre = Vec::with_capacity(4);
    for (w, b) in weights.w.iter().zip(&weights.b) {
        let wz = tape.matvec(*w, z)?;
        pre.push(tape.add(wz, *b)?);
    }
    let i = tape.sigmoid(pre[0])?;
    let f = tape.sigmoid(pre[1])?;
    let g = tape.tanh(pre[2])?;
    let o = tape.sigmoid(pre[3])?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatrixLeaf => "matrix_leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatVec(..) => "matvec",
        Op::MatMul(..) => "matmul",
        Op::Concat(..) => "concat",
        Op::Sum(..) => "sum",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::LeakyRelu(..) => "relu_leaky",
        Op::Softmax(..) => "softmax",
        Op::L1Norm(..) => "l1_norm",
        Op::L2Norm(..) => "l2_norm",
        Op::Dot(..) => "dot",
        Op::GatherRows(..) => "gather_rows",
        Op::Row(..) => "row",
        Op::Index(..) => "index",
        Op::ScaleBy(..) => "scale_by",
        Op::Hinge(..) => "hinge",
    }
}

fn id_ok(id: NodeId) -> Result<NodeId> {
    Ok(id)
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn axpy(buf: &mut [f64], g: &[f64], c: f64) {
    for (b, x) in buf.iter_mut().zip(g.iter()) {
        *b += c * x;
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(map: &mut GradMap, key: ParamKey, t: Tensor) {
    map.entry(key)
        .and_modify(|existing| {
            let data = existing.data_mut();
            for (d, s) in data.iter_mut().zip(t.data().iter()) {
                *d += s;
            }
        })
        .or_insert(t);
}
