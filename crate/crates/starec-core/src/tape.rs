//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape supplies exactly the ops the model needs: affine maps,
//! elementwise products, sigmoid/tanh/relu, softmax, concatenation,
//! cosine similarity, dropout masks, plus a handful of fused sequence
//! ops (row-stacked attention) that keep the op count linear in the
//! sequence length. Parameters live in a [`ParameterStore`] and enter
//! the tape by id; `backward` scatters gradients straight back into it.
//!
//! Shapes are validated when an op is recorded, so a mismatch fails at
//! the call site with the op name rather than mid-reverse-pass.

use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("{op}: parameter row {row} out of bounds for {rows} rows")]
    RowOutOfBounds {
        op: &'static str,
        row: usize,
        rows: usize,
    },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient.
    Input,
    /// Whole parameter tensor.
    Param(ParamId),
    /// One row of a rank-2 parameter (embedding lookup).
    ParamRow(ParamId, usize),
    /// out = W x for W: r x c, x: c.
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// out = c * x for a compile-time constant c.
    ScaleConst(NodeId, f64),
    /// out = 1 - x elementwise.
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Vector concatenation in argument order.
    Concat(Vec<NodeId>),
    /// Numerically stable softmax over a vector.
    Softmax(NodeId),
    /// Scalar inner product.
    Dot(NodeId, NodeId),
    /// Cosine similarity; defined as 0 when either norm underflows.
    CosSim(NodeId, NodeId),
    /// Scalar sum of all entries.
    Sum(NodeId),
    /// Stack equal-length vectors into an L x d matrix.
    Stack(Vec<NodeId>),
    /// out = A B^T for A: L x d, B: M x d.
    MatMulT(NodeId, NodeId),
    /// Row-wise softmax of a matrix.
    RowSoftmax(NodeId),
    /// Diagonal of a square matrix as a vector.
    Diag(NodeId),
    /// out = s[idx] * v for scalar-entry gating.
    ScaleByEntry {
        v: NodeId,
        s: NodeId,
        idx: usize,
    },
    /// out_j = sum_t w[t] * M[t][j].
    WeightedRowSum {
        mat: NodeId,
        w: NodeId,
    },
    /// Binary cross-entropy of a scalar logit against a fixed target,
    /// computed via softplus so log arguments never reach zero.
    BceWithLogit {
        logit: NodeId,
        target: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records forward operations for one reverse traversal.
///
/// Replaying the same inputs yields identical values: every op is a
/// deterministic function of its operands and the parameter snapshot
/// taken at record time.
pub struct Tape {
    nodes: Vec<Node>,
    param_memo: HashMap<(ParamId, Option<usize>), NodeId>,
}

fn stable_softmax(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const COS_NORM_FLOOR: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_memo: HashMap::new(),
        }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn vec_pair(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<usize, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TapeError::Shape {
                op,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        Ok(va.numel())
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn scalar_input(&mut self, x: f64) -> NodeId {
        self.push(Op::Input, Tensor::scalar(x))
    }

    /// Whole parameter as a node; memoized so repeated uses share one
    /// node and gradients accumulate additively.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_memo.get(&(id, None)) {
            return n;
        }
        let n = self.push(Op::Param(id), store.value(id).clone());
        self.param_memo.insert((id, None), n);
        n
    }

    /// Embedding lookup: row `row` of a rank-2 parameter.
    pub fn param_row(
        &mut self,
        store: &ParameterStore,
        id: ParamId,
        row: usize,
    ) -> Result<NodeId, TapeError> {
        if let Some(&n) = self.param_memo.get(&(id, Some(row))) {
            return Ok(n);
        }
        let t = store.value(id);
        let (rows, _) = t.dims2().ok_or(TapeError::Shape {
            op: "param_row",
            detail: format!("expected matrix, got {:?}", t.shape()),
        })?;
        if row >= rows {
            return Err(TapeError::RowOutOfBounds {
                op: "param_row",
                row,
                rows,
            });
        }
        let value = Tensor::vector(t.row(row).to_vec());
        let n = self.push(Op::ParamRow(id, row), value);
        self.param_memo.insert((id, Some(row)), n);
        Ok(n)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(w).dims2().ok_or(TapeError::Shape {
            op: "matvec",
            detail: format!("weight must be a matrix, got {:?}", self.value(w).shape()),
        })?;
        if self.value(x).numel() != cols {
            return Err(TapeError::Shape {
                op: "matvec",
                detail: format!("{}x{} matrix with input of {}", rows, cols, self.value(x).numel()),
            });
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(xd) {
                acc += wv * xv;
            }
            out[r] = acc;
        }
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.vec_pair("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out).unwrap()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.vec_pair("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, out).unwrap()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.vec_pair("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out).unwrap()))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::ScaleConst(x, c), Tensor::new(shape, out).unwrap())
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| 1.0 - v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::OneMinus(x), Tensor::new(shape, out).unwrap())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid(x), Tensor::new(shape, out).unwrap())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh(x), Tensor::new(shape, out).unwrap())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Relu(x), Tensor::new(shape, out).unwrap())
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Shape {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out)))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        stable_softmax(xs, &mut out);
        self.push(Op::Softmax(x), Tensor::vector(out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.vec_pair("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s)))
    }

    pub fn cos_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.vec_pair("cos_sim", a, b)?;
        let s = cosine_value(self.value(a).data(), self.value(b).data());
        Ok(self.push(Op::CosSim(a, b), Tensor::scalar(s)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId, TapeError> {
        if rows.is_empty() {
            return Err(TapeError::Shape {
                op: "stack",
                detail: "no rows".into(),
            });
        }
        let d = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).numel() != d {
                return Err(TapeError::Shape {
                    op: "stack",
                    detail: format!("row of {} in stack of width {}", self.value(r).numel(), d),
                });
            }
            out.extend_from_slice(self.value(r).data());
        }
        let t = Tensor::matrix(rows.len(), d, out).unwrap();
        Ok(self.push(Op::Stack(rows.to_vec()), t))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (la, da) = self.value(a).dims2().ok_or(TapeError::Shape {
            op: "matmul_t",
            detail: "lhs not a matrix".into(),
        })?;
        let (lb, db) = self.value(b).dims2().ok_or(TapeError::Shape {
            op: "matmul_t",
            detail: "rhs not a matrix".into(),
        })?;
        if da != db {
            return Err(TapeError::Shape {
                op: "matmul_t",
                detail: format!("inner dims {} vs {}", da, db),
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; la * lb];
        for i in 0..la {
            let ra = &ad[i * da..(i + 1) * da];
            for j in 0..lb {
                let rb = &bd[j * da..(j + 1) * da];
                let mut acc = 0.0;
                for (x, y) in ra.iter().zip(rb) {
                    acc += x * y;
                }
                out[i * lb + j] = acc;
            }
        }
        let t = Tensor::matrix(la, lb, out).unwrap();
        Ok(self.push(Op::MatMulT(a, b), t))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(x).dims2().ok_or(TapeError::Shape {
            op: "row_softmax",
            detail: "input not a matrix".into(),
        })?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            stable_softmax(&xd[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::matrix(rows, cols, out).unwrap();
        Ok(self.push(Op::RowSoftmax(x), t))
    }

    pub fn diag(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(x).dims2().ok_or(TapeError::Shape {
            op: "diag",
            detail: "input not a matrix".into(),
        })?;
        if rows != cols {
            return Err(TapeError::Shape {
                op: "diag",
                detail: format!("{}x{} is not square", rows, cols),
            });
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..rows).map(|i| xd[i * cols + i]).collect();
        Ok(self.push(Op::Diag(x), Tensor::vector(out)))
    }

    /// Gate a vector by one entry of a weight vector: out = s[idx] * v.
    pub fn scale_by_entry(
        &mut self,
        v: NodeId,
        s: NodeId,
        idx: usize,
    ) -> Result<NodeId, TapeError> {
        if idx >= self.value(s).numel() {
            return Err(TapeError::Shape {
                op: "scale_by_entry",
                detail: format!("index {} into vector of {}", idx, self.value(s).numel()),
            });
        }
        let c = self.value(s).data()[idx];
        let out: Vec<f64> = self.value(v).data().iter().map(|x| c * x).collect();
        Ok(self.push(Op::ScaleByEntry { v, s, idx }, Tensor::vector(out)))
    }

    /// Convex-ish combination of matrix rows: out_j = sum_t w[t] M[t][j].
    pub fn weighted_row_sum(&mut self, mat: NodeId, w: NodeId) -> Result<NodeId, TapeError> {
        let (rows, cols) = self.value(mat).dims2().ok_or(TapeError::Shape {
            op: "weighted_row_sum",
            detail: "input not a matrix".into(),
        })?;
        if self.value(w).numel() != rows {
            return Err(TapeError::Shape {
                op: "weighted_row_sum",
                detail: format!("{} weights for {} rows", self.value(w).numel(), rows),
            });
        }
        let md = self.value(mat).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; cols];
        for t in 0..rows {
            let r = &md[t * cols..(t + 1) * cols];
            let c = wd[t];
            for (o, x) in out.iter_mut().zip(r) {
                *o += c * x;
            }
        }
        Ok(self.push(Op::WeightedRowSum { mat, w }, Tensor::vector(out)))
    }

    /// Log loss of a scalar logit against target y in {0,1} (or soft y):
    /// y*softplus(-z) + (1-y)*softplus(z). Equals -[y ln s(z) + (1-y) ln(1-s(z))]
    /// with log arguments kept strictly positive by construction.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> Result<NodeId, TapeError> {
        if !self.value(logit).is_scalar() {
            return Err(TapeError::Shape {
                op: "bce_with_logit",
                detail: format!("logit shape {:?}", self.value(logit).shape()),
            });
        }
        let z = self.value(logit).as_scalar();
        let loss = target * softplus(-z) + (1.0 - target) * softplus(z);
        Ok(self.push(Op::BceWithLogit { logit, target }, Tensor::scalar(loss)))
    }

    /// Inverted-dropout mask applied to a vector; `keep` entries are
    /// scaled by 1/keep so the expectation is unchanged.
    pub fn dropout<R: rand::Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
    ) -> Result<NodeId, TapeError> {
        let n = self.value(x).numel();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.input(Tensor::vector(mask));
        self.mul(x, m)
    }

    /// Apply a precomputed dropout mask (used when a forward pass must be
    /// replayable, e.g. under the finite-difference oracle).
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId, TapeError> {
        let m = self.input(Tensor::vector(mask.to_vec()));
        self.mul(x, m)
    }

    /// Reverse traversal from a scalar loss; gradients are accumulated
    /// into the store (existing gradient contents are added to, matching
    /// additive accumulation across multiple backward passes).
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<(), TapeError> {
        if loss.0 >= self.nodes.len() {
            return Err(TapeError::UnknownNode(loss.0));
        }
        if !self.value(loss).is_scalar() {
            return Err(TapeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let value = &self.nodes[i].value;
            macro_rules! acc {
                ($id:expr, $f:expr) => {{
                    let id: NodeId = $id;
                    let n = self.nodes[id.0].value.numel();
                    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let f: &mut dyn FnMut(&mut [f64]) = &mut $f;
                    f(slot.as_mut_slice());
                }};
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => store.accumulate_grad(*p, None, &go),
                Op::ParamRow(p, row) => store.accumulate_grad(*p, Some(*row), &go),
                Op::MatVec(w, x) => {
                    let (rows, cols) = self.value(*w).dims2().unwrap();
                    let wd = self.value(*w).data();
                    let xd = self.value(*x).data();
                    acc!(*w, |gw: &mut [f64]| {
                        for r in 0..rows {
                            let g = go[r];
                            for c in 0..cols {
                                gw[r * cols + c] += g * xd[c];
                            }
                        }
                    });
                    acc!(*x, |gx: &mut [f64]| {
                        for r in 0..rows {
                            let g = go[r];
                            let row = &wd[r * cols..(r + 1) * cols];
                            for (gxc, wv) in gx.iter_mut().zip(row) {
                                *gxc += g * wv;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc!(*a, |g: &mut [f64]| for (gi, &o) in g.iter_mut().zip(&go) {
                        *gi += o;
                    });
                    acc!(*b, |g: &mut [f64]| for (gi, &o) in g.iter_mut().zip(&go) {
                        *gi += o;
                    });
                }
                Op::Sub(a, b) => {
                    acc!(*a, |g: &mut [f64]| for (gi, &o) in g.iter_mut().zip(&go) {
                        *gi += o;
                    });
                    acc!(*b, |g: &mut [f64]| for (gi, &o) in g.iter_mut().zip(&go) {
                        *gi -= o;
                    });
                }
                Op::Mul(a, b) => {
                    let ad: Vec<f64> = self.value(*a).data().to_vec();
                    let bd: Vec<f64> = self.value(*b).data().to_vec();
                    acc!(*a, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += go[k] * bd[k];
                    });
                    acc!(*b, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += go[k] * ad[k];
                    });
                }
                Op::ScaleConst(x, c) => {
                    let c = *c;
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += c * go[k];
                    });
                }
                Op::OneMinus(x) => {
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] -= go[k];
                    });
                }
                Op::Sigmoid(x) => {
                    let y = value.data();
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += go[k] * y[k] * (1.0 - y[k]);
                    });
                }
                Op::Tanh(x) => {
                    let y = value.data();
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += go[k] * (1.0 - y[k] * y[k]);
                    });
                }
                Op::Relu(x) => {
                    let y = value.data();
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        if y[k] > 0.0 {
                            g[k] += go[k];
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        acc!(p, |g: &mut [f64]| for k in 0..n {
                            g[k] += go[off + k];
                        });
                        off += n;
                    }
                }
                Op::Softmax(x) => {
                    let y = value.data();
                    let inner: f64 = go.iter().zip(y).map(|(g, v)| g * v).sum();
                    acc!(*x, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += y[k] * (go[k] - inner);
                    });
                }
                Op::Dot(a, b) => {
                    let g = go[0];
                    let ad: Vec<f64> = self.value(*a).data().to_vec();
                    let bd: Vec<f64> = self.value(*b).data().to_vec();
                    acc!(*a, |ga: &mut [f64]| for k in 0..ga.len() {
                        ga[k] += g * bd[k];
                    });
                    acc!(*b, |gb: &mut [f64]| for k in 0..gb.len() {
                        gb[k] += g * ad[k];
                    });
                }
                Op::CosSim(a, b) => {
                    let g = go[0];
                    let ad: Vec<f64> = self.value(*a).data().to_vec();
                    let bd: Vec<f64> = self.value(*b).data().to_vec();
                    let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na > COS_NORM_FLOOR && nb > COS_NORM_FLOOR {
                        let c = value.as_scalar();
                        acc!(*a, |ga: &mut [f64]| for k in 0..ga.len() {
                            ga[k] += g * (bd[k] / (na * nb) - c * ad[k] / (na * na));
                        });
                        acc!(*b, |gb: &mut [f64]| for k in 0..gb.len() {
                            gb[k] += g * (ad[k] / (na * nb) - c * bd[k] / (nb * nb));
                        });
                    }
                }
                Op::Sum(x) => {
                    let g = go[0];
                    acc!(*x, |gx: &mut [f64]| for v in gx.iter_mut() {
                        *v += g;
                    });
                }
                Op::Stack(rows) => {
                    let d = self.value(rows[0]).numel();
                    for (t, &r) in rows.iter().enumerate() {
                        acc!(r, |g: &mut [f64]| for k in 0..d {
                            g[k] += go[t * d + k];
                        });
                    }
                }
                Op::MatMulT(a, b) => {
                    let (la, da) = self.value(*a).dims2().unwrap();
                    let (lb, _) = self.value(*b).dims2().unwrap();
                    let ad: Vec<f64> = self.value(*a).data().to_vec();
                    let bd: Vec<f64> = self.value(*b).data().to_vec();
                    // dA = GO B ; dB = GO^T A
                    acc!(*a, |ga: &mut [f64]| {
                        for i in 0..la {
                            for j in 0..lb {
                                let g = go[i * lb + j];
                                if g != 0.0 {
                                    for k in 0..da {
                                        ga[i * da + k] += g * bd[j * da + k];
                                    }
                                }
                            }
                        }
                    });
                    acc!(*b, |gb: &mut [f64]| {
                        for i in 0..la {
                            for j in 0..lb {
                                let g = go[i * lb + j];
                                if g != 0.0 {
                                    for k in 0..da {
                                        gb[j * da + k] += g * ad[i * da + k];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::RowSoftmax(x) => {
                    let (rows, cols) = value.dims2().unwrap();
                    let y = value.data();
                    acc!(*x, |g: &mut [f64]| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gor = &go[r * cols..(r + 1) * cols];
                            let inner: f64 = gor.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                g[r * cols + c] += yr[c] * (gor[c] - inner);
                            }
                        }
                    });
                }
                Op::Diag(x) => {
                    let n = value.numel();
                    acc!(*x, |g: &mut [f64]| for k in 0..n {
                        g[k * n + k] += go[k];
                    });
                }
                Op::ScaleByEntry { v, s, idx } => {
                    let c = self.value(*s).data()[*idx];
                    let vd: Vec<f64> = self.value(*v).data().to_vec();
                    acc!(*v, |g: &mut [f64]| for k in 0..g.len() {
                        g[k] += c * go[k];
                    });
                    let contrib: f64 = go.iter().zip(&vd).map(|(a, b)| a * b).sum();
                    let idx = *idx;
                    acc!(*s, |g: &mut [f64]| g[idx] += contrib);
                }
                Op::WeightedRowSum { mat, w } => {
                    let (rows, cols) = self.value(*mat).dims2().unwrap();
                    let md: Vec<f64> = self.value(*mat).data().to_vec();
                    let wd: Vec<f64> = self.value(*w).data().to_vec();
                    acc!(*mat, |g: &mut [f64]| {
                        for t in 0..rows {
                            let c = wd[t];
                            for k in 0..cols {
                                g[t * cols + k] += c * go[k];
                            }
                        }
                    });
                    acc!(*w, |g: &mut [f64]| {
                        for t in 0..rows {
                            let mut acc_v = 0.0;
                            for k in 0..cols {
                                acc_v += go[k] * md[t * cols + k];
                            }
                            g[t] += acc_v;
                        }
                    });
                }
                Op::BceWithLogit { logit, target } => {
                    let z = self.value(*logit).as_scalar();
                    let d = sigmoid(z) - target;
                    acc!(*logit, |g: &mut [f64]| g[0] += go[0] * d);
                }
            }
        }
        Ok(())
    }
}

/// Cosine similarity on raw slices; 0 when either norm underflows.
pub fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= COS_NORM_FLOOR || nb <= COS_NORM_FLOOR {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Softmax on a raw slice with temperature: softmax(x / tau).
pub fn softmax_with_temperature(xs: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / tau).collect();
    let mut out = vec![0.0; xs.len()];
    stable_softmax(&scaled, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterStore;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn store_with(shape: &[usize], data: Vec<f64>) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s
            .add("p", Tensor::new(shape.to_vec(), data).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut store, p) = store_with(&[3], vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let (mut store, p) = store_with(&[1], vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let y = tape.sigmoid(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert!((store.grad(p).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut store, p) = store_with(&[2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(TapeError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let w = tape.input(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let err = tape.matvec(w, b).unwrap_err();
        assert!(err.to_string().contains("matvec"));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // loss = sum(p) + sum(p) -> grad = 2
        let (mut store, p) = store_with(&[2], vec![1.0, 1.0]);
        let mut tape = Tape::new();
        let x1 = tape.param(&store, p);
        let x2 = tape.param(&store, p);
        let s = tape.add(x1, x2).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_is_probability_vector() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let x = tape.input(Tensor::vector(xs));
            let y = tape.softmax(x);
            let data = tape.value(y).data();
            assert!(data.iter().all(|&v| v > 0.0 && v < 1.0 || n == 1));
            let s: f64 = data.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    /// Central finite differences on a scalar-valued function of one
    /// parameter entry. The independent oracle for every analytic
    /// gradient in this crate.
    pub(crate) fn finite_difference<F>(
        store: &mut ParameterStore,
        p: ParamId,
        idx: usize,
        step: f64,
        mut eval: F,
    ) -> f64
    where
        F: FnMut(&ParameterStore) -> f64,
    {
        let orig = store.value(p).data()[idx];
        store.value_mut(p).data_mut()[idx] = orig + step;
        let up = eval(store);
        store.value_mut(p).data_mut()[idx] = orig - step;
        let down = eval(store);
        store.value_mut(p).data_mut()[idx] = orig;
        (up - down) / (2.0 * step)
    }

    fn check_against_fd<F>(store: &mut ParameterStore, p: ParamId, tol: f64, eval: F)
    where
        F: Fn(&ParameterStore, &mut Tape) -> NodeId,
    {
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = eval(store, &mut tape);
        tape.backward(loss, store).unwrap();
        let analytic: Vec<f64> = store.grad(p).data().to_vec();
        for idx in 0..analytic.len() {
            let fd = finite_difference(store, p, idx, 1e-6, |s| {
                let mut t = Tape::new();
                let l = eval(s, &mut t);
                t.value(l).as_scalar()
            });
            let denom = fd.abs().max(1e-8);
            assert!(
                (analytic[idx] - fd).abs() / denom < tol,
                "entry {}: analytic {} vs fd {}",
                idx,
                analytic[idx],
                fd
            );
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let d = 5;
        let other: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..1.0)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.2)).collect();

        // Each closure builds loss = sum(op(...)) over the parameter.
        type Builder = Box<dyn Fn(&ParameterStore, &mut Tape, ParamId) -> NodeId>;
        let cases: Vec<(&str, Builder)> = vec![
            ("sigmoid", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.sigmoid(x);
                    t.sum(y)
                })
            }),
            ("tanh", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.tanh(x);
                    t.sum(y)
                })
            }),
            ("relu", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.relu(x);
                    t.sum(y)
                })
            }),
            ("softmax", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.softmax(x);
                    // weight entries unevenly so the Jacobian is exercised
                    let w = t.input(Tensor::vector(vec![0.9, -0.3, 0.4, 1.3, -1.1]));
                    let z = t.mul(y, w).unwrap();
                    t.sum(z)
                })
            }),
            ("mul", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    let z = t.mul(x, y).unwrap();
                    t.sum(z)
                })
            }),
            ("matvec", {
                let w = w.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let m = t.input(Tensor::matrix(d, d, w.clone()).unwrap());
                    let y = t.matvec(m, x).unwrap();
                    let z = t.tanh(y);
                    t.sum(z)
                })
            }),
            ("dot", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    t.dot(x, y).unwrap()
                })
            }),
            ("cos_sim", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    t.cos_sim(x, y).unwrap()
                })
            }),
            ("concat_sub", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    let d1 = t.sub(x, y).unwrap();
                    let c = t.concat(&[x, d1]).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum(sq)
                })
            }),
            ("bce", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let z = t.sum(x);
                    t.bce_with_logit(z, 1.0).unwrap()
                })
            }),
            ("stack_matmul_rowsoftmax_diag", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    let a = t.stack(&[x, y]).unwrap();
                    let sc = t.matmul_t(a, a).unwrap();
                    let pm = t.row_softmax(sc).unwrap();
                    let dg = t.diag(pm).unwrap();
                    let g = t.scale_by_entry(x, dg, 0).unwrap();
                    t.sum(g)
                })
            }),
            ("weighted_row_sum", {
                let o = other.clone();
                Box::new(move |s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let y = t.input(Tensor::vector(o.clone()));
                    let m = t.stack(&[x, y, x]).unwrap();
                    let w = t.input(Tensor::vector(vec![0.2, 0.5, 0.3]));
                    let v = t.weighted_row_sum(m, w).unwrap();
                    let sq = t.mul(v, v).unwrap();
                    t.sum(sq)
                })
            }),
            ("scale_one_minus", {
                Box::new(|s: &ParameterStore, t: &mut Tape, p| {
                    let x = t.param(s, p);
                    let a = t.scale_const(x, 0.37);
                    let b = t.one_minus(a);
                    let z = t.mul(a, b).unwrap();
                    t.sum(z)
                })
            }),
        ];

        for (name, build) in &cases {
            let (mut store, p) = store_with(&[d], base.clone());
            check_against_fd(&mut store, p, 1e-6, |s, t| build(s, t, p));
            // keep the name in the panic path for debugging
            let _ = name;
        }
    }

    #[test]
    fn param_row_gradients_land_on_rows() {
        let mut store = ParameterStore::new();
        let table = store
            .add("emb", Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let r1 = tape.param_row(&store, table, 1).unwrap();
        let r1b = tape.param_row(&store, table, 1).unwrap();
        assert_eq!(r1, r1b); // memoized
        let s = tape.sum(r1);
        let loss = tape.scale_const(s, 3.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(table).data(), &[0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_and_gradients_are_deterministic() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let mut store = ParameterStore::new();
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = store.add("w", Tensor::matrix(3, 4, vals).unwrap()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let w = tape.param(&store, p);
            let xv = tape.input(Tensor::vector(x));
            let h = tape.matvec(w, xv).unwrap();
            let a = tape.tanh(h);
            let loss = tape.sum(a);
            tape.backward(loss, &mut store).unwrap();
            (
                tape.value(loss).as_scalar().to_bits(),
                store
                    .grad(p)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
