//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! The primitive set is deliberately small and fixed: matmul (with BLAS-style
//! transpose flags), add, mul, concat, slice, relu, tanh, exp, log, softplus,
//! sin, cos, softmax (last axis), layer_norm (last axis), max_pool (axis),
//! sum, mean, plus a zero-cost reshape. Everything the encoder, decoder and
//! losses need is expressed through these, which keeps the backward pass
//! auditable and the finite-difference checker exhaustive.
//!
//! A [`Tape`] owns every intermediate node. Handles ([`TensorId`]) are plain
//! indices; ops take `&Tape` and push new nodes, so a tape is single-threaded
//! by construction. Gradients accumulate additively across `backward` calls
//! until [`Tape::zero_grads`] is invoked.

use std::cell::{Ref, RefCell};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A materialized tensor: shape, row-major values, and an optional gradient
/// of identical shape (populated by [`Tape::backward`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("shape does not cover {} values", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Relu {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    Log {
        x: TensorId,
    },
    Softplus {
        x: TensorId,
    },
    Sin {
        x: TensorId,
    },
    Cos {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        eps: f64,
    },
    MaxPool {
        x: TensorId,
        axis: usize,
        argmax: Vec<usize>,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// Ordered record of primitive applications; nodes are appended in
/// topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// How `add`/`mul` pair up operands of different shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Pairing {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// rhs is rank-1 and matches lhs's trailing axis; broadcast over rows.
    RowRhs,
}

fn pairing(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Pairing> {
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if lhs == rhs {
        Ok(Pairing::Same)
    } else if rn == 1 {
        Ok(Pairing::ScalarRhs)
    } else if ln == 1 {
        Ok(Pairing::ScalarLhs)
    } else if rhs.len() == 1 && lhs.last() == Some(&rhs[0]) {
        Ok(Pairing::RowRhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Split a shape at `axis` into (outer, len, inner) strides for contiguous
/// row-major traversal.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn gemm(
    a: &[f64],
    (am, ak): (usize, usize),
    trans_a: bool,
    b: &[f64],
    (bk, bn): (usize, usize),
    trans_b: bool,
) -> Vec<f64> {
    // logical dims after applying transposes
    let (m, ka) = if trans_a { (ak, am) } else { (am, ak) };
    let (kb, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    debug_assert_eq!(ka, kb);
    let k = ka;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            // when trans_a, `a` is stored [am x ak] = [k x m]
            let av = if trans_a { a[p * ak + i] } else { a[i * ak + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if trans_b {
                // b stored [bk x bn] = [n x k]; element (p, j) of B' is b[j * bn + p]
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * bn + p];
                }
            } else {
                let brow = &b[p * bn..(p + 1) * bn];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; values.len()];
        nodes.push(Node {
            op,
            shape,
            values,
            grad,
        });
        TensorId(nodes.len() - 1)
    }

    /// Register external data as a leaf node.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("shape does not cover {} values", values.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values))
    }

    pub fn leaf_tensor(&self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone())
    }

    pub fn scalar(&self, v: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    pub fn zeros(&self, shape: &[usize]) -> TensorId {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape.to_vec(), vec![0.0; n])
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id.0].shape.clone()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes.borrow()[id.0].values.len()
    }

    /// Borrow the values of a node without cloning.
    pub fn values_ref(&self, id: TensorId) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[id.0].values.as_slice())
    }

    pub fn values(&self, id: TensorId) -> Vec<f64> {
        self.nodes.borrow()[id.0].values.clone()
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        self.nodes.borrow()[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        self.nodes.borrow()[id.0].grad.clone()
    }

    /// Clone a node out as a [`Tensor`], gradient included.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            grad: Some(n.grad.clone()),
        }
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            for g in n.grad.iter_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn all_finite(&self, id: TensorId) -> bool {
        self.nodes.borrow()[id.0].values.iter().all(|v| v.is_finite())
    }

    // ── Primitives ─────────────────────────────────────────────────────

    /// `a @ b` with optional BLAS-style transposes; rank-2 operands only.
    pub fn matmul_t(
        &self,
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<TensorId> {
        let (ashape, bshape) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].shape.clone(), nodes[b.0].shape.clone())
        };
        if ashape.len() != 2 || bshape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                shape: if ashape.len() != 2 { ashape } else { bshape },
                reason: "rank-2 operands required".into(),
            });
        }
        let (m, ka) = if trans_a {
            (ashape[1], ashape[0])
        } else {
            (ashape[0], ashape[1])
        };
        let (kb, n) = if trans_b {
            (bshape[1], bshape[0])
        } else {
            (bshape[0], bshape[1])
        };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            gemm(
                &nodes[a.0].values,
                (ashape[0], ashape[1]),
                trans_a,
                &nodes[b.0].values,
                (bshape[0], bshape[1]),
                trans_b,
            )
        };
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            vec![m, n],
            out,
        ))
    }

    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let pair = pairing(op_name, &na.shape, &nb.shape)?;
        let out_shape = match pair {
            Pairing::ScalarLhs => nb.shape.clone(),
            _ => na.shape.clone(),
        };
        let out = match pair {
            Pairing::Same => na
                .values
                .iter()
                .zip(&nb.values)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Pairing::ScalarRhs => {
                let s = nb.values[0];
                na.values.iter().map(|&x| f(x, s)).collect()
            }
            Pairing::ScalarLhs => {
                let s = na.values[0];
                nb.values.iter().map(|&y| f(s, y)).collect()
            }
            Pairing::RowRhs => {
                let d = nb.values.len();
                na.values
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, nb.values[i % d]))
                    .collect()
            }
        };
        Ok((out_shape, out))
    }

    /// Elementwise addition. Accepts equal shapes, a scalar on either side,
    /// or a rank-1 rhs matching the lhs trailing axis (row broadcast).
    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, shape, out))
    }

    /// Elementwise product with the same pairing rules as [`Tape::add`].
    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, shape, out))
    }

    pub fn concat(&self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let first = nodes[inputs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0usize;
        for id in inputs {
            let s = &nodes[id.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let mut offset = 0usize;
            for id in inputs {
                let n = &nodes[id.0];
                let len = n.shape[axis];
                let src = &n.values[o * len * inner..(o + 1) * len * inner];
                let dst_start = o * total * inner + offset * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
                offset += len;
            }
        }
        drop(nodes);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
        ))
    }

    pub fn slice(&self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let xshape = self.shape(x);
        if axis >= xshape.len() || start + len > xshape[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: xshape,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let (outer, alen, inner) = axis_split(&xshape, axis);
        let mut shape = xshape.clone();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].values;
            for o in 0..outer {
                let s = o * alen * inner + start * inner;
                let d = o * len * inner;
                out[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
        }
        Ok(self.push(Op::Slice { x, axis, start }, shape, out))
    }

    fn unary(&self, x: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.values.iter().map(|&v| f(v)).collect())
        };
        self.push(op, shape, out)
    }

    pub fn relu(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Tanh { x }, f64::tanh)
    }

    pub fn exp(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn log(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Log { x }, f64::ln)
    }

    pub fn softplus(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Softplus { x }, softplus)
    }

    pub fn sin(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sin { x }, f64::sin)
    }

    pub fn cos(&self, x: TensorId) -> TensorId {
        self.unary(x, Op::Cos { x }, f64::cos)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        let last = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank-0 input".into(),
        })?;
        let mut out = self.values(x);
        for row in out.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(Op::Softmax { x }, shape, out))
    }

    /// Normalize the last axis to zero mean, unit variance.
    pub fn layer_norm(&self, x: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.shape(x);
        let last = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank-0 input".into(),
        })?;
        let mut out = self.values(x);
        for row in out.chunks_mut(last) {
            let n = last as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Ok(self.push(Op::LayerNorm { x, eps }, shape, out))
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn max_pool(&self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xshape = self.shape(x);
        if axis >= xshape.len() {
            return Err(TensorError::InvalidShape {
                op: "max_pool",
                shape: xshape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&xshape, axis);
        let mut shape = xshape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].values;
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let v = src[o * len * inner + l * inner + i];
                        let slot = o * inner + i;
                        if v > out[slot] {
                            out[slot] = v;
                            argmax[slot] = l;
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::MaxPool { x, axis, argmax }, shape, out))
    }

    /// Full reduction to a scalar.
    pub fn sum(&self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes.borrow()[x.0].values.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![total])
    }

    pub fn mean(&self, x: TensorId) -> TensorId {
        let nodes = self.nodes.borrow();
        let vals = &nodes[x.0].values;
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        drop(nodes);
        self.push(Op::Mean { x }, vec![1], vec![m])
    }

    /// Reinterpret the shape of a contiguous tensor; data is unchanged and
    /// the gradient passes through untouched.
    pub fn reshape(&self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let values = self.values(x);
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("target does not cover {} values", values.len()),
            });
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), values))
    }

    // ── Derived helpers (compositions of the primitives above) ────────

    pub fn neg(&self, x: TensorId) -> TensorId {
        let m = self.scalar(-1.0);
        self.mul(x, m).expect("scalar mul cannot fail")
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul_scalar(&self, x: TensorId, s: f64) -> TensorId {
        let c = self.scalar(s);
        self.mul(x, c).expect("scalar mul cannot fail")
    }

    pub fn add_scalar(&self, x: TensorId, s: f64) -> TensorId {
        let c = self.scalar(s);
        self.add(x, c).expect("scalar add cannot fail")
    }

    /// |x| as relu(x) + relu(-x).
    pub fn abs(&self, x: TensorId) -> TensorId {
        let p = self.relu(x);
        let n = self.relu(self.neg(x));
        self.add(p, n).expect("same-shape add")
    }

    /// Clamp to [lo, hi] via relu compositions; gradient is identity inside
    /// the interval and zero outside.
    pub fn clamp(&self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        // x - relu(x - hi) + relu(lo - x)
        let over = self.relu(self.add_scalar(x, -hi));
        let under = self.relu(self.neg(self.add_scalar(x, -lo)));
        let t = self.sub(x, over).expect("same-shape sub");
        self.add(t, under).expect("same-shape add")
    }

    /// 1/x for strictly positive x, via exp(-log x).
    pub fn recip_pos(&self, x: TensorId) -> TensorId {
        self.exp(self.neg(self.log(x)))
    }

    /// Copy rows (axis-0 slices) of `x` at `indices`, preserving order.
    pub fn gather_rows(&self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let slices: Vec<TensorId> = indices
            .iter()
            .map(|&i| self.slice(x, 0, i, 1))
            .collect::<Result<_>>()?;
        self.concat(&slices, 0)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output; leaf gradients accumulate.
    pub fn backward(&self, output: TensorId) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[output.0].values.len() != 1 {
                return Err(TensorError::NonScalarOutput {
                    shape: nodes[output.0].shape.clone(),
                });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        // Seed in a scratch gradient table so earlier accumulated leaf grads
        // are preserved but do not feed this sweep.
        let mut local: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        local[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            if local[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut local[i]);
            let node_op = nodes[i].op.clone();
            match node_op {
                Op::Leaf => {}
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (am, ak) = {
                        let s = &nodes[a.0].shape;
                        (s[0], s[1])
                    };
                    let (bm, bk) = {
                        let s = &nodes[b.0].shape;
                        (s[0], s[1])
                    };
                    let m = if trans_a { ak } else { am };
                    let n = if trans_b { bm } else { bk };
                    // dA' = dC @ B'^T, with A' = op(A) of shape [m x k]
                    let da_logical = gemm(
                        &g,
                        (m, n),
                        false,
                        &nodes[b.0].values,
                        (bm, bk),
                        !trans_b,
                    );
                    // dB' = A'^T @ dC
                    let db_logical = gemm(
                        &nodes[a.0].values,
                        (am, ak),
                        !trans_a,
                        &g,
                        (m, n),
                        false,
                    );
                    if trans_a {
                        // stored A is [k x m]; dA_stored[p, i] = da_logical[i, p]
                        for p in 0..am {
                            for q in 0..ak {
                                local[a.0][p * ak + q] += da_logical[q * am + p];
                            }
                        }
                    } else {
                        for (dst, src) in local[a.0].iter_mut().zip(&da_logical) {
                            *dst += src;
                        }
                    }
                    if trans_b {
                        // stored B is [n x k]; dB_stored[j, p] = db_logical[p, j]
                        for p in 0..bm {
                            for q in 0..bk {
                                local[b.0][p * bk + q] += db_logical[q * bm + p];
                            }
                        }
                    } else {
                        for (dst, src) in local[b.0].iter_mut().zip(&db_logical) {
                            *dst += src;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let pair = pairing("add", &nodes[a.0].shape, &nodes[b.0].shape)
                        .expect("validated at forward");
                    match pair {
                        Pairing::Same => {
                            for (dst, src) in local[a.0].iter_mut().zip(&g) {
                                *dst += src;
                            }
                            for (dst, src) in local[b.0].iter_mut().zip(&g) {
                                *dst += src;
                            }
                        }
                        Pairing::ScalarRhs => {
                            for (dst, src) in local[a.0].iter_mut().zip(&g) {
                                *dst += src;
                            }
                            local[b.0][0] += g.iter().sum::<f64>();
                        }
                        Pairing::ScalarLhs => {
                            local[a.0][0] += g.iter().sum::<f64>();
                            for (dst, src) in local[b.0].iter_mut().zip(&g) {
                                *dst += src;
                            }
                        }
                        Pairing::RowRhs => {
                            for (dst, src) in local[a.0].iter_mut().zip(&g) {
                                *dst += src;
                            }
                            let d = nodes[b.0].values.len();
                            for (j, src) in g.iter().enumerate() {
                                local[b.0][j % d] += src;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let pair = pairing("mul", &nodes[a.0].shape, &nodes[b.0].shape)
                        .expect("validated at forward");
                    match pair {
                        Pairing::Same => {
                            for j in 0..g.len() {
                                local[a.0][j] += g[j] * nodes[b.0].values[j];
                                local[b.0][j] += g[j] * nodes[a.0].values[j];
                            }
                        }
                        Pairing::ScalarRhs => {
                            let s = nodes[b.0].values[0];
                            let mut acc = 0.0;
                            for j in 0..g.len() {
                                local[a.0][j] += g[j] * s;
                                acc += g[j] * nodes[a.0].values[j];
                            }
                            local[b.0][0] += acc;
                        }
                        Pairing::ScalarLhs => {
                            let s = nodes[a.0].values[0];
                            let mut acc = 0.0;
                            for j in 0..g.len() {
                                local[b.0][j] += g[j] * s;
                                acc += g[j] * nodes[b.0].values[j];
                            }
                            local[a.0][0] += acc;
                        }
                        Pairing::RowRhs => {
                            let d = nodes[b.0].values.len();
                            for j in 0..g.len() {
                                local[a.0][j] += g[j] * nodes[b.0].values[j % d];
                                local[b.0][j % d] += g[j] * nodes[a.0].values[j];
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let shape = nodes[i].shape.clone();
                    let (outer, total, inner) = axis_split(&shape, axis);
                    for o in 0..outer {
                        let mut offset = 0usize;
                        for id in &inputs {
                            let len = nodes[id.0].shape[axis];
                            let src_start = o * total * inner + offset * inner;
                            let dst_start = o * len * inner;
                            for j in 0..len * inner {
                                local[id.0][dst_start + j] += g[src_start + j];
                            }
                            offset += len;
                        }
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xshape = nodes[x.0].shape.clone();
                    let (outer, alen, inner) = axis_split(&xshape, axis);
                    let len = nodes[i].shape[axis];
                    for o in 0..outer {
                        let d = o * alen * inner + start * inner;
                        let s = o * len * inner;
                        for j in 0..len * inner {
                            local[x.0][d + j] += g[s + j];
                        }
                    }
                }
                Op::Relu { x } => {
                    for j in 0..g.len() {
                        if nodes[x.0].values[j] > 0.0 {
                            local[x.0][j] += g[j];
                        }
                    }
                }
                Op::Tanh { x } => {
                    for j in 0..g.len() {
                        let y = nodes[i].values[j];
                        local[x.0][j] += g[j] * (1.0 - y * y);
                    }
                }
                Op::Exp { x } => {
                    for j in 0..g.len() {
                        local[x.0][j] += g[j] * nodes[i].values[j];
                    }
                }
                Op::Log { x } => {
                    for j in 0..g.len() {
                        local[x.0][j] += g[j] / nodes[x.0].values[j];
                    }
                }
                Op::Softplus { x } => {
                    for j in 0..g.len() {
                        local[x.0][j] += g[j] * sigmoid(nodes[x.0].values[j]);
                    }
                }
                Op::Sin { x } => {
                    for j in 0..g.len() {
                        local[x.0][j] += g[j] * nodes[x.0].values[j].cos();
                    }
                }
                Op::Cos { x } => {
                    for j in 0..g.len() {
                        local[x.0][j] -= g[j] * nodes[x.0].values[j].sin();
                    }
                }
                Op::Softmax { x } => {
                    let last = *nodes[i].shape.last().unwrap();
                    let y = &nodes[i].values;
                    for (r, grow) in g.chunks(last).enumerate() {
                        let yrow = &y[r * last..(r + 1) * last];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            local[x.0][r * last + j] += (grow[j] - dot) * yrow[j];
                        }
                    }
                }
                Op::LayerNorm { x, eps } => {
                    let last = *nodes[i].shape.last().unwrap();
                    let xv = &nodes[x.0].values;
                    let n = last as f64;
                    for r in 0..g.len() / last {
                        let xrow = &xv[r * last..(r + 1) * last];
                        let grow = &g[r * last..(r + 1) * last];
                        let yrow = &nodes[i].values[r * last..(r + 1) * last];
                        let mean = xrow.iter().sum::<f64>() / n;
                        let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / n;
                        let gymean = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..last {
                            local[x.0][r * last + j] +=
                                inv * (grow[j] - gmean - yrow[j] * gymean);
                        }
                    }
                }
                Op::MaxPool { x, axis, argmax } => {
                    let xshape = nodes[x.0].shape.clone();
                    let (outer, len, inner) = axis_split(&xshape, axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let slot = o * inner + j;
                            let l = argmax[slot];
                            local[x.0][o * len * inner + l * inner + j] += g[slot];
                        }
                    }
                }
                Op::Sum { x } => {
                    for dst in local[x.0].iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::Mean { x } => {
                    let n = nodes[x.0].values.len() as f64;
                    for dst in local[x.0].iter_mut() {
                        *dst += g[0] / n;
                    }
                }
                Op::Reshape { x } => {
                    for (dst, src) in local[x.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
            }
            // restore this node's own gradient; descending order guarantees
            // no later visit will add to it
            local[i] = g;
        }

        for (node, l) in nodes.iter_mut().zip(local) {
            for (dst, src) in node.grad.iter_mut().zip(l) {
                *dst += src;
            }
        }
        Ok(())
    }
}

/// Max over coordinates of `|analytic - central_difference| / max(1, |cd|)`
/// for a scalar-valued tensor function at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, TensorId) -> Result<TensorId>,
{
    assert!(step > 0.0, "grad_check requires a positive step");
    let tape = Tape::new();
    let x = tape.leaf(&point.shape, point.values.clone())?;
    let y = f(&tape, x)?;
    if tape.numel(y) != 1 {
        return Err(TensorError::NonScalarOutput { shape: tape.shape(y) });
    }
    tape.backward(y)?;
    let analytic = tape.grad(x);

    let eval = |vals: &[f64]| -> Result<f64> {
        let t = Tape::new();
        let x = t.leaf(&point.shape, vals.to_vec())?;
        let y = f(&t, x)?;
        Ok(t.value_scalar(y))
    };

    let mut worst = 0.0f64;
    let mut probe = point.values.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = eval(&probe)?;
        probe[i] = orig - step;
        let fm = eval(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                op: "grad_check",
                index: i,
            });
        }
        let cd = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - cd).abs() / cd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn check<F>(f: F, shape: &[usize], seed: u64)
    where
        F: Fn(&Tape, TensorId) -> Result<TensorId>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let point = Tensor::new(shape.to_vec(), randv(&mut rng, n)).unwrap();
        let err = grad_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-5, "gradient error {err} for seed {seed}");
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.leaf(&[2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.values(c), vec![4.0, 6.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.softplus(x);
        assert!((tape.value_scalar(y) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = tape
            .leaf(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let x = tape.leaf(&[3, 2], (0..6).map(|v| v as f64).collect()).unwrap();
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn shape_mismatch_names_offenders() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.leaf(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_linear() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = tape.mul_scalar(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), vec![3.0]);
    }

    #[test]
    fn backward_softplus_grad_is_half_at_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.softplus(x);
        tape.backward(y).unwrap();
        assert!((tape.grad(x)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_constant_gives_zero() {
        let tape = Tape::new();
        let x = tape.scalar(5.0);
        let c = tape.scalar(7.0);
        // y depends only on c
        let y = tape.mul_scalar(c, 2.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        let y = tape.mul_scalar(x, 4.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), vec![8.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(x), vec![0.0]);
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        // grad of a*f + b*g == a*grad(f) + b*grad(g)
        let run = |a: f64, b: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(&[3], vec![0.4, -0.2, 0.9]).unwrap();
            let f = tape.sum(tape.mul(x, x).unwrap());
            let g = tape.sum(tape.sin(x));
            let fa = tape.mul_scalar(f, a);
            let gb = tape.mul_scalar(g, b);
            let y = tape.add(fa, gb).unwrap();
            tape.backward(y).unwrap();
            tape.grad(x)
        };
        let gf = run(1.0, 0.0);
        let gg = run(0.0, 1.0);
        let combined = run(2.5, -1.5);
        for i in 0..3 {
            assert!((combined[i] - (2.5 * gf[i] - 1.5 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn replaying_identical_leaves_is_bit_identical() {
        let build = || -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(&[2, 2], vec![0.3, -1.2, 2.2, 0.7]).unwrap();
            let w = tape.leaf(&[2, 2], vec![0.5, 0.1, -0.4, 1.1]).unwrap();
            let h = tape.tanh(tape.matmul(x, w).unwrap());
            let s = tape.softmax(h).unwrap();
            tape.values(tape.sum(s))
        };
        assert_eq!(build(), build());
    }

    // ── Finite-difference checks per primitive ─────────────────────────

    #[test]
    fn fd_matmul_all_transpose_modes() {
        for (seed, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
            // x plays the role of A with logical shape [2 x 3]
            let xshape = if ta { vec![3, 2] } else { vec![2, 3] };
            let bshape = if tb { vec![4, 3] } else { vec![3, 4] };
            let bvals = randv(&mut rng, 12);
            check(
                move |t, x| {
                    let b = t.leaf(&bshape, bvals.clone())?;
                    let y = t.matmul_t(x, b, ta, tb)?;
                    Ok(t.sum(t.mul(y, y)?))
                },
                &xshape,
                seed as u64,
            );
        }
        // also check gradient w.r.t. the rhs operand
        check(
            |t, x| {
                let a = t.leaf(&[2, 3], vec![0.3, 0.5, -0.2, 0.9, 1.1, -0.7])?;
                let y = t.matmul_t(a, x, false, true)?;
                Ok(t.sum(t.mul(y, y)?))
            },
            &[4, 3],
            7,
        );
    }

    #[test]
    fn fd_elementwise_ops() {
        check(|t, x| Ok(t.sum(t.tanh(x))), &[2, 3], 1);
        check(|t, x| Ok(t.sum(t.exp(x))), &[5], 2);
        check(|t, x| Ok(t.sum(t.softplus(x))), &[4], 3);
        check(|t, x| Ok(t.sum(t.sin(x))), &[3, 2], 4);
        check(|t, x| Ok(t.sum(t.cos(x))), &[3], 5);
        // log needs positive inputs: shift through softplus first
        check(|t, x| Ok(t.sum(t.log(t.add_scalar(t.softplus(x), 0.1)))), &[4], 6);
        // relu away from the kink
        check(|t, x| Ok(t.sum(t.relu(t.add_scalar(x, 3.0)))), &[4], 7);
        check(|t, x| Ok(t.sum(t.mul(x, x)?)), &[2, 2], 8);
    }

    #[test]
    fn fd_broadcast_add_mul() {
        check(
            |t, x| {
                let row = t.leaf(&[3], vec![0.4, -0.3, 1.2])?;
                let y = t.add(x, row)?;
                let s = t.scalar(0.7);
                let z = t.mul(y, s)?;
                Ok(t.sum(t.mul(z, z)?))
            },
            &[2, 3],
            9,
        );
        // gradient w.r.t. the broadcast row itself
        check(
            |t, x| {
                let big = t.leaf(&[2, 3], vec![0.3, 0.9, -0.5, 0.2, 0.8, -1.0])?;
                let y = t.mul(big, x)?;
                Ok(t.sum(t.mul(y, y)?))
            },
            &[3],
            10,
        );
    }

    #[test]
    fn fd_softmax_layernorm() {
        check(|t, x| Ok(t.sum(t.mul(t.softmax(x)?, t.softmax(x)?)?)), &[2, 4], 11);
        check(
            |t, x| {
                let y = t.layer_norm(x, 1e-5)?;
                let w = t.leaf(&[4], vec![0.2, 1.4, -0.3, 0.8])?;
                Ok(t.sum(t.mul(t.mul(y, y)?, w)?))
            },
            &[3, 4],
            12,
        );
    }

    #[test]
    fn fd_concat_slice_reductions() {
        check(
            |t, x| {
                let a = t.slice(x, 0, 0, 1)?;
                let b = t.slice(x, 0, 1, 2)?;
                let c = t.concat(&[b, a], 0)?;
                Ok(t.sum(t.mul(c, c)?))
            },
            &[3, 2],
            13,
        );
        check(
            |t, x| {
                let c = t.concat(&[x, x], 1)?;
                Ok(t.mean(t.mul(c, c)?))
            },
            &[2, 2],
            14,
        );
        check(|t, x| Ok(t.mean(t.mul(x, x)?)), &[7], 15);
    }

    #[test]
    fn fd_max_pool() {
        // generic values: ties have measure zero under the random draw
        check(
            |t, x| {
                let p = t.max_pool(x, 0)?;
                Ok(t.sum(t.mul(p, p)?))
            },
            &[4, 3],
            16,
        );
        check(
            |t, x| {
                let p = t.max_pool(x, 1)?;
                Ok(t.sum(t.mul(p, p)?))
            },
            &[3, 5],
            17,
        );
    }

    #[test]
    fn fd_derived_helpers() {
        check(|t, x| Ok(t.sum(t.abs(t.add_scalar(x, 2.5)))), &[3], 18);
        check(|t, x| Ok(t.sum(t.clamp(x, -0.9, 0.9))), &[4], 19);
        check(
            |t, x| Ok(t.sum(t.recip_pos(t.add_scalar(t.softplus(x), 0.2)))),
            &[3],
            20,
        );
        check(
            |t, x| {
                let g = t.gather_rows(x, &[2, 0, 2])?;
                Ok(t.sum(t.mul(g, g)?))
            },
            &[3, 2],
            21,
        );
    }

    #[test]
    fn fd_smooth_polynomial_is_tight() {
        // f(x) = x^2 at x = 3 with step 1e-5: error < 1e-6
        let point = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(|t, x| t.mul(x, x), &point, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let point = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let res = grad_check(|t, x| Ok(t.log(x)), &point, 1e-5);
        assert!(matches!(res, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn max_pool_tie_breaks_to_lower_index() {
        let tape = Tape::new();
        let x = tape.leaf(&[3, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let p = tape.max_pool(x, 0).unwrap();
        let y = tape.sum(p);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(&[1, 4], vec![0.3; 4]).unwrap();
        let s = tape.softmax(x).unwrap();
        for v in tape.values(s) {
            assert_eq!(v, 0.25);
        }
    }
}
