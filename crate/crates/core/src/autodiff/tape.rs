//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and enough saved
//! state to run its backward rule. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep. Nodes whose inputs are all constants are marked as not
//! requiring gradients and are skipped during the sweep.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    L2Norm {
        a: usize,
    },
    NormalizeRows {
        a: usize,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitives executed on tensors and replays them in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    id: usize,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` into (outer, axis_len, inner) around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `b` broadcasts onto `a` when its shape is a trailing suffix of `a`'s.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::InvalidArgument("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn param(&self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.index];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Runs `f` over the node's raw data without copying.
    pub fn with_data<R>(&self, v: Var, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.nodes.borrow()[v.index].value)
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.index].value[0]
    }

    /// Matrix product. `a: [.., K] × b: [K, N] → [.., N]`, or batched
    /// `a: [B, M, K] × b: [B, K, N] → [B, M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[ai], &nodes[bi]);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        };
        let rg = na.requires_grad || nb.requires_grad;
        if nb.shape.len() == 2 {
            let (k, n) = (nb.shape[0], nb.shape[1]);
            if *na.shape.last().ok_or_else(mismatch)? != k {
                return Err(mismatch());
            }
            let rows = na.value.len() / k;
            let mut out = vec![T::zero(); rows * n];
            gemm_nn(&na.value, &nb.value, &mut out, rows, k, n);
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = n;
            drop(nodes);
            Ok(self.push(
                shape,
                out,
                Op::MatMul {
                    a: ai,
                    b: bi,
                    rows,
                    k,
                    n,
                },
                rg,
            ))
        } else if nb.shape.len() == 3 && na.shape.len() == 3 {
            let (batch, m, k) = (na.shape[0], na.shape[1], na.shape[2]);
            if nb.shape[0] != batch || nb.shape[1] != k {
                return Err(mismatch());
            }
            let n = nb.shape[2];
            let mut out = vec![T::zero(); batch * m * n];
            for bt in 0..batch {
                gemm_nn(
                    &na.value[bt * m * k..(bt + 1) * m * k],
                    &nb.value[bt * k * n..(bt + 1) * k * n],
                    &mut out[bt * m * n..(bt + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            drop(nodes);
            Ok(self.push(
                vec![batch, m, n],
                out,
                Op::BatchMatMul {
                    a: ai,
                    b: bi,
                    batch,
                    m,
                    k,
                    n,
                },
                rg,
            ))
        } else {
            Err(mismatch())
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Vec<usize>, Vec<T>, bool)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[ai], &nodes[bi]);
        if !broadcasts(&na.shape, &nb.shape) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let m = nb.value.len();
        let out = na
            .value
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((ai, bi, na.shape.clone(), out, na.requires_grad || nb.requires_grad))
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, out, rg) = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, out, rg) = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        let out = na.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        drop(nodes);
        Ok(self.push(shape, out, op(ai), rg))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, |a| Op::Scale { a, c })
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, |a| Op::Gelu { a })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, |a| Op::Relu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        let c = *na.shape.last().unwrap();
        let mut out = na.value.clone();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        drop(nodes);
        Ok(self.push(shape, out, Op::Softmax { a: ai }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let nodes = self.nodes.borrow();
        let (nx, ng, nbeta) = (&nodes[xi], &nodes[gi], &nodes[bi]);
        let d = *nx.shape.last().unwrap();
        if ng.shape != [d] || nbeta.shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: nx.shape.clone(),
                rhs: ng.shape.clone(),
            });
        }
        let rows = nx.value.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); nx.value.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); nx.value.len()];
        for r in 0..rows {
            let row = &nx.value[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * ng.value[j] + nbeta.value[j];
            }
        }
        let shape = nx.shape.clone();
        let rg = nx.requires_grad || ng.requires_grad || nbeta.requires_grad;
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `table: [R, D]`, returns `[ids.len(), D]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let nodes = self.nodes.borrow();
        let nt = &nodes[ti];
        if nt.shape.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                shape: nt.shape.clone(),
                reason: "embedding table must be 2-D and ids non-empty".into(),
            });
        }
        let (rows, d) = (nt.shape[0], nt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&nt.value[id * d..(id + 1) * d]);
        }
        let rg = nt.requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table: ti,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concatenate needs at least one input".into()));
        }
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let nodes = self.nodes.borrow();
        let first = &nodes[idx[0]].shape;
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concatenate axis {axis} out of range")));
        }
        let mut axis_len = 0;
        for &i in &idx {
            let s = &nodes[i].shape;
            let compatible =
                s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concatenate",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_len += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_len;
        let (outer, _, inner) = around(first, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &i in &idx {
                let chunk = nodes[i].shape[axis] * inner;
                out.extend_from_slice(&nodes[i].value[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = idx.iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        Ok(self.push(shape, out, Op::Concat { inputs: idx, axis }, rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        if axis >= na.shape.len() || start >= end || end > na.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                na.shape
            )));
        }
        let (outer, len, inner) = around(&na.shape, axis);
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&na.value[base..base + width]);
        }
        let mut shape = na.shape.clone();
        shape[axis] = end - start;
        let rg = na.requires_grad;
        drop(nodes);
        Ok(self.push(shape, out, Op::Slice { a: ai, axis, start }, rg))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        let mut seen = vec![false; na.shape.len()];
        let valid = perm.len() == na.shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for shape {:?}",
                na.shape
            )));
        }
        let out = kernels::permute(&na.value, &na.shape, perm);
        let shape = perm.iter().map(|&p| na.shape[p]).collect();
        let rg = na.requires_grad;
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                a: ai,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::InvalidArgument("transpose needs rank ≥ 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        if numel(shape) != na.value.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: na.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (out, rg) = (na.value.clone(), na.requires_grad);
        drop(nodes);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: ai }, rg))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[ai].value.iter().copied().sum::<T>(), nodes[ai].requires_grad)
        };
        Ok(self.push(vec![1], vec![s], Op::Sum { a: ai }, rg))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, rg) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ai].value;
            (
                v.iter().copied().sum::<T>() / T::of(v.len() as f64),
                nodes[ai].requires_grad,
            )
        };
        Ok(self.push(vec![1], vec![m], Op::Mean { a: ai }, rg))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (n, rg) = {
            let nodes = self.nodes.borrow();
            (l2(&nodes[ai].value), nodes[ai].requires_grad)
        };
        Ok(self.push(vec![1], vec![n], Op::L2Norm { a: ai }, rg))
    }

    /// Scales every last-axis row to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let na = &nodes[ai];
        let d = *na.shape.last().unwrap();
        let tiny = T::of(1e-12);
        let mut norms = Vec::with_capacity(na.value.len() / d);
        let mut out = Vec::with_capacity(na.value.len());
        for row in na.value.chunks(d) {
            let n = l2(row).max(tiny);
            norms.push(n);
            out.extend(row.iter().map(|&x| x / n));
        }
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        drop(nodes);
        Ok(self.push(shape, out, Op::NormalizeRows { a: ai, norms }, rg))
    }

    /// Mean over rows of `−log softmax(logits)[target]`; `logits: [N, C]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let nodes = self.nodes.borrow();
        let nl = &nodes[li];
        if nl.shape.len() != 2 || nl.shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: nl.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let c = nl.shape[1];
        let mut probs = nl.value.clone();
        let mut total = T::zero();
        for (row, (&t, logit_row)) in probs.chunks_mut(c).zip(targets.iter().zip(nl.value.chunks(c))) {
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "cross-entropy target",
                    index: t,
                    bound: c,
                });
            }
            let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total = total + lse - (logit_row[t] - max);
            softmax_row(row);
        }
        let loss = total / T::of(targets.len() as f64);
        let rg = nl.requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        let nodes = self.nodes.into_inner();
        if nodes[li].value.len() != 1 {
            return Err(Error::NotScalar(nodes[li].shape.clone()));
        }
        if !nodes[li].value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[li].requires_grad {
            grads[li] = Some(vec![T::one()]);
        }
        for i in (0..=li).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        for (i, node) in nodes.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&node.op, &grads[i]) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of leaf #{i}")));
                }
            }
        }
        let shapes = nodes.into_iter().map(|n| n.shape).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

pub(crate) fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

/// Accumulates into the gradient slot of node `i`, allocating zeros on first use.
fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, rows, k, n } => {
            if let Some(ga) = slot(grads, nodes, a) {
                gemm_nt(g, &nodes[b].value, ga, rows, k, n);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gemm_tn(&nodes[a].value, g, gb, rows, k, n);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for bt in 0..batch {
                    gemm_nt(
                        &g[bt * m * n..(bt + 1) * m * n],
                        &nodes[b].value[bt * k * n..(bt + 1) * k * n],
                        &mut ga[bt * m * k..(bt + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for bt in 0..batch {
                    gemm_tn(
                        &nodes[a].value[bt * m * k..(bt + 1) * m * k],
                        &g[bt * m * n..(bt + 1) * m * n],
                        &mut gb[bt * k * n..(bt + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -T::one()
            } else {
                T::one()
            };
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                let m = gb.len();
                for chunk in g.chunks(m) {
                    gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x = *x + sign * y);
                }
            }
        }
        &Op::Mul { a, b } => {
            let m = nodes[b].value.len();
            if let Some(ga) = slot(grads, nodes, a) {
                for (gch, gac) in g.chunks(m).zip(ga.chunks_mut(m)) {
                    for ((x, &y), &bv) in gac.iter_mut().zip(gch).zip(&nodes[b].value) {
                        *x = *x + y * bv;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (gch, ach) in g.chunks(m).zip(nodes[a].value.chunks(m)) {
                    for ((x, &y), &av) in gb.iter_mut().zip(gch).zip(ach) {
                        *x = *x + y * av;
                    }
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c);
            }
        }
        &Op::Gelu { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(&nodes[a].value) {
                    *x = *x + y * kernels::gelu_grad(v);
                }
            }
        }
        &Op::Relu { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(&nodes[a].value) {
                    if v > T::zero() {
                        *x = *x + y;
                    }
                }
            }
        }
        &Op::Softmax { a } => {
            let c = *node.shape.last().unwrap();
            if let Some(ga) = slot(grads, nodes, a) {
                for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<T>();
                    for ((x, &u), &y) in gar.iter_mut().zip(gr).zip(yr) {
                        *x = *x + y * (u - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[*gamma].value.len();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((acc, &u), &h) in gg.iter_mut().zip(gr).zip(hr) {
                        *acc = *acc + u * h;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(acc, &u)| *acc = *acc + u);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let gamma_v = &nodes[*gamma].value;
                let dn = T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for (r, ((gxr, gr), hr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gamma_v[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dh = mean_dh + dxhat[j] * hr[j];
                    }
                    mean_d = mean_d / dn;
                    mean_dh = mean_dh / dn;
                    for j in 0..d {
                        gxr[j] = gxr[j] + rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = node.shape[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (&id, gr) in ids.iter().zip(g.chunks(d)) {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = around(&node.shape, *axis);
            let out_chunk = node.shape[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let chunk = nodes[i].shape[*axis] * inner;
                if let Some(gi) = slot(grads, nodes, i) {
                    for o in 0..outer {
                        let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                        gi[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
                offset += chunk;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, len, inner) = around(&nodes[a].shape, axis);
            let width = node.shape[axis] * inner;
            if let Some(ga) = slot(grads, nodes, a) {
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    ga[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let back = kernels::permute(g, &node.shape, &kernels::inverse_perm(perm));
                ga.iter_mut().zip(back).for_each(|(x, y)| *x = *x + y);
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                let s = g[0] / T::of(ga.len() as f64);
                ga.iter_mut().for_each(|x| *x = *x + s);
            }
        }
        &Op::L2Norm { a } => {
            let n = node.value[0];
            if n > T::zero() {
                if let Some(ga) = slot(grads, nodes, a) {
                    for (x, &v) in ga.iter_mut().zip(&nodes[a].value) {
                        *x = *x + g[0] * v / n;
                    }
                }
            }
        }
        Op::NormalizeRows { a, norms } => {
            let d = *node.shape.last().unwrap();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (((gar, gr), yr), &n) in ga.chunks_mut(d).zip(g.chunks(d)).zip(node.value.chunks(d)).zip(norms) {
                    let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<T>();
                    for ((x, &u), &y) in gar.iter_mut().zip(gr).zip(yr) {
                        *x = *x + (u - y * dot) / n;
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, targets, probs } => {
            let c = nodes[*logits].shape[1];
            let s = g[0] / T::of(targets.len() as f64);
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, (&t, pr)) in targets.iter().zip(probs.chunks(c)).enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] = gl[r * c + j] + s * (pr[j] - onehot);
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient, `None` when the variable did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when the variable did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.index].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
