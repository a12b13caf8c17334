//! Dynamic computation graph.
//!
//! Every op appends one node holding its forward value. Node ids only ever
//! point backwards, so record order is a topological order and the reverse
//! pass is a single sweep from the loss node down to node 0.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Gelu { x: Var, th: Vec<T> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, idx: Vec<usize> },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MseWeighted { pred: Var, target: Var, weight: T },
    Sum(Var),
    Reshape(Var),
    Detach,
}

pub(crate) struct Node<'p, T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Cow<'p, [T]>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records one forward computation; consumed by [`Tape::backward`].
pub struct Tape<'p, T: Scalar> {
    pub(crate) nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    /// Tape whose [`param`](Self::param) leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(store),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p, T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is valid")
    }

    /// First element; meant for scalar losses.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Leaf view of a stored parameter. Repeated calls return the same node,
    /// so every use accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("Tape::param requires Tape::with_params");
        self.nodes.push(Node {
            shape: store.shape(id).to_vec(),
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -----------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Adds `bias` (one value per column) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let th: Vec<T> = self.value(x).iter().map(|&v| gelu_tanh(v)).collect();
        let out = self.value(x).iter().zip(&th).map(|(&v, &t)| T::from_f64(0.5) * v * (T::one() + t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Gelu { x, th }, rg)
    }

    // ---- normalisation ------------------------------------------------

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last extent restricted to `allowed` entries (row-major,
    /// same length as `x`). Disallowed entries are exactly zero; every row
    /// needs at least one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: Rc<[bool]>) -> Result<Var> {
        if allowed.len() != self.value(x).len() {
            return Err(mismatch("masked_softmax", self.shape(x), &[allowed.len()]));
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NanInput { op: "softmax" });
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    reason: format!("row {i} has no admissible entry"),
                });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    // ---- structural ---------------------------------------------------

    /// Rows of `table[V×d]` at `idx`, giving `[idx.len()×d]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                reason: "empty index list".into(),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    extent: v,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_lastdim",
            reason: "no inputs".into(),
        })?;
        let (r, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(mismatch("concat_lastdim", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatLast(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, c) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: "empty index list".into(),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// `Σ_rows −log softmax(logits)[target]` (summed, not averaged).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, b) = self.dims(logits);
        if targets.len() != n {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NanInput { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); n * b];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= b {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: b,
                });
            }
            let row = &lv[i * b..(i + 1) * b];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * b..(i + 1) * b];
            let mut sum = T::zero();
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            p.iter_mut().for_each(|v| *v *= inv);
            loss += sum.ln() + mx - row[t];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `weight · Σ (pred − target)²`.
    pub fn mse_weighted(&mut self, pred: Var, target: Var, weight: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch("mse_weighted", self.shape(pred), self.shape(target)));
        }
        let w = T::from_f64(weight);
        let s = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![w * s], Op::MseWeighted { pred, target, weight: w }, rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        crate::tensor::check_shape(shape, self.value(x).len())?;
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    // ---- gradient barrier ---------------------------------------------

    /// Value-identical copy of `x` that never propagates gradient back into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Detach, false)
    }

    // ---- reverse pass -------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let (grads, nodes) = self.sweep(loss, T::one())?;
        let mut leaves = HashMap::new();
        let mut params = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                match nodes[i] {
                    NodeKind::Leaf => {
                        leaves.insert(i, g);
                    }
                    NodeKind::Param(id) => {
                        params.insert(id, g);
                    }
                    NodeKind::Other => {}
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    /// Reverse sweep seeded with `seed` (∂total/∂loss); parameter gradients are
    /// added into `buf`.
    pub fn backward_into(self, loss: Var, seed: T, buf: &mut GradBuffer<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        // Parameter nodes accumulate straight into the buffer's storage.
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (&id, v) in &self.param_vars {
            if buf.grads[id.0].len() != self.nodes[v.0].value.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward_into",
                    left: vec![buf.grads[id.0].len()],
                    right: self.nodes[v.0].shape.clone(),
                });
            }
            grads[v.0] = Some(std::mem::take(&mut buf.grads[id.0]));
        }
        let mut grads = crate::backward::run(&self.nodes, loss, seed, grads);
        for (&id, v) in &self.param_vars {
            buf.grads[id.0] = grads[v.0].take().expect("parameter slot is restored");
        }
        Ok(())
    }

    fn sweep(self, loss: Var, seed: T) -> Result<(Vec<Option<Vec<T>>>, Vec<NodeKind>)> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let grads = crate::backward::run(&self.nodes, loss, seed, grads);
        let kinds = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => NodeKind::Leaf,
                Op::Param(id) => NodeKind::Param(id),
                _ => NodeKind::Other,
            })
            .collect();
        Ok((grads, kinds))
    }
}

#[derive(Clone, Copy)]
enum NodeKind {
    Leaf,
    Param(ParamId),
    Other,
}

/// Gradients collected by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: HashMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an input leaf; `None` when the leaf was not reached or
    /// does not require grad.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Gradient of a leaf, zero-filled to `len` when unreached.
    pub fn of_or_zero(&self, v: Var, len: usize) -> Vec<T> {
        self.of(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(0.044715);
    (k * (x + c * x * x * x)).tanh()
}

/// Derivative of the tanh-approximated GELU given `th = gelu_tanh(x)`.
pub(crate) fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x)
}
