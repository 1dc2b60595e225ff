use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, AttnDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par::Execution;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<F>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, F),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Normalize { x: Var, inv_std: Vec<F> },
    Gelu(Var),
    Silu(Var),
    Ln(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<Vec<bool>>,
        dims: AttnDims,
        probs: Vec<F>,
    },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumSquares(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and `backward` simply walks it in reverse.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<F>>>,
    exec: Execution,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not part of a [`ParamStore`].
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds `b: [D]` to every row of `x: [.., D]`; the only broadcast the graph supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.cols();
        if bv.len() != d {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Multiplies every row of `x: [.., D]` elementwise by `g: [D]`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::shape("mul_row", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &gg) in row.iter_mut().zip(gv.data()) {
                *o = *o * gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    /// Zero-mean unit-variance normalization of each row, no affine.
    pub fn normalize(&mut self, x: Var, eps: F) -> Var {
        let xv = self.value(x);
        let (y, inv_std) = kernels::normalize_rows(xv.data(), xv.cols(), eps);
        let out = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Normalize { x, inv_std }, rg)
    }

    /// Layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let n = self.normalize(x, eps);
        let s = self.mul_row(n, gain)?;
        self.add_bias(s, bias)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_fwd(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(out, Op::Ln(x), rg)
    }

    /// Softmax over the last axis restricted to allowed positions.
    pub fn softmax_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let out = kernels::softmax_masked(self.value(x), &mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Multi-head scaled dot-product attention. `q: [nq, D]`, `k, v: [nk, D]`,
    /// `mask: [nq, nk]` row-major, true where attention is allowed.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<Vec<bool>>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if kv.cols() != width || vv.shape() != kv.shape() || heads == 0 || width % heads != 0 {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let dims = AttnDims {
            nq: qv.rows(),
            nk: kv.rows(),
            heads,
            head_dim: width / heads,
        };
        if mask.len() != dims.nq * dims.nk {
            return Err(Error::shape(
                "attention mask",
                &[dims.nq, dims.nk],
                &[mask.len()],
            ));
        }
        let (out, probs) =
            kernels::attention_forward(qv.data(), kv.data(), vv.data(), &mask, dims, self.exec)?;
        let out = Tensor::new(vec![dims.nq, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Row gather: `out[i] = x[idx[i]]`. Doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Range(format!("gather row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a `[rows, cols]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start >= end || end > c {
            return Err(Error::Range(format!("column slice {start}..{end} of {c}")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, end - start], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![F::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor<F>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, kernels::matmul(g, &bv.transpose2d()?)?)?;
                }
                if self.rg(*b) {
                    send(*b, kernels::matmul(&av.transpose2d()?, g)?)?;
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(self.value(*b), "mul'", |x, y| x * y)?)?;
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(self.value(*a), "mul'", |x, y| x * y)?)?;
                }
            }
            Op::AddScalar(a) => send(*a, g.clone())?,
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::AddBias(x, b) => {
                send(*x, g.clone())?;
                if self.rg(*b) {
                    send(*b, column_sums(g, self.value(*b).shape()))?;
                }
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(d) {
                        for (o, &gg) in row.iter_mut().zip(gv.data()) {
                            *o = *o * gg;
                        }
                    }
                    send(*x, dx)?;
                }
                if self.rg(*gain) {
                    let prod = g.zip_map(xv, "mul_row'", |a, b| a * b)?;
                    send(*gain, column_sums(&prod, gv.shape()))?;
                }
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let d = y.cols();
                let n = F::of(d as f64);
                let mut dx = Tensor::zeros(y.shape());
                for (r, &is) in inv_std.iter().enumerate() {
                    let (gy, yy) = (g.row(r), y.row(r));
                    let mean_g = gy.iter().copied().sum::<F>() / n;
                    let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for ((o, &a), &b) in dx.row_mut(r).iter_mut().zip(gy).zip(yy) {
                        *o = is * (a - mean_g - b * mean_gy);
                    }
                }
                send(*x, dx)?;
            }
            Op::Gelu(x) => {
                let d = self.value(*x).map(|v| gelu_fwd(v).1);
                send(*x, g.zip_map(&d, "gelu'", |a, b| a * b)?)?;
            }
            Op::Silu(x) => {
                let d = self.value(*x).map(|v| {
                    let s = sigmoid(v);
                    s * (F::one() + v * (F::one() - s))
                });
                send(*x, g.zip_map(&d, "silu'", |a, b| a * b)?)?;
            }
            Op::Ln(x) => send(*x, g.zip_map(self.value(*x), "ln'", |a, b| a / b)?)?,
            Op::Softmax(x) => {
                let p = &node.value;
                let n = p.cols();
                let mut dx = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dotv = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..n {
                        dx.row_mut(r)[j] = pr[j] * (gr[j] - dotv);
                    }
                }
                send(*x, dx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                dims,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    mask,
                    g.data(),
                    *dims,
                    self.exec,
                )?;
                let w = dims.width();
                send(*q, Tensor::new(vec![dims.nq, w], dq)?)?;
                send(*k, Tensor::new(vec![dims.nk, w], dk)?)?;
                send(*v, Tensor::new(vec![dims.nk, w], dv)?)?;
            }
            Op::GatherRows { x, idx } => {
                let xs = self.value(*x).shape();
                let mut dx = Tensor::zeros(xs);
                for (o, &src) in idx.iter().enumerate() {
                    for (a, &b) in dx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *a = *a + b;
                    }
                }
                send(*x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let piece = g.slice_rows(start, start + r)?;
                    send(p, piece.reshape(self.value(p).shape())?)?;
                    start += r;
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x).shape();
                let mut dx = Tensor::zeros(xs);
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                send(*x, dx)?;
            }
            Op::SumSquares(x) => {
                let s = g.data()[0] * F::of(2.0);
                send(*x, self.value(*x).scale(s))?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                send(*x, Tensor::full(self.value(*x).shape(), s))?;
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` call at `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients aligned with `store`; parameters not reached get zeros.
    pub fn param_grads(&self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .get(&id)
                    .and_then(|&v| self.grad(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Whether any gradient reached parameter `id`.
    pub fn param_reached(&self, id: ParamId) -> bool {
        self.params.get(&id).and_then(|&v| self.grad(v)).is_some()
    }
}

fn column_sums<F: Scalar>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let d = g.cols();
    let mut out = vec![F::zero(); d];
    for row in g.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("bias shape")
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// GELU (tanh form) and its derivative.
fn gelu_fwd<F: Scalar>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (F::one() + t);
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_two_p() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let l = g.sum_squares(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn params_are_deduplicated() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.5));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads(&store)[0].data(), &[3.0]);
    }
}
