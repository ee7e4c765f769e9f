use std::sync::atomic::{AtomicU8, Ordering};

use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation whose backward pass can be sabotaged for mutation testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum BackwardFault {
    MatMul = 1,
    Add,
    Mul,
    Softmax,
    LayerNorm,
    Gather,
    Concat,
    Relu,
    Sigmoid,
}

impl BackwardFault {
    pub const ALL: [BackwardFault; 9] = [
        BackwardFault::MatMul,
        BackwardFault::Add,
        BackwardFault::Mul,
        BackwardFault::Softmax,
        BackwardFault::LayerNorm,
        BackwardFault::Gather,
        BackwardFault::Concat,
        BackwardFault::Relu,
        BackwardFault::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackwardFault::MatMul => "matmul",
            BackwardFault::Add => "add",
            BackwardFault::Mul => "mul",
            BackwardFault::Softmax => "softmax",
            BackwardFault::LayerNorm => "layer_norm",
            BackwardFault::Gather => "embedding_lookup",
            BackwardFault::Concat => "concat",
            BackwardFault::Relu => "relu",
            BackwardFault::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

static BACKWARD_FAULT: AtomicU8 = AtomicU8::new(0);

/// Flips the sign of the gradient emitted by one operation kind, process-wide.
/// Only the verification harness should call this.
#[doc(hidden)]
pub fn set_backward_fault(fault: Option<BackwardFault>) {
    BACKWARD_FAULT.store(fault.map_or(0, |f| f as u8), Ordering::SeqCst);
}

fn active_fault() -> u8 {
    BACKWARD_FAULT.load(Ordering::Relaxed)
}

enum Op<F> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
}

impl<F> Op<F> {
    fn fault_kind(&self) -> u8 {
        let kind = match self {
            Op::MatMul(..) => BackwardFault::MatMul,
            Op::Add(..) | Op::AddRow(..) => BackwardFault::Add,
            Op::Mul(..) => BackwardFault::Mul,
            Op::Softmax { .. } => BackwardFault::Softmax,
            Op::LayerNorm { .. } => BackwardFault::LayerNorm,
            Op::Gather { .. } => BackwardFault::Gather,
            Op::Concat { .. } => BackwardFault::Concat,
            Op::Relu(..) => BackwardFault::Relu,
            Op::Sigmoid(..) => BackwardFault::Sigmoid,
            _ => return 0,
        };
        kind as u8
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation graph recorded during one forward pass.
///
/// Nodes are appended in creation order, which is already a topological order,
/// so backward is a single reverse sweep.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let shape = self.nodes[v.0].value.shape();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == F::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &b)| v + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.map(x, softplus);
        let rg = self.rg(x);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the last axis where entries with `allowed == false` get
    /// probability exactly zero. Every slice must allow at least one entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax_impl(x, axis, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, allowed: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        if let Some(m) = allowed {
            if m.len() != self.value(x).len() {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let xv = self.value(x).data();
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let ok = |j: usize| allowed.map_or(true, |m| m[idx(j)]);
                let mut max = F::neg_infinity();
                for j in 0..n {
                    if ok(j) && xv[idx(j)] > max {
                        max = xv[idx(j)];
                    }
                }
                if max == F::neg_infinity() {
                    return Err(Error::DegenerateInput(
                        "softmax slice with every entry masked".into(),
                    ));
                }
                let mut total = F::zero();
                for j in 0..n {
                    if ok(j) {
                        let e = (xv[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, n, inner },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::shape("layer_norm", self.shape(x), &[2]));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(eps);
        let df = F::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[2]));
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
            },
            rg,
        ))
    }

    /// Keeps `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * axis_len * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice {
                x,
                outer,
                axis_len,
                inner,
                start,
                end,
            },
            rg,
        ))
    }

    /// Mean of the rows of `x[T, D]` where `mask` is set; returns `[1, D]`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != mask.len() {
            return Err(Error::shape("mean_pool", s, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateInput("mean_pool with all-zero mask".into()));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); d];
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..d {
                out[j] += xv[t * d + j];
            }
        }
        let c = F::from_usize(count).unwrap();
        for o in &mut out {
            *o = *o / c;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![1, d], out)?,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::DegenerateInput("mean of empty tensor".into()));
        }
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s / F::from_usize(n).unwrap()),
            Op::Mean(x),
            rg,
        ))
    }

    /// Inverted dropout. `p == 0` returns `x` itself and draws nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { F::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Reverse sweep from a single-element `root`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let fault = active_fault();
        let Self { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if fault != 0 && node.op.fault_kind() == fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            backprop_node(nodes, &mut grads, leaf_grads, i, g);
        }
        Ok(())
    }
}

fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Scalar>(v: F) -> F {
    v.max(F::zero()) + (-v.abs()).exp().ln_1p()
}

fn slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.len()]))
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    leaf_grads: &mut [Option<Vec<F>>],
    i: usize,
    g: Vec<F>,
) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => match &mut leaf_grads[i] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
            None => leaf_grads[i] = Some(g),
        },
        Op::Constant => {}
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let (m, k) = (sa[0], sa[1]);
            let n = node.value.shape()[1];
            if let Some(da) = slot(nodes, grads, *a) {
                let bv = val(*b);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = F::zero();
                        for (&gv, &bv) in grow.iter().zip(brow) {
                            s += gv * bv;
                        }
                        da[r * k + p] += s;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let av = val(*a);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = av[r * k + p];
                        if arp == F::zero() {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += arp * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let (n, m) = (s[0], s[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let bv = val(*b);
                for ((x, &y), &w) in d.iter_mut().zip(&g).zip(bv) {
                    *x += y * w;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                let av = val(*a);
                for ((x, &y), &w) in d.iter_mut().zip(&g).zip(av) {
                    *x += y * w;
                }
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                let n = d.len();
                for row in g.chunks(n.max(1)) {
                    d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * *c);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((a, &b), &inp) in d.iter_mut().zip(&g).zip(xv) {
                    if inp > F::zero() {
                        *a += b;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let yv = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((a, &b), &y) in d.iter_mut().zip(&g).zip(yv) {
                    *a += b * y * (F::one() - y);
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((a, &b), &inp) in d.iter_mut().zip(&g).zip(xv) {
                    *a += b * sigmoid(inp);
                }
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            let yv = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let mut dot = F::zero();
                        for j in 0..*n {
                            dot += g[idx(j)] * yv[idx(j)];
                        }
                        for j in 0..*n {
                            d[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let dcols = gv.len();
            let df = F::from_usize(dcols).unwrap();
            if let Some(d) = slot(nodes, grads, *gain) {
                for (r, grow) in g.chunks(dcols).enumerate() {
                    for j in 0..dcols {
                        d[j] += grow[j] * xhat[r * dcols + j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for grow in g.chunks(dcols) {
                    d.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let mut dxhat = vec![F::zero(); dcols];
                for (r, grow) in g.chunks(dcols).enumerate() {
                    let h = &xhat[r * dcols..(r + 1) * dcols];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..dcols {
                        dxhat[j] = grow[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * h[j];
                    }
                    m1 = m1 / df;
                    m2 = m2 / df;
                    for j in 0..dcols {
                        d[r * dcols + j] += rstd[r] * (dxhat[j] - m1 - h[j] * m2);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(d) = slot(nodes, grads, *table) {
                let dcols = nodes[table.0].value.cols();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * dcols..(r + 1) * dcols];
                    let dst = &mut d[id * dcols..(id + 1) * dcols];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Concat { inputs, outer } => {
            // per-outer chunk width of each input
            let widths: Vec<usize> = inputs
                .iter()
                .map(|v| nodes[v.0].value.len() / outer.max(&1))
                .collect();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&v, &w) in inputs.iter().zip(&widths) {
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        d[o * w..(o + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::Slice {
            x,
            outer,
            axis_len,
            inner,
            start,
            end,
        } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let w = (end - start) * inner;
                for o in 0..*outer {
                    let base = o * axis_len * inner + start * inner;
                    d[base..base + w]
                        .iter_mut()
                        .zip(&g[o * w..(o + 1) * w])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::MeanPool { x, mask, count } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let dcols = g.len();
                let c = F::from_usize(*count).unwrap();
                for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..dcols {
                        d[t * dcols + j] += g[j] / c;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let share = g[0] / F::from_usize(d.len()).unwrap();
                d.iter_mut().for_each(|a| *a += share);
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((a, &b), &m) in d.iter_mut().zip(&g).zip(mask) {
                    *a += b * m;
                }
            }
        }
    }
}
