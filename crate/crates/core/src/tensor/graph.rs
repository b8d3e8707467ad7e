//! The computation tape.

use super::conv::{self, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the input values, the forward output, and the upstream
/// gradient, and returns one gradient per input (`None` where `needs[i]` is
/// false).
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&[T]], output: &[T], grad_output: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind<T> {
    Logistic,
    Tanh,
    LeakyRelu(T),
    Softplus,
    Scale(T),
}

enum Op<T: Real> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind<T>, x: Var },
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Reduce { x: Var, axes: Vec<usize>, mean: bool },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: BinaryKind::Add, .. } => "add",
            Op::Binary { kind: BinaryKind::Sub, .. } => "sub",
            Op::Binary { kind: BinaryKind::Mul, .. } => "mul",
            Op::Unary { kind: UnaryKind::Logistic, .. } => "logistic",
            Op::Unary { kind: UnaryKind::Tanh, .. } => "tanh",
            Op::Unary { kind: UnaryKind::LeakyRelu(_), .. } => "leaky_relu",
            Op::Unary { kind: UnaryKind::Softplus, .. } => "softplus",
            Op::Unary { kind: UnaryKind::Scale(_), .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Reduce { mean: false, .. } => "sum",
            Op::Reduce { mean: true, .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    /// Persistent gradient; only leaves keep one across backward passes.
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Maps every flat index of `out` to the corresponding flat index of `shape`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let total = numel(out);
    if shape == out {
        return (0..total).collect();
    }
    let n = numel(shape);
    if out.ends_with(shape) {
        return (0..total).map(|i| i % n).collect();
    }
    let strides = broadcast_strides(shape, out);
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes recorded by operation `op` (as named in numeric errors), in
    /// execution order.
    pub fn vars_with_op(&self, op: &str) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op.name() == op).map(Var).collect()
    }

    /// Hash of the branch taken by every piecewise op on the tape. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Unary { kind: UnaryKind::LeakyRelu(_), x } = node.op {
                h.write_usize(i);
                for &v in &self.nodes[x.0].value {
                    h.write_u8((v >= T::zero()) as u8);
                }
            }
        }
        h.finish()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a copy of `tensor` as a leaf; it is differentiable when the
    /// tensor requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad(), Op::Leaf)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", format!("shape {shape:?} vs {} elements", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    /// Detached copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First recorded node holding a NaN or infinity, as `(op name, index)`.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (n.op.name(), i))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = Op::<T>::Binary { kind, a, b }.name();
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::dim(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (ma, mb) = (broadcast_index(&sa, &out), broadcast_index(&sb, &out));
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<T> = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| match kind {
                BinaryKind::Add => va[i] + vb[j],
                BinaryKind::Sub => va[i] - vb[j],
                BinaryKind::Mul => va[i] * vb[j],
            })
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, value, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Logistic => logistic(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::LeakyRelu(s) => {
                    if v >= T::zero() {
                        v
                    } else {
                        s * v
                    }
                }
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Scale(c) => c * v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, rg, Op::Unary { kind, x })
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Logistic, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(UnaryKind::Scale(factor), x)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[M,K] x b[K,N]`, or `a[M,K] x b[N,K]^T` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?} (axis 1 of a vs b)")));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), rsb, csb, T::zero(), &mut value, n as isize, 1);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T`, the layout of a fully connected layer with `[out, in]` weights.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Cross-correlation of `x[N,C,H,W]` with `kernel[O,C,kh,kw]` plus `bias[O]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 {
            return Err(Error::dim("conv2d", format!("input must be [N,C,H,W], got {sx:?}")));
        }
        if sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("kernel must be [O,C,kh,kw], got {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::dim("conv2d", format!("channel axis (1): input has {}, kernel expects {}", sx[1], sk[1])));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let oh = super::conv_output_extent(sx[2], sk[2], stride, padding)
            .ok_or_else(|| Error::dim("conv2d", format!("height axis (2): kernel {} exceeds padded input {}", sk[2], sx[2] + 2 * padding)))?;
        let ow = super::conv_output_extent(sx[3], sk[3], stride, padding)
            .ok_or_else(|| Error::dim("conv2d", format!("width axis (3): kernel {} exceeds padded input {}", sk[3], sx[3] + 2 * padding)))?;
        let geom = ConvGeom { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sk[0], kh: sk[2], kw: sk[3], stride, pad: padding, oh, ow };
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(Error::dim("conv2d", format!("bias must be [{}], got {:?}", geom.o, self.shape(b))));
            }
        }
        let value = conv::forward(&geom, self.value(x), self.value(kernel), bias.map(|b| self.value(b)));
        let rg = self.requires_grad(x) || self.requires_grad(kernel) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(vec![geom.n, geom.o, oh, ow], value, rg, Op::Conv2d { x, kernel, bias, geom }))
    }

    // ---- reductions and layout -------------------------------------------

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::dim(if mean { "mean" } else { "sum" }, format!("axis {bad} out of range for {shape:?}")));
        }
        let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        let keep: Vec<usize> = shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let map = broadcast_index(&keep, &shape);
        let mut value = vec![T::zero(); numel(&out_shape)];
        for (i, &v) in self.value(x).iter().enumerate() {
            value[map[i]] += v;
        }
        if mean {
            let count = T::lit(axes.iter().map(|&a| shape[a]).product::<usize>() as f64);
            value.iter_mut().for_each(|v| *v = *v / count);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, value, rg, Op::Reduce { x, axes, mean }))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false).expect("all axes valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, true).expect("all axes valid")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("narrow", format!("axis {axis} out of range for {shape:?}")));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, value, rg, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(out_shape, value, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Records an externally defined operation whose forward value is already
    /// computed.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::dim(op.name(), format!("shape {shape:?} vs {} values", value.len())));
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(shape, value, rg, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates gradients from a single-element `result` to every reachable
    /// leaf that requires grad. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, result: Var) -> Result<()> {
        if self.value(result).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a single-element result, got shape {:?}",
                self.shape(result)
            )));
        }
        if !self.requires_grad(result) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=result.0).map(|_| None).collect();
        grads[result.0] = Some(vec![T::one()]);
        for i in (0..=result.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += *d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, delta) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => grads[input.0] = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                for (this, other, is_a) in [(a, b, true), (b, a, false)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let map = broadcast_index(self.shape(this), &node.shape);
                    let mut d = vec![T::zero(); self.value(this).len()];
                    match kind {
                        BinaryKind::Add => map.iter().zip(g).for_each(|(&j, &gv)| d[j] += gv),
                        BinaryKind::Sub => {
                            let sign = if is_a { T::one() } else { -T::one() };
                            map.iter().zip(g).for_each(|(&j, &gv)| d[j] += sign * gv)
                        }
                        BinaryKind::Mul => {
                            let omap = broadcast_index(self.shape(other), &node.shape);
                            let ov = self.value(other);
                            for ((&j, &k), &gv) in map.iter().zip(&omap).zip(g) {
                                d[j] += gv * ov[k];
                            }
                        }
                    }
                    out.push((this, d));
                }
            }
            Op::Unary { kind, x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let d = (0..g.len())
                        .map(|j| {
                            let local = match *kind {
                                UnaryKind::Logistic => y[j] * (T::one() - y[j]),
                                UnaryKind::Tanh => T::one() - y[j] * y[j],
                                UnaryKind::LeakyRelu(s) => {
                                    if xv[j] >= T::zero() {
                                        T::one()
                                    } else {
                                        s
                                    }
                                }
                                UnaryKind::Softplus => logistic(xv[j]),
                                UnaryKind::Scale(c) => c,
                            };
                            g[j] * local
                        })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                let (ki, ni) = (k as isize, n as isize);
                if self.needs(*a) {
                    // dA = G * B^T
                    let (rsb, csb) = if *trans_b { (1, ki) } else { (ni, 1) };
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, ni, 1, self.value(*b), csb, rsb, T::zero(), &mut d, ki, 1);
                    out.push((*a, d));
                }
                if self.needs(*b) {
                    let mut d = vec![T::zero(); sb[0] * sb[1]];
                    if *trans_b {
                        // dB[N,K] = G^T * A
                        T::gemm(n, m, k, T::one(), g, 1, ni, self.value(*a), ki, 1, T::zero(), &mut d, ki, 1);
                    } else {
                        // dB[K,N] = A^T * G
                        T::gemm(k, m, n, T::one(), self.value(*a), 1, ki, g, ni, 1, T::zero(), &mut d, ni, 1);
                    }
                    out.push((*b, d));
                }
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let need = [self.needs(*x), self.needs(*kernel), bias.is_some_and(|b| self.needs(b))];
                let grads = conv::backward(geom, self.value(*x), self.value(*kernel), g, need);
                if let Some(d) = grads.input {
                    out.push((*x, d));
                }
                if let Some(d) = grads.kernel {
                    out.push((*kernel, d));
                }
                if let (Some(d), Some(b)) = (grads.bias, bias) {
                    out.push((*b, d));
                }
            }
            Op::Reduce { x, axes, mean } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let keep: Vec<usize> = shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
                    let map = broadcast_index(&keep, shape);
                    let factor = if *mean {
                        T::one() / T::lit(axes.iter().map(|&a| shape[a]).product::<usize>() as f64)
                    } else {
                        T::one()
                    };
                    out.push((*x, map.iter().map(|&j| g[j] * factor).collect()));
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.shape[*axis];
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    out.push((*x, d));
                }
            }
            Op::Concat { xs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        out.push((v, d));
                    }
                    offset += len;
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                for (v, d) in inputs.iter().zip(op.backward(&values, &node.value, g, &needs)) {
                    if let Some(d) = d {
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}
