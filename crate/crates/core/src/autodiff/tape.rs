use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::kernels;
use crate::tensor::check_shape;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Operator identifiers, used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    MulScalar,
    Mean,
    Sum,
    Concat,
    Reshape,
    Transpose,
    Softmax,
    Gelu,
    Relu,
    LayerNorm,
    Sqrt,
    Square,
    Broadcast,
    Narrow,
    Gather,
    SmoothL1,
    Cosine,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::LayerNorm,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Broadcast,
        OpKind::Narrow,
        OpKind::Gather,
        OpKind::SmoothL1,
        OpKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "scalar-mul",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Broadcast => "broadcast",
            OpKind::Narrow => "narrow",
            OpKind::Gather => "gather",
            OpKind::SmoothL1 => "smooth-l1",
            OpKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown op `{s}`")))
    }
}

/// Gather index marking a zero (padding) element.
pub(crate) const PAD: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulScalar(Var, Var),
    Mean(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Reshape(Var),
    Transpose { a: Var, rows: usize, cols: usize },
    Softmax { a: Var, dim: usize },
    Gelu(Var),
    Relu(Var),
    LayerNorm { a: Var, dim: usize, rstd: Vec<S> },
    Sqrt(Var),
    Square(Var),
    Broadcast(Var),
    Narrow { a: Var, outer: usize, in_width: usize, offset: usize, width: usize },
    Gather { a: Var, index: Arc<[u32]> },
    SmoothL1 { a: Var, b: Var, beta: S },
    Cosine { a: Var, b: Var, dim: usize, parts: Vec<(S, S, S, bool)> },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Gather { .. } => OpKind::Gather,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Cosine { .. } => OpKind::Cosine,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// A tape binds the parameters of a single [`ParamStore`]; parameter leaves
/// are memoized so each parameter appears once no matter how often it is
/// used.
#[derive(Debug, Clone)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: BTreeMap<ParamId, Var>,
    guard_non_finite: bool,
    fault: Option<OpKind>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<S: Scalar> Tape<S> {
    /// The non-finite guard is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            guard_non_finite: cfg!(debug_assertions),
            fault: None,
            backward_done: false,
        }
    }

    pub fn set_guard_non_finite(&mut self, on: bool) {
        self.guard_non_finite = on;
    }

    /// Flips the sign of one operator's backward rule. Only useful for
    /// checking that a gradient checker notices a broken rule.
    pub fn inject_backward_fault(&mut self, op: Option<OpKind>) {
        self.fault = op;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.backward_done = false;
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.nodes.get(v.0).ok_or(Error::ForeignVar)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a value, typically a loss.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape invariant")
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn guard(&self, op: OpKind, inputs: &[Var]) -> Result<()> {
        if self.guard_non_finite {
            for &v in inputs {
                if self.nodes[v.0].value.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: op.name() });
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, shape: &[usize], value: Vec<S>, requires_grad: bool) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != value.len() {
            return Err(mismatch("leaf", shape, &[value.len()]));
        }
        self.nodes.push(Node { shape: shape.to_vec(), value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf_node(t.shape(), t.data().to_vec(), false)
            .expect("tensor shape invariant")
    }

    pub fn constant_from(&mut self, shape: &[usize], value: Vec<S>) -> Result<Var> {
        self.leaf_node(shape, value, false)
    }

    /// Records a leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.leaf_node(t.shape(), t.data().to_vec(), t.requires_grad())
            .expect("tensor shape invariant")
    }

    /// Binds a parameter of `store`, recording it once per tape.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] · b[k, n] → [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ → [..., n]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sb.len() != 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(mismatch("matmul", &sa, &sb));
        }
        self.guard(OpKind::Matmul, &[a, b])?;
        let m = sa.iter().product::<usize>() / k;
        let mut out = vec![S::zero(); m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if trans_b {
            kernels::matmul_nt_acc(av, bv, &mut out, m, k, n);
        } else {
            kernels::matmul_acc(av, bv, &mut out, m, k, n);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::Matmul { a, b, trans_b, m, k, n }, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(mismatch(kind.name(), &na.shape, &nb.shape));
        }
        self.guard(kind, &[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, OpKind::Add, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, OpKind::Sub, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, OpKind::Mul, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.guard(OpKind::Scale, &[a])?;
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| x * c).collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, out, Op::Scale(a, c), &[a]))
    }

    /// Multiplication by a one-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (na, ns) = (self.node(a)?, self.node(s)?);
        if ns.value.len() != 1 {
            return Err(mismatch("scalar-mul", &na.shape, &ns.shape));
        }
        self.guard(OpKind::MulScalar, &[a, s])?;
        let (na, ns) = (&self.nodes[a.0], &self.nodes[s.0]);
        let c = ns.value[0];
        let out = na.value.iter().map(|&x| c * x).collect();
        let shape = na.shape.clone();
        Ok(self.push(shape, out, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.guard(OpKind::Mean, &[a])?;
        let n = self.node(a)?;
        let mut acc = S::zero();
        for &x in &n.value {
            acc += x;
        }
        let out = acc / S::of(n.value.len() as f64);
        Ok(self.push(vec![1], vec![out], Op::Mean(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.guard(OpKind::Sum, &[a])?;
        let n = self.node(a)?;
        let mut acc = S::zero();
        for &x in &n.value {
            acc += x;
        }
        Ok(self.push(vec![1], vec![acc], Op::Sum(a), &[a]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat of nothing".into()))?;
        let base = self.node(*first)?.shape.clone();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = &self.node(v)?.shape;
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        self.guard(OpKind::Concat, inputs)?;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        for &v in inputs {
            widths.push(self.nodes[v.0].shape[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[v.0].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), outer, widths }, inputs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        let node = self.node(a)?;
        if n != node.value.len() {
            return Err(mismatch("reshape", &node.shape, shape));
        }
        let out = node.value.clone();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    /// Transpose of a 2-D value.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let node = self.node(a)?;
        if node.shape.len() != 2 {
            return Err(mismatch("transpose", &node.shape, &[2]));
        }
        let (rows, cols) = (node.shape[0], node.shape[1]);
        let mut out = vec![S::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = node.value[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.guard(OpKind::Softmax, &[a])?;
        let node = self.node(a)?;
        let dim = *node.shape.last().unwrap();
        let mut out = node.value.clone();
        for row in out.chunks_mut(dim) {
            let mut max = row[0];
            for &x in row.iter() {
                if x > max {
                    max = x;
                }
            }
            let mut total = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp_portable();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, out, Op::Softmax { a, dim }, &[a]))
    }

    fn unary(&mut self, a: Var, kind: OpKind, f: impl Fn(S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        self.guard(kind, &[a])?;
        let node = self.node(a)?;
        Ok((node.shape.clone(), node.value.iter().map(|&x| f(x)).collect()))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, OpKind::Gelu, kernels::gelu)?;
        Ok(self.push(shape, out, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, OpKind::Relu, |x| if x > S::zero() { x } else { S::zero() })?;
        Ok(self.push(shape, out, Op::Relu(a), &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, OpKind::Sqrt, |x| x.sqrt())?;
        Ok(self.push(shape, out, Op::Sqrt(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, OpKind::Square, |x| x * x)?;
        Ok(self.push(shape, out, Op::Square(a), &[a]))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance
    /// (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Result<Var> {
        self.guard(OpKind::LayerNorm, &[a])?;
        let node = self.node(a)?;
        let dim = *node.shape.last().unwrap();
        let inv_n = S::one() / S::of(dim as f64);
        let mut out = Vec::with_capacity(node.value.len());
        let mut rstds = Vec::with_capacity(node.value.len() / dim);
        for row in node.value.chunks(dim) {
            let mut mean = S::zero();
            for &x in row {
                mean += x;
            }
            mean *= inv_n;
            let mut var = S::zero();
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var *= inv_n;
            let rstd = S::one() / (var + eps).sqrt();
            rstds.push(rstd);
            out.extend(row.iter().map(|&x| (x - mean) * rstd));
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, out, Op::LayerNorm { a, dim, rstd: rstds }, &[a]))
    }

    /// Repeats `a` along new leading axes: `a.shape` must be a suffix of
    /// `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let node = self.node(a)?;
        let sa = &node.shape;
        if shape.len() < sa.len() || &shape[shape.len() - sa.len()..] != sa.as_slice() {
            return Err(mismatch("broadcast", sa, shape));
        }
        let reps: usize = shape[..shape.len() - sa.len()].iter().product();
        let mut out = Vec::with_capacity(reps * node.value.len());
        for _ in 0..reps {
            out.extend_from_slice(&node.value);
        }
        Ok(self.push(shape.to_vec(), out, Op::Broadcast(a), &[a]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let node = self.node(a)?;
        let s = node.shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch("narrow", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_width = s[axis] * inner;
        let (offset, width) = (start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&node.value[o * in_width + offset..o * in_width + offset + width]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { a, outer, in_width, offset, width }, &[a]))
    }

    /// `out[i] = a[index[i]]`, with [`PAD`] entries reading as zero.
    pub(crate) fn gather(&mut self, a: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        let node = self.node(a)?;
        if n != index.len() {
            return Err(mismatch("gather", shape, &[index.len()]));
        }
        let len = node.value.len();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == PAD {
                out.push(S::zero());
            } else if (i as usize) < len {
                out.push(node.value[i as usize]);
            } else {
                return Err(mismatch("gather", &node.shape, &[i as usize]));
            }
        }
        Ok(self.push(shape.to_vec(), out, Op::Gather { a, index }, &[a]))
    }

    /// Mean over elements of the smooth L1 penalty of `a − b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: S) -> Result<Var> {
        if beta <= S::zero() {
            return Err(Error::InvalidConfig("smooth-l1 beta must be positive".into()));
        }
        let half = S::of(0.5);
        let (shape, terms) = self.binary(a, b, OpKind::SmoothL1, |x, y| {
            let d = (x - y).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })?;
        let _ = shape;
        let mut acc = S::zero();
        for &t in &terms {
            acc += t;
        }
        let out = acc / S::of(terms.len() as f64);
        Ok(self.push(vec![1], vec![out], Op::SmoothL1 { a, b, beta }, &[a, b]))
    }

    /// Mean over trailing-axis rows of `1 − cos(a_r, b_r)`. Rows where
    /// either norm is below `eps` contribute exactly 1 and no gradient.
    pub fn cosine_loss(&mut self, a: Var, b: Var, eps: S) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(mismatch("cosine", &na.shape, &nb.shape));
        }
        self.guard(OpKind::Cosine, &[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let dim = *na.shape.last().unwrap();
        let mut parts = Vec::with_capacity(na.value.len() / dim);
        let mut acc = S::zero();
        for (dot, sa, sb) in kernels::row_cosine_parts(&na.value, &nb.value, dim) {
            let (xa, xb) = (sa.sqrt(), sb.sqrt());
            let valid = xa >= eps && xb >= eps;
            // One rounding in the denominator, so cos(x, x) is exactly 1.
            let denom = match (sa * sb).sqrt() {
                d if d.is_finite() => d,
                _ => xa * xb,
            };
            acc += if valid { S::one() - dot / denom } else { S::one() };
            parts.push((dot, xa, xb, valid));
        }
        let out = acc / S::of(parts.len() as f64);
        Ok(self.push(vec![1], vec![out], Op::Cosine { a, b, dim, parts }, &[a, b]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a one-element root. Gradients of every
    /// grad-requiring node reachable from `root` become available through
    /// [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rn = self.node(root)?;
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        let root_requires_grad = rn.requires_grad;
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !root_requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else { continue };
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.backward_node(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first use. `None` when `v`
    /// does not need a gradient.
    fn gbuf<'g>(grads: &'g mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> Option<&'g mut Vec<S>> {
        let n = &nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]))
    }

    fn backward_node(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, trans_b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    if trans_b {
                        kernels::matmul_acc(g, bv, ga, m, n, k);
                    } else {
                        kernels::matmul_nt_acc(g, bv, ga, m, n, k);
                    }
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    if trans_b {
                        kernels::matmul_tn_acc(g, av, gb, m, n, k);
                    } else {
                        kernels::matmul_tn_acc(av, g, gb, m, k, n);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s);
                }
            }
            &Op::MulScalar(a, s) => {
                let c = nodes[s.0].value[0];
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x);
                }
                let av = &nodes[a.0].value;
                if let Some(gs) = Self::gbuf(grads, nodes, s) {
                    let mut acc = S::zero();
                    for (&x, &y) in g.iter().zip(av) {
                        acc += x * y;
                    }
                    gs[0] += acc;
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    let v = g[0] / S::of(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += v);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if let Some(gv) = Self::gbuf(grads, nodes, v) {
                        for o in 0..*outer {
                            add_into(&mut gv[o * w..(o + 1) * w], &g[o * total + offset..o * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    add_into(ga, g);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Softmax { a, dim } => {
                let y = &node.value;
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for ((gar, gr), yr) in ga.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim)) {
                        let mut dot = S::zero();
                        for (&gg, &yy) in gr.iter().zip(yr) {
                            dot += gg * yy;
                        }
                        for ((d, &gg), &yy) in gar.iter_mut().zip(gr).zip(yr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for ((d, &gg), &xx) in ga.iter_mut().zip(g).zip(x) {
                        *d += gg * kernels::gelu_grad(xx);
                    }
                }
            }
            &Op::Relu(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for ((d, &gg), &xx) in ga.iter_mut().zip(g).zip(x) {
                        if xx > S::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::LayerNorm { a, dim, rstd } => {
                let (a, dim) = (*a, *dim);
                let y = &node.value;
                let inv_n = S::one() / S::of(dim as f64);
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for (((gar, gr), yr), &r) in ga.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim)).zip(rstd) {
                        let mut mg = S::zero();
                        let mut mgy = S::zero();
                        for (&gg, &yy) in gr.iter().zip(yr) {
                            mg += gg;
                            mgy += gg * yy;
                        }
                        mg *= inv_n;
                        mgy *= inv_n;
                        for ((d, &gg), &yy) in gar.iter_mut().zip(gr).zip(yr) {
                            *d += r * (gg - mg - yy * mgy);
                        }
                    }
                }
            }
            &Op::Sqrt(a) => {
                let y = &node.value;
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    let two = S::of(2.0);
                    for ((d, &gg), &yy) in ga.iter_mut().zip(g).zip(y) {
                        *d += gg / (two * yy);
                    }
                }
            }
            &Op::Square(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    let two = S::of(2.0);
                    for ((d, &gg), &xx) in ga.iter_mut().zip(g).zip(x) {
                        *d += two * xx * gg;
                    }
                }
            }
            &Op::Broadcast(a) => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    let len = ga.len();
                    for chunk in g.chunks(len) {
                        add_into(ga, chunk);
                    }
                }
            }
            &Op::Narrow { a, outer, in_width, offset, width } => {
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    for o in 0..outer {
                        add_into(
                            &mut ga[o * in_width + offset..o * in_width + offset + width],
                            &g[o * width..(o + 1) * width],
                        );
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = Self::gbuf(grads, nodes, *a) {
                    for (&i, &gg) in index.iter().zip(g) {
                        if i != PAD {
                            ga[i as usize] += gg;
                        }
                    }
                }
            }
            &Op::SmoothL1 { a, b, beta } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = g[0] / S::of(av.len() as f64);
                let dd: Vec<S> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        let slope = if d.abs() < beta {
                            d / beta
                        } else if d > S::zero() {
                            S::one()
                        } else {
                            -S::one()
                        };
                        slope * scale
                    })
                    .collect();
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    add_into(ga, &dd);
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    gb.iter_mut().zip(&dd).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Cosine { a, b, dim, parts } => {
                let (a, b, dim) = (*a, *b, *dim);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = -g[0] / S::of(parts.len() as f64);
                // d cos / d a = b / (|a||b|) − cos · a / |a|²
                let mut da = vec![S::zero(); av.len()];
                let mut db = vec![S::zero(); bv.len()];
                for (r, &(dot, na, nb, valid)) in parts.iter().enumerate() {
                    if !valid {
                        continue;
                    }
                    let inv = S::one() / (na * nb);
                    let cos = dot * inv;
                    let (ca, cb) = (cos / (na * na), cos / (nb * nb));
                    for j in r * dim..(r + 1) * dim {
                        da[j] = scale * (bv[j] * inv - ca * av[j]);
                        db[j] = scale * (av[j] * inv - cb * bv[j]);
                    }
                }
                if let Some(ga) = Self::gbuf(grads, nodes, a) {
                    add_into(ga, &da);
                }
                if let Some(gb) = Self::gbuf(grads, nodes, b) {
                    add_into(gb, &db);
                }
            }
        }
    }

    /// Adds the gradients of every bound, grad-requiring parameter into
    /// `store`. Bound parameters the root did not reach receive zeros.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (&id, &v) in &self.params {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            match self.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![S::zero(); t.numel()];
                    t.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }
}
