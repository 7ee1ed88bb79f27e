use super::{axis_blocks, broadcast_index_map, broadcast_shapes, kernels, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids increase in recording order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Every kind of recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Softplus,
    Sqrt,
    Powf,
    Scale,
    AddScalar,
    Neg,
    ClampMin,
    Softmax,
    Concat,
    Slice,
    Reshape,
    Reverse,
    Sum,
    SumAxis,
}

impl OpKind {
    /// All operations that carry a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Abs,
        OpKind::Softplus,
        OpKind::Sqrt,
        OpKind::Powf,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Neg,
        OpKind::ClampMin,
        OpKind::Softmax,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Reverse,
        OpKind::Sum,
        OpKind::SumAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Abs => "abs",
            OpKind::Softplus => "softplus",
            OpKind::Sqrt => "sqrt",
            OpKind::Powf => "powf",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Neg => "neg",
            OpKind::ClampMin => "clamp_min",
            OpKind::Softmax => "softmax",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Reverse => "reverse",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Softplus,
    Sqrt,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
    Neg,
    ClampMin(f64),
}

impl Unary {
    fn kind(self) -> OpKind {
        match self {
            Unary::Tanh => OpKind::Tanh,
            Unary::Relu => OpKind::Relu,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Exp => OpKind::Exp,
            Unary::Ln => OpKind::Ln,
            Unary::Abs => OpKind::Abs,
            Unary::Softplus => OpKind::Softplus,
            Unary::Sqrt => OpKind::Sqrt,
            Unary::Powf(_) => OpKind::Powf,
            Unary::Scale(_) => OpKind::Scale,
            Unary::AddScalar(_) => OpKind::AddScalar,
            Unary::Neg => OpKind::Neg,
            Unary::ClampMin(_) => OpKind::ClampMin,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Sqrt => x.sqrt(),
            Unary::Powf(p) => x.powf(p),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Neg => -x,
            Unary::ClampMin(c) => x.max(c),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => 0.5 / y,
            Unary::Powf(p) => p * x.powf(p - 1.0),
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Neg => -1.0,
            Unary::ClampMin(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Softmax { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Reverse { x: usize, axis: usize },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Binary(Binary::Add, ..) => OpKind::Add,
            Op::Binary(Binary::Sub, ..) => OpKind::Sub,
            Op::Binary(Binary::Mul, ..) => OpKind::Mul,
            Op::Binary(Binary::Div, ..) => OpKind::Div,
            Op::Unary(u, _) => u.kind(),
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Reverse { .. } => OpKind::Reverse,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAxis { .. } => OpKind::SumAxis,
        }
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

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward computation.
///
/// Node values double as the saved activations for the backward pass. A tape
/// is single-owner; independent passes use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` returns the negated gradient.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as an input. It becomes a differentiable leaf only if
    /// `requires_grad` is set on it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        let mut value = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        value.requires_grad = requires_grad;
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].value.requires_grad()
    }

    // ---- forward operations ------------------------------------------------

    /// Batched matrix product over the trailing two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ra, rb) = (sa.len(), sb.len());
        if ra < 2 || rb < 2 || sa[ra - 1] != sb[rb - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        let batch = broadcast_shapes(&sa[..ra - 2], &sb[..rb - 2])
            .ok_or_else(|| Error::dim("matmul", &sa, &sb))?;
        let amap = broadcast_index_map(&sa[..ra - 2], &batch);
        let bmap = broadcast_index_map(&sb[..rb - 2], &batch);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; amap.len() * m * n];
        for (bi, (&ai, &bj)) in amap.iter().zip(&bmap).enumerate() {
            kernels::matmul_acc(
                &ad[ai * m * k..(ai + 1) * m * k],
                &bd[bj * k * n..(bj + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::MatMul(a.0, b.0), shape, out, rg))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let out = kernels::transpose_last2(self.data(x), numel(&s[..r - 2]), rows, cols);
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x.0);
        Ok(self.push(Op::Transpose(x.0), shape, out, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (shape, out) = if sa == sb {
            let out = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa, out)
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            let shape = broadcast_shapes(&sa, &sb).ok_or_else(|| Error::dim(op, &sa, &sb))?;
            let amap = broadcast_index_map(&sa, &shape);
            let bmap = broadcast_index_map(&sb, &shape);
            let (ad, bd) = (self.data(a), self.data(b));
            let out = amap
                .iter()
                .zip(&bmap)
                .map(|(&i, &j)| f(ad[i], bd[j]))
                .collect();
            (shape, out)
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Binary(kind, a.0, b.0), shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| kind.apply(v)).collect();
        let rg = self.rg(x.0);
        self.push(Op::Unary(kind, x.0), shape, out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(Unary::Powf(p), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::ClampMin(c), x)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {s:?}"
            )));
        }
        Ok(())
    }

    /// Exponential normalisation along `axis`, max-shifted per slice.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric { op: "softmax" });
        }
        let shape = xv.shape().to_vec();
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (xd[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[at(i)] /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Op::Softmax { x: x.0, axis }, shape, out, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !agrees {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat { parts: ids, axis }, shape, out, rg))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) out of range for axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_blocks(&s, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(Op::Slice { x: x.0, axis, start }, shape, out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(s) != numel(shape) || shape.contains(&0) {
            return Err(Error::dim("reshape", s, shape));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(Op::Reshape(x.0), shape.to_vec(), out, rg))
    }

    /// Reverses the order of entries along `axis`.
    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reverse", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = reverse_along(self.data(x), &shape, axis);
        let rg = self.rg(x.0);
        Ok(self.push(Op::Reverse { x: x.0, axis }, shape, out, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(Op::Sum(x.0), Vec::new(), vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = axis_blocks(&s, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.rg(x.0);
        Ok(self.push(Op::SumAxis { x: x.0, axis }, shape, out, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.sum_axis(x, axis, keepdim)?;
        let n = self.shape(x)[axis] as f64;
        Ok(self.scale(s, 1.0 / n))
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into every differentiable leaf's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss.0) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.rg(id) {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                leaf_grads.push((id, g));
                continue;
            }
            let flip = self.fault == Some(self.nodes[id].op.kind());
            for (input, mut contrib) in self.vjp(id, &g) {
                if flip {
                    contrib.iter_mut().for_each(|v| *v = -*v);
                }
                match &mut adj[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each differentiable input.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (ra, rb) = (sa.len(), sb.len());
                let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
                let so = node.value.shape();
                let batch = &so[..so.len() - 2];
                let amap = broadcast_index_map(&sa[..ra - 2], batch);
                let bmap = broadcast_index_map(&sb[..rb - 2], batch);
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if self.rg(a) {
                    let mut da = vec![0.0; ad.len()];
                    for (bi, (&ai, &bj)) in amap.iter().zip(&bmap).enumerate() {
                        kernels::matmul_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bj * k * n..(bj + 1) * k * n],
                            &mut da[ai * m * k..(ai + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    res.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bd.len()];
                    for (bi, (&ai, &bj)) in amap.iter().zip(&bmap).enumerate() {
                        kernels::matmul_tn_acc(
                            &ad[ai * m * k..(ai + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bj * k * n..(bj + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    res.push((b, db));
                }
            }
            &Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let gx = kernels::transpose_last2(g, numel(&s[..r - 2]), s[r - 2], s[r - 1]);
                res.push((x, gx));
            }
            &Op::Binary(kind, a, b) => {
                let so = node.value.shape();
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let amap = broadcast_index_map(va.shape(), so);
                let bmap = broadcast_index_map(vb.shape(), so);
                let (ad, bd) = (va.data(), vb.data());
                if self.rg(a) {
                    let mut ga = vec![0.0; ad.len()];
                    for (o, (&i, &j)) in amap.iter().zip(&bmap).enumerate() {
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * bd[j],
                            Binary::Div => g[o] / bd[j],
                        };
                    }
                    res.push((a, ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; bd.len()];
                    for (o, (&i, &j)) in amap.iter().zip(&bmap).enumerate() {
                        gb[j] += match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * ad[i],
                            Binary::Div => -g[o] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    res.push((b, gb));
                }
            }
            &Op::Unary(kind, x) => {
                let xd = self.nodes[x].value.data();
                let gx = xd
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                    .collect();
                res.push((x, gx));
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_blocks(node.value.shape(), axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + r;
                        let dot: f64 = (0..n).map(|i| g[at(i)] * out[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = out[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                res.push((x, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_blocks(node.value.shape(), *axis);
                let mut grads: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|&p| Vec::with_capacity(self.nodes[p].value.numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &p) in grads.iter_mut().zip(parts) {
                        let chunk = self.nodes[p].value.shape()[*axis] * inner;
                        gi.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (&p, gp) in parts.iter().zip(grads) {
                    if self.rg(p) {
                        res.push((p, gp));
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let sx = self.nodes[x].value.shape();
                let (outer, n, inner) = axis_blocks(sx, axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    gx[from..from + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((x, gx));
            }
            &Op::Reshape(x) => res.push((x, g.to_vec())),
            &Op::Reverse { x, axis } => {
                res.push((x, reverse_along(g, node.value.shape(), axis)));
            }
            &Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                res.push((x, vec![g[0]; n]));
            }
            &Op::SumAxis { x, axis } => {
                let sx = self.nodes[x].value.shape();
                let (outer, n, inner) = axis_blocks(sx, axis);
                let mut gx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((x, gx));
            }
        }
        res
    }
}

fn reverse_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let from = (o * n + i) * inner;
            out.extend_from_slice(&data[from..from + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.shape(d), &[1, 1]);
        assert_eq!(tape.data(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[3, 2, 4], 1.0));
        let w = tape.constant(Tensor::full(&[4, 5], 0.5));
        let c = tape.matmul(a, w).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 5]);
        assert!(tape.data(c).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_direct_exponential_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((tape.data(y)[i] - v.exp() / z).abs() < 1e-15);
        }
        // frozen: e^1/z, e^2/z, e^3/z
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in tape.data(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z);
        assert_eq!(tape.item(th), 0.0);
    }

    #[test]
    fn broadcast_add_matches_row_loop() {
        let mut tape = Tape::new();
        let m = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = t(&[2], &[10.0, 20.0]);
        let mut expect = m.data().to_vec();
        for row in expect.chunks_mut(2) {
            for (e, b) in row.iter_mut().zip(v.data()) {
                *e += b;
            }
        }
        let (a, b) = (tape.constant(m), tape.constant(v));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), expect.as_slice());
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.slice(c, 0, 1, 1).unwrap();
        assert_eq!(tape.data(s), tape.data(b));

        let parts: Vec<Var> = (0..3)
            .map(|i| tape.constant(Tensor::full(&[4], i as f64)))
            .collect();
        let v = tape.concat(&parts, 0).unwrap();
        assert_eq!(tape.shape(v), &[12]);

        let wide = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.concat(&[a, wide], 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0).with_grad());
        let x = tape.leaf(Tensor::full(&[2], 1.0).with_grad());
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn reverse_involution() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.reverse(x, 0).unwrap();
        assert_eq!(tape.data(r), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        let rr = tape.reverse(r, 0).unwrap();
        assert_eq!(tape.data(rr), tape.data(x));
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
