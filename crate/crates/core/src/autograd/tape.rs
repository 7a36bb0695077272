//! Define-by-run gradient tape.
//!
//! Every primitive appends a node holding its forward value, its parents
//! and whatever it needs for the backward pass. Parents always have smaller
//! ids than their children, so a reverse sweep over the node list is a valid
//! topological order.
//!
//! Shape rules:
//! - elementwise binary ops (`add`, `sub`, `mul`) accept equal shapes, or
//!   one operand whose shape is a suffix of the other's (the smaller one is
//!   repeated over the leading batch extents);
//! - `matmul`/`matmul_t` multiply a `[.., k]` tensor by a `k×n` (resp.
//!   `n×k`) matrix, flattening the leading extents of the left operand;
//! - reductions (`sum_last`, `logsumexp`, `log_softmax`), `concat` and
//!   `slice` act on the last axis.

use crate::autograd::kernels::{self, gemm};
use crate::autograd::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A user-defined primitive with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Returns one gradient per input, `None` where the input gets nothing.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul { trans_b: bool, rows: usize, inner: usize, cols: usize },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Concat(Vec<usize>),
    Slice { start: usize, end: usize, width: usize },
    Sum,
    SumLast,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Sigmoid,
    Heaviside,
    LogSumExp,
    LogSoftmax,
    Reshape,
    Transpose,
    GatherRows(Vec<usize>),
    Pick(Vec<usize>),
    Expand(usize),
    TileRows(usize),
    Stack(usize),
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::SumLast => "sum_last",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Heaviside => "heaviside",
            Op::LogSumExp => "logsumexp",
            Op::LogSoftmax => "log_softmax",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::GatherRows(_) => "gather_rows",
            Op::Pick(_) => "pick",
            Op::Expand(_) => "expand",
            Op::TileRows(_) => "tile_rows",
            Op::Stack(_) => "stack",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

/// Gradients produced by [`Tape::backward`] or [`Tape::vjp`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Index of the smaller operand under suffix broadcasting, plus the output shape.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big.ends_with(small) {
        Ok(big.to_vec())
    } else {
        Err(shape_err(op, format!("{a:?} and {b:?} are not suffix-broadcastable")))
    }
}

/// Sums `g` (output-shaped) down to an operand of `len` elements.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects non-finite leaves and op outputs.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<usize>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = match op {
            Op::Leaf | Op::Heaviside => false,
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn binary(&mut self, name: &'static str, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let n = numel(&shape);
        let (ad, bd) = (av.data(), bv.data());
        let (al, bl) = (ad.len(), bd.len());
        let data: Vec<f64> = if al == n && bl == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % al], bd[i % bl])).collect()
        };
        self.push(Tensor::from_parts(shape, data), op, vec![a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale(c), vec![a.0])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar, vec![a.0])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() == 0 || bv.rank() != 2 {
            return Err(shape_err(name, format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let inner = av.last_dim();
        let (bk, cols) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != inner {
            return Err(shape_err(name, format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let rows = av.outer_len();
        let data = gemm(av.data(), false, bv.data(), trans_b, rows, inner, cols);
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(cols);
        self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                trans_b,
                rows,
                inner,
                cols,
            },
            vec![a.0, b.0],
        )
    }

    /// `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[.., k] · [n, k]ᵀ -> [.., n]` (a linear layer with row-major weights).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(shape_err("concat", "scalars cannot be concatenated"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", format!("leading extents {:?} vs {:?}", lead, s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let parents = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::from_parts(shape, data), Op::Concat(widths), parents)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let width = av.last_dim();
        if av.rank() == 0 || start > end || end > width {
            return Err(shape_err("slice", format!("[{start}, {end}) of {:?}", av.shape())));
        }
        let data: Vec<f64> = av.rows().flat_map(|r| r[start..end].iter().copied()).collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        self.push(Tensor::from_parts(shape, data), Op::Slice { start, end, width }, vec![a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("sum_last", "scalar input"));
        }
        let data = av.rows().map(|r| r.iter().sum()).collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        self.push(Tensor::from_parts(shape, data), Op::SumLast, vec![a.0])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(f);
        self.push(v, op, vec![a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus, kernels::softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, kernels::sigmoid)
    }

    /// Unit step `1[x > 0]`; treated as locally constant by backward.
    pub fn heaviside(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Heaviside, |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Stabilized log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("logsumexp", "scalar input"));
        }
        let data = av.rows().map(kernels::logsumexp).collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        self.push(Tensor::from_parts(shape, data), Op::LogSumExp, vec![a.0])
    }

    /// Stabilized log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("log_softmax", "scalar input"));
        }
        let data = kernels::log_softmax_rows(av.data(), av.last_dim());
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::LogSoftmax, vec![a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.nodes[a.0].value.reshape(shape)?;
        self.push(v, Op::Reshape, vec![a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.transpose()?;
        self.push(v, Op::Transpose, vec![a.0])
    }

    /// Row lookup: `table[V, d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(shape_err("gather_rows", format!("table must be a matrix, got {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange { index: id, extent: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows(ids.to_vec()),
            vec![table.0],
        )
    }

    /// Picks one entry of the last axis per row: `out[r] = a[r, idx[r]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 || av.outer_len() != idx.len() {
            return Err(shape_err("pick", format!("{} indices for {:?}", idx.len(), av.shape())));
        }
        let width = av.last_dim();
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= width {
                return Err(Error::OutOfRange { index: i, extent: width });
            }
            data.push(av.data()[r * width + i]);
        }
        let shape = av.shape()[..av.rank() - 1].to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Pick(idx.to_vec()), vec![a.0])
    }

    /// Repeats every element along a new trailing axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let mut shape = av.shape().to_vec();
        shape.push(n);
        self.push(Tensor::from_parts(shape, data), Op::Expand(n), vec![a.0])
    }

    /// `[C, rest..] -> [C, reps, rest..]`, repeating each leading slice.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("tile_rows", "scalar input"));
        }
        let c = av.shape()[0];
        let inner = if c == 0 { 0 } else { av.len() / c };
        let mut data = Vec::with_capacity(av.len() * reps);
        for i in 0..c {
            let src = &av.data()[i * inner..(i + 1) * inner];
            for _ in 0..reps {
                data.extend_from_slice(src);
            }
        }
        let mut shape = vec![c, reps];
        shape.extend_from_slice(&av.shape()[1..]);
        self.push(Tensor::from_parts(shape, data), Op::TileRows(reps), vec![a.0])
    }

    /// Stacks same-shaped tensors along a new trailing axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("stack", "no inputs"))?;
        let shape0 = self.shape(*first).to_vec();
        for p in parts {
            if self.shape(*p) != shape0.as_slice() {
                return Err(shape_err("stack", format!("{:?} vs {:?}", shape0, self.shape(*p))));
            }
        }
        let k = parts.len();
        let n = numel(&shape0);
        let mut data = vec![0.0; n * k];
        for (j, p) in parts.iter().enumerate() {
            for (i, &v) in self.nodes[p.0].value.data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let mut shape = shape0;
        shape.push(k);
        let parents = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::from_parts(shape, data), Op::Stack(k), parents)
    }

    /// Records a primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(output, Op::Custom(op), parents)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.len() != 1 || shape.len() > 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.vjp(loss, &Tensor::ones(shape.to_vec()))
    }

    /// Vector-Jacobian product: propagates `cotangent` (shaped like `output`).
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.shape(output) {
            return Err(shape_err(
                "vjp",
                format!("cotangent {:?} vs output {:?}", cotangent.shape(), self.shape(output)),
            ));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(cotangent.to_vec());

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |p: usize| &self.nodes[node.parents[p]].value;
        let wants = |p: usize| self.nodes[node.parents[p]].requires_grad;
        let mut acc = |p: usize, contribution: Vec<f64>| {
            let slot = &mut grads[node.parents[p]];
            match slot {
                Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
                None => *slot = Some(contribution),
            }
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf | Op::Heaviside => {}
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                if wants(0) {
                    acc(0, reduce_to(g, val(0).len()));
                }
                if wants(1) {
                    let mut r = reduce_to(g, val(1).len());
                    if sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(1, r);
                }
            }
            Op::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                let (al, bl) = (a.len(), b.len());
                if wants(0) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * b[i % bl]).collect();
                    acc(0, reduce_to(&full, al));
                }
                if wants(1) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * a[i % al]).collect();
                    acc(1, reduce_to(&full, bl));
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    acc(0, g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar | Op::Reshape => {
                if wants(0) {
                    acc(0, g.to_vec());
                }
            }
            Op::MatMul {
                trans_b,
                rows,
                inner,
                cols,
            } => {
                let (a, b) = (val(0).data(), val(1).data());
                if wants(0) {
                    // dA = G · op(B)ᵀ
                    acc(0, gemm(g, false, b, !trans_b, *rows, *cols, *inner));
                }
                if wants(1) {
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        acc(1, gemm(g, true, a, false, *cols, *rows, *inner));
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        acc(1, gemm(a, true, g, false, *inner, *rows, *cols));
                    }
                }
            }
            Op::Concat(widths) => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (p, &w) in widths.iter().enumerate() {
                    if wants(p) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, part);
                    }
                    offset += w;
                }
            }
            Op::Slice { start, end, width } => {
                if wants(0) {
                    let w = end - start;
                    let rows = val(0).outer_len();
                    let mut full = vec![0.0; rows * width];
                    for r in 0..rows {
                        full[r * width + start..r * width + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(0, full);
                }
            }
            Op::Sum => {
                if wants(0) {
                    acc(0, vec![g[0]; val(0).len()]);
                }
            }
            Op::SumLast => {
                if wants(0) {
                    let w = val(0).last_dim();
                    acc(0, g.iter().flat_map(|&v| std::iter::repeat_n(v, w)).collect());
                }
            }
            Op::Tanh => acc(0, g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect()),
            Op::Sigmoid => acc(0, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
            Op::Exp => acc(0, g.iter().zip(out).map(|(gv, y)| gv * y).collect()),
            Op::Relu => {
                let x = val(0).data();
                acc(0, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Softplus => {
                let x = val(0).data();
                acc(0, g.iter().zip(x).map(|(gv, &xv)| gv * kernels::sigmoid(xv)).collect());
            }
            Op::Log => {
                let x = val(0).data();
                acc(0, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::LogSumExp => {
                let x = val(0);
                let w = x.last_dim();
                let mut full = Vec::with_capacity(x.len());
                for (r, row) in x.rows().enumerate() {
                    full.extend(row.iter().map(|&v| g[r] * (v - out[r]).exp()));
                }
                if w > 0 {
                    acc(0, full);
                }
            }
            Op::LogSoftmax => {
                let w = node.value.last_dim();
                let mut full = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(w).zip(out.chunks(w)) {
                    let s: f64 = grow.iter().sum();
                    full.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * s));
                }
                acc(0, full);
            }
            Op::Transpose => {
                let s = node.value.shape();
                let gt = Tensor::from_parts(s.to_vec(), g.to_vec()).transpose()?;
                acc(0, gt.to_vec());
            }
            Op::GatherRows(ids) => {
                let table = val(0);
                let d = table.last_dim();
                let mut full = vec![0.0; table.len()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        full[id * d + j] += g[k * d + j];
                    }
                }
                acc(0, full);
            }
            Op::Pick(idx) => {
                let w = val(0).last_dim();
                let mut full = vec![0.0; val(0).len()];
                for (r, &i) in idx.iter().enumerate() {
                    full[r * w + i] += g[r];
                }
                acc(0, full);
            }
            Op::Expand(n) => {
                acc(0, g.chunks((*n).max(1)).map(|c| c.iter().sum()).collect());
            }
            Op::TileRows(reps) => {
                let a = val(0);
                let c = a.shape()[0];
                let inner = if c == 0 { 0 } else { a.len() / c };
                let mut full = vec![0.0; a.len()];
                for i in 0..c {
                    for r in 0..*reps {
                        let src = &g[(i * reps + r) * inner..(i * reps + r + 1) * inner];
                        for (f, s) in full[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                            *f += s;
                        }
                    }
                }
                acc(0, full);
            }
            Op::Stack(k) => {
                for j in 0..*k {
                    if wants(j) {
                        acc(j, g.iter().skip(j).step_by(*k).copied().collect());
                    }
                }
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let parts = op.backward(&inputs, &node.value, &gt)?;
                if parts.len() != inputs.len() {
                    return Err(shape_err("custom backward", format!("{} grads for {} inputs", parts.len(), inputs.len())));
                }
                for (p, part) in parts.into_iter().enumerate() {
                    if let Some(t) = part {
                        if t.len() != inputs[p].len() {
                            return Err(shape_err("custom backward", format!("gradient {:?} for input {:?}", t.shape(), inputs[p].shape())));
                        }
                        if wants(p) {
                            acc(p, t.to_vec());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
