use std::fmt;

use super::conv;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Record of which branch every nonsmooth op took during a forward pass.
///
/// Finite-difference checks compare the log at `x`, `x + h` and `x - h`; a
/// probe whose perturbation changes any branch straddles a kink and is
/// discarded. `margin` is the smallest distance of any recorded input to
/// its kink.
#[derive(Clone, Debug, Default)]
pub struct KinkLog {
    enabled: bool,
    signature: Vec<i8>,
    margin: f64,
}

impl KinkLog {
    fn new(enabled: bool) -> Self {
        KinkLog {
            enabled,
            signature: Vec::new(),
            margin: f64::INFINITY,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// An argument exactly on the kink is taken as structural (say the
    /// diagonal of a pairwise difference) and left out of the margin: no
    /// perturbation of the inputs moves it, and probes still compare branch
    /// signatures.
    pub fn record(&mut self, branch: i8, distance: f64) {
        if self.enabled {
            self.signature.push(branch);
            if distance > 0.0 {
                self.margin = self.margin.min(distance);
            }
        }
    }

    pub fn signature(&self) -> &[i8] {
        &self.signature
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// An operation defined outside this module, for fused kernels whose
/// backward pass is cheaper than the composition of primitives.
pub trait CustomOp: fmt::Debug + Send {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor], kinks: &mut KinkLog) -> Result<Tensor>;

    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Abs,
    /// `max(0, x)`
    MaxWithZero,
    /// `-min(0, x)`
    NegMinWithZero,
    Ln,
    /// Huber loss with unit threshold: `0.5 x^2` inside `|x| < 1`, `|x| - 0.5` outside.
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        kernel_size: usize,
    },
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Flatten(Var),
    PairwiseDiff(Var),
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    grad_scale: f64,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so insertion
/// order is a topological order and `backward` is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: KinkLog,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn unary_forward(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Relu | UnaryOp::MaxWithZero => x.max(0.0),
        UnaryOp::NegMinWithZero => (-x).max(0.0),
        UnaryOp::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryOp::Abs => x.abs(),
        UnaryOp::Ln => x.ln(),
        UnaryOp::SmoothL1 => {
            let a = x.abs();
            if a < 1.0 {
                0.5 * x * x
            } else {
                a - 0.5
            }
        }
    }
}

fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Relu | UnaryOp::MaxWithZero => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::NegMinWithZero => {
            if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Ln => 1.0 / x,
        UnaryOp::SmoothL1 => {
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        }
    }
}

fn sign_branch(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Lazily materialized gradient buffer of `p`, or `None` when nothing
/// upstream of `p` needs a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], p: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[p.0].requires_grad {
        return None;
    }
    let n = nodes[p.0].value.numel();
    Some(grads[p.0].get_or_insert_with(|| vec![0.0; n]))
}

fn shape_err(op: &str, a: Shape, b: Shape) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a} and {b}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: KinkLog::new(false),
        }
    }

    /// A graph that records the branch taken by every nonsmooth op.
    pub fn with_kink_tracking() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: KinkLog::new(true),
        }
    }

    pub fn kinks(&self) -> &KinkLog {
        &self.kinks
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` for constants and for leaves
    /// no backward pass has reached yet.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Multiply the gradient flowing out of `v` by `factor` during backward.
    /// Fault-injection hook for negative controls of gradient checks.
    #[doc(hidden)]
    pub fn scale_grad_at(&mut self, v: Var, factor: f64) {
        self.nodes[v.0].grad_scale = factor;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            grad_scale: 1.0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Same-length 1-D convolution. `input` is `T x C_in` (time-major),
    /// `kernel` is `(K * C_in) x C_out` laid out as `[k][c_in][c_out]`,
    /// `bias` has `C_out` entries. Zero padding of `(K - 1) / 2` on both sides.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, kernel_size: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        let Shape::Matrix(len, c_in) = xs else {
            return Err(Error::Shape(format!("conv1d: input must be a matrix, got {xs}")));
        };
        let geometry = conv::Geometry::new(len, c_in, ws, bs, kernel_size)?;
        let out = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::matrix(len, geometry.c_out, out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                kernel_size,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let src = self.value(x);
        if op == UnaryOp::Ln {
            if let Some(bad) = src.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "ln",
                    detail: format!("non-positive argument {bad}"),
                });
            }
        }
        let out: Vec<f64> = src.data().iter().map(|&v| unary_forward(op, v)).collect();
        if self.kinks.enabled() {
            for &v in self.nodes[x.0].value.data() {
                match op {
                    UnaryOp::Relu | UnaryOp::MaxWithZero | UnaryOp::NegMinWithZero | UnaryOp::Abs => {
                        self.kinks.record(sign_branch(v), v.abs())
                    }
                    UnaryOp::SmoothL1 => self.kinks.record((v.abs() < 1.0) as i8, (v.abs() - 1.0).abs()),
                    UnaryOp::Sigmoid | UnaryOp::Ln => {}
                }
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Unary(op, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn max_with_zero(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::MaxWithZero, x)
    }

    pub fn neg_min_with_zero(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::NegMinWithZero, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::SmoothL1, x)
    }

    /// Elementwise binary op. Operands must have equal shapes, or one of them
    /// must be a scalar.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let (shape, out): (Shape, Vec<f64>) = if sa == sb {
            (sa, ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
        } else if sb.is_scalar() {
            let y = tb.data()[0];
            (sa, ta.data().iter().map(|&x| f(x, y)).collect())
        } else if sa.is_scalar() {
            let x = ta.data()[0];
            (sb, tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(shape_err(name, sa, sb));
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(src.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(src.shape(), out).expect("same shape");
        if self.kinks.enabled() {
            for &v in self.nodes[x.0].value.data() {
                let branch = if v < lo {
                    -1
                } else if v > hi {
                    1
                } else {
                    0
                };
                self.kinks.record(branch, (v - lo).abs().min((v - hi).abs()));
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.numel() == 0 {
            return Err(Error::EmptyReduction);
        }
        let total = src.data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.numel() == 0 {
            return Err(Error::EmptyReduction);
        }
        let mean = src.data().iter().sum::<f64>() / src.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(mean), Op::Mean(x), rg))
    }

    /// Contiguous range `start..start + len` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let Shape::Vector(n) = src.shape() else {
            return Err(Error::Shape(format!("slice: expected a vector, got {}", src.shape())));
        };
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}..{} out of range for length {n}", start + len)));
        }
        let value = Tensor::vector(src.data()[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// View any tensor as a vector of its row-major values.
    pub fn flatten(&mut self, x: Var) -> Var {
        let value = Tensor::vector(self.value(x).data().to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::Flatten(x), rg)
    }

    /// `out[i][j] = x[i] - x[j]` for a vector `x`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let Shape::Vector(n) = src.shape() else {
            return Err(Error::Shape(format!("pairwise_diff: expected a vector, got {}", src.shape())));
        };
        let d = src.data();
        let mut out = Vec::with_capacity(n * n);
        for &xi in d {
            out.extend(d.iter().map(|&xj| xi - xj));
        }
        let value = Tensor::matrix(n, n, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::PairwiseDiff(x), rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&ins, &mut self.kinks)?
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into every
    /// reachable leaf created with `requires_grad`; calling `backward` again
    /// without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.grad_scale != 1.0 {
                let s = node.grad_scale;
                g.iter_mut().for_each(|v| *v *= s);
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
                kernel_size,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[kernel.0].value;
                let Shape::Matrix(len, c_in) = x.shape() else { unreachable!() };
                let geometry = conv::Geometry::new(len, c_in, w.shape(), nodes[bias.0].value.shape(), *kernel_size)
                    .expect("validated in forward");
                if let Some(gx) = slot(nodes, grads, *input) {
                    conv::backward_input(&geometry, g, w.data(), gx);
                }
                if let Some(gw) = slot(nodes, grads, *kernel) {
                    conv::backward_kernel(&geometry, g, x.data(), gw);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    conv::backward_bias(&geometry, g, gb);
                }
            }
            Op::Unary(op, x) => {
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, acc) in gx.iter_mut().enumerate() {
                        *acc += g[k] * unary_derivative(*op, xs[k], ys[k]);
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                // Broadcast scalar operands read index 0.
                let ia = |k: usize| if sa.is_scalar() && !sb.is_scalar() { 0 } else { k };
                let ib = |k: usize| if sb.is_scalar() && !sa.is_scalar() { 0 } else { k };
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (k, gk) in g.iter().enumerate() {
                        ga[ia(k)] += match op {
                            BinaryOp::Add | BinaryOp::Sub => *gk,
                            BinaryOp::Mul => gk * db[ib(k)],
                        };
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (k, gk) in g.iter().enumerate() {
                        gb[ib(k)] += match op {
                            BinaryOp::Add => *gk,
                            BinaryOp::Sub => -gk,
                            BinaryOp::Mul => gk * da[ia(k)],
                        };
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xs = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, acc) in gx.iter_mut().enumerate() {
                        if xs[k] > *lo && xs[k] < *hi {
                            *acc += g[k];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let share = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += share);
                }
            }
            Op::Slice { x, start } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx[*start..*start + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Flatten(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::PairwiseDiff(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = gx.len();
                    for r in 0..n {
                        for c in 0..n {
                            let v = g[r * n + c];
                            gx[r] += v;
                            gx[c] -= v;
                        }
                    }
                }
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let grad_out = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let parts = op.backward(&ins, &node.value, &grad_out);
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut().zip(part.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}
