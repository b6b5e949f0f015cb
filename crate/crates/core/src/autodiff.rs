//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to run the backward rule. Nodes are only ever appended, so the tape
//! is always in topological order and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! The [`Graph`] trait abstracts over the operations the network needs so the
//! same forward code runs either on a recording [`Tape`] or on the
//! non-recording [`Eager`] evaluator used for inference.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Square,
    Tanh,
    Sigmoid,
    Relu,
    /// Square root with the sub-gradient at 0 taken as 0. Negative inputs are rejected.
    Sqrt,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }

    fn apply(self, x: Scalar) -> Scalar {
        match self {
            Self::Square => x * x,
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
            Self::Relu => x.max(0.0),
            Self::Sqrt => x.sqrt(),
            Self::Add | Self::Sub | Self::Mul => unreachable!("binary kind in unary position"),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: Scalar, y: Scalar) -> Scalar {
        match self {
            Self::Square => 2.0 * x,
            Self::Tanh => 1.0 - y * y,
            Self::Sigmoid => y * (1.0 - y),
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Self::Add | Self::Sub | Self::Mul => unreachable!("binary kind in unary position"),
        }
    }
}

impl FromStr for ElementwiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "square" => Self::Square,
            "tanh" => Self::Tanh,
            "sigmoid" => Self::Sigmoid,
            "relu" => Self::Relu,
            "sqrt" => Self::Sqrt,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

impl fmt::Display for ElementwiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Square => "square",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Sqrt => "sqrt",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[inline]
pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which operand of a binary op is repeated to match the other.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    None,
    Left,
    Right,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: ElementwiseKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: ElementwiseKind,
        x: usize,
    },
    Scale {
        x: usize,
        factor: Scalar,
    },
    Offset {
        x: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: usize,
        /// Output flat index for every input element.
        map: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    MulMap {
        x: usize,
        map: usize,
    },
    Depthwise {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    Pointwise {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
    },
    Resize {
        x: usize,
    },
    AvgPool {
        x: usize,
        window: usize,
    },
    Stencil {
        x: usize,
        stencil: Vec<Scalar>,
        size: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// A tape is confined to one thread. Variables carry the id of the tape that
/// created them; mixing tapes is an error.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Scalar>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("value(): foreign variable");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient populated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.check(v).ok()?;
        let g = self.grads[v.index].as_ref()?;
        Some(Tensor::new(self.nodes[v.index].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {} not on tape", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            !requires_grad || value.is_finite() || matches!(op, Op::Leaf),
            "non-finite value from {op:?}"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise op by kind. Binary kinds need `b`; unary kinds reject it.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary_impl(kind, a, b),
            (false, None) => self.unary_impl(kind, a),
            (true, None) => Err(Error::InvalidArgument(format!("`{kind}` needs two operands"))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("`{kind}` takes one operand"))),
        }
    }

    fn binary_impl(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast = broadcast_rule(ta.shape(), tb.shape())?;
        let out = binary_values(kind, ta, tb, broadcast);
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(
            out,
            rg,
            Op::Binary { kind, a: ia, b: ib },
        ))
    }

    fn unary_impl(&mut self, kind: ElementwiseKind, x: Var) -> Result<Var> {
        if kind.is_binary() {
            return Err(Error::InvalidArgument(format!("`{kind}` needs two operands")));
        }
        let ix = self.check(x)?;
        let out = unary_value(kind, &self.nodes[ix].value)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Unary { kind, x: ix }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_impl(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_impl(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_impl(ElementwiseKind::Mul, a, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary_impl(ElementwiseKind::Square, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary_impl(ElementwiseKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_impl(ElementwiseKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_impl(ElementwiseKind::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary_impl(ElementwiseKind::Sqrt, x)
    }

    /// `factor · x`.
    pub fn scale(&mut self, x: Var, factor: Scalar) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v * factor);
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Scale { x: ix, factor }))
    }

    /// `x + amount`.
    pub fn offset(&mut self, x: Var, amount: Scalar) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v + amount);
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Offset { x: ix }))
    }

    // ---- reductions and shape ops -----------------------------------------

    /// Sum or mean over `axes` (all axes when `None`). Reduced axes are dropped.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        let ix = self.check(x)?;
        let input = &self.nodes[ix].value;
        let (out_shape, map) = reduction_map(input.shape(), axes)?;
        let out_len: usize = out_shape.iter().product();
        let mut acc = vec![0.0; out_len];
        for (&o, &v) in map.iter().zip(input.data()) {
            acc[o] += v;
        }
        if kind == ReduceKind::Mean {
            let count = (input.numel() / out_len) as Scalar;
            acc.iter_mut().for_each(|v| *v /= count);
        }
        let out = Tensor::new(&out_shape, acc)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Reduce { kind, x: ix, map }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Reshape { x: ix }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let input = &self.nodes[ix].value;
        let shape = input.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid_shape(
                shape,
                format!("slice {start}..{} out of range on axis {axis}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&input.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Slice { x: ix, axis, start }))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads() first".into(),
            ));
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.grads[i] = Some(g);
            for (target, grad) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.grads[target] {
                    Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, v)| *e += v),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[Scalar]) -> Vec<(usize, Vec<Scalar>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => binary_backward(*kind, val(*a), val(*b), g)
                .into_iter()
                .zip([*a, *b])
                .map(|(grad, idx)| (idx, grad))
                .collect(),
            Op::Unary { kind, x } => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Offset { x } | Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Reduce { kind, x, map } => {
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => (map.len() / g.len()) as Scalar,
                };
                vec![(*x, map.iter().map(|&o| g[o] / scale).collect())]
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::MulMap { x, map } => {
                let (xv, mv) = (val(*x).data(), val(*map).data());
                let plane = mv.len();
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * mv[k % plane])
                    .collect();
                let mut gm = vec![0.0; plane];
                for (k, (gv, xv)) in g.iter().zip(xv).enumerate() {
                    gm[k % plane] += gv * xv;
                }
                vec![(*x, gx), (*map, gm)]
            }
            Op::Depthwise {
                x,
                kernel,
                bias,
                geometry,
            } => {
                let (gx, gk, gb) =
                    kernels::depthwise_backward(val(*x).data(), val(*kernel).data(), g, *geometry);
                let mut out = vec![(*x, gx), (*kernel, gk)];
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Pointwise { x, kernel, bias } => {
                let (c_in, h, w) = val(*x).chw().expect("pointwise input");
                let c_out = node.value.shape()[0];
                let (gy, gk, gb) = kernels::pointwise_backward(
                    val(*x).data(),
                    val(*kernel).data(),
                    g,
                    c_in,
                    c_out,
                    h * w,
                );
                let mut out = vec![(*x, gy), (*kernel, gk)];
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Resize { x } => {
                let (c, h, w) = val(*x).chw().expect("resize input");
                let (_, oh, ow) = node.value.chw().expect("resize output");
                vec![(*x, kernels::resize_backward(g, c, (h, w), (oh, ow)))]
            }
            Op::AvgPool { x, window } => {
                let (c, h, w) = val(*x).chw().expect("pool input");
                vec![(*x, kernels::avg_pool_backward(g, c, (h, w), *window))]
            }
            Op::Stencil { x, stencil, size } => {
                let (c, h, w) = val(*x).chw().expect("stencil input");
                vec![(*x, kernels::stencil_backward(g, c, (h, w), stencil, *size))]
            }
        }
    }

    /// Valid correlation of every channel with a fixed (non-learned) stencil.
    pub fn stencil(&mut self, x: Var, stencil: &[Scalar], size: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let out = stencil_value(&self.nodes[ix].value, stencil, size)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(
            out,
            rg,
            Op::Stencil {
                x: ix,
                stencil: stencil.to_vec(),
                size,
            },
        ))
    }
}

// ---- shared forward helpers (used by Tape and Eager) --------------------------

fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b {
        Ok(Broadcast::None)
    } else if numel(b) == 1 || (b.len() < a.len() && a.ends_with(b)) {
        Ok(Broadcast::Right)
    } else if numel(a) == 1 || (a.len() < b.len() && b.ends_with(a)) {
        Ok(Broadcast::Left)
    } else {
        Err(Error::shape(a, b, "elementwise operands"))
    }
}

fn binary_values(kind: ElementwiseKind, a: &Tensor, b: &Tensor, broadcast: Broadcast) -> Tensor {
    let f = |x: Scalar, y: Scalar| match kind {
        ElementwiseKind::Add => x + y,
        ElementwiseKind::Sub => x - y,
        ElementwiseKind::Mul => x * y,
        _ => unreachable!("unary kind in binary position"),
    };
    let (big, shape) = match broadcast {
        Broadcast::Left => (b.numel(), b.shape()),
        _ => (a.numel(), a.shape()),
    };
    let (ad, bd) = (a.data(), b.data());
    let data = (0..big)
        .map(|k| f(ad[k % ad.len()], bd[k % bd.len()]))
        .collect();
    Tensor::new(shape, data).expect("binary shape")
}

fn binary_backward(
    kind: ElementwiseKind,
    a: &Tensor,
    b: &Tensor,
    g: &[Scalar],
) -> [Vec<Scalar>; 2] {
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    for (k, &gv) in g.iter().enumerate() {
        let (ia, ib) = (k % ad.len(), k % bd.len());
        let (da, db) = match kind {
            ElementwiseKind::Add => (gv, gv),
            ElementwiseKind::Sub => (gv, -gv),
            ElementwiseKind::Mul => (gv * bd[ib], gv * ad[ia]),
            _ => unreachable!("unary kind in binary position"),
        };
        ga[ia] += da;
        gb[ib] += db;
    }
    [ga, gb]
}

fn unary_value(kind: ElementwiseKind, x: &Tensor) -> Result<Tensor> {
    if kind == ElementwiseKind::Sqrt && x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("sqrt of a negative value".into()));
    }
    Ok(x.map(|v| kind.apply(v)))
}

fn reduction_map(shape: &[usize], axes: Option<&[usize]>) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    match axes {
        None => reduced.iter_mut().for_each(|r| *r = true),
        Some(list) => {
            for &axis in list {
                if axis >= rank {
                    return Err(Error::InvalidAxis { axis, rank });
                }
                reduced[axis] = true;
            }
        }
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    for _ in 0..numel {
        let out = index
            .iter()
            .zip(shape)
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .fold(0, |acc, ((&i, &d), _)| acc * d + i);
        map.push(out);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok((out_shape, map))
}

fn depthwise_value(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvGeometry)> {
    let (c, h, w) = x.chw()?;
    let k = match kernel.shape() {
        [kc, 1, kh, kw] if kh == kw => {
            if *kc != c {
                return Err(Error::shape(x.shape(), kernel.shape(), "depthwise channels"));
            }
            *kh
        }
        other => return Err(Error::invalid_shape(other, "depthwise kernel must be C×1×K×K")),
    };
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::shape(b.shape(), &[c], "depthwise bias"));
        }
    }
    let geometry = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    if !geometry.is_valid() {
        return Err(Error::invalid_shape(x.shape(), "input smaller than kernel"));
    }
    let data = kernels::depthwise_forward(x.data(), kernel.data(), bias.map(|b| b.data()), geometry);
    let out = Tensor::new(&[c, geometry.out_height(), geometry.out_width()], data)?;
    Ok((out, geometry))
}

fn pointwise_value(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c_in, h, w) = x.chw()?;
    let c_out = match kernel.shape() {
        [o, i, 1, 1] => {
            if *i != c_in {
                return Err(Error::shape(x.shape(), kernel.shape(), "pointwise input channels"));
            }
            *o
        }
        other => return Err(Error::invalid_shape(other, "pointwise kernel must be Cout×Cin×1×1")),
    };
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(b.shape(), &[c_out], "pointwise bias"));
        }
    }
    let data = kernels::pointwise_forward(
        x.data(),
        kernel.data(),
        bias.map(|b| b.data()),
        c_in,
        c_out,
        h * w,
    );
    Tensor::new(&[c_out, h, w], data)
}

fn resize_value(x: &Tensor, (oh, ow): (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!("resize target {oh}×{ow} has a zero extent")));
    }
    Tensor::new(&[c, oh, ow], kernels::resize_forward(x.data(), c, (h, w), (oh, ow)))
}

fn avg_pool_value(x: &Tensor, window: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if window == 0 || window > h || window > w {
        return Err(Error::invalid_shape(
            x.shape(),
            format!("pooling window {window} larger than input"),
        ));
    }
    Tensor::new(
        &[c, h / window, w / window],
        kernels::avg_pool_forward(x.data(), c, (h, w), window),
    )
}

fn stencil_value(x: &Tensor, stencil: &[Scalar], size: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if stencil.len() != size * size {
        return Err(Error::InvalidArgument("stencil length must be size²".into()));
    }
    if h < size || w < size {
        return Err(Error::invalid_shape(
            x.shape(),
            format!("needs at least {size}×{size} for the stencil"),
        ));
    }
    Tensor::new(
        &[c, h + 1 - size, w + 1 - size],
        kernels::stencil_forward(x.data(), c, (h, w), stencil, size),
    )
}

fn concat_value(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(first.shape(), p.shape(), "concat spatial extents"));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[channels, h, w], data)
}

fn mul_map_value(x: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if map.shape() != [1, h, w] {
        return Err(Error::shape(x.shape(), map.shape(), "attention map must be 1×H×W"));
    }
    let plane = h * w;
    let m = map.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v * m[k % plane])
        .collect();
    Tensor::new(x.shape(), data)
}

// ---- Graph abstraction ---------------------------------------------------------

/// Operations shared by the recording tape and the eager evaluator.
pub trait Graph {
    type Value: Clone;

    fn shape_of(&self, v: &Self::Value) -> Vec<usize>;

    fn unary(&mut self, kind: ElementwiseKind, x: &Self::Value) -> Result<Self::Value>;

    fn binary(&mut self, kind: ElementwiseKind, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn depthwise_conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;

    fn pointwise_conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value>;

    fn resize_bilinear(&mut self, x: &Self::Value, target: (usize, usize)) -> Result<Self::Value>;

    fn avg_pool(&mut self, x: &Self::Value, window: usize) -> Result<Self::Value>;

    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    /// `x ⊙ map` with a `1×H×W` map broadcast over the channels of `x`.
    fn mul_map(&mut self, x: &Self::Value, map: &Self::Value) -> Result<Self::Value>;
}

impl Graph for Tape {
    type Value = Var;

    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.shape(*v).to_vec()
    }

    fn unary(&mut self, kind: ElementwiseKind, x: &Var) -> Result<Var> {
        self.unary_impl(kind, *x)
    }

    fn binary(&mut self, kind: ElementwiseKind, a: &Var, b: &Var) -> Result<Var> {
        if !kind.is_binary() {
            return Err(Error::InvalidArgument(format!("`{kind}` takes one operand")));
        }
        self.binary_impl(kind, *a, *b)
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ix = self.check(*x)?;
        let ik = self.check(*kernel)?;
        let ib = bias.map(|b| self.check(*b)).transpose()?;
        let (out, geometry) = depthwise_value(
            &self.nodes[ix].value,
            &self.nodes[ik].value,
            ib.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        let mut inputs = vec![ix, ik];
        inputs.extend(ib);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            rg,
            Op::Depthwise {
                x: ix,
                kernel: ik,
                bias: ib,
                geometry,
            },
        ))
    }

    fn pointwise_conv2d(&mut self, x: &Var, kernel: &Var, bias: Option<&Var>) -> Result<Var> {
        let ix = self.check(*x)?;
        let ik = self.check(*kernel)?;
        let ib = bias.map(|b| self.check(*b)).transpose()?;
        let out = pointwise_value(
            &self.nodes[ix].value,
            &self.nodes[ik].value,
            ib.map(|b| &self.nodes[b].value),
        )?;
        let mut inputs = vec![ix, ik];
        inputs.extend(ib);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            rg,
            Op::Pointwise {
                x: ix,
                kernel: ik,
                bias: ib,
            },
        ))
    }

    fn resize_bilinear(&mut self, x: &Var, target: (usize, usize)) -> Result<Var> {
        let ix = self.check(*x)?;
        let out = resize_value(&self.nodes[ix].value, target)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::Resize { x: ix }))
    }

    fn avg_pool(&mut self, x: &Var, window: usize) -> Result<Var> {
        let ix = self.check(*x)?;
        let out = avg_pool_value(&self.nodes[ix].value, window)?;
        let rg = self.any_grad(&[ix]);
        Ok(self.push(out, rg, Op::AvgPool { x: ix, window }))
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|p| self.check(*p))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = concat_value(&values)?;
        let rg = self.any_grad(&idx);
        Ok(self.push(out, rg, Op::Concat { parts: idx }))
    }

    fn mul_map(&mut self, x: &Var, map: &Var) -> Result<Var> {
        let ix = self.check(*x)?;
        let im = self.check(*map)?;
        let out = mul_map_value(&self.nodes[ix].value, &self.nodes[im].value)?;
        let rg = self.any_grad(&[ix, im]);
        Ok(self.push(out, rg, Op::MulMap { x: ix, map: im }))
    }
}

/// Non-recording evaluator: runs the same kernels as [`Tape`] and keeps nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Value = Tensor;

    fn shape_of(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn unary(&mut self, kind: ElementwiseKind, x: &Tensor) -> Result<Tensor> {
        if kind.is_binary() {
            return Err(Error::InvalidArgument(format!("`{kind}` needs two operands")));
        }
        unary_value(kind, x)
    }

    fn binary(&mut self, kind: ElementwiseKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !kind.is_binary() {
            return Err(Error::InvalidArgument(format!("`{kind}` takes one operand")));
        }
        let broadcast = broadcast_rule(a.shape(), b.shape())?;
        Ok(binary_values(kind, a, b, broadcast))
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        depthwise_value(x, kernel, bias, stride, padding).map(|(t, _)| t)
    }

    fn pointwise_conv2d(&mut self, x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        pointwise_value(x, kernel, bias)
    }

    fn resize_bilinear(&mut self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        resize_value(x, target)
    }

    fn avg_pool(&mut self, x: &Tensor, window: usize) -> Result<Tensor> {
        avg_pool_value(x, window)
    }

    fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        concat_value(&parts.iter().collect::<Vec<_>>())
    }

    fn mul_map(&mut self, x: &Tensor, map: &Tensor) -> Result<Tensor> {
        mul_map_value(x, map)
    }
}
