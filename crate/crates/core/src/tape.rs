//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! appended after their inputs, so the tape is always in topological order
//! and [`Tape::backward`] is a single reverse sweep that visits each node
//! once. Gradients of a node used several times accumulate additively.
//!
//! ```
//! use uqsynth_core::tape::Tape;
//! use uqsynth_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]), true);
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use crate::conv::{self, ConvGeometry, UpConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Square,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Reduce(ReduceOp, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    UpsampleConv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: UpConvGeometry,
    },
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    ChannelScale {
        x: Var,
        factors: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to `v`. Only kept for leaves that require a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad mirrors value"))
    }

    /// Moves the gradient buffer of `v` out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }

    fn push(&mut self, op_name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::Domain(format!(
                "{op_name} produced a non-finite value at flat index {i}"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match op {
            UnaryOp::Neg => xv.map(|v| -v),
            UnaryOp::Exp => xv.map(f64::exp),
            UnaryOp::Log => {
                if let Some(i) = xv.data().iter().position(|&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!(
                        "log of non-positive value {} at flat index {i}",
                        xv.data()[i]
                    )));
                }
                xv.map(f64::ln)
            }
            UnaryOp::Square => xv.map(|v| v * v),
            UnaryOp::Relu => xv.map(|v| v.max(0.0)),
        };
        self.push(&format!("{op:?}"), out, &[x], Op::Unary(op, x))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same_shape(&format!("{op:?}"), av, bv)?;
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(&format!("{op:?}"), out, &[a, b], Op::Binary(op, a, b))
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

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, &[x], Op::Scale(x, c))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Domain(format!(
                "clamp bounds [{lo}, {hi}] are empty"
            )));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, &[x], Op::Clamp { x, lo, hi })
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Domain("reduction over an empty tensor".into()));
        }
        let s = xv.sum();
        let out = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / xv.len() as f64,
        };
        self.push(
            &format!("{op:?}"),
            Tensor::scalar(out),
            &[x],
            Op::Reduce(op, x),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x)
    }

    /// 2-d convolution with zero padding. `input` is `[N,C,H,W]`, `kernel`
    /// is `[F,C,kH,kW]` and `bias`, when given, is `[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let iv = self.value(input);
        let kv = self.value(kernel);
        let geom = ConvGeometry::new(iv.dims4()?, kv.dims4()?, stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [geom.filters] {
                    return Err(Error::Shape(format!(
                        "conv2d: bias shape {:?} does not match {} filters",
                        bv.shape(),
                        geom.filters
                    )));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = conv::conv2d_forward(&geom, iv.data(), kv.data(), bias_data);
        let out = Tensor::new(&geom.out_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Nearest-neighbour 2× upsampling followed by a same-padded convolution
    /// with an odd square kernel, without materialising the upsampled map.
    pub fn upsample_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let iv = self.value(input);
        let kv = self.value(kernel);
        let geom = UpConvGeometry::new(iv.dims4()?, kv.dims4()?)?;
        let bias_data = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [geom.filters] {
                    return Err(Error::Shape(format!(
                        "upsample conv: bias shape {:?} does not match {} filters",
                        bv.shape(),
                        geom.filters
                    )));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = conv::upconv_forward(&geom, iv.data(), kv.data(), bias_data);
        let out = Tensor::new(&geom.out_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "upsample_conv2d",
            out,
            &inputs,
            Op::UpsampleConv {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4()?;
        let out = Tensor::new(
            &[n, c, 2 * h, 2 * w],
            conv::upsample2x_forward([n, c, h, w], xv.data()),
        )?;
        self.push("upsample2x", out, &[x], Op::Upsample2x(x))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::Shape("concat of nothing".into()))?,
            )
            .dims4()?;
        let [n, _, h, w] = first;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} incompatible with {:?}",
                    [pn, pc, ph, pw],
                    first
                )));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        self.push(
            "concat_channels",
            out,
            parts,
            Op::ConcatChannels(parts.to_vec()),
        )
    }

    /// Multiplies each `(n, c)` channel map by its own factor.
    pub fn channel_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4()?;
        if factors.len() != n * c {
            return Err(Error::Shape(format!(
                "channel_scale: {} factors for {n}x{c} channel maps",
                factors.len()
            )));
        }
        let plane = h * w;
        let mut data = xv.data().to_vec();
        for (chunk, &f) in data.chunks_mut(plane).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        self.push("channel_scale", out, &[x], Op::ChannelScale { x, factors })
    }

    /// Back-propagates from the scalar `loss`, filling gradient buffers for
    /// every leaf that requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(op, x) => {
                let xs = val(*x);
                let d: Vec<f64> = match op {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Exp => g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .collect(),
                    UnaryOp::Log => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                    UnaryOp::Square => g.iter().zip(xs).map(|(g, x)| 2.0 * g * x).collect(),
                    UnaryOp::Relu => g
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                vec![(*x, d)]
            }
            Op::Binary(op, a, b) => {
                let mut out = Vec::with_capacity(2);
                match op {
                    BinaryOp::Add => {
                        out.push((*a, g.to_vec()));
                        out.push((*b, g.to_vec()));
                    }
                    BinaryOp::Sub => {
                        out.push((*a, g.to_vec()));
                        out.push((*b, g.iter().map(|v| -v).collect()));
                    }
                    BinaryOp::Mul => {
                        if rg(*a) {
                            out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                        }
                        if rg(*b) {
                            out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                        }
                    }
                }
                out
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Reduce(op, x) => {
                let n = self.nodes[x.0].value.len();
                let each = match op {
                    ReduceOp::Sum => g[0],
                    ReduceOp::Mean => g[0] / n as f64,
                };
                vec![(*x, vec![each; n])]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = [rg(*input), rg(*kernel), bias.is_some_and(&rg)];
                let grads = conv::conv2d_backward(geom, val(*input), val(*kernel), g, want);
                let mut out = Vec::with_capacity(3);
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.kernel {
                    out.push((*kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
                out
            }
            Op::UpsampleConv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = [rg(*input), rg(*kernel), bias.is_some_and(&rg)];
                let grads = conv::upconv_backward(geom, val(*input), val(*kernel), g, want);
                let mut out = Vec::with_capacity(3);
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.kernel {
                    out.push((*kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
                out
            }
            Op::Upsample2x(x) => {
                let dims = self.nodes[x.0].value.dims4().expect("recorded as 4-d");
                vec![(*x, conv::upsample2x_backward(dims, g))]
            }
            Op::ConcatChannels(parts) => {
                let [n, _, h, w] = node.value.dims4().expect("recorded as 4-d");
                let plane = h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if rg(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        out.push((p, d));
                    }
                    offset += c;
                }
                out
            }
            Op::ChannelScale { x, factors } => {
                let plane = g.len() / factors.len();
                let mut d = g.to_vec();
                for (chunk, &f) in d.chunks_mut(plane).zip(factors) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                vec![(*x, d)]
            }
        }
    }
}
