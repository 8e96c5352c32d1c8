//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Nodes are only ever appended, so creation order is a topological
//! order and `backward` can sweep the node list once in reverse.

use std::fmt;

use super::conv::{ConvPlan, ConvSpec};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    ConvTranspose2d,
    Relu,
    MaxPool2,
    Add,
    Sub,
    Scale,
    Sum,
    SumSquares,
    RepeatChannels,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Relu,
        OpKind::MaxPool2,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::SumSquares,
        OpKind::RepeatChannels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv2d_transposed",
            OpKind::Relu => "relu",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::SumSquares => "sum_squares",
            OpKind::RepeatChannels => "repeat_channels",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deliberate corruption of one operation's backward pass, used to prove
/// that gradient checks catch wrong derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    /// Relative perturbation applied to every gradient the op emits.
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        plan: ConvPlan,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    RepeatChannels(Var, usize),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv { plan, .. } if plan.spec.transposed => OpKind::ConvTranspose2d,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::RepeatChannels(..) => OpKind::RepeatChannels,
        })
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Rebuilt for every forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
    /// Smallest |pre-activation| seen by any ReLU.
    relu_margin: f64,
    /// Smallest gap between the winner and runner-up of any pooling window.
    pool_margin: f64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
            relu_margin: f64::INFINITY,
            pool_margin: f64::INFINITY,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Graph {
            fault,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distance of the current forward pass from the nearest non-smooth
    /// point: the smaller of the least |ReLU input| and the least gap
    /// between a pooling winner and its runner-up.
    pub fn kink_margin(&self) -> f64 {
        self.relu_margin.min(self.pool_margin)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves a recorded value out of the graph, leaving an empty shell.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let node = &mut self.nodes[v.0];
        let shape = node.value.shape();
        std::mem::replace(&mut node.value, Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![T::zero()]))
            .reshape(shape)
            .expect("shape is unchanged")
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = bias.map(|b| &self.nodes[b.0].value);
        let plan = ConvPlan::new(spec, x, w, b)?;
        let out = plan.forward(x.data(), w.data(), b.map(|t| t.data()));
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(plan.output, out),
            Op::Conv {
                plan,
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Strided 2-D convolution; weights `(out_c, in_c, kh, kw)`, bias with
    /// `out_c` elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        if spec.transposed {
            return Err(Error::Contract("conv2d called with a transposed spec".into()));
        }
        self.conv(input, weight, bias, spec)
    }

    /// Transposed convolution; weights `(in_c, out_c, kh, kw)`. With zero bias
    /// this is the adjoint of [`Graph::conv2d`] under the same weights.
    pub fn conv2d_transposed(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        if !spec.transposed {
            return Err(Error::Contract("conv2d_transposed called with a forward spec".into()));
        }
        self.conv(input, weight, bias, spec)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let margin = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        self.relu_margin = self.relu_margin.min(margin);
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(y, Op::Relu(input), rg)
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let s = x.shape();
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::geometry(format!("max pooling needs even spatial dims, got {s}")));
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        let mut margin = f64::INFINITY;
        let xd = x.data();
        for plane in 0..s.n * s.c {
            let base = plane * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let idx = [
                        base + 2 * oy * s.w + 2 * ox,
                        base + 2 * oy * s.w + 2 * ox + 1,
                        base + (2 * oy + 1) * s.w + 2 * ox,
                        base + (2 * oy + 1) * s.w + 2 * ox + 1,
                    ];
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    for &i in &idx {
                        // tied ReLU zeros stay tied under small perturbations;
                        // the ReLU margin already covers them
                        if i != best && !(xd[i] == T::zero() && xd[best] == T::zero()) {
                            margin = margin.min((xd[best] - xd[i]).as_f64());
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.pool_margin = self.pool_margin.min(margin);
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::from_parts(os, out), Op::MaxPool2 { input, argmax }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa} and {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(s, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(s, data), Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let y = self.nodes[a.0].value.map(|v| v * f);
        let rg = self.any_grad(&[a]);
        self.push(y, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements as a `1x1x1x1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![total]), Op::Sum(a), rg)
    }

    /// Sum of squared elements as a `1x1x1x1` scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v * v);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![total]), Op::SumSquares(a), rg)
    }

    /// Tiles every channel `times` times along the channel axis; used to feed
    /// a grayscale image into a colour feature network.
    pub fn repeat_channels(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Contract("repeat_channels needs times >= 1".into()));
        }
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        let per = s.c * s.plane();
        let mut data = Vec::with_capacity(per * times * s.n);
        for b in 0..s.n {
            for _ in 0..times {
                data.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(Shape::new(s.n, s.c * times, s.h, s.w), data),
            Op::RepeatChannels(a, times),
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Leaf gradients are added to any gradient already stored on the leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls != Shape::new(1, 1, 1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let scale = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f.op == k => Some(T::from_f64(1.0 + f.factor)),
                _ => None,
            };
            let mut contributions: Vec<(Var, Vec<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv {
                    plan,
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0];
                    let w = &self.nodes[weight.0];
                    if x.requires_grad {
                        contributions.push((*input, plan.backward_input(&g, w.value.data())));
                    }
                    if w.requires_grad {
                        contributions.push((*weight, plan.backward_weights(x.value.data(), &g)));
                    }
                    if let Some(b) = bias {
                        if self.nodes[b.0].requires_grad {
                            contributions.push((*b, plan.backward_bias(&g)));
                        }
                    }
                }
                Op::Relu(input) => {
                    let x = self.nodes[input.0].value.data();
                    let dx = x
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    contributions.push((*input, dx));
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![T::zero(); self.nodes[input.0].value.numel()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src] = dx[src] + gv;
                    }
                    contributions.push((*input, dx));
                }
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    contributions.push((*a, g));
                    contributions.push((*b, neg));
                }
                Op::Scale(a, f) => {
                    let f = T::from_f64(*f);
                    contributions.push((*a, g.iter().map(|&v| v * f).collect()));
                }
                Op::Sum(a) => {
                    contributions.push((*a, vec![g[0]; self.nodes[a.0].value.numel()]));
                }
                Op::SumSquares(a) => {
                    let two = T::from_f64(2.0);
                    let x = self.nodes[a.0].value.data();
                    contributions.push((*a, x.iter().map(|&v| two * v * g[0]).collect()));
                }
                Op::RepeatChannels(a, times) => {
                    let s = self.nodes[a.0].value.shape();
                    let per = s.c * s.plane();
                    let mut dx = vec![T::zero(); s.numel()];
                    for b in 0..s.n {
                        for t in 0..*times {
                            let src = &g[(b * times + t) * per..(b * times + t + 1) * per];
                            dx[b * per..(b + 1) * per]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    contributions.push((*a, dx));
                }
            }
            for (target, mut contrib) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                if let Some(s) = scale {
                    contrib.iter_mut().for_each(|v| *v = *v * s);
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[id].op, Op::Leaf) {
                    self.nodes[id].value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }
}
