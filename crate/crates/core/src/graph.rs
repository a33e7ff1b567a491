//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its value and the operands it was computed from, so the
//! node list is always in topological order. [`Graph::backward`] walks it
//! once in reverse, accumulating gradients additively into every node that
//! participates in differentiation.
//!
//! Parameters are borrowed rather than copied: a graph over a model lives no
//! longer than the model itself.

use std::borrow::Cow;

use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for counters and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    AvgPool2d,
    MaxPool2d,
    FullyConnected,
    Relu,
    Softmax,
    Concat,
    Reshape,
    Add,
    Sub,
    Mul,
    Affine,
    Sum,
    Dot,
    Log,
    Clamp,
    Gather,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Softmax {
        input: Var,
        row: usize,
    },
    Concat(Var, Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    Dot(Var, Var),
    Log(Var),
    Clamp {
        input: Var,
        min: f64,
        max: f64,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat(..) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sum(_) => OpKind::Sum,
            Op::Dot(..) => OpKind::Dot,
            Op::Log(_) => OpKind::Log,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Running totals of recorded work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Non-leaf operations recorded.
    pub ops: u64,
    /// Forward arithmetic operations (multiply-adds count once).
    pub flops: u64,
}

impl OpCounter {
    pub fn since(self, earlier: OpCounter) -> OpCounter {
        OpCounter {
            ops: self.ops - earlier.ops,
            flops: self.flops - earlier.flops,
        }
    }
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    counter: OpCounter,
    track_params: bool,
    fault: Option<OpKind>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            counter: OpCounter::default(),
            track_params: true,
            fault: None,
        }
    }

    /// A graph whose parameters are treated as constants. Nothing in it
    /// requires a gradient unless a [`Graph::variable`] is added explicitly.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    /// Makes the backward rule of every `kind` node double the gradient it
    /// sends to its operands. Test fixture for gradient checkers.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Operands of `v`, in the order they were passed to the operation.
    pub fn operands(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::FullyConnected {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::AvgPool2d { input, .. }
            | Op::MaxPool2d { input, .. }
            | Op::Softmax { input, .. }
            | Op::Affine { input, .. }
            | Op::Clamp { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::Relu(a) | Op::Reshape(a) | Op::Sum(a) | Op::Log(a) => vec![*a],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned copy of a node, with its gradient attached when one exists.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape");
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad length");
        }
        t
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool, flops: u64) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !matches!(op, Op::Leaf) {
            self.counter.ops += 1;
            self.counter.flops += flops;
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A borrowed model parameter.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let track = self.track_params;
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, track, 0)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true, 0)
    }

    /// An owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false, 0)
    }

    fn chw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.nodes[v.0].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(TensorError::shape(op, format!("expected [C,H,W], got {s:?}"))),
        }
    }

    fn vector_len(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        match self.nodes[v.0].shape[..] {
            [n] => Ok(n),
            ref s => Err(TensorError::shape(op, format!("expected a vector, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kH,kW]` plus a
    /// per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.chw(input, "conv2d")?;
        let (c_out, kc, kh, kw) = match self.nodes[kernel.0].shape[..] {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("kernel must be rank 4, got {s:?}"),
                ));
            }
        };
        if kc != c_in {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if self.nodes[bias.0].shape[..] != [c_out] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias shape {:?} for {c_out} output channels", self.nodes[bias.0].shape),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {padding}"),
            ));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            vec![c_out, geom.out_h, geom.out_w],
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
            geom.macs(),
        ))
    }

    fn pool_geometry(
        &self,
        input: Var,
        window: usize,
        stride: usize,
        op: &'static str,
    ) -> Result<PoolGeometry, TensorError> {
        let (c, h, w) = self.chw(input, op)?;
        if window == 0 || stride == 0 {
            return Err(TensorError::shape(op, "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(TensorError::shape(op, format!("window {window} exceeds {h}x{w}")));
        }
        Ok(PoolGeometry {
            c,
            h,
            w,
            window,
            stride,
            out_h: (h - window) / stride + 1,
            out_w: (w - window) / stride + 1,
        })
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let geom = self.pool_geometry(input, window, stride, "avg_pool2d")?;
        let out = kernels::avg_pool_forward(&geom, self.value(input));
        let rg = self.rg(&[input]);
        let flops = (geom.out_len() * window * window) as u64;
        Ok(self.push(
            vec![geom.c, geom.out_h, geom.out_w],
            Cow::Owned(out),
            Op::AvgPool2d { input, geom },
            rg,
            flops,
        ))
    }

    /// Averages each channel over its whole (square) spatial extent,
    /// giving `[C,1,1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let (_, h, w) = self.chw(input, "global_avg_pool")?;
        if h != w {
            return Err(TensorError::shape(
                "global_avg_pool",
                format!("non-square extent {h}x{w}"),
            ));
        }
        self.avg_pool2d(input, h, 1)
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let geom = self.pool_geometry(input, window, stride, "max_pool2d")?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input));
        let rg = self.rg(&[input]);
        let flops = (geom.out_len() * window * window) as u64;
        Ok(self.push(
            vec![geom.c, geom.out_h, geom.out_w],
            Cow::Owned(out),
            Op::MaxPool2d { input, argmax },
            rg,
            flops,
        ))
    }

    /// `out_j = sum_i x_i w_ij + b_j` with `weight` shaped `[D_in, D_out]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let d_in = self.vector_len(input, "fully_connected")?;
        let (wi, wo) = match self.nodes[weight.0].shape[..] {
            [a, b] => (a, b),
            ref s => {
                return Err(TensorError::shape(
                    "fully_connected",
                    format!("weight must be rank 2, got {s:?}"),
                ));
            }
        };
        if wi != d_in {
            return Err(TensorError::shape(
                "fully_connected",
                format!("input length {d_in} vs weight rows {wi}"),
            ));
        }
        if self.nodes[bias.0].shape[..] != [wo] {
            return Err(TensorError::shape(
                "fully_connected",
                format!("bias shape {:?} for {wo} outputs", self.nodes[bias.0].shape),
            ));
        }
        let out = kernels::fc_forward(self.value(input), self.value(weight), self.value(bias));
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            vec![wo],
            Cow::Owned(out),
            Op::FullyConnected { input, weight, bias },
            rg,
            (wi * wo) as u64,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        let n = out.len() as u64;
        self.push(shape, Cow::Owned(out), Op::Relu(input), rg, n)
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax(&mut self, input: Var) -> Result<Var, TensorError> {
        let row = *self
            .shape(input)
            .last()
            .ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
        if row == 0 {
            return Err(TensorError::shape("softmax", "empty last axis"));
        }
        let mut out = self.value(input).to_vec();
        for chunk in out.chunks_mut(row) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        let n = 3 * out.len() as u64;
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { input, row }, rg, n))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let na = self.vector_len(a, "concat")?;
        let nb = self.vector_len(b, "concat")?;
        let mut out = Vec::with_capacity(na + nb);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![na + nb], Cow::Owned(out), Op::Concat(a, b), rg, 0))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let out = self.value(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape(input), rg, 0))
    }

    /// Row-major linearization.
    pub fn flatten(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        self.reshape(input, vec![n]).expect("flatten preserves length")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(a, b, op_name)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        let n = out.len() as u64;
        Ok(self.push(shape, Cow::Owned(out), op, rg, n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&x| scale * x + shift).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        let n = out.len() as u64;
        self.push(shape, Cow::Owned(out), Op::Affine { input, scale }, rg, n)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).iter().sum();
        let rg = self.rg(&[input]);
        let n = self.value(input).len() as u64;
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(input), rg, n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(TensorError::shape(
                "dot",
                format!("lengths {} and {}", va.len(), vb.len()),
            ));
        }
        let s: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        let n = va.len() as u64;
        Ok(self.push(vec![1], Cow::Owned(vec![s]), Op::Dot(a, b), rg, n))
    }

    /// Natural logarithm. Inputs must be positive; clamp first.
    pub fn log(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        let n = out.len() as u64;
        self.push(shape, Cow::Owned(out), Op::Log(input), rg, n)
    }

    /// Clamps into `[min, max]`; gradient passes only where the input was
    /// already inside the interval.
    pub fn clamp(&mut self, input: Var, min: f64, max: f64) -> Var {
        let out: Vec<f64> = self.value(input).iter().map(|&x| x.clamp(min, max)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        let n = out.len() as u64;
        self.push(shape, Cow::Owned(out), Op::Clamp { input, min, max }, rg, n)
    }

    /// Picks flat positions of `input` into a vector.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var, TensorError> {
        let src = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of {}", src.len()),
            ));
        }
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(vec![out.len()], Cow::Owned(out), Op::Gather { input, indices }, rg, 0))
    }

    /// Sums a list of scalars. An empty list gives the constant 0.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Fills every participating node's gradient with `d root / d node`.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let contributions = self.local_grads(i, &gout);
                for (operand, mut g) in contributions {
                    if Some(self.nodes[i].op.kind()) == self.fault {
                        g.iter_mut().for_each(|v| *v *= 2.0);
                    }
                    accumulate(&mut self.grads[operand.0], g);
                }
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to those operands that require
    /// a gradient.
    fn local_grads(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| -> &[f64] { &nodes[v.0].value };
        let zeros = |v: &Var| vec![0.0; nodes[v.0].value.len()];
        let mut out = Vec::with_capacity(3);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = needs(input).then(|| zeros(input));
                let mut gk = needs(kernel).then(|| zeros(kernel));
                let mut gb = needs(bias).then(|| zeros(bias));
                kernels::conv2d_backward(
                    geom,
                    val(input),
                    val(kernel),
                    gout,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gi.map(|g| (*input, g)));
                out.extend(gk.map(|g| (*kernel, g)));
                out.extend(gb.map(|g| (*bias, g)));
            }
            Op::AvgPool2d { input, geom } => {
                if needs(input) {
                    let mut gi = zeros(input);
                    kernels::avg_pool_backward(geom, gout, &mut gi);
                    out.push((*input, gi));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if needs(input) {
                    let mut gi = zeros(input);
                    for (&idx, &g) in argmax.iter().zip(gout) {
                        gi[idx] += g;
                    }
                    out.push((*input, gi));
                }
            }
            Op::FullyConnected { input, weight, bias } => {
                let mut gx = needs(input).then(|| zeros(input));
                let mut gw = needs(weight).then(|| zeros(weight));
                let mut gb = needs(bias).then(|| zeros(bias));
                kernels::fc_backward(
                    val(input),
                    val(weight),
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gx.map(|g| (*input, g)));
                out.extend(gw.map(|g| (*weight, g)));
                out.extend(gb.map(|g| (*bias, g)));
            }
            Op::Relu(a) => {
                if needs(a) {
                    let g = val(a)
                        .iter()
                        .zip(gout)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    out.push((*a, g));
                }
            }
            Op::Softmax { input, row } => {
                if needs(input) {
                    let y = &nodes[i].value;
                    let mut g = vec![0.0; y.len()];
                    for ((gc, yc), goc) in g.chunks_mut(*row).zip(y.chunks(*row)).zip(gout.chunks(*row)) {
                        let inner: f64 = yc.iter().zip(goc).map(|(a, b)| a * b).sum();
                        for ((d, &yk), &gk) in gc.iter_mut().zip(yc).zip(goc) {
                            *d = yk * (gk - inner);
                        }
                    }
                    out.push((*input, g));
                }
            }
            Op::Concat(a, b) => {
                let na = val(a).len();
                if needs(a) {
                    out.push((*a, gout[..na].to_vec()));
                }
                if needs(b) {
                    out.push((*b, gout[na..].to_vec()));
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    out.push((*a, gout.to_vec()));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((*a, gout.to_vec()));
                }
                if needs(b) {
                    out.push((*b, gout.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    out.push((*a, gout.to_vec()));
                }
                if needs(b) {
                    out.push((*b, gout.iter().map(|g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((*a, gout.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
                }
                if needs(b) {
                    out.push((*b, gout.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Affine { input, scale } => {
                if needs(input) {
                    out.push((*input, gout.iter().map(|g| g * scale).collect()));
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    out.push((*a, vec![gout[0]; val(a).len()]));
                }
            }
            Op::Dot(a, b) => {
                if needs(a) {
                    out.push((*a, val(b).iter().map(|y| gout[0] * y).collect()));
                }
                if needs(b) {
                    out.push((*b, val(a).iter().map(|x| gout[0] * x).collect()));
                }
            }
            Op::Log(a) => {
                if needs(a) {
                    out.push((*a, gout.iter().zip(val(a)).map(|(g, x)| g / x).collect()));
                }
            }
            Op::Clamp { input, min, max } => {
                if needs(input) {
                    let g = val(input)
                        .iter()
                        .zip(gout)
                        .map(|(&x, &g)| if x >= *min && x <= *max { g } else { 0.0 })
                        .collect();
                    out.push((*input, g));
                }
            }
            Op::Gather { input, indices } => {
                if needs(input) {
                    let mut g = zeros(input);
                    for (&idx, &go) in indices.iter().zip(gout) {
                        g[idx] += go;
                    }
                    out.push((*input, g));
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}
