//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Node ids are assigned in creation order, so
//! inputs always precede consumers and a single reverse sweep visits each
//! node once.

pub(crate) mod conv;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use conv::{ConvShape, Window};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Batch-norm behaviour for one call.
pub enum BatchNormMode<'a, T> {
    /// Normalise with batch statistics and fold them into the running ones.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalise with the stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    BatchNorm2d,
    Relu,
    Abs,
    Square,
    SqrtShifted,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    ConcatChannels,
    ReduceMean,
    ReduceSum,
    DiffX,
    DiffY,
    Reshape,
}

impl OpKind {
    /// Every kind with a backward rule (all but `Leaf`).
    pub const DIFFERENTIABLE: [OpKind; 19] = [
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::BatchNorm2d,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::SqrtShifted,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::ConcatChannels,
        OpKind::ReduceMean,
        OpKind::ReduceSum,
        OpKind::DiffX,
        OpKind::DiffY,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::BatchNorm2d => "batch_norm2d",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::SqrtShifted => "sqrt_shifted",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::DiffX => "diff_x",
            OpKind::DiffY => "diff_y",
            OpKind::Reshape => "reshape",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (train mode), so the mean and variance
        /// depend on the input.
        batch_stats: bool,
    },
    Relu(Var),
    Abs(Var),
    Square(Var),
    SqrtShifted(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatChannels(Var, Var),
    ReduceMean(Var),
    ReduceSum(Var),
    DiffX(Var),
    DiffY(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::BatchNorm2d { .. } => OpKind::BatchNorm2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::SqrtShifted(_) => OpKind::SqrtShifted,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::ReduceMean(_) => OpKind::ReduceMean,
            Op::ReduceSum(_) => OpKind::ReduceSum,
            Op::DiffX(_) => OpKind::DiffX,
            Op::DiffY(_) => OpKind::DiffY,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Handles issued before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Clears accumulated leaf gradients without dropping nodes.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Scales the input gradients produced by one backward rule by 1.01.
    /// Used to confirm the gradient checker detects a broken rule.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::OffTape);
        }
        self.nodes.get(v.index).ok_or(Error::OffTape)
    }

    /// Records a tensor. It takes part in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    /// Accumulated gradient of a leaf (after [`Tape::backward`]).
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.node(v)?.value.grad())
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.node(v)?.value.item()
    }

    fn rg(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let rg = self.rg(&[x])?;
        let value = self.value(x)?.map(f);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let rg = self.rg(&[a, b])?;
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, rg))
    }

    /// 2-D cross-correlation. `weight` is `[c_out, c_in, k, k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input)?;
        let [n, cin, h, w] = x.dims4()?;
        let wt = self.value(weight)?;
        let [cout, wcin, kh, kw] = wt.dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let bias_data = self.check_bias("conv2d", bias, cout)?;
        let shape = ConvShape {
            batch: n,
            wide_ch: cin,
            narrow_ch: cout,
            win: Window::forward(h, w, kh, stride, padding)?,
        };
        let out = conv::conv_forward(&shape, x.data(), wt.data(), bias_data.as_deref());
        let value = Tensor::new(vec![n, cout, shape.win.out_h, shape.win.out_w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            },
            rg,
        ))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// geometry. `weight` is `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input)?;
        let [n, cin, h, w] = x.dims4()?;
        let wt = self.value(weight)?;
        let [wcin, cout, kh, kw] = wt.dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let bias_data = self.check_bias("conv_transpose2d", bias, cout)?;
        let shape = ConvShape {
            batch: n,
            wide_ch: cout,
            narrow_ch: cin,
            win: Window::transposed(h, w, kh, stride, padding)?,
        };
        let out = conv::conv_adjoint(&shape, x.data(), wt.data(), bias_data.as_deref());
        let value = Tensor::new(vec![n, cout, shape.win.h, shape.win.w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                shape,
            },
            rg,
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, c: usize) -> Result<Option<Vec<T>>> {
        let Some(b) = bias else { return Ok(None) };
        let t = self.value(b)?;
        if t.len() != c {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![c],
                rhs: t.shape().to_vec(),
            });
        }
        Ok(Some(t.data().to_vec()))
    }

    /// Per-channel batch normalisation of an `[n, c, h, w]` tensor.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let x = self.value(input)?;
        let [n, c, h, w] = x.dims4()?;
        let (g, b) = (self.value(gamma)?, self.value(beta)?);
        if g.len() != c || b.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let plane = h * w;
        let count = n * plane;
        let channel =
            |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
        let xs = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = matches!(mode, BatchNormMode::Train { .. });
        match &mode {
            BatchNormMode::Train {
                running_mean,
                running_var,
                ..
            } => {
                if count < 2 {
                    return Err(Error::DegenerateVariance(count));
                }
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Config("running statistics length mismatch".into()));
                }
                let inv = T::one() / T::from_usize(count).unwrap();
                for ch in 0..c {
                    let m = channel(ch).map(|i| xs[i]).sum::<T>() * inv;
                    let v = channel(ch).map(|i| (xs[i] - m) * (xs[i] - m)).sum::<T>() * inv;
                    mean[ch] = m;
                    var[ch] = v;
                }
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Config("running statistics length mismatch".into()));
                }
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ch in 0..c {
            for i in channel(ch) {
                let xh = (xs[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g.data()[ch] * xh + b.data()[ch];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        if let BatchNormMode::Train {
            running_mean,
            running_var,
            momentum,
        } = mode
        {
            let unbias = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            for ch in 0..c {
                running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean[ch];
                running_var[ch] =
                    (T::one() - momentum) * running_var[ch] + momentum * var[ch] * unbias;
            }
        }
        let rg = self.rg(&[input, gamma, beta])?;
        Ok(self.push(
            value,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `sqrt(x + c)`; fails if any `x + c` is negative.
    pub fn sqrt_shifted(&mut self, x: Var, c: T) -> Result<Var> {
        let bad = self
            .value(x)?
            .data()
            .iter()
            .filter(|&&v| v + c < T::zero())
            .count();
        if bad > 0 {
            return Err(Error::Domain(format!(
                "sqrt_shifted: {bad} element(s) with x + c < 0"
            )));
        }
        self.unary(x, |v| (v + c).sqrt(), Op::SqrtShifted(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Concatenates two `[n, c, h, w]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let [n, ca, h, w] = ta.dims4()?;
        let [nb, cb, hb, wb] = tb.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.rg(&[a, b])?;
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s = pairwise_sum(self.value(x)?.data());
        let rg = self.rg(&[x])?;
        Ok(self.push(Tensor::scalar(s), Op::ReduceSum(x), rg))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        if t.is_empty() {
            return Err(Error::Domain("reduce_mean of an empty tensor".into()));
        }
        let m = pairwise_sum(t.data()) / T::from_usize(t.len()).unwrap();
        let rg = self.rg(&[x])?;
        Ok(self.push(Tensor::scalar(m), Op::ReduceMean(x), rg))
    }

    /// Forward difference along width: `x[.., j+1] - x[.., j]`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        let [n, c, h, w] = t.dims4()?;
        if w < 2 {
            return Err(Error::Geometry(format!("diff_x needs width >= 2, got {w}")));
        }
        let mut data = Vec::with_capacity(n * c * h * (w - 1));
        for row in t.data().chunks(w) {
            data.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let value = Tensor::new(vec![n, c, h, w - 1], data)?;
        let rg = self.rg(&[x])?;
        Ok(self.push(value, Op::DiffX(x), rg))
    }

    /// Forward difference along height: `x[.., i+1, :] - x[.., i, :]`.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        let [n, c, h, w] = t.dims4()?;
        if h < 2 {
            return Err(Error::Geometry(format!(
                "diff_y needs height >= 2, got {h}"
            )));
        }
        let mut data = Vec::with_capacity(n * c * (h - 1) * w);
        for plane in t.data().chunks(h * w) {
            for i in 0..h - 1 {
                data.extend((0..w).map(|j| plane[(i + 1) * w + j] - plane[i * w + j]));
            }
        }
        let value = Tensor::new(vec![n, c, h - 1, w], data)?;
        let rg = self.rg(&[x])?;
        Ok(self.push(value, Op::DiffY(x), rg))
    }

    /// Both forward differences `(dx, dy)`; needs height and width >= 2.
    pub fn spatial_diff(&mut self, x: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = self.value(x)?.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Geometry(format!(
                "spatial_diff needs at least 2x2 pixels, got {h}x{w}"
            )));
        }
        Ok((self.diff_x(x)?, self.diff_y(x)?))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self
            .value(x)?
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        let rg = self.rg(&[x])?;
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Back-propagates from a one-element `loss`, adding into the gradient
    /// slot of every leaf that requires a gradient. Repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g)?;
                continue;
            }
            let mut contributions = self.backward_rule(idx, &g)?;
            if let Some(kind) = self.fault {
                if self.nodes[idx].op.kind() == kind {
                    let bump = T::from_f64_lossy(1.01);
                    for (_, gi) in contributions.iter_mut() {
                        gi.iter_mut().for_each(|v| *v = *v * bump);
                    }
                }
            }
            for (input, gi) in contributions {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.index].value;
        let needs = |v: Var| self.nodes[v.index].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            } => {
                if needs(*input) {
                    out.push((
                        *input,
                        conv::conv_adjoint(shape, g, val(*weight).data(), None),
                    ));
                }
                if needs(*weight) {
                    out.push((
                        *weight,
                        conv::conv_weight_grad(shape, val(*input).data(), g),
                    ));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    out.push((b, conv::channel_sums(g, shape.batch, shape.narrow_ch)));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                shape,
            } => {
                if needs(*input) {
                    out.push((
                        *input,
                        conv::conv_forward(shape, g, val(*weight).data(), None),
                    ));
                }
                if needs(*weight) {
                    out.push((
                        *weight,
                        conv::conv_weight_grad(shape, g, val(*input).data()),
                    ));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    out.push((b, conv::channel_sums(g, shape.batch, shape.wide_ch)));
                }
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4()?;
                let plane = h * w;
                let count = T::from_usize(n * plane).unwrap();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for (gv, xh) in g[r.clone()].iter().zip(&normalized[r]) {
                            dgamma[ch] = dgamma[ch] + *gv * *xh;
                            dbeta[ch] = dbeta[ch] + *gv;
                        }
                    }
                }
                if needs(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + plane {
                                dx[j] = if *batch_stats {
                                    k * (g[j]
                                        - dbeta[ch] / count
                                        - normalized[j] * dgamma[ch] / count)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, d));
            }
            Op::Abs(x) => {
                let xs = val(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, d));
            }
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| two * v * gv)
                    .collect();
                out.push((*x, d));
            }
            Op::SqrtShifted(x) => {
                let half = T::from_f64_lossy(0.5);
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| {
                        if y > T::zero() {
                            gv * half / y
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, d));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                let q = node.value.data();
                out.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv / y).collect()));
                out.push((
                    *b,
                    g.iter()
                        .zip(bv)
                        .zip(q)
                        .map(|((&gv, &y), &qv)| -gv * qv / y)
                        .collect(),
                ));
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = val(*a).dims4()?;
                let cb = val(*b).dims4()?[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for chunk in g.chunks(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::ReduceSum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::ReduceMean(x) => {
                let n = val(*x).len();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::DiffX(x) => {
                let [_, _, _, w] = val(*x).dims4()?;
                let mut d = vec![T::zero(); val(*x).len()];
                for (row, grow) in d.chunks_mut(w).zip(g.chunks(w - 1)) {
                    for (j, &gv) in grow.iter().enumerate() {
                        row[j + 1] = row[j + 1] + gv;
                        row[j] = row[j] - gv;
                    }
                }
                out.push((*x, d));
            }
            Op::DiffY(x) => {
                let [_, _, h, w] = val(*x).dims4()?;
                let mut d = vec![T::zero(); val(*x).len()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks((h - 1) * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gv = gp[i * w + j];
                            plane[(i + 1) * w + j] = plane[(i + 1) * w + j] + gv;
                            plane[i * w + j] = plane[i * w + j] - gv;
                        }
                    }
                }
                out.push((*x, d));
            }
        }
        Ok(out)
    }
}

/// Fixed-order pairwise summation.
pub(crate) fn pairwise_sum<T: Element>(xs: &[T]) -> T {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().copied().fold(T::zero(), |a, b| a + b);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data)
            .unwrap()
            .with_requires_grad(true)
    }

    #[test]
    fn conv2d_ones_kernel() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let v = t.value(y).unwrap();
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v.data()[corner], 4.0);
        }
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut t = Tape::<f64>::new();
        let xt = Tensor::from_fn(vec![1, 1, 4, 5], |i| (i as f64).sin());
        let x = t.constant(xt.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(t.value(y).unwrap().data(), xt.data());
    }

    #[test]
    fn conv2d_downsampling_shape() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(vec![1, 3, 128, 128]));
        let w = t.constant(Tensor::zeros(vec![64, 3, 4, 4]));
        let b = t.constant(Tensor::zeros(vec![64]));
        let y = t.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(t.shape(y).unwrap(), &[1, 64, 64, 64]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_shapes() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = t.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let err = t.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn conv_transpose_shapes_and_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let w = t.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let y = t.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y).unwrap(), &[1, 1, 4, 4]);

        let xt = Tensor::from_fn(vec![1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let x = t.constant(xt.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = t.conv_transpose2d(x, w, None, 1, 1).unwrap();
        assert_eq!(t.value(y).unwrap().data(), xt.data());
    }

    #[test]
    fn conv_transpose_rejects_nonpositive_extent() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        let w = t.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        assert!(matches!(
            t.conv_transpose2d(x, w, None, 1, 1),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let y = t.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.reduce_mean(y).unwrap();
        assert_eq!(t.item(m).unwrap(), 2.5);
        assert!(matches!(t.sqrt_shifted(x, 0.5), Err(Error::Domain(_))));
        assert!(t.sqrt_shifted(x, 1.0).is_ok());

        let a = t.constant(Tensor::zeros(vec![1, 64, 4, 4]));
        let b = t.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c).unwrap(), &[1, 67, 4, 4]);
        let d = t.constant(Tensor::zeros(vec![1, 3, 4, 5]));
        assert!(t.concat_channels(a, d).is_err());
    }

    #[test]
    fn spatial_diff_examples() {
        let mut t = Tape::<f64>::new();
        let ramp = t.constant(Tensor::from_fn(vec![1, 1, 3, 4], |i| (i % 4) as f64));
        let (dx, dy) = t.spatial_diff(ramp).unwrap();
        assert_eq!(t.shape(dx).unwrap(), &[1, 1, 3, 3]);
        assert_eq!(t.shape(dy).unwrap(), &[1, 1, 2, 4]);
        assert!(t.value(dx).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(t.value(dy).unwrap().data().iter().all(|&v| v == 0.0));
        let thin = t.constant(Tensor::zeros(vec![1, 1, 1, 4]));
        assert!(t.spatial_diff(thin).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::<f64>::new();
        let (mut rm, mut rv) = (vec![0.0; 1], vec![1.0; 1]);
        let x = t.constant(Tensor::full(vec![2, 1, 2, 2], 3.0));
        let g = t.constant(Tensor::full(vec![1], 1.0));
        let b = t.constant(Tensor::zeros(vec![1]));
        let mode = BatchNormMode::Train {
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: 0.1,
        };
        let y = t.batch_norm2d(x, g, b, mode, 1e-5).unwrap();
        assert!(t.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - 0.9).abs() < 1e-12);

        let single = t.constant(Tensor::full(vec![1, 1, 1, 1], 3.0));
        let mode = BatchNormMode::Train {
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: 0.1,
        };
        assert!(matches!(
            t.batch_norm2d(single, g, b, mode, 1e-5),
            Err(Error::DegenerateVariance(1))
        ));
    }

    #[test]
    fn backward_square_sum() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(param(&[3], vec![1.0, -2.0, 0.5]));
        let sq = t.square(x).unwrap();
        let l = t.reduce_sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[2.0, -4.0, 1.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[4.0, -8.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).unwrap().is_none());
    }

    #[test]
    fn backward_off_tape_fails() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(param(&[1], vec![1.0]));
        assert!(matches!(b.backward(x), Err(Error::OffTape)));
        a.reset();
        assert!(matches!(a.backward(x), Err(Error::OffTape)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(param(&[2], vec![1.0, 2.0]));
        let c = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = t.mul(x, c).unwrap();
        let l = t.reduce_sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[3.0, 4.0]);
        assert!(t.grad(c).unwrap().is_none());
    }

    #[test]
    fn pairwise_sum_matches_plain_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
