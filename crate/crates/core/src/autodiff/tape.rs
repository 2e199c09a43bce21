use std::collections::BTreeMap;

use super::{ParamKind, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive together with its attributes.
///
/// Convolutions use NCHW layout with same-padding (`k / 2` on every side) and
/// odd square kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `x[B, in] · w[out, in]ᵀ + b[out]`
    Linear,
    /// `x[B, Cin, H, W] ⊛ w[Cout, Cin, k, k]`
    Conv2d {
        stride: usize,
    },
    /// `x[B, C, H, W] ⊛ w[C, 1, k, k]`, one filter per channel.
    DepthwiseConv2d {
        stride: usize,
    },
    Relu6,
    /// Inputs `x, gamma, beta` in training mode; `x, gamma, beta, running_mean,
    /// running_var` in evaluation mode.
    BatchNorm {
        training: bool,
        eps: f64,
    },
    GlobalAvgPool,
    Add,
    /// Multiplies a tensor by a one-element tensor.
    Scale,
    Flatten,
    /// Mean cross-entropy of softmax(logits[B, C]) against integer targets.
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
    },
    Sum,
}

pub const BN_EPS: f64 = 1e-5;

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Primitive::Relu6 => "relu6",
            Primitive::BatchNorm { .. } => "batch_norm",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Add => "add",
            Primitive::Scale => "scale",
            Primitive::Flatten => "flatten",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Primitive::Sum => "sum",
        }
    }

    /// Builds a primitive from its textual kind and a numeric attribute map
    /// (`stride`, `training`, `eps`). Cross-entropy needs targets and is not
    /// constructible this way.
    pub fn from_name(kind: &str, attrs: &BTreeMap<String, f64>) -> Result<Self> {
        let stride = || -> Result<usize> {
            let s = attrs.get("stride").copied().unwrap_or(1.0);
            if s == 1.0 || s == 2.0 {
                Ok(s as usize)
            } else {
                Err(Error::Invalid(format!("stride must be 1 or 2, got {s}")))
            }
        };
        Ok(match kind {
            "linear" => Primitive::Linear,
            "conv2d" => Primitive::Conv2d { stride: stride()? },
            "depthwise_conv2d" => Primitive::DepthwiseConv2d { stride: stride()? },
            "relu6" => Primitive::Relu6,
            "batch_norm" => Primitive::BatchNorm {
                training: attrs.get("training").copied().unwrap_or(1.0) != 0.0,
                eps: attrs.get("eps").copied().unwrap_or(BN_EPS),
            },
            "global_avg_pool" => Primitive::GlobalAvgPool,
            "add" => Primitive::Add,
            "scale" => Primitive::Scale,
            "flatten" => Primitive::Flatten,
            "sum" => Primitive::Sum,
            other => return Err(Error::Invalid(format!("unknown primitive kind `{other}`"))),
        })
    }
}

struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Vec<Vec<f64>>,
    requires_grad: bool,
    param: Option<String>,
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; [`Tape::backward`] walks it in exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Vec<f64>>,
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: &str) -> Option<&[f64]> {
        self.params.get(id).map(|v| v.as_slice())
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn leaf(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Vec<f64>> {
        self.params
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op: None, inputs: Vec::new(), saved: Vec::new(), requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Records a copy of a parameter. Buffers are recorded as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let trainable = p.kind != ParamKind::Buffer;
        self.push_leaf(p.tensor.clone(), trainable, trainable.then(|| p.id.clone()))
    }

    /// Batch mean and biased variance computed by a training-mode batch norm
    /// node, plus the number of elements each statistic was reduced over.
    pub fn batch_stats(&self, var: Var) -> Option<(&[f64], &[f64], usize)> {
        let node = &self.nodes[var.0];
        match node.op {
            Some(Primitive::BatchNorm { training: true, .. }) => {
                let x = &self.nodes[node.inputs[0].0].value;
                let m = x.numel() / x.shape()[1];
                Some((&node.saved[2], &node.saved[3], m))
            }
            _ => None,
        }
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&op, &vals)?;
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { context: format!("forward {}", op.name()) });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            saved: if requires_grad { saved } else { Vec::new() },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // Convenience wrappers.

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Linear, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride }, &[x, w])
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::DepthwiseConv2d { stride }, &[x, w])
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu6, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Primitive::Scale, &[x, s])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Flatten, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(Primitive::SoftmaxCrossEntropy { targets: targets.to_vec() }, &[logits])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    ///
    /// Every trainable parameter recorded on the tape receives a gradient
    /// entry, zero when the loss does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let gin = backward_op(op, &ins, &node.value, &node.saved, &gout, &need);
            for ((input, g), needed) in node.inputs.iter().zip(gin).zip(need) {
                if !needed {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep intermediate grads only for leaves.
            grads[idx] = None;
        }

        let mut params: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut leaves = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
            if let Some(id) = &node.param {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { context: format!("gradient of `{id}`") });
                }
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(id.clone(), g.clone());
                    }
                }
            }
            leaves[i] = Some(g);
        }
        Ok(Gradients { params, leaves })
    }
}

fn conv_out(len: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (len + 2 * pad - k) / stride + 1
}

/// Output index range `[lo, hi)` for which `o * stride + off` lands inside
/// `[0, in_len)`.
#[inline]
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((in_len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
    (lo.max(0) as usize, hi.max(lo) as usize)
}

fn check_conv(op: &'static str, x: &Tensor, w: &Tensor, stride: usize, depthwise: bool) -> Result<()> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(op, format!("expected 4-d input and weight, got {xs:?} and {ws:?}")));
    }
    if xs[0] == 0 {
        return Err(Error::shape(op, "zero-sized batch"));
    }
    if ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::shape(op, format!("kernel must be odd and square, got {ws:?}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape(op, format!("stride must be 1 or 2, got {stride}")));
    }
    let ok = if depthwise { ws[0] == xs[1] && ws[1] == 1 } else { ws[1] == xs[1] };
    if !ok {
        return Err(Error::shape(op, format!("input {xs:?} incompatible with weight {ws:?}")));
    }
    Ok(())
}

type Forward = (Tensor, Vec<Vec<f64>>);

fn arity(op: &Primitive, n: usize) -> Result<()> {
    let ok = match op {
        Primitive::Linear => n == 3,
        Primitive::Conv2d { .. } | Primitive::DepthwiseConv2d { .. } | Primitive::Add | Primitive::Scale => n == 2,
        Primitive::BatchNorm { training, .. } => n == if *training { 3 } else { 5 },
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op.name(), format!("wrong number of inputs: {n}")))
    }
}

fn forward(op: &Primitive, ins: &[&Tensor]) -> Result<Forward> {
    arity(op, ins.len())?;
    match op {
        Primitive::Linear => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || b.shape() != [ws[0]] {
                return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {:?}", b.shape())));
            }
            if xs[0] == 0 {
                return Err(Error::shape("linear", "zero-sized batch"));
            }
            let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
            let mut out = vec![0.0; bsz * dout];
            for i in 0..bsz {
                let xr = &x.data()[i * din..(i + 1) * din];
                for o in 0..dout {
                    let wr = &w.data()[o * din..(o + 1) * din];
                    out[i * dout + o] = b.data()[o] + dot(xr, wr);
                }
            }
            Ok((Tensor::new(vec![bsz, dout], out)?, vec![]))
        }
        Primitive::Conv2d { stride } => {
            let (x, w) = (ins[0], ins[1]);
            check_conv("conv2d", x, w, *stride, false)?;
            Ok((conv2d_forward(x, w, *stride), vec![]))
        }
        Primitive::DepthwiseConv2d { stride } => {
            let (x, w) = (ins[0], ins[1]);
            check_conv("depthwise_conv2d", x, w, *stride, true)?;
            Ok((depthwise_forward(x, w, *stride), vec![]))
        }
        Primitive::Relu6 => {
            let x = ins[0];
            let out = x.data().iter().map(|v| v.clamp(0.0, 6.0)).collect();
            Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
        }
        Primitive::BatchNorm { training, eps } => batch_norm_forward(ins, *training, *eps),
        Primitive::GlobalAvgPool => {
            let x = ins[0];
            let xs = x.shape();
            if xs.len() != 4 || xs[0] == 0 {
                return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
            }
            let plane = xs[2] * xs[3];
            let out = x.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
            Ok((Tensor::new(vec![xs[0], xs[1]], out)?, vec![]))
        }
        Primitive::Add => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok((Tensor::new(a.shape().to_vec(), out)?, vec![]))
        }
        Primitive::Scale => {
            let (x, s) = (ins[0], ins[1]);
            if s.numel() != 1 {
                return Err(Error::shape("scale", format!("factor must have one element, got {:?}", s.shape())));
            }
            let f = s.data()[0];
            let out = x.data().iter().map(|v| v * f).collect();
            Ok((Tensor::new(x.shape().to_vec(), out)?, vec![]))
        }
        Primitive::Flatten => {
            let x = ins[0];
            let xs = x.shape();
            if xs.is_empty() || xs[0] == 0 {
                return Err(Error::shape("flatten", format!("input {xs:?}")));
            }
            let rest = xs[1..].iter().product();
            Ok((x.clone().reshape(vec![xs[0], rest])?, vec![]))
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            let x = ins[0];
            let xs = x.shape();
            if xs.len() != 2 || xs[0] == 0 || targets.len() != xs[0] {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits {xs:?} with {} targets", targets.len()),
                ));
            }
            let (b, c) = (xs[0], xs[1]);
            if let Some(t) = targets.iter().find(|&&t| t >= c) {
                return Err(Error::shape("softmax_cross_entropy", format!("target {t} out of {c} classes")));
            }
            let mut probs = vec![0.0; b * c];
            let mut loss = 0.0;
            for i in 0..b {
                let row = &x.data()[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[i * c + j] = e;
                    z += e;
                }
                for p in &mut probs[i * c..(i + 1) * c] {
                    *p /= z;
                }
                loss += z.ln() + max - row[targets[i]];
            }
            Ok((Tensor::scalar(loss / b as f64), vec![probs]))
        }
        Primitive::Sum => Ok((Tensor::scalar(ins[0].data().iter().sum()), vec![])),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One kernel tap with the output ranges it touches.
struct Tap {
    offy: isize,
    offx: isize,
    ys: (usize, usize),
    xs: (usize, usize),
}

fn taps(k: usize, stride: usize, h: usize, wd: usize, ho: usize, wo: usize) -> Vec<Tap> {
    let pad = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k);
    for ky in 0..k {
        let offy = ky as isize - pad;
        for kx in 0..k {
            let offx = kx as isize - pad;
            out.push(Tap { offy, offx, ys: valid_range(offy, stride, h, ho), xs: valid_range(offx, stride, wd, wo) });
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// `out_plane += wv * x_plane` shifted by one tap.
#[inline]
fn tap_forward(op: &mut [f64], xp: &[f64], wv: f64, t: &Tap, stride: usize, wd: usize, wo: usize) {
    let n = t.xs.1 - t.xs.0;
    if n == 0 {
        return;
    }
    for oy in t.ys.0..t.ys.1 {
        let iy = ((oy * stride) as isize + t.offy) as usize;
        let ix0 = ((t.xs.0 * stride) as isize + t.offx) as usize;
        let orow = &mut op[oy * wo + t.xs.0..oy * wo + t.xs.1];
        let xrow = &xp[iy * wd + ix0..];
        for (o, xv) in orow.iter_mut().zip(xrow.iter().step_by(stride)) {
            *o += wv * xv;
        }
    }
}

/// Adjoint of [`tap_forward`] for the input plane, and the weight gradient.
#[inline]
fn tap_backward(
    gxp: Option<&mut [f64]>,
    xp: &[f64],
    gp: &[f64],
    wv: f64,
    t: &Tap,
    stride: usize,
    wd: usize,
    wo: usize,
) -> f64 {
    let n = t.xs.1 - t.xs.0;
    if n == 0 {
        return 0.0;
    }
    let ix0 = ((t.xs.0 * stride) as isize + t.offx) as usize;
    let mut acc = 0.0;
    for oy in t.ys.0..t.ys.1 {
        let iy = ((oy * stride) as isize + t.offy) as usize;
        let grow = &gp[oy * wo + t.xs.0..oy * wo + t.xs.1];
        let xrow = &xp[iy * wd + ix0..];
        for (g, xv) in grow.iter().zip(xrow.iter().step_by(stride)) {
            acc += g * xv;
        }
    }
    if let Some(gxp) = gxp {
        for oy in t.ys.0..t.ys.1 {
            let iy = ((oy * stride) as isize + t.offy) as usize;
            let grow = &gp[oy * wo + t.xs.0..oy * wo + t.xs.1];
            let gxrow = &mut gxp[iy * wd + ix0..];
            for (gx, g) in gxrow.iter_mut().step_by(stride).zip(grow) {
                *gx += wv * g;
            }
        }
    }
    acc
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let (ip, opl) = (h * wd, ho * wo);
    let mut out = vec![0.0; b * cout * opl];
    let (xd, wdat) = (x.data(), w.data());
    if k == 1 && stride == 1 {
        for bi in 0..b {
            for co in 0..cout {
                let op = &mut out[(bi * cout + co) * opl..(bi * cout + co + 1) * opl];
                for ci in 0..cin {
                    axpy(op, wdat[co * cin + ci], &xd[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip]);
                }
            }
        }
    } else {
        let taps = taps(k, stride, h, wd, ho, wo);
        for bi in 0..b {
            for co in 0..cout {
                let op = &mut out[(bi * cout + co) * opl..(bi * cout + co + 1) * opl];
                for ci in 0..cin {
                    let xp = &xd[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip];
                    let wbase = (co * cin + ci) * k * k;
                    for (ti, t) in taps.iter().enumerate() {
                        tap_forward(op, xp, wdat[wbase + ti], t, stride, wd, wo);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out).expect("conv output shape")
}

fn conv2d_backward(x: &Tensor, w: &Tensor, stride: usize, gout: &[f64], need: (bool, bool)) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let (ip, opl) = (h * wd, ho * wo);
    let mut gx = if need.0 { vec![0.0; x.numel()] } else { vec![] };
    let mut gw = vec![0.0; w.numel()];
    let (xd, wdat) = (x.data(), w.data());
    if k == 1 && stride == 1 {
        for bi in 0..b {
            for co in 0..cout {
                let gp = &gout[(bi * cout + co) * opl..(bi * cout + co + 1) * opl];
                for ci in 0..cin {
                    let xp = &xd[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip];
                    if need.1 {
                        gw[co * cin + ci] += dot(xp, gp);
                    }
                    if need.0 {
                        axpy(&mut gx[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip], wdat[co * cin + ci], gp);
                    }
                }
            }
        }
    } else {
        let taps = taps(k, stride, h, wd, ho, wo);
        for bi in 0..b {
            for co in 0..cout {
                let gp = &gout[(bi * cout + co) * opl..(bi * cout + co + 1) * opl];
                for ci in 0..cin {
                    let xp = &xd[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip];
                    let wbase = (co * cin + ci) * k * k;
                    for (ti, t) in taps.iter().enumerate() {
                        let gxp = need.0.then(|| &mut gx[(bi * cin + ci) * ip..(bi * cin + ci + 1) * ip]);
                        gw[wbase + ti] += tap_backward(gxp, xp, gp, wdat[wbase + ti], t, stride, wd, wo);
                    }
                }
            }
        }
    }
    if !need.1 {
        gw.clear();
    }
    (gx, gw)
}

fn depthwise_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let xs = x.shape();
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let k = w.shape()[2];
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let (ip, opl) = (h * wd, ho * wo);
    let taps = taps(k, stride, h, wd, ho, wo);
    let mut out = vec![0.0; b * c * opl];
    let (xd, wdat) = (x.data(), w.data());
    for bi in 0..b {
        for ch in 0..c {
            let xp = &xd[(bi * c + ch) * ip..(bi * c + ch + 1) * ip];
            let op = &mut out[(bi * c + ch) * opl..(bi * c + ch + 1) * opl];
            for (ti, t) in taps.iter().enumerate() {
                tap_forward(op, xp, wdat[ch * k * k + ti], t, stride, wd, wo);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out).expect("depthwise output shape")
}

fn depthwise_backward(x: &Tensor, w: &Tensor, stride: usize, gout: &[f64], need: (bool, bool)) -> (Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let k = w.shape()[2];
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let (ip, opl) = (h * wd, ho * wo);
    let taps = taps(k, stride, h, wd, ho, wo);
    let mut gx = if need.0 { vec![0.0; x.numel()] } else { vec![] };
    let mut gw = vec![0.0; w.numel()];
    let (xd, wdat) = (x.data(), w.data());
    for bi in 0..b {
        for ch in 0..c {
            let xp = &xd[(bi * c + ch) * ip..(bi * c + ch + 1) * ip];
            let gp = &gout[(bi * c + ch) * opl..(bi * c + ch + 1) * opl];
            for (ti, t) in taps.iter().enumerate() {
                let gxp = need.0.then(|| &mut gx[(bi * c + ch) * ip..(bi * c + ch + 1) * ip]);
                gw[ch * k * k + ti] += tap_backward(gxp, xp, gp, wdat[ch * k * k + ti], t, stride, wd, wo);
            }
        }
    }
    if !need.1 {
        gw.clear();
    }
    (gx, gw)
}

// saved layout (training): [xhat, invstd, mean, var]
fn batch_norm_forward(ins: &[&Tensor], training: bool, eps: f64) -> Result<Forward> {
    let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
    let xs = x.shape();
    if xs.len() != 4 || xs[0] == 0 {
        return Err(Error::shape("batch_norm", format!("expected non-empty NCHW input, got {xs:?}")));
    }
    let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
    for t in &ins[1..] {
        if t.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("per-channel tensor {:?} for {c} channels", t.shape())));
        }
    }
    let m = (b * plane) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for bi in 0..b {
                v += x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane]
                    .iter()
                    .map(|u| (u - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = v / m;
        }
        (mean, var)
    } else {
        (ins[3].data().to_vec(), ins[4].data().to_vec())
    };
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
            for i in r {
                let h = (x.data()[i] - mean[ch]) * invstd[ch];
                xhat[i] = h;
                out[i] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::new(xs.to_vec(), out)?, vec![xhat, invstd, mean, var]))
}

fn backward_op(
    op: &Primitive,
    ins: &[&Tensor],
    out: &Tensor,
    saved: &[Vec<f64>],
    gout: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Primitive::Linear => {
            let (x, w) = (ins[0], ins[1]);
            let (bsz, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; w.numel()];
            let mut gb = vec![0.0; dout];
            for i in 0..bsz {
                for o in 0..dout {
                    let g = gout[i * dout + o];
                    gb[o] += g;
                    for d in 0..din {
                        gx[i * din + d] += g * w.data()[o * din + d];
                        gw[o * din + d] += g * x.data()[i * din + d];
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }
        Primitive::Conv2d { stride } => {
            let (gx, gw) = conv2d_backward(ins[0], ins[1], *stride, gout, (need[0], need[1]));
            vec![need[0].then_some(gx), need[1].then_some(gw)]
        }
        Primitive::DepthwiseConv2d { stride } => {
            let (gx, gw) = depthwise_backward(ins[0], ins[1], *stride, gout, (need[0], need[1]));
            vec![need[0].then_some(gx), need[1].then_some(gw)]
        }
        Primitive::Relu6 => {
            let g = ins[0].data().iter().zip(gout).map(|(x, g)| if *x > 0.0 && *x < 6.0 { *g } else { 0.0 }).collect();
            vec![Some(g)]
        }
        Primitive::BatchNorm { training, .. } => {
            let x = ins[0];
            let gamma = ins[1].data();
            let xs = x.shape();
            let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
            let (xhat, invstd) = (&saved[0], &saved[1]);
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    for i in (bi * c + ch) * plane..(bi * c + ch + 1) * plane {
                        gg[ch] += gout[i] * xhat[i];
                        gbeta[ch] += gout[i];
                        let dxh = gout[i] * gamma[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xhat[i];
                    }
                }
            }
            let m = (b * plane) as f64;
            let mut gx = vec![0.0; x.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    for i in (bi * c + ch) * plane..(bi * c + ch + 1) * plane {
                        let dxh = gout[i] * gamma[ch];
                        gx[i] = if *training {
                            invstd[ch] / m * (m * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                        } else {
                            dxh * invstd[ch]
                        };
                    }
                }
            }
            let mut res = vec![Some(gx), Some(gg), Some(gbeta)];
            if !*training {
                res.extend([None, None]);
            }
            res
        }
        Primitive::GlobalAvgPool => {
            let xs = ins[0].shape();
            let plane = xs[2] * xs[3];
            let mut g = vec![0.0; ins[0].numel()];
            for (i, chunk) in g.chunks_mut(plane).enumerate() {
                chunk.fill(gout[i] / plane as f64);
            }
            vec![Some(g)]
        }
        Primitive::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Primitive::Scale => {
            let f = ins[1].data()[0];
            let gx = gout.iter().map(|g| g * f).collect();
            let gs = dot(ins[0].data(), gout);
            vec![Some(gx), Some(vec![gs])]
        }
        Primitive::Flatten => vec![Some(gout.to_vec())],
        Primitive::SoftmaxCrossEntropy { targets } => {
            let probs = &saved[0];
            let (b, c) = (ins[0].shape()[0], ins[0].shape()[1]);
            let scale = gout[0] / b as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                g[i * c + t] -= scale;
            }
            vec![Some(g)]
        }
        Primitive::Sum => {
            let _ = out;
            vec![Some(vec![gout[0]; ins[0].numel()])]
        }
    }
}
