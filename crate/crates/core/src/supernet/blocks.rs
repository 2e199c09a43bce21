//! Building blocks shared by the supernet and derived normal nets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::space::CandidateKind;
use crate::autodiff::{ParamKind, ParamSet, Primitive, Tape, Tensor, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;

const BN_MOMENTUM: f64 = 0.1;

/// How batch norm behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated when `update_stats`.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct BnParams {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BnParams {
    fn build(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        Self::build_with_gamma(params, prefix, channels, 1.0)
    }

    fn build_with_gamma(params: &mut ParamSet, prefix: &str, channels: usize, gamma: f64) -> Self {
        BnParams {
            gamma: params.register(format!("{prefix}.gamma"), ParamKind::Weight, Tensor::filled(&[channels], gamma)),
            beta: params.register(format!("{prefix}.beta"), ParamKind::Weight, Tensor::zeros(&[channels])),
            mean: params.register(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            var: params.register(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::filled(&[channels], 1.0)),
        }
    }

    fn indices(&self) -> [usize; 4] {
        [self.gamma, self.beta, self.mean, self.var]
    }

    fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var, mode: BnMode) -> Result<Var> {
        let g = tape.param(params.get(self.gamma));
        let b = tape.param(params.get(self.beta));
        match mode {
            BnMode::Train { update_stats } => {
                let y = tape.apply(Primitive::BatchNorm { training: true, eps: BN_EPS }, &[x, g, b])?;
                if update_stats {
                    let (mean, var, m) = tape.batch_stats(y).expect("training batch norm node");
                    let unbiased = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                    let rm = params.get_mut(self.mean).tensor.data_mut();
                    for (r, v) in rm.iter_mut().zip(mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                    let rv = params.get_mut(self.var).tensor.data_mut();
                    for (r, v) in rv.iter_mut().zip(var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased;
                    }
                }
                Ok(y)
            }
            BnMode::Eval => {
                let rm = tape.param(params.get(self.mean));
                let rv = tape.param(params.get(self.var));
                tape.apply(Primitive::BatchNorm { training: false, eps: BN_EPS }, &[x, g, b, rm, rv])
            }
        }
    }
}

fn kaiming(params: &mut ParamSet, id: String, shape: &[usize], fan_in: usize, rng: &mut Rng) -> usize {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    params.register(id, ParamKind::Weight, Tensor::new(shape.to_vec(), data).expect("shape"))
}

#[derive(Clone, Debug)]
struct MbConvParams {
    expand: Option<(usize, BnParams)>,
    depthwise: (usize, BnParams),
    project: (usize, BnParams),
    kernel: usize,
}

/// One operation candidate with its own parameters.
#[derive(Clone, Debug)]
pub struct OperationCandidate {
    pub kind: CandidateKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    mbconv: Option<MbConvParams>,
}

impl OperationCandidate {
    pub(crate) fn build(
        kind: CandidateKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kind == CandidateKind::Identity && !(stride == 1 && in_channels == out_channels) {
            return Err(Error::Invalid(format!(
                "identity cannot map {in_channels} channels to {out_channels} with stride {stride}"
            )));
        }
        let mbconv = match kind {
            CandidateKind::Mbconv { expansion, kernel } => {
                let mid = in_channels * expansion;
                let expand = (expansion > 1).then(|| {
                    let w =
                        kaiming(params, format!("{prefix}.expand.weight"), &[mid, in_channels, 1, 1], in_channels, rng);
                    (w, BnParams::build(params, &format!("{prefix}.expand.bn"), mid))
                });
                let dw = kaiming(
                    params,
                    format!("{prefix}.depthwise.weight"),
                    &[mid, 1, kernel, kernel],
                    kernel * kernel,
                    rng,
                );
                let dw_bn = BnParams::build(params, &format!("{prefix}.depthwise.bn"), mid);
                let pw = kaiming(params, format!("{prefix}.project.weight"), &[out_channels, mid, 1, 1], mid, rng);
                // Residual blocks start as the identity map.
                let residual = stride == 1 && in_channels == out_channels;
                let pw_bn = BnParams::build_with_gamma(
                    params,
                    &format!("{prefix}.project.bn"),
                    out_channels,
                    if residual { 0.0 } else { 1.0 },
                );
                Some(MbConvParams { expand, depthwise: (dw, dw_bn), project: (pw, pw_bn), kernel })
            }
            _ => None,
        };
        Ok(OperationCandidate { kind, in_channels, out_channels, stride, mbconv })
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Parameter indices in a fixed order; two candidates of the same kind and
    /// shape list corresponding parameters at the same positions.
    pub fn param_indices(&self) -> Vec<usize> {
        let Some(mb) = &self.mbconv else { return Vec::new() };
        let mut out = Vec::new();
        if let Some((w, bn)) = &mb.expand {
            out.push(*w);
            out.extend(bn.indices());
        }
        out.push(mb.depthwise.0);
        out.extend(mb.depthwise.1.indices());
        out.push(mb.project.0);
        out.extend(mb.project.1.indices());
        out
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var, mode: BnMode) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "candidate",
                format!("{} expects {} input channels, got {shape:?}", self.kind, self.in_channels),
            ));
        }
        match self.kind {
            CandidateKind::Identity => Ok(x),
            CandidateKind::Zero => {
                let (ho, wo) = (shape[2].div_ceil(self.stride), shape[3].div_ceil(self.stride));
                Ok(tape.constant(Tensor::zeros(&[shape[0], self.out_channels, ho, wo])))
            }
            CandidateKind::Mbconv { .. } => {
                let mb = self.mbconv.as_ref().expect("mbconv params");
                let mut h = x;
                if let Some((w, bn)) = &mb.expand {
                    let wv = tape.param(params.get(*w));
                    h = tape.conv2d(h, wv, 1)?;
                    h = bn.forward(tape, params, h, mode)?;
                    h = tape.relu6(h)?;
                }
                let wv = tape.param(params.get(mb.depthwise.0));
                h = tape.depthwise_conv2d(h, wv, self.stride)?;
                h = mb.depthwise.1.forward(tape, params, h, mode)?;
                h = tape.relu6(h)?;
                let wv = tape.param(params.get(mb.project.0));
                h = tape.conv2d(h, wv, 1)?;
                h = mb.project.1.forward(tape, params, h, mode)?;
                debug_assert_eq!(mb.kernel % 2, 1);
                if self.has_residual() {
                    h = tape.add(h, x)?;
                }
                Ok(h)
            }
        }
    }
}

/// 3x3 convolution, batch norm, ReLU6.
#[derive(Clone, Debug)]
pub(crate) struct Stem {
    conv: usize,
    bn: BnParams,
    stride: usize,
    in_channels: usize,
}

impl Stem {
    pub(crate) fn build(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Self {
        let conv = kaiming(params, "stem.conv.weight".into(), &[out_channels, in_channels, 3, 3], in_channels * 9, rng);
        let bn = BnParams::build(params, "stem.bn", out_channels);
        Stem { conv, bn, stride, in_channels }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var, mode: BnMode) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape("stem", format!("expected [B, {}, H, W], got {shape:?}", self.in_channels)));
        }
        let w = tape.param(params.get(self.conv));
        let h = tape.conv2d(x, w, self.stride)?;
        let h = self.bn.forward(tape, params, h, mode)?;
        tape.relu6(h)
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    weight: usize,
    bias: usize,
}

impl Head {
    pub(crate) fn build(in_features: usize, classes: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let data = (0..in_features * classes).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = params.register(
            "head.fc.weight",
            ParamKind::Weight,
            Tensor::new(vec![classes, in_features], data).expect("shape"),
        );
        let bias = params.register("head.fc.bias", ParamKind::Weight, Tensor::zeros(&[classes]));
        Head { weight, bias }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(params.get(self.weight));
        let b = tape.param(params.get(self.bias));
        tape.linear(pooled, w, b)
    }
}
