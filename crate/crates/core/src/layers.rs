//! The layer zoo: activations, batch and total-variation normalization, the
//! symmetric residual layer, opening/connecting layers, pooling, the linear
//! classifier, and the softmax cross-entropy loss.
//!
//! Forward passes live here and return caches holding exactly the
//! intermediates their adjoints need; the hand-derived backward passes live in
//! [`crate::adjoint`]. Layers are pure given (weights, input); train-mode
//! batch statistics are computed per call and returned in the cache rather
//! than mutating shared state.

use crate::conv::ConvBlock;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm variance floor. The value is a documented constant; nothing in
/// the dynamics depends on it beyond conditioning.
pub const EPS_BN: f64 = 1e-5;

/// Exponential-moving-average momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Default total-variation normalization epsilon.
pub const TV_EPS_DEFAULT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`. The ReLU subgradient at 0 is taken as 0.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        x.map(|v| self.eval(v))
    }
}

/// Per-channel scale and bias of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormWeights {
    /// scale 1, bias 0.
    pub fn identity(channels: usize) -> Self {
        NormWeights {
            scale: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check_channels(&self, got: usize) -> Result<()> {
        if self.scale.len() != got || self.bias.len() != got {
            return Err(Error::ChannelMismatch {
                expected: self.scale.len(),
                got,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Tensor,
}

/// Train-mode batch norm: normalizes each channel by the empirical mean and
/// (biased) standard deviation taken across the spatial dimensions and the
/// examples, then applies the per-channel scale and bias.
pub fn batch_norm_train(nw: &NormWeights, x: &Tensor, eps: f64) -> Result<(Tensor, BatchNormCache)> {
    let [b, c, h, w] = x.shape();
    nw.check_channels(c)?;
    let n = b * h * w;
    if n == 0 {
        return Err(Error::invalid("batch norm on a zero-size batch"));
    }
    let nf = n as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            sum += x.plane(bi, ci).iter().sum::<f64>();
        }
        mean[ci] = sum / nf;
        let mut sq = 0.0;
        for bi in 0..b {
            for &v in x.plane(bi, ci) {
                let d = v - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / nf;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros([b, c, h, w]);
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            let (g, bb) = (nw.scale[ci], nw.bias[ci]);
            let src = x.plane(bi, ci);
            // Fill xhat and out in one sweep.
            let hw = h * w;
            let base = (bi * c + ci) * hw;
            for k in 0..hw {
                let xh = (src[k] - m) * is;
                xhat.data_mut()[base + k] = xh;
                out.data_mut()[base + k] = g * xh + bb;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mean,
            var,
            inv_std,
            xhat,
        },
    ))
}

/// Eval-mode batch norm using stored running statistics.
pub fn batch_norm_eval(
    nw: &NormWeights,
    x: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    nw.check_channels(c)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: running_mean.len(),
        });
    }
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let is = 1.0 / (running_var[ci] + eps).sqrt();
            let (m, g, bb) = (running_mean[ci], nw.scale[ci], nw.bias[ci]);
            for (o, &v) in out.plane_mut(bi, ci).iter_mut().zip(x.plane(bi, ci)) {
                *o = g * (v - m) * is + bb;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Total-variation normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TvNormCache {
    /// 1/sqrt(sum_c y^2 + eps) per (example, pixel), laid out [b][y*w+x].
    pub inv_denom: Vec<f64>,
    /// y / denom, before scale and bias.
    pub normalized: Tensor,
}

/// Total-variation normalization: each entry is divided by the square root of
/// the channel-summed squares at its pixel (plus eps), then scaled and shifted
/// per channel.
pub fn tv_norm(nw: &NormWeights, x: &Tensor, eps: f64) -> Result<(Tensor, TvNormCache)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("tv_norm eps must be positive, got {eps}")));
    }
    let [b, c, h, w] = x.shape();
    nw.check_channels(c)?;
    let hw = h * w;
    let mut inv_denom = vec![0.0; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = &mut inv_denom[bi * hw..(bi + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v * v;
            }
        }
    }
    for d in inv_denom.iter_mut() {
        *d = 1.0 / (*d + eps).sqrt();
    }
    let mut normalized = Tensor::zeros([b, c, h, w]);
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        let inv = &inv_denom[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let (g, bb) = (nw.scale[ci], nw.bias[ci]);
            let src = x.plane(bi, ci);
            let base = (bi * c + ci) * hw;
            for k in 0..hw {
                let n = src[k] * inv[k];
                normalized.data_mut()[base + k] = n;
                out.data_mut()[base + k] = g * n + bb;
            }
        }
    }
    Ok((
        out,
        TvNormCache {
            inv_denom,
            normalized,
        },
    ))
}

/// Which normalization a residual step uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepNorm {
    None,
    Tv { eps: f64 },
}

// ---------------------------------------------------------------------------
// Residual layers
// ---------------------------------------------------------------------------

/// Weights of one symmetric residual step: a square convolution block and,
/// when the step normalization is TV, its per-channel scale and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SymLayerWeights {
    pub conv: ConvBlock,
    pub norm: Option<NormWeights>,
}

impl SymLayerWeights {
    pub fn check(&self, norm: StepNorm) -> Result<()> {
        if self.conv.c_in() != self.conv.c_out() {
            return Err(Error::invalid(format!(
                "symmetric layer needs a square block, got {} -> {}",
                self.conv.c_in(),
                self.conv.c_out()
            )));
        }
        match (norm, &self.norm) {
            (StepNorm::Tv { .. }, None) => Err(Error::invalid(
                "step norm is TV but the layer carries no norm weights",
            )),
            (StepNorm::None, Some(_)) => Err(Error::invalid(
                "step norm is None but the layer carries norm weights",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SymLayerCache {
    /// K y.
    pub conv_out: Tensor,
    pub tv: Option<TvNormCache>,
    /// N(K y): the activation input.
    pub preact: Tensor,
    /// sigma(N(K y)).
    pub activated: Tensor,
}

/// The symmetric layer `-K^T sigma(N(K y))`. Its feature Jacobian is symmetric
/// negative semidefinite for any non-decreasing activation when N is the
/// identity.
pub fn sym_layer(
    w: &SymLayerWeights,
    y: &Tensor,
    norm: StepNorm,
    act: Activation,
) -> Result<(Tensor, SymLayerCache)> {
    w.check(norm)?;
    let conv_out = w.conv.apply(y)?;
    let (preact, tv) = match norm {
        StepNorm::None => (conv_out.clone(), None),
        StepNorm::Tv { eps } => {
            let (v, cache) = tv_norm(w.norm.as_ref().unwrap(), &conv_out, eps)?;
            (v, Some(cache))
        }
    };
    let activated = act.apply(&preact);
    let mut out = w.conv.apply_transpose(&activated)?;
    out.scale_mut(-1.0);
    Ok((
        out,
        SymLayerCache {
            conv_out,
            tv,
            preact,
            activated,
        },
    ))
}

/// Forward value only.
pub fn sym_layer_output(
    w: &SymLayerWeights,
    y: &Tensor,
    norm: StepNorm,
    act: Activation,
) -> Result<Tensor> {
    Ok(sym_layer(w, y, norm, act)?.0)
}

/// Weights of the general (non-symmetric) layer `K2 sigma(N(K1 y))`, kept for
/// baseline comparison against the symmetric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralLayerWeights {
    pub conv_in: ConvBlock,
    pub conv_out: ConvBlock,
    pub norm: Option<NormWeights>,
}

#[derive(Debug, Clone)]
pub struct GeneralLayerCache {
    pub conv_out: Tensor,
    pub tv: Option<TvNormCache>,
    pub preact: Tensor,
    pub activated: Tensor,
}

pub fn general_layer(
    w: &GeneralLayerWeights,
    y: &Tensor,
    norm: StepNorm,
    act: Activation,
) -> Result<(Tensor, GeneralLayerCache)> {
    let conv_out = w.conv_in.apply(y)?;
    let (preact, tv) = match norm {
        StepNorm::None => (conv_out.clone(), None),
        StepNorm::Tv { eps } => {
            let nw = w
                .norm
                .as_ref()
                .ok_or_else(|| Error::invalid("general layer: TV norm weights missing"))?;
            let (v, cache) = tv_norm(nw, &conv_out, eps)?;
            (v, Some(cache))
        }
    };
    let activated = act.apply(&preact);
    let out = w.conv_out.apply(&activated)?;
    Ok((
        out,
        GeneralLayerCache {
            conv_out,
            tv,
            preact,
            activated,
        },
    ))
}

// ---------------------------------------------------------------------------
// Opening and connecting layers
// ---------------------------------------------------------------------------

/// Opening layer: 3x3 convolution block to the first ResNet width, batch
/// norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeningWeights {
    pub conv: ConvBlock,
    pub norm: NormWeights,
}

#[derive(Debug, Clone)]
pub struct OpeningCache {
    pub conv_out: Tensor,
    pub bn: BatchNormCache,
    pub preact: Tensor,
}

pub fn opening_layer(w: &OpeningWeights, x: &Tensor) -> Result<(Tensor, OpeningCache)> {
    let conv_out = w.conv.apply(x)?;
    let (preact, bn) = batch_norm_train(&w.norm, &conv_out, EPS_BN)?;
    let out = Activation::Relu.apply(&preact);
    Ok((
        out,
        OpeningCache {
            conv_out,
            bn,
            preact,
        },
    ))
}

pub fn opening_layer_eval(
    w: &OpeningWeights,
    x: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let conv_out = w.conv.apply(x)?;
    let preact = batch_norm_eval(&w.norm, &conv_out, running_mean, running_var, EPS_BN)?;
    Ok(Activation::Relu.apply(&preact))
}

/// Connecting layer: 1x1 convolution block that changes the width, batch
/// norm, ReLU, and (between blocks) 2x2 average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorWeights {
    pub conv: ConvBlock,
    pub norm: NormWeights,
}

#[derive(Debug, Clone)]
pub struct ConnectorCache {
    pub input: Tensor,
    pub conv_out: Tensor,
    pub bn: BatchNormCache,
    pub preact: Tensor,
    pub pooled: bool,
}

pub fn connecting_layer(
    w: &ConnectorWeights,
    x: &Tensor,
    pool: bool,
) -> Result<(Tensor, ConnectorCache)> {
    let conv_out = w.conv.apply(x)?;
    let (preact, bn) = batch_norm_train(&w.norm, &conv_out, EPS_BN)?;
    let relu_out = Activation::Relu.apply(&preact);
    let out = if pool { avg_pool2(&relu_out)? } else { relu_out };
    Ok((
        out,
        ConnectorCache {
            input: x.clone(),
            conv_out,
            bn,
            preact,
            pooled: pool,
        },
    ))
}

pub fn connecting_layer_eval(
    w: &ConnectorWeights,
    x: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    pool: bool,
) -> Result<Tensor> {
    let conv_out = w.conv.apply(x)?;
    let preact = batch_norm_eval(&w.norm, &conv_out, running_mean, running_var, EPS_BN)?;
    let relu_out = Activation::Relu.apply(&preact);
    if pool {
        avg_pool2(&relu_out)
    } else {
        Ok(relu_out)
    }
}

/// 2x2 average pooling with stride 2; requires even spatial dimensions.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "average pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    dst[oy * ow + ox] = 0.25
                        * (src[y * w + xx]
                            + src[y * w + xx + 1]
                            + src[(y + 1) * w + xx]
                            + src[(y + 1) * w + xx + 1]);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Classifier and loss
// ---------------------------------------------------------------------------

/// Dense classifier on channel-averaged features: `scores = W f + mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    /// classes x features, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub features: usize,
}

impl ClassifierWeights {
    pub fn zeros(classes: usize, features: usize) -> Self {
        ClassifierWeights {
            weight: vec![0.0; classes * features],
            bias: vec![0.0; classes],
            classes,
            features,
        }
    }
}

/// Spatial mean of each channel: (b, c, h, w) -> (b, c, 1, 1). Averaging makes
/// the classifier input translation-invariant.
pub fn global_average(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros([b, c, 1, 1]);
    for bi in 0..b {
        for ci in 0..c {
            let s: f64 = x.plane(bi, ci).iter().sum();
            out.set(bi, ci, 0, 0, s * inv);
        }
    }
    out
}

/// Affine map from (b, features, 1, 1) to raw class scores (b, classes, 1, 1).
/// Softmax is applied inside the loss.
pub fn classify(cw: &ClassifierWeights, feat: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = feat.shape();
    if c != cw.features || h != 1 || w != 1 {
        return Err(Error::invalid(format!(
            "classifier expects (b, {}, 1, 1) features, got {:?}",
            cw.features,
            feat.shape()
        )));
    }
    let mut scores = Tensor::zeros([b, cw.classes, 1, 1]);
    for bi in 0..b {
        for k in 0..cw.classes {
            let row = &cw.weight[k * cw.features..(k + 1) * cw.features];
            let mut s = cw.bias[k];
            for ci in 0..cw.features {
                s += row[ci] * feat.at(bi, ci, 0, 0);
            }
            scores.set(bi, k, 0, 0, s);
        }
    }
    Ok(scores)
}

/// Channel-average then classify.
pub fn global_average_and_classify(cw: &ClassifierWeights, y: &Tensor) -> Result<Tensor> {
    classify(cw, &global_average(y))
}

/// Mean cross-entropy of softmax scores against integer labels. Returns the
/// loss and its gradient with respect to the raw scores. Max-subtraction keeps
/// the exponentials from overflowing.
pub fn softmax_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, m, h, w] = scores.shape();
    if h != 1 || w != 1 {
        return Err(Error::invalid("scores must have shape (b, classes, 1, 1)"));
    }
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "batch has {b} examples but {} labels",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros([b, m, 1, 1]);
    let invb = 1.0 / b as f64;
    for bi in 0..b {
        let label = labels[bi];
        if label >= m {
            return Err(Error::invalid(format!(
                "label {label} out of range for {m} classes"
            )));
        }
        let mut maxv = f64::NEG_INFINITY;
        for k in 0..m {
            maxv = maxv.max(scores.at(bi, k, 0, 0));
        }
        let mut denom = 0.0;
        for k in 0..m {
            denom += (scores.at(bi, k, 0, 0) - maxv).exp();
        }
        let log_denom = denom.ln();
        loss += -(scores.at(bi, label, 0, 0) - maxv - log_denom);
        for k in 0..m {
            let p = (scores.at(bi, k, 0, 0) - maxv).exp() / denom;
            let indicator = if k == label { 1.0 } else { 0.0 };
            grad.set(bi, k, 0, 0, (p - indicator) * invb);
        }
    }
    Ok((loss * invb, grad))
}

/// Argmax per example; ties resolve to the lowest class index.
pub fn predict(scores: &Tensor) -> Vec<usize> {
    let [b, m, _, _] = scores.shape();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut best = 0;
        let mut bestv = scores.at(bi, 0, 0, 0);
        for k in 1..m {
            let v = scores.at(bi, k, 0, 0);
            if v > bestv {
                best = k;
                bestv = v;
            }
        }
        out.push(best);
    }
    out
}
