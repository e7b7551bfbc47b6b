//! Layer kinds: construction, forward, backward, noise sampling.
//!
//! All dot products accumulate in f64 and store results as f32. Noise layers
//! (Dropout, DropConnectDense, FlipoutDense) separate the *realization* of
//! their randomness ([`LayerNoise`]) from the deterministic application of
//! it, so a realization can be sampled once and replayed across several
//! forward passes (integrated gradients, LIME queries, finite differences).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture-level description of one layer, without parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    /// Square kernel, stride 1, valid padding.
    Conv2D { in_channels: usize, out_channels: usize, kernel: usize },
    ReLU,
    Flatten,
    Dropout { p: f32 },
    DropConnectDense { in_dim: usize, out_dim: usize, p: f32 },
    FlipoutDense { in_dim: usize, out_dim: usize, prior_mean: f32, prior_sigma: f32 },
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        /// `[out_dim, in_dim]`, row-major.
        weight: Tensor,
        bias: Tensor,
    },
    Conv2D {
        /// `[out_channels, in_channels, k, k]`.
        weight: Tensor,
        bias: Tensor,
    },
    ReLU,
    Flatten,
    Dropout {
        p: f32,
    },
    DropConnectDense {
        weight: Tensor,
        bias: Tensor,
        p: f32,
    },
    FlipoutDense {
        /// Posterior mean per weight, `[out_dim, in_dim]`.
        mean: Tensor,
        /// Posterior log standard deviation per weight; sigma = exp(log_sigma).
        log_sigma: Tensor,
        bias: Tensor,
        prior_mean: f32,
        prior_sigma: f32,
    },
}

/// One realized draw of a layer's randomness.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerNoise {
    /// Deterministic layer, or eval mode.
    None,
    /// Per-activation keep mask with inverted scaling: 0.0 or 1/(1-p).
    Dropout { scaled_mask: Vec<f32> },
    /// Per-weight keep mask with inverted scaling.
    DropConnect { scaled_mask: Vec<f32> },
    /// Base Gaussian perturbation per weight plus Rademacher sign vectors.
    Flipout {
        eps: Vec<f32>,
        sign_in: Vec<f32>,
        sign_out: Vec<f32>,
    },
}

/// ReLU backward rule used by the backward engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    Vanilla,
    /// Propagate only where forward activation AND upstream signal are positive.
    Guided,
}

/// Gradients of one layer's parameters, in the layer's parameter order.
#[derive(Debug, Clone)]
pub enum ParamGrad {
    None,
    Dense { dw: Vec<f32>, db: Vec<f32> },
    Flipout {
        dmean: Vec<f32>,
        dlog_sigma: Vec<f32>,
        db: Vec<f32>,
    },
}

impl ParamGrad {
    /// Parameter-order slices, matching [`Layer::param_slices`].
    pub fn slices(&self) -> Vec<&[f32]> {
        match self {
            ParamGrad::None => vec![],
            ParamGrad::Dense { dw, db } => vec![dw, db],
            ParamGrad::Flipout { dmean, dlog_sigma, db } => vec![dmean, dlog_sigma, db],
        }
    }
}

const LOG_SIGMA_INIT: f32 = -3.0;

fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound).collect()
}

fn validate_drop_prob(p: f32) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

impl Layer {
    /// Build a layer from its spec, drawing initial parameters from `rng`.
    ///
    /// Weights are uniform in ±sqrt(6/fan_in), biases zero. FlipoutDense
    /// initializes the posterior mean the same way and log-sigma to -3.
    pub fn from_spec(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Layer> {
        match *spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = kaiming_uniform(rng, in_dim * out_dim, in_dim);
                Ok(Layer::Dense {
                    weight: Tensor::new(vec![out_dim, in_dim], w)?,
                    bias: Tensor::zeros(vec![out_dim]),
                })
            }
            LayerSpec::Conv2D { in_channels, out_channels, kernel } => {
                let fan_in = in_channels * kernel * kernel;
                let w = kaiming_uniform(rng, out_channels * fan_in, fan_in);
                Ok(Layer::Conv2D {
                    weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
                    bias: Tensor::zeros(vec![out_channels]),
                })
            }
            LayerSpec::ReLU => Ok(Layer::ReLU),
            LayerSpec::Flatten => Ok(Layer::Flatten),
            LayerSpec::Dropout { p } => {
                validate_drop_prob(p)?;
                Ok(Layer::Dropout { p })
            }
            LayerSpec::DropConnectDense { in_dim, out_dim, p } => {
                validate_drop_prob(p)?;
                let w = kaiming_uniform(rng, in_dim * out_dim, in_dim);
                Ok(Layer::DropConnectDense {
                    weight: Tensor::new(vec![out_dim, in_dim], w)?,
                    bias: Tensor::zeros(vec![out_dim]),
                    p,
                })
            }
            LayerSpec::FlipoutDense { in_dim, out_dim, prior_mean, prior_sigma } => {
                if prior_sigma <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "flipout prior sigma must be positive, got {prior_sigma}"
                    )));
                }
                let m = kaiming_uniform(rng, in_dim * out_dim, in_dim);
                Ok(Layer::FlipoutDense {
                    mean: Tensor::new(vec![out_dim, in_dim], m)?,
                    log_sigma: Tensor::filled(vec![out_dim, in_dim], LOG_SIGMA_INIT),
                    bias: Tensor::zeros(vec![out_dim]),
                    prior_mean,
                    prior_sigma,
                })
            }
        }
    }

    /// Redraw this layer's parameters from the initializer distribution.
    pub(crate) fn reinitialize(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Layer::Dense { weight, bias } | Layer::DropConnectDense { weight, bias, .. } => {
                let fan_in = weight.shape()[1];
                let fresh = kaiming_uniform(rng, weight.len(), fan_in);
                weight.data_mut().copy_from_slice(&fresh);
                bias.data_mut().fill(0.0);
            }
            Layer::Conv2D { weight, bias } => {
                let s = weight.shape();
                let fan_in = s[1] * s[2] * s[3];
                let fresh = kaiming_uniform(rng, weight.len(), fan_in);
                weight.data_mut().copy_from_slice(&fresh);
                bias.data_mut().fill(0.0);
            }
            Layer::FlipoutDense { mean, log_sigma, bias, .. } => {
                let fan_in = mean.shape()[1];
                let fresh = kaiming_uniform(rng, mean.len(), fan_in);
                mean.data_mut().copy_from_slice(&fresh);
                log_sigma.data_mut().fill(LOG_SIGMA_INIT);
                bias.data_mut().fill(0.0);
            }
            _ => {}
        }
    }

    /// The architecture spec this layer instantiates.
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weight, .. } => LayerSpec::Dense {
                in_dim: weight.shape()[1],
                out_dim: weight.shape()[0],
            },
            Layer::Conv2D { weight, .. } => LayerSpec::Conv2D {
                in_channels: weight.shape()[1],
                out_channels: weight.shape()[0],
                kernel: weight.shape()[2],
            },
            Layer::ReLU => LayerSpec::ReLU,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dropout { p } => LayerSpec::Dropout { p: *p },
            Layer::DropConnectDense { weight, p, .. } => LayerSpec::DropConnectDense {
                in_dim: weight.shape()[1],
                out_dim: weight.shape()[0],
                p: *p,
            },
            Layer::FlipoutDense { mean, prior_mean, prior_sigma, .. } => LayerSpec::FlipoutDense {
                in_dim: mean.shape()[1],
                out_dim: mean.shape()[0],
                prior_mean: *prior_mean,
                prior_sigma: *prior_sigma,
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2D { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
            Layer::DropConnectDense { .. } => "dropconnect_dense",
            Layer::FlipoutDense { .. } => "flipout_dense",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. }
                | Layer::Conv2D { .. }
                | Layer::DropConnectDense { .. }
                | Layer::FlipoutDense { .. }
        )
    }

    /// Parameter tensors in declared order (weights before biases;
    /// Flipout: mean, log-sigma, bias).
    pub fn param_slices(&self) -> Vec<&[f32]> {
        match self {
            Layer::Dense { weight, bias } | Layer::DropConnectDense { weight, bias, .. } => {
                vec![weight.data(), bias.data()]
            }
            Layer::Conv2D { weight, bias } => vec![weight.data(), bias.data()],
            Layer::FlipoutDense { mean, log_sigma, bias, .. } => {
                vec![mean.data(), log_sigma.data(), bias.data()]
            }
            _ => vec![],
        }
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Layer::Dense { weight, bias } | Layer::DropConnectDense { weight, bias, .. } => {
                vec![weight.data_mut(), bias.data_mut()]
            }
            Layer::Conv2D { weight, bias } => vec![weight.data_mut(), bias.data_mut()],
            Layer::FlipoutDense { mean, log_sigma, bias, .. } => {
                vec![mean.data_mut(), log_sigma.data_mut(), bias.data_mut()]
            }
            _ => vec![],
        }
    }

    /// Output shape for a conforming input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weight, .. }
            | Layer::DropConnectDense { weight, .. } => dense_output_shape(weight, input),
            Layer::FlipoutDense { mean, .. } => dense_output_shape(mean, input),
            Layer::Conv2D { weight, .. } => {
                let (oc, ic, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                match input {
                    [c, h, w] if *c == ic && *h >= k && *w >= k => {
                        Ok(vec![oc, h - k + 1, w - k + 1])
                    }
                    _ => Err(Error::ShapeMismatch(format!(
                        "conv2d expects [{ic}, h>={k}, w>={k}], got {input:?}"
                    ))),
                }
            }
            Layer::ReLU | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Sample this layer's noise for one forward pass. `shared_eps` lets a
    /// batch reuse one flipout base perturbation while sign vectors stay
    /// per-example.
    pub(crate) fn sample_noise(
        &self,
        input_len: usize,
        rng: &mut ChaCha8Rng,
        shared_eps: Option<&[f32]>,
    ) -> LayerNoise {
        match self {
            Layer::Dropout { p } => {
                let keep = 1.0 - p;
                let scale = 1.0 / keep;
                let scaled_mask = (0..input_len)
                    .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
                    .collect();
                LayerNoise::Dropout { scaled_mask }
            }
            Layer::DropConnectDense { weight, p, .. } => {
                let keep = 1.0 - p;
                let scale = 1.0 / keep;
                let scaled_mask = (0..weight.len())
                    .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
                    .collect();
                LayerNoise::DropConnect { scaled_mask }
            }
            Layer::FlipoutDense { mean, .. } => {
                let (out_dim, in_dim) = (mean.shape()[0], mean.shape()[1]);
                let eps = match shared_eps {
                    Some(e) => e.to_vec(),
                    None => (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect(),
                };
                let rademacher =
                    |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> {
                        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
                    };
                let sign_in = rademacher(rng, in_dim);
                let sign_out = rademacher(rng, out_dim);
                LayerNoise::Flipout { eps, sign_in, sign_out }
            }
            _ => LayerNoise::None,
        }
    }

    /// Base flipout perturbation, drawn once per batch.
    pub(crate) fn sample_shared_eps(&self, rng: &mut ChaCha8Rng) -> Option<Vec<f32>> {
        match self {
            Layer::FlipoutDense { mean, .. } => {
                Some((0..mean.len()).map(|_| rng.sample(StandardNormal)).collect())
            }
            _ => None,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, noise: &LayerNoise) -> Result<Tensor> {
        match (self, noise) {
            (Layer::Dense { weight, bias }, _) => dense_forward(weight, bias, x, None),
            (Layer::Conv2D { weight, bias }, _) => conv_forward(weight, bias, x),
            (Layer::ReLU, _) => Ok(Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(0.0)).collect(),
            )?),
            (Layer::Flatten, _) => x.reshaped(vec![x.len()]),
            (Layer::Dropout { .. }, LayerNoise::Dropout { scaled_mask }) => {
                if scaled_mask.len() != x.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "dropout mask length {} vs input {}",
                        scaled_mask.len(),
                        x.len()
                    )));
                }
                Ok(Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(scaled_mask).map(|(&v, &m)| v * m).collect(),
                )?)
            }
            // Eval: inverted scaling already keeps the expectation equal to
            // the identity, so dropout disappears entirely.
            (Layer::Dropout { .. }, LayerNoise::None) => Ok(x.clone()),
            (Layer::DropConnectDense { weight, bias, .. }, LayerNoise::DropConnect { scaled_mask }) => {
                dense_forward(weight, bias, x, Some(scaled_mask))
            }
            (Layer::DropConnectDense { weight, bias, .. }, LayerNoise::None) => {
                dense_forward(weight, bias, x, None)
            }
            (Layer::FlipoutDense { mean, bias, .. }, LayerNoise::None) => {
                dense_forward(mean, bias, x, None)
            }
            (
                Layer::FlipoutDense { mean, log_sigma, bias, .. },
                LayerNoise::Flipout { eps, sign_in, sign_out },
            ) => flipout_forward(mean, log_sigma, bias, x, eps, sign_in, sign_out),
            (layer, noise) => Err(Error::InvalidArgument(format!(
                "noise realization {noise:?} does not match layer {}",
                layer.kind_name()
            ))),
        }
    }

    /// Backward through this layer: upstream `delta` (shaped like the layer
    /// output) to input gradient, plus parameter gradients when requested.
    /// `x` is the layer input recorded on the tape; the same noise
    /// realization as the forward pass must be supplied.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        delta: &Tensor,
        noise: &LayerNoise,
        rule: ReluRule,
        want_params: bool,
    ) -> Result<(Tensor, ParamGrad)> {
        match (self, noise) {
            (Layer::Dense { weight, .. }, _) => dense_backward(weight, x, delta, None, want_params),
            (Layer::Conv2D { weight, .. }, _) => conv_backward(weight, x, delta, want_params),
            (Layer::ReLU, _) => {
                let dx = match rule {
                    ReluRule::Vanilla => x
                        .data()
                        .iter()
                        .zip(delta.data())
                        .map(|(&xi, &di)| if xi > 0.0 { di } else { 0.0 })
                        .collect(),
                    ReluRule::Guided => x
                        .data()
                        .iter()
                        .zip(delta.data())
                        .map(|(&xi, &di)| if xi > 0.0 && di > 0.0 { di } else { 0.0 })
                        .collect(),
                };
                Ok((Tensor::new(x.shape().to_vec(), dx)?, ParamGrad::None))
            }
            (Layer::Flatten, _) => Ok((delta.reshaped(x.shape().to_vec())?, ParamGrad::None)),
            (Layer::Dropout { .. }, LayerNoise::Dropout { scaled_mask }) => {
                let dx = delta
                    .data()
                    .iter()
                    .zip(scaled_mask)
                    .map(|(&d, &m)| d * m)
                    .collect();
                Ok((Tensor::new(x.shape().to_vec(), dx)?, ParamGrad::None))
            }
            (Layer::Dropout { .. }, LayerNoise::None) => Ok((delta.clone(), ParamGrad::None)),
            (Layer::DropConnectDense { weight, .. }, LayerNoise::DropConnect { scaled_mask }) => {
                dense_backward(weight, x, delta, Some(scaled_mask), want_params)
            }
            (Layer::DropConnectDense { weight, .. }, LayerNoise::None) => {
                dense_backward(weight, x, delta, None, want_params)
            }
            (Layer::FlipoutDense { mean, .. }, LayerNoise::None) => {
                let (dx, pg) = dense_backward(mean, x, delta, None, want_params)?;
                let pg = promote_dense_grad_to_flipout(pg, mean.len());
                Ok((dx, pg))
            }
            (
                Layer::FlipoutDense { mean, log_sigma, .. },
                LayerNoise::Flipout { eps, sign_in, sign_out },
            ) => flipout_backward(mean, log_sigma, x, delta, eps, sign_in, sign_out, want_params),
            (layer, noise) => Err(Error::InvalidArgument(format!(
                "noise realization {noise:?} does not match layer {}",
                layer.kind_name()
            ))),
        }
    }

    /// Closed-form KL(q || prior) summed over this layer's weights, and its
    /// gradient with respect to (mean, log_sigma). Zero for non-variational
    /// layers.
    pub(crate) fn kl_divergence(&self) -> f64 {
        match self {
            Layer::FlipoutDense { mean, log_sigma, prior_mean, prior_sigma, .. } => {
                let pm = *prior_mean as f64;
                let ps = *prior_sigma as f64;
                mean.data()
                    .iter()
                    .zip(log_sigma.data())
                    .map(|(&m, &ls)| {
                        let m = m as f64;
                        let sigma = (ls as f64).exp();
                        (ps / sigma).ln() + (sigma * sigma + (m - pm) * (m - pm)) / (2.0 * ps * ps)
                            - 0.5
                    })
                    .sum()
            }
            _ => 0.0,
        }
    }

    /// d KL / d(mean, log_sigma), same layout as the parameter tensors.
    pub(crate) fn kl_gradient(&self) -> Option<(Vec<f32>, Vec<f32>)> {
        match self {
            Layer::FlipoutDense { mean, log_sigma, prior_mean, prior_sigma, .. } => {
                let ps2 = (*prior_sigma as f64) * (*prior_sigma as f64);
                let dmean = mean
                    .data()
                    .iter()
                    .map(|&m| (((m - prior_mean) as f64) / ps2) as f32)
                    .collect();
                let dlog_sigma = log_sigma
                    .data()
                    .iter()
                    .map(|&ls| {
                        let s2 = ((ls as f64) * 2.0).exp();
                        (s2 / ps2 - 1.0) as f32
                    })
                    .collect();
                Some((dmean, dlog_sigma))
            }
            _ => None,
        }
    }
}

fn dense_output_shape(weight: &Tensor, input: &[usize]) -> Result<Vec<usize>> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    match input {
        [d] if *d == in_dim => Ok(vec![out_dim]),
        _ => Err(Error::ShapeMismatch(format!(
            "dense expects [{in_dim}], got {input:?}"
        ))),
    }
}

/// y = (mask ∘ W) x + b, with an optional pre-scaled per-weight mask.
fn dense_forward(
    weight: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    mask: Option<&[f32]>,
) -> Result<Tensor> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "dense expects input of length {in_dim}, got {}",
            x.len()
        )));
    }
    let w = weight.data();
    let xs = x.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o] as f64;
        match mask {
            None => {
                for (wi, xi) in row.iter().zip(xs) {
                    acc += (*wi as f64) * (*xi as f64);
                }
            }
            Some(m) => {
                let mrow = &m[o * in_dim..(o + 1) * in_dim];
                for ((wi, xi), mi) in row.iter().zip(xs).zip(mrow) {
                    acc += (*wi as f64) * (*mi as f64) * (*xi as f64);
                }
            }
        }
        out.push(acc as f32);
    }
    Tensor::new(vec![out_dim], out)
}

fn dense_backward(
    weight: &Tensor,
    x: &Tensor,
    delta: &Tensor,
    mask: Option<&[f32]>,
    want_params: bool,
) -> Result<(Tensor, ParamGrad)> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if delta.len() != out_dim {
        return Err(Error::ShapeMismatch(format!(
            "dense backward expects delta of length {out_dim}, got {}",
            delta.len()
        )));
    }
    let w = weight.data();
    let d = delta.data();
    let mut dx = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let dv = d[o] as f64;
        if dv == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        match mask {
            None => {
                for (dst, wi) in dx.iter_mut().zip(row) {
                    *dst += (*wi as f64) * dv;
                }
            }
            Some(m) => {
                let mrow = &m[o * in_dim..(o + 1) * in_dim];
                for ((dst, wi), mi) in dx.iter_mut().zip(row).zip(mrow) {
                    *dst += (*wi as f64) * (*mi as f64) * dv;
                }
            }
        }
    }
    let dx = Tensor::new(vec![in_dim], dx.into_iter().map(|v| v as f32).collect())?;

    let grad = if want_params {
        let xs = x.data();
        let mut dw = vec![0.0f32; out_dim * in_dim];
        for o in 0..out_dim {
            let dv = d[o];
            let row = &mut dw[o * in_dim..(o + 1) * in_dim];
            match mask {
                None => {
                    for (dst, xi) in row.iter_mut().zip(xs) {
                        *dst = dv * xi;
                    }
                }
                Some(m) => {
                    let mrow = &m[o * in_dim..(o + 1) * in_dim];
                    for ((dst, xi), mi) in row.iter_mut().zip(xs).zip(mrow) {
                        *dst = dv * mi * xi;
                    }
                }
            }
        }
        ParamGrad::Dense { dw, db: d.to_vec() }
    } else {
        ParamGrad::None
    };
    Ok((dx, grad))
}

/// Perturbed dense pass: y = mean·x + b + sign_out ∘ (sigma∘eps)(x ∘ sign_in).
fn flipout_forward(
    mean: &Tensor,
    log_sigma: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    eps: &[f32],
    sign_in: &[f32],
    sign_out: &[f32],
) -> Result<Tensor> {
    let (out_dim, in_dim) = (mean.shape()[0], mean.shape()[1]);
    if x.len() != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "flipout dense expects input of length {in_dim}, got {}",
            x.len()
        )));
    }
    let m = mean.data();
    let ls = log_sigma.data();
    let xs = x.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let base = o * in_dim;
        let mut acc = bias[o] as f64;
        let mut pert = 0.0f64;
        for i in 0..in_dim {
            let xv = xs[i] as f64;
            acc += (m[base + i] as f64) * xv;
            pert += ((ls[base + i] as f64).exp()) * (eps[base + i] as f64)
                * xv
                * (sign_in[i] as f64);
        }
        acc += (sign_out[o] as f64) * pert;
        out.push(acc as f32);
    }
    Tensor::new(vec![out_dim], out)
}

#[allow(clippy::too_many_arguments)]
fn flipout_backward(
    mean: &Tensor,
    log_sigma: &Tensor,
    x: &Tensor,
    delta: &Tensor,
    eps: &[f32],
    sign_in: &[f32],
    sign_out: &[f32],
    want_params: bool,
) -> Result<(Tensor, ParamGrad)> {
    let (out_dim, in_dim) = (mean.shape()[0], mean.shape()[1]);
    let m = mean.data();
    let ls = log_sigma.data();
    let xs = x.data();
    let d = delta.data();

    let mut dx = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let dv = d[o] as f64;
        if dv == 0.0 {
            continue;
        }
        let base = o * in_dim;
        let so = sign_out[o] as f64;
        for i in 0..in_dim {
            let sigma_eps = ((ls[base + i] as f64).exp()) * (eps[base + i] as f64);
            dx[i] += dv * ((m[base + i] as f64) + so * (sign_in[i] as f64) * sigma_eps);
        }
    }
    let dx = Tensor::new(vec![in_dim], dx.into_iter().map(|v| v as f32).collect())?;

    let grad = if want_params {
        let mut dmean = vec![0.0f32; out_dim * in_dim];
        let mut dlog_sigma = vec![0.0f32; out_dim * in_dim];
        for o in 0..out_dim {
            let dv = d[o];
            let base = o * in_dim;
            let so = sign_out[o];
            for i in 0..in_dim {
                dmean[base + i] = dv * xs[i];
                // d y_o / d log_sigma = sign_out * eps * x * sign_in * sigma
                let sigma = ls[base + i].exp();
                dlog_sigma[base + i] = dv * so * eps[base + i] * xs[i] * sign_in[i] * sigma;
            }
        }
        ParamGrad::Flipout { dmean, dlog_sigma, db: d.to_vec() }
    } else {
        ParamGrad::None
    };
    Ok((dx, grad))
}

fn promote_dense_grad_to_flipout(pg: ParamGrad, n_weights: usize) -> ParamGrad {
    match pg {
        ParamGrad::Dense { dw, db } => ParamGrad::Flipout {
            dmean: dw,
            dlog_sigma: vec![0.0; n_weights],
            db,
        },
        other => other,
    }
}

/// Valid-padding, stride-1 cross-correlation. Accumulation order per output
/// element is bias first, then (in-channel, ky, kx) ascending; the reference
/// implementation in the test suite matches this order exactly.
fn conv_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [oc, ic, k, _] = *weight.shape() else {
        return Err(Error::ShapeMismatch("conv weight must be rank 4".into()));
    };
    let [c, h, w] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects rank-3 input, got {:?}",
            x.shape()
        )));
    };
    if c != ic || h < k || w < k {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects [{ic}, h>={k}, w>={k}], got {:?}",
            x.shape()
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let wd = weight.data();
    let xd = x.data();
    let mut out = vec![0.0f64; oc * oh * ow];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o] as f64);
        for cin in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((o * ic + cin) * k + ky) * k + kx] as f64;
                    for oy in 0..oh {
                        let xrow = &xd[(cin * h + oy + ky) * w + kx..(cin * h + oy + ky) * w + kx + ow];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (dst, xv) in orow.iter_mut().zip(xrow) {
                            *dst += wv * (*xv as f64);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(
        vec![oc, oh, ow],
        out.into_iter().map(|v| v as f32).collect(),
    )
}

fn conv_backward(
    weight: &Tensor,
    x: &Tensor,
    delta: &Tensor,
    want_params: bool,
) -> Result<(Tensor, ParamGrad)> {
    let [oc, ic, k, _] = *weight.shape() else {
        return Err(Error::ShapeMismatch("conv weight must be rank 4".into()));
    };
    let [c, h, w] = *x.shape() else {
        return Err(Error::ShapeMismatch("conv input must be rank 3".into()));
    };
    let (oh, ow) = (h - k + 1, w - k + 1);
    if delta.shape() != [oc, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv backward expects delta [{oc}, {oh}, {ow}], got {:?}",
            delta.shape()
        )));
    }
    let wd = weight.data();
    let xd = x.data();
    let dd = delta.data();

    let mut dx = vec![0.0f64; c * h * w];
    for o in 0..oc {
        let dplane = &dd[o * oh * ow..(o + 1) * oh * ow];
        for cin in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((o * ic + cin) * k + ky) * k + kx] as f64;
                    for oy in 0..oh {
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        let xbase = (cin * h + oy + ky) * w + kx;
                        for (ox, dv) in drow.iter().enumerate() {
                            dx[xbase + ox] += wv * (*dv as f64);
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::new(vec![c, h, w], dx.into_iter().map(|v| v as f32).collect())?;

    let grad = if want_params {
        let mut dw = vec![0.0f32; weight.len()];
        let mut db = vec![0.0f32; oc];
        for o in 0..oc {
            let dplane = &dd[o * oh * ow..(o + 1) * oh * ow];
            let mut bacc = 0.0f64;
            for dv in dplane {
                bacc += *dv as f64;
            }
            db[o] = bacc as f32;
            for cin in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xd[(cin * h + oy + ky) * w + kx
                                ..(cin * h + oy + ky) * w + kx + ow];
                            for (dv, xv) in drow.iter().zip(xrow) {
                                acc += (*dv as f64) * (*xv as f64);
                            }
                        }
                        dw[((o * ic + cin) * k + ky) * k + kx] = acc as f32;
                    }
                }
            }
        }
        ParamGrad::Dense { dw, db }
    } else {
        ParamGrad::None
    };
    Ok((dx, grad))
}
