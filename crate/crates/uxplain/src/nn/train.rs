//! SGD training with optional momentum and a variational (ELBO) loss term.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::layer::ParamGrad;
use crate::nn::network::{Head, Network};
use crate::rng::{mix, rng_from};
use crate::tensor::Tensor;

/// Per-example training targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression: one scalar target per example.
    Values(Vec<f32>),
    /// Classification: one class index per example.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Optimizer {
    Sgd,
    /// SGD with heavy-ball momentum.
    Momentum { beta: f32 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults used across the tool: SGD + momentum 0.9.
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f32, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    /// Mean optimized objective per epoch (task loss, plus the scaled KL
    /// term when training variational layers).
    pub epoch_loss: Vec<f64>,
    /// KL(q || prior) at the end of training, when an ELBO term was active.
    pub final_kl: Option<f64>,
}

/// Loss and output-gradient of one example. `scale` is 1/batch_size so the
/// summed per-example gradients form the gradient of the batch mean loss.
fn loss_and_grad(head: Head, y: &Tensor, target: TargetRef, scale: f64) -> Result<(f64, Vec<f32>)> {
    match (head, target) {
        (Head::Regression, TargetRef::Value(t)) => {
            if y.len() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "regression head expects one output, network produced {}",
                    y.len()
                )));
            }
            let e = y[0] as f64 - t as f64;
            Ok((e * e, vec![(2.0 * e * scale) as f32]))
        }
        (Head::Classification, TargetRef::Label(label)) => {
            if label >= y.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "label {label} out of range for {} classes",
                    y.len()
                )));
            }
            let probs = softmax(y.data());
            let loss = -(probs[label].max(1e-12)).ln();
            let grad = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| (((p - if i == label { 1.0 } else { 0.0 }) * scale) as f32))
                .collect();
            Ok((loss, grad))
        }
        _ => Err(Error::InvalidArgument(
            "target kind does not match network head".into(),
        )),
    }
}

enum TargetRef {
    Value(f32),
    Label(usize),
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Train `net` in place. Deterministic for a fixed config: shuffling, noise
/// and reduction order are all derived from `cfg.seed`.
///
/// `elbo`: `None` enables the KL term automatically when the network has
/// variational layers; `Some(false)` forces it off; `Some(true)` requires
/// variational layers. The per-batch objective is then
/// `task_loss + KL(q || prior) / num_batches`.
pub fn train(
    net: &mut Network,
    inputs: &[Tensor],
    targets: &Targets,
    cfg: &TrainConfig,
    elbo: Option<bool>,
) -> Result<TrainHistory> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_size > inputs.len() {
        return Err(Error::Config(format!(
            "batch_size {} must be in 1..={}",
            cfg.batch_size,
            inputs.len()
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive and finite, got {}",
            cfg.learning_rate
        )));
    }
    let has_variational = net
        .layers()
        .iter()
        .any(|l| matches!(l, crate::nn::layer::Layer::FlipoutDense { .. }));
    let use_elbo = match elbo {
        None => has_variational,
        Some(false) => false,
        Some(true) => {
            if !has_variational {
                return Err(Error::Config(
                    "ELBO loss requested but the network has no variational layers".into(),
                ));
            }
            true
        }
    };

    let n = inputs.len();
    let num_batches = n.div_ceil(cfg.batch_size);
    let mut velocity = init_velocity(net);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(mix(cfg.seed, epoch as u64));
        let order = shuffled_indices(n, &mut rng);
        let mut epoch_loss = 0.0f64;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let noises = net.sample_noise_batch(&mut rng, batch.len());
            let scale = 1.0 / batch.len() as f64;
            let per_example: Vec<(f64, Vec<ParamGrad>)> = batch
                .par_iter()
                .zip(noises.par_iter())
                .map(|(&idx, noise)| {
                    let (y, tape) = net.forward_with_noise(&inputs[idx], noise)?;
                    let target = match targets {
                        Targets::Values(v) => TargetRef::Value(v[idx]),
                        Targets::Labels(l) => TargetRef::Label(l[idx]),
                    };
                    let (loss, dl_dy) = loss_and_grad(net.head(), &y, target, scale)?;
                    let (grads, _) = net.backward_params(&tape, dl_dy)?;
                    Ok((loss * scale, grads))
                })
                .collect::<Result<_>>()?;

            // Deterministic reduction: accumulate in example order, f64.
            let mut batch_loss = 0.0f64;
            let mut acc = init_accumulator(net);
            for (loss, grads) in &per_example {
                batch_loss += loss;
                accumulate(&mut acc, grads);
            }

            if use_elbo {
                let kl: f64 = net.layers().iter().map(|l| l.kl_divergence()).sum();
                batch_loss += kl / num_batches as f64;
                add_kl_gradients(net, &mut acc, 1.0 / num_batches as f64);
            }

            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx, loss: batch_loss });
            }
            epoch_loss += batch_loss;

            apply_update(net, &acc, &mut velocity, cfg);
            net.bump_version();
        }
        history.push(epoch_loss / num_batches as f64);
    }

    let final_kl =
        use_elbo.then(|| net.layers().iter().map(|l| l.kl_divergence()).sum::<f64>());
    Ok(TrainHistory { epoch_loss: history, final_kl })
}

fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One f64 accumulator per parameter tensor, in layer/parameter order.
fn init_accumulator(net: &Network) -> Vec<Vec<Vec<f64>>> {
    net.layers()
        .iter()
        .map(|l| l.param_slices().iter().map(|s| vec![0.0; s.len()]).collect())
        .collect()
}

fn init_velocity(net: &Network) -> Vec<Vec<Vec<f32>>> {
    net.layers()
        .iter()
        .map(|l| l.param_slices().iter().map(|s| vec![0.0; s.len()]).collect())
        .collect()
}

fn accumulate(acc: &mut [Vec<Vec<f64>>], grads: &[ParamGrad]) {
    for (layer_acc, grad) in acc.iter_mut().zip(grads) {
        for (tensor_acc, g) in layer_acc.iter_mut().zip(grad.slices()) {
            for (a, &v) in tensor_acc.iter_mut().zip(g) {
                *a += v as f64;
            }
        }
    }
}

fn add_kl_gradients(net: &Network, acc: &mut [Vec<Vec<f64>>], scale: f64) {
    for (layer, layer_acc) in net.layers().iter().zip(acc.iter_mut()) {
        if let Some((dmean, dlog_sigma)) = layer.kl_gradient() {
            for (a, v) in layer_acc[0].iter_mut().zip(&dmean) {
                *a += (*v as f64) * scale;
            }
            for (a, v) in layer_acc[1].iter_mut().zip(&dlog_sigma) {
                *a += (*v as f64) * scale;
            }
        }
    }
}

fn apply_update(
    net: &mut Network,
    acc: &[Vec<Vec<f64>>],
    velocity: &mut [Vec<Vec<f32>>],
    cfg: &TrainConfig,
) {
    let lr = cfg.learning_rate;
    for ((layer, layer_acc), layer_vel) in
        net.layers_mut().iter_mut().zip(acc).zip(velocity.iter_mut())
    {
        for ((params, grad), vel) in
            layer.param_slices_mut().into_iter().zip(layer_acc).zip(layer_vel.iter_mut())
        {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, &g) in params.iter_mut().zip(grad) {
                        *p -= lr * g as f32;
                    }
                }
                Optimizer::Momentum { beta } => {
                    for ((p, v), &g) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = beta * *v + g as f32;
                        *p -= lr * *v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Layer, LayerSpec};

    fn synthetic_linear(n: usize, w: f32, seed: u64) -> (Vec<Tensor>, Targets) {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let xs: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_vec(vec![rng.random::<f32>() * 4.0 - 2.0]))
            .collect();
        let ys = xs.iter().map(|x| w * x[0]).collect();
        (xs, Targets::Values(ys))
    }

    #[test]
    fn learns_y_equals_2x() {
        let (xs, ys) = synthetic_linear(100, 2.0, 5);
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            11,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 10,
            learning_rate: 0.1,
            optimizer: Optimizer::Sgd,
            seed: 21,
        };
        train(&mut net, &xs, &ys, &cfg, None).unwrap();
        let Layer::Dense { weight, .. } = &net.layers()[0] else { unreachable!() };
        // least-squares solution on noiseless y = 2x is exactly 2
        assert!(
            (weight.data()[0] - 2.0).abs() < 0.05,
            "learned weight {} not within 0.05 of 2",
            weight.data()[0]
        );
    }

    #[test]
    fn zero_epochs_leaves_weights_bit_identical() {
        let (xs, ys) = synthetic_linear(10, 2.0, 5);
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            11,
        )
        .unwrap();
        let before = net.clone();
        let cfg = TrainConfig::new(0, 5, 0.1, 21);
        train(&mut net, &xs, &ys, &cfg, None).unwrap();
        assert!(net.params_equal(&before));
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = synthetic_linear(40, 2.0, 5);
        let build = || {
            Network::new(
                vec![1],
                &[
                    LayerSpec::Dense { in_dim: 1, out_dim: 8 },
                    LayerSpec::ReLU,
                    LayerSpec::Dropout { p: 0.3 },
                    LayerSpec::Dense { in_dim: 8, out_dim: 1 },
                ],
                Head::Regression,
                17,
            )
            .unwrap()
        };
        let cfg = TrainConfig::new(5, 8, 0.05, 33);
        let mut a = build();
        let mut b = build();
        let ha = train(&mut a, &xs, &ys, &cfg, None).unwrap();
        let hb = train(&mut b, &xs, &ys, &cfg, None).unwrap();
        assert!(a.params_equal(&b));
        assert_eq!(ha.epoch_loss, hb.epoch_loss);
    }

    #[test]
    fn flipout_pinned_to_prior_has_zero_kl() {
        let mut net = Network::new(
            vec![2],
            &[LayerSpec::FlipoutDense {
                in_dim: 2,
                out_dim: 1,
                prior_mean: 0.0,
                prior_sigma: 1.0,
            }],
            Head::Regression,
            0,
        )
        .unwrap();
        match &mut net.layers_mut()[0] {
            Layer::FlipoutDense { mean, log_sigma, .. } => {
                mean.data_mut().fill(0.0);
                log_sigma.data_mut().fill(0.0); // sigma = 1 = prior
            }
            _ => unreachable!(),
        }
        let kl: f64 = net.layers().iter().map(|l| l.kl_divergence()).sum();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let (xs, ys) = synthetic_linear(20, 2.0, 5);
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            11,
        )
        .unwrap();
        let cfg = TrainConfig::new(200, 20, 1e12, 21);
        match train(&mut net, &xs, &ys, &cfg, None) {
            Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_batch_size_is_rejected() {
        let (xs, ys) = synthetic_linear(4, 2.0, 5);
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            11,
        )
        .unwrap();
        assert!(train(&mut net, &xs, &ys, &TrainConfig::new(1, 0, 0.1, 0), None).is_err());
        assert!(train(&mut net, &xs, &ys, &TrainConfig::new(1, 5, 0.1, 0), None).is_err());
    }

    #[test]
    fn elbo_flag_requires_variational_layers() {
        let (xs, ys) = synthetic_linear(4, 2.0, 5);
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            11,
        )
        .unwrap();
        assert!(train(&mut net, &xs, &ys, &TrainConfig::new(1, 4, 0.1, 0), Some(true)).is_err());
    }
}
