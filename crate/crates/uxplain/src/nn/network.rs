//! Network: an ordered layer stack with a task head.
//!
//! A network is immutable during inference; `forward` records a [`Tape`]
//! carrying every layer input plus the realized noise, which `backward_*`
//! replays. Training and layer reinitialization produce new parameter
//! versions, and a tape from an older version is rejected as stale.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerNoise, LayerSpec, ParamGrad, ReluRule};
use crate::rng::{fnv1a64, hex64, mix, rng_from};
use crate::tensor::Tensor;

/// Task head. Classification heads emit logits from `forward`; the softmax
/// lives in the loss and in predictive averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Head {
    Regression,
    Classification,
}

/// Forward execution mode. `Train` and `StochasticEval` both sample fresh
/// noise for every noise layer (each pass is one posterior sample); `Eval`
/// runs noise layers as identity/mean.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
    StochasticEval(&'a mut ChaCha8Rng),
}

/// One realized draw of every noise layer in the network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    layers: Vec<LayerNoise>,
}

impl NoiseRealization {
    pub fn layer(&self, i: usize) -> &LayerNoise {
        &self.layers[i]
    }

    /// All-deterministic realization (eval semantics).
    pub fn eval(n_layers: usize) -> Self {
        Self { layers: vec![LayerNoise::None; n_layers] }
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer, in layer order.
    inputs: Vec<Tensor>,
    output: Tensor,
    noise: NoiseRealization,
    version: u64,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn noise(&self) -> &NoiseRealization {
        &self.noise
    }

    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    head: Head,
    input_shape: Vec<usize>,
    /// Input shape of each layer, precomputed at construction.
    layer_input_shapes: Vec<Vec<usize>>,
    output_shape: Vec<usize>,
    seed: u64,
    version: u64,
}

impl Network {
    /// Construct and initialize a network. Layer parameters for layer `i`
    /// are drawn from the stream `mix(seed, i)`, so two networks built from
    /// the same specs and seed are bit-identical.
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], head: Head, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut rng = rng_from(mix(seed, i as u64));
            layers.push(Layer::from_spec(spec, &mut rng)?);
        }
        // Shape-check the whole stack once, so forward never shape-errors on
        // a conforming input.
        let mut layer_input_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for layer in &layers {
            layer_input_shapes.push(shape.clone());
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            head,
            input_shape,
            layer_input_shapes,
            output_shape: shape,
            seed,
            version: 0,
        })
    }

    /// Assemble a network from already-built layers (checkpoint loading).
    pub(crate) fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut layer_input_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for layer in &layers {
            layer_input_shapes.push(shape.clone());
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            head,
            input_shape,
            layer_input_shapes,
            output_shape: shape,
            seed: 0,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Indices of layers that carry parameters, input to output.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// True when all parameters (and drop probabilities) are bitwise equal.
    pub fn params_equal(&self, other: &Network) -> bool {
        if self.layers.len() != other.layers.len() {
            return false;
        }
        self.layers.iter().zip(&other.layers).all(|(a, b)| {
            a.spec() == b.spec()
                && a.param_slices()
                    .iter()
                    .zip(b.param_slices().iter())
                    .all(|(x, y)| {
                        x.len() == y.len()
                            && x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
                    })
        })
    }

    /// Fingerprint of the architecture (layer specs + head + input shape),
    /// independent of parameter values.
    pub fn architecture_hash(&self) -> String {
        let desc = format!(
            "{:?}|{:?}|{:?}",
            self.input_shape,
            self.head,
            self.layers.iter().map(|l| l.spec()).collect::<Vec<_>>()
        );
        hex64(fnv1a64(desc.as_bytes()))
    }

    /// Sample a full noise realization for one forward pass.
    pub fn sample_noise(&self, rng: &mut ChaCha8Rng) -> NoiseRealization {
        let layers = self
            .layers
            .iter()
            .zip(&self.layer_input_shapes)
            .map(|(l, shape)| l.sample_noise(shape.iter().product(), rng, None))
            .collect();
        NoiseRealization { layers }
    }

    /// Sample noise for a batch: the flipout base perturbation is drawn once
    /// and shared, sign vectors and drop masks are per example.
    pub fn sample_noise_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<NoiseRealization> {
        let shared: Vec<Option<Vec<f32>>> =
            self.layers.iter().map(|l| l.sample_shared_eps(rng)).collect();
        (0..n)
            .map(|_| {
                let layers = self
                    .layers
                    .iter()
                    .zip(&self.layer_input_shapes)
                    .zip(&shared)
                    .map(|((l, shape), eps)| {
                        l.sample_noise(shape.iter().product(), rng, eps.as_deref())
                    })
                    .collect();
                NoiseRealization { layers }
            })
            .collect()
    }

    /// Run the network on `x`, returning the prediction (logits for
    /// classification) and the tape for a later backward pass.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Tape)> {
        match mode {
            Mode::Eval => self.forward_impl(x, NoiseRealization::eval(self.layers.len())),
            Mode::Train(rng) | Mode::StochasticEval(rng) => {
                let noise = self.sample_noise(rng);
                self.forward_impl(x, noise)
            }
        }
    }

    /// Run the network under an existing noise realization (replay).
    pub fn forward_with_noise(&self, x: &Tensor, noise: &NoiseRealization) -> Result<(Tensor, Tape)> {
        self.forward_impl(x, noise.clone())
    }

    fn forward_impl(&self, x: &Tensor, noise: NoiseRealization) -> Result<(Tensor, Tape)> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        x.ensure_finite("network input")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&current, noise.layer(i))?;
            next.ensure_finite(layer.kind_name())?;
            inputs.push(std::mem::replace(&mut current, next));
        }
        let tape = Tape {
            inputs,
            output: current.clone(),
            noise,
            version: self.version,
        };
        Ok((current, tape))
    }

    /// Gradient of one output component with respect to the input, under the
    /// same noise realization the tape was recorded with. For classification
    /// this is the gradient of the selected pre-softmax logit.
    pub fn backward_to_input(&self, tape: &Tape, output_index: usize) -> Result<Tensor> {
        self.backward_to_input_with_rule(tape, output_index, ReluRule::Vanilla)
    }

    /// Same as [`backward_to_input`](Self::backward_to_input) but with a
    /// selectable ReLU backward rule (vanilla or guided).
    pub fn backward_to_input_with_rule(
        &self,
        tape: &Tape,
        output_index: usize,
        rule: ReluRule,
    ) -> Result<Tensor> {
        let out_dim = self.output_dim();
        if output_index >= out_dim {
            return Err(Error::IndexOutOfRange(format!(
                "output index {output_index} out of range for {out_dim} outputs"
            )));
        }
        let mut seed = vec![0.0f32; out_dim];
        seed[output_index] = 1.0;
        let (_, dx) = self.backward_impl(tape, seed, rule, false)?;
        Ok(dx)
    }

    /// Backward pass for training: upstream loss gradient at the output to
    /// per-layer parameter gradients (plus the input gradient).
    pub fn backward_params(&self, tape: &Tape, dl_dy: Vec<f32>) -> Result<(Vec<ParamGrad>, Tensor)> {
        let (grads, dx) = self.backward_impl(tape, dl_dy, ReluRule::Vanilla, true)?;
        Ok((grads.expect("param grads requested"), dx))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        dl_dy: Vec<f32>,
        rule: ReluRule,
        want_params: bool,
    ) -> Result<(Option<Vec<ParamGrad>>, Tensor)> {
        if tape.version != self.version {
            return Err(Error::StaleTape { tape: tape.version, net: self.version });
        }
        if dl_dy.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient length {} vs {} outputs",
                dl_dy.len(),
                self.output_dim()
            )));
        }
        let mut delta = Tensor::new(self.output_shape.clone(), dl_dy)?;
        let mut grads: Vec<ParamGrad> = Vec::new();
        if want_params {
            grads.resize_with(self.layers.len(), || ParamGrad::None);
        }
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, pg) =
                layer.backward(&tape.inputs[i], &delta, tape.noise.layer(i), rule, want_params)?;
            dx.ensure_finite(layer.kind_name())?;
            if want_params {
                grads[i] = pg;
            }
            delta = dx;
        }
        Ok((want_params.then_some(grads), delta))
    }

    /// A copy of this network with one parameterized layer redrawn from its
    /// initializer distribution. Everything else is untouched.
    pub fn reinitialize_layer(&self, layer_index: usize, seed: u64) -> Result<Network> {
        let Some(layer) = self.layers.get(layer_index) else {
            return Err(Error::IndexOutOfRange(format!(
                "layer index {layer_index} out of range for {} layers",
                self.layers.len()
            )));
        };
        if !layer.is_parameterized() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_index} ({}) has no parameters to reinitialize",
                layer.kind_name()
            )));
        }
        let mut out = self.clone();
        let mut rng = rng_from(seed);
        out.layers[layer_index].reinitialize(&mut rng);
        out.version += 1;
        Ok(out)
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_net(w: Vec<f32>, in_dim: usize, out_dim: usize) -> Network {
        let mut net = Network::new(
            vec![in_dim],
            &[LayerSpec::Dense { in_dim, out_dim }],
            Head::Regression,
            0,
        )
        .unwrap();
        match &mut net.layers_mut()[0] {
            Layer::Dense { weight, .. } => weight.data_mut().copy_from_slice(&w),
            _ => unreachable!(),
        }
        net
    }

    #[test]
    fn dense_eval_matches_hand_arithmetic() {
        // Dense(w=[[2]], b=[0]) on x=[3] -> [6]
        let net = linear_net(vec![2.0], 1, 1);
        let (y, _) = net.forward(&Tensor::from_vec(vec![3.0]), Mode::Eval).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn linear_gradient_is_the_weight_row() {
        let net = linear_net(vec![1.5, -2.0, 0.25], 3, 1);
        let x = Tensor::from_vec(vec![0.3, 0.7, -1.2]);
        let (_, tape) = net.forward(&x, Mode::Eval).unwrap();
        let g = net.backward_to_input(&tape, 0).unwrap();
        assert_eq!(g.data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn dead_relu_zeroes_the_gradient() {
        let mut net = Network::new(
            vec![2],
            &[LayerSpec::Dense { in_dim: 2, out_dim: 2 }, LayerSpec::ReLU],
            Head::Regression,
            0,
        )
        .unwrap();
        match &mut net.layers_mut()[0] {
            Layer::Dense { weight, bias } => {
                weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
                bias.data_mut().copy_from_slice(&[-10.0, -10.0]);
            }
            _ => unreachable!(),
        }
        let (_, tape) = net.forward(&Tensor::from_vec(vec![1.0, 2.0]), Mode::Eval).unwrap();
        let g = net.backward_to_input(&tape, 0).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_network() {
        let specs = [
            LayerSpec::Dense { in_dim: 4, out_dim: 8 },
            LayerSpec::ReLU,
            LayerSpec::Dense { in_dim: 8, out_dim: 2 },
        ];
        let a = Network::new(vec![4], &specs, Head::Classification, 99).unwrap();
        let b = Network::new(vec![4], &specs, Head::Classification, 99).unwrap();
        assert!(a.params_equal(&b));
        let c = Network::new(vec![4], &specs, Head::Classification, 100).unwrap();
        assert!(!a.params_equal(&c));
    }

    #[test]
    fn dropout_p0_stochastic_equals_eval() {
        let net = Network::new(
            vec![5],
            &[LayerSpec::Dropout { p: 0.0 }],
            Head::Regression,
            0,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0, -4.0, 5.0]);
        let (eval, _) = net.forward(&x, Mode::Eval).unwrap();
        let mut rng = rng_from(7);
        let (st, _) = net.forward(&x, Mode::StochasticEval(&mut rng)).unwrap();
        assert_eq!(eval.data(), st.data());
    }

    #[test]
    fn dropout_half_concentrates_around_eval_output() {
        // 1e4 constant-1 activations through Dropout(0.5): unit mean, unit
        // variance per element, so the mean over units has sigma = 0.01.
        let n = 10_000;
        let net = Network::new(
            vec![n],
            &[LayerSpec::Dropout { p: 0.5 }],
            Head::Regression,
            0,
        )
        .unwrap();
        let x = Tensor::filled(vec![n], 1.0);
        let mut rng = rng_from(31);
        let (y, _) = net.forward(&x, Mode::StochasticEval(&mut rng)).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() <= 3.0 * 0.01, "sample mean {mean} outside 3 sigma");
    }

    #[test]
    fn stale_tape_is_rejected() {
        let net = Network::new(
            vec![2],
            &[LayerSpec::Dense { in_dim: 2, out_dim: 1 }],
            Head::Regression,
            3,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let (_, tape) = net.forward(&x, Mode::Eval).unwrap();
        let newer = net.reinitialize_layer(0, 5).unwrap();
        match newer.backward_to_input(&tape, 0) {
            Err(Error::StaleTape { .. }) => {}
            other => panic!("expected stale tape error, got {other:?}"),
        }
    }

    #[test]
    fn selector_out_of_range_errors() {
        let net = Network::new(
            vec![2],
            &[LayerSpec::Dense { in_dim: 2, out_dim: 3 }],
            Head::Classification,
            3,
        )
        .unwrap();
        let (_, tape) = net.forward(&Tensor::from_vec(vec![1.0, 1.0]), Mode::Eval).unwrap();
        assert!(matches!(
            net.backward_to_input(&tape, 3),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn reinitialize_layer_touches_only_that_layer() {
        let specs = [
            LayerSpec::Dense { in_dim: 8, out_dim: 8 },
            LayerSpec::ReLU,
            LayerSpec::Dense { in_dim: 8, out_dim: 8 },
        ];
        let net = Network::new(vec![8], &specs, Head::Regression, 1).unwrap();
        let redrawn = net.reinitialize_layer(2, 77).unwrap();
        let same = |a: &Layer, b: &Layer| {
            a.param_slices()
                .iter()
                .zip(b.param_slices())
                .all(|(x, y)| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
        };
        assert!(same(&net.layers()[0], &redrawn.layers()[0]));
        assert!(!same(&net.layers()[2], &redrawn.layers()[2]));
        // determinism of the redraw
        let redrawn2 = net.reinitialize_layer(2, 77).unwrap();
        assert!(redrawn.params_equal(&redrawn2));
        // original untouched
        let fresh = Network::new(vec![8], &specs, Head::Regression, 1).unwrap();
        assert!(net.params_equal(&fresh));
    }

    #[test]
    fn reinitialize_rejects_parameter_free_layers() {
        let net = Network::new(
            vec![4],
            &[LayerSpec::ReLU, LayerSpec::Dense { in_dim: 4, out_dim: 1 }],
            Head::Regression,
            0,
        )
        .unwrap();
        assert!(net.reinitialize_layer(0, 1).is_err());
        assert!(net.reinitialize_layer(5, 1).is_err());
    }

    #[test]
    fn redraw_std_matches_initializer_scale() {
        // Uniform(-a, a) has std a/sqrt(3) with a = sqrt(6/fan_in).
        let net = Network::new(
            vec![8],
            &[LayerSpec::Dense { in_dim: 8, out_dim: 8 }],
            Head::Regression,
            12,
        )
        .unwrap();
        let redrawn = net.reinitialize_layer(0, 999).unwrap();
        let Layer::Dense { weight, .. } = &redrawn.layers()[0] else { unreachable!() };
        let vals = weight.data();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / vals.len() as f64)
            .sqrt();
        let expected = (6.0f64 / 8.0).sqrt() / 3.0f64.sqrt();
        assert!(
            std >= 0.5 * expected && std <= 1.5 * expected,
            "sample std {std} vs initializer std {expected}"
        );
    }

    #[test]
    fn shape_mismatch_at_construction() {
        let specs = [
            LayerSpec::Dense { in_dim: 4, out_dim: 8 },
            LayerSpec::Dense { in_dim: 9, out_dim: 2 },
        ];
        assert!(Network::new(vec![4], &specs, Head::Regression, 0).is_err());
    }

    #[test]
    fn nonfinite_activation_is_surfaced() {
        let net = linear_net(vec![f32::MAX], 1, 1);
        let x = Tensor::from_vec(vec![f32::MAX]);
        assert!(matches!(
            net.forward(&x, Mode::Eval),
            Err(Error::NonFinite(_))
        ));
    }
}
