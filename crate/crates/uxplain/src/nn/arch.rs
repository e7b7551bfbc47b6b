//! Reference architectures used by the experiment runner.

use crate::nn::layer::LayerSpec;
use crate::nn::network::Head;

/// Four fully connected layers, 8-8-8-1, ReLU between them. The regression
/// model for tabular tasks.
pub fn tabular_mlp(input_dim: usize) -> (Vec<usize>, Vec<LayerSpec>, Head) {
    let specs = vec![
        LayerSpec::Dense { in_dim: input_dim, out_dim: 8 },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 8, out_dim: 8 },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 8, out_dim: 8 },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 8, out_dim: 1 },
    ];
    (vec![input_dim], specs, Head::Regression)
}

/// Small CNN for 32x32 RGB classification:
/// Conv(3→16,3x3)-ReLU-Conv(16→32,3x3)-ReLU-Flatten-Dense(→64)-Dropout(0.5)-ReLU-Dense(→10).
pub fn image_cnn() -> (Vec<usize>, Vec<LayerSpec>, Head) {
    let flat = 32 * 28 * 28; // 32 channels after two valid 3x3 convs on 32x32
    let specs = vec![
        LayerSpec::Conv2D { in_channels: 3, out_channels: 16, kernel: 3 },
        LayerSpec::ReLU,
        LayerSpec::Conv2D { in_channels: 16, out_channels: 32, kernel: 3 },
        LayerSpec::ReLU,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: flat, out_dim: 64 },
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::ReLU,
        LayerSpec::Dense { in_dim: 64, out_dim: 10 },
    ];
    (vec![3, 32, 32], specs, Head::Classification)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::Network;

    #[test]
    fn reference_architectures_compose() {
        let (shape, specs, head) = tabular_mlp(8);
        let net = Network::new(shape, &specs, head, 0).unwrap();
        assert_eq!(net.output_dim(), 1);
        let (shape, specs, head) = image_cnn();
        let net = Network::new(shape, &specs, head, 0).unwrap();
        assert_eq!(net.output_dim(), 10);
        assert_eq!(net.parameterized_layers().len(), 4);
    }
}
