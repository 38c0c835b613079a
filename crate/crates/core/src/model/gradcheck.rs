//! Central finite-difference check of the analytic gradients.

use alloc::vec::Vec;

use rand::Rng;

use super::network::{Network, Parameters};
use super::spec::{Activation, InputShape, LayerSpec, NetworkSpec};
use super::ModelError;
use crate::corpus::IssueClass;

/// Worst disagreement found by [`compare`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every analytic partial derivative of the mean batch loss with
/// `(L(θ+ε) − L(θ−ε)) / 2ε`.
pub fn compare(
    network: &Network,
    params: &Parameters<f64>,
    batch: &[(&[f64], usize)],
    eps: f64,
) -> Result<GradCheck, ModelError> {
    let (_, grads) = network.loss_and_gradients(params, batch)?;
    let analytic: Vec<f64> = grads.values().collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.values_mut().nth(i).expect("index within parameters");
        *probe.values_mut().nth(i).expect("index") = original + eps;
        let (up, _) = network.loss_and_gradients(&probe, batch)?;
        *probe.values_mut().nth(i).expect("index") = original - eps;
        let (down, _) = network.loss_and_gradients(&probe, batch)?;
        *probe.values_mut().nth(i).expect("index") = original;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric, 1e-6));
    }
    Ok(GradCheck { max_relative_error: worst, checked: analytic.len() })
}

/// A small random network exercising conv (with and without padding or
/// stride), max pooling, and dense layers with both activations.
pub fn random_small_spec<R: Rng + ?Sized>(rng: &mut R) -> NetworkSpec {
    let side = rng.random_range(6..=9);
    let channels = rng.random_range(1..=3);
    let mut layers = Vec::new();
    let padding = rng.random_range(0..=1);
    let stride = if rng.random_bool(0.3) { 2 } else { 1 };
    layers.push(LayerSpec::Conv {
        out_channels: rng.random_range(1..=3),
        kernel: 3,
        stride,
        padding,
        activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity },
    });
    let conv_side = (side + 2 * padding - 3) / stride + 1;
    if conv_side >= 2 {
        layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    }
    layers.push(LayerSpec::Flatten);
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::Dense { units: rng.random_range(2..=5), activation: Activation::Relu });
    }
    layers.push(LayerSpec::Dense { units: IssueClass::COUNT, activation: Activation::Identity });
    layers.push(LayerSpec::SoftmaxOutput);
    NetworkSpec { input_shape: InputShape { height: side, width: side, channels }, layers }
}

/// Random parameters, inputs and labels for [`random_small_spec`] networks.
pub fn random_case<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    batch: usize,
    rng: &mut R,
) -> Result<(Parameters<f64>, Vec<(Vec<f64>, usize)>), ModelError> {
    let mut params = Parameters::<f64>::zeros(spec)?;
    params.values_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    let n = spec.input_len();
    let data = (0..batch)
        .map(|_| {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            (x, rng.random_range(0..IssueClass::COUNT))
        })
        .collect();
    Ok((params, data))
}

/// The default check: `trials` random networks, batch of 3, ε = 1e-5.
pub fn run_random_trials<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<GradCheck, ModelError> {
    let mut total = GradCheck { max_relative_error: 0.0, checked: 0 };
    for _ in 0..trials {
        let spec = random_small_spec(rng);
        let net = Network::new(spec.clone())?;
        let (params, data) = random_case(&spec, 3, rng)?;
        let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let r = compare(&net, &params, &batch, 1e-5)?;
        total.max_relative_error = total.max_relative_error.max(r.max_relative_error);
        total.checked += r.checked;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_style_small_net() {
        // 8×8 input, Conv(2,3×3) → MaxPool → Flatten → Dense(3)
        let spec = NetworkSpec {
            input_shape: InputShape { height: 8, width: 8, channels: 3 },
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 0, activation: Activation::Relu },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3, activation: Activation::Identity },
                LayerSpec::SoftmaxOutput,
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(spec.clone()).unwrap();
        let (params, data) = random_case(&spec, 4, &mut rng).unwrap();
        let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let r = compare(&net, &params, &batch, 1e-5).unwrap();
        assert_eq!(r.checked, 3 * 3 * 3 * 2 + 2 + 18 * 3 + 3);
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn random_layer_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = run_random_trials(12, &mut rng).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-12);
    }
}
