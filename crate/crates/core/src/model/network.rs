use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::real::Real;
use super::spec::{Activation, LayerSpec, NetworkSpec, Shape};
use super::ModelError;
use crate::corpus::IssueClass;

/// Weights and bias of one layer; both empty for non-parametric layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// One [`LayerParams`] per layer of the owning [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self, ModelError> {
        let shapes = spec.parameter_shapes()?;
        Ok(Self {
            layers: shapes
                .into_iter()
                .map(|(w, b)| LayerParams { weights: vec![T::ZERO; w], bias: vec![T::ZERO; b] })
                .collect(),
        })
    }

    /// He initialization: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn he_init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self, ModelError> {
        let mut params = Self::zeros(spec)?;
        for (layer, p) in spec.layers.iter().zip(&mut params.layers) {
            let fan_in = match *layer {
                LayerSpec::Conv { .. } | LayerSpec::Dense { .. } if !p.bias.is_empty() => p.weights.len() / p.bias.len(),
                _ => continue,
            };
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("finite std");
            for w in &mut p.weights {
                *w = T::from_f64(normal.sample(rng));
            }
        }
        Ok(params)
    }

    /// [`Self::he_init`] from a ChaCha8 stream seeded with `seed`.
    pub fn he_seeded(spec: &NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        use rand::SeedableRng;
        Self::he_init(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_zero(&mut self) {
        self.values_mut().for_each(|v| *v = T::ZERO);
    }

    /// `self += alpha · other`, element by element.
    pub fn add_scaled(&mut self, other: &Parameters<T>, alpha: T) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weights.iter_mut().zip(&b.weights).chain(a.bias.iter_mut().zip(&b.bias)) {
                *x += alpha * y;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    bias: l.bias.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv(ConvGeometry, Activation),
    Pool(PoolGeometry),
    Flatten,
    Dense(Activation),
    Softmax,
}

/// A validated [`NetworkSpec`] with precomputed layer geometry.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    ops: Vec<Op>,
    sizes: Vec<usize>,
    param_shapes: Vec<(usize, usize)>,
}

/// Scratch buffers reused across forward / backward calls.
#[derive(Debug, Clone, Default)]
pub struct Workspace<T> {
    acts: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    grad_a: Vec<T>,
    grad_b: Vec<T>,
    transpose: Vec<T>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, ModelError> {
        let shapes = spec.shapes()?;
        let param_shapes = spec.parameter_shapes()?;
        let i = spec.input_shape;
        let mut prev = Shape::Spatial { h: i.height, w: i.width, c: i.channels };
        let mut ops = Vec::with_capacity(spec.layers.len());
        for (layer, &shape) in spec.layers.iter().zip(&shapes) {
            let op = match (*layer, prev, shape) {
                (
                    LayerSpec::Conv { kernel, stride, padding, activation, .. },
                    Shape::Spatial { h, w, c },
                    Shape::Spatial { h: oh, w: ow, c: oc },
                ) => Op::Conv(
                    ConvGeometry {
                        in_h: h,
                        in_w: w,
                        in_c: c,
                        out_h: oh,
                        out_w: ow,
                        out_c: oc,
                        kernel,
                        stride,
                        padding,
                    },
                    activation,
                ),
                (LayerSpec::MaxPool { window, stride }, Shape::Spatial { w, c, .. }, Shape::Spatial { h: oh, w: ow, .. }) => {
                    Op::Pool(PoolGeometry { in_w: w, c, out_h: oh, out_w: ow, window, stride })
                }
                (LayerSpec::Flatten, _, _) => Op::Flatten,
                (LayerSpec::Dense { activation, .. }, Shape::Flat(_), _) => Op::Dense(activation),
                (LayerSpec::SoftmaxOutput, _, _) => Op::Softmax,
                _ => unreachable!("shape chain validated above"),
            };
            ops.push(op);
            prev = shape;
        }
        Ok(Self { sizes: shapes.iter().map(Shape::size).collect(), spec, ops, param_shapes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn workspace<T: Real>(&self) -> Workspace<T> {
        let max = self.sizes.iter().copied().chain([self.input_len()]).max().unwrap_or(0);
        Workspace {
            acts: self.sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            argmax: self
                .ops
                .iter()
                .zip(&self.sizes)
                .map(|(op, &n)| if matches!(op, Op::Pool(_)) { vec![0; n] } else { Vec::new() })
                .collect(),
            grad_a: vec![T::ZERO; max],
            grad_b: vec![T::ZERO; max],
            transpose: Vec::new(),
        }
    }

    pub fn check_params<T: Real>(&self, params: &Parameters<T>) -> Result<(), ModelError> {
        if params.layers.len() != self.param_shapes.len() {
            return Err(ModelError::Shape {
                layer: params.layers.len().min(self.param_shapes.len()),
                reason: alloc::format!("{} parameter layers for {} network layers", params.layers.len(), self.param_shapes.len()),
            });
        }
        for (i, (p, &(w, b))) in params.layers.iter().zip(&self.param_shapes).enumerate() {
            if p.weights.len() != w || p.bias.len() != b {
                return Err(ModelError::Shape {
                    layer: i,
                    reason: alloc::format!(
                        "parameters hold {}+{} values, layer needs {w}+{b}",
                        p.weights.len(),
                        p.bias.len()
                    ),
                });
            }
        }
        Ok(())
    }

    fn check_input<T>(&self, input: &[T]) -> Result<(), ModelError> {
        if input.len() != self.input_len() {
            return Err(ModelError::Shape {
                layer: 0,
                reason: alloc::format!("input holds {} values, network expects {}", input.len(), self.input_len()),
            });
        }
        Ok(())
    }

    /// Runs every layer and returns the class probabilities.
    pub fn forward<'w, T: Real>(
        &self,
        params: &Parameters<T>,
        input: &[T],
        ws: &'w mut Workspace<T>,
    ) -> Result<&'w [T], ModelError> {
        self.check_params(params)?;
        self.check_input(input)?;
        if ws.acts.len() != self.ops.len() {
            *ws = self.workspace();
        }
        self.forward_unchecked(params, input, ws);
        Ok(ws.acts.last().map(Vec::as_slice).unwrap_or(&[]))
    }

    fn forward_unchecked<T: Real>(&self, params: &Parameters<T>, input: &[T], ws: &mut Workspace<T>) {
        for (i, op) in self.ops.iter().enumerate() {
            let (before, rest) = ws.acts.split_at_mut(i);
            let x: &[T] = if i == 0 { input } else { &before[i - 1] };
            let out = &mut rest[0];
            let p = &params.layers[i];
            match *op {
                Op::Conv(g, act) => {
                    kernels::conv_forward(&g, x, &p.weights, &p.bias, out);
                    if act == Activation::Relu {
                        kernels::relu_in_place(out);
                    }
                }
                Op::Pool(g) => kernels::pool_forward(&g, x, out, &mut ws.argmax[i]),
                Op::Flatten => out.copy_from_slice(x),
                Op::Dense(activation) => {
                    kernels::dense_forward(x, &p.weights, &p.bias, out);
                    if activation == Activation::Relu {
                        kernels::relu_in_place(out);
                    }
                }
                Op::Softmax => kernels::softmax(x, out),
            }
        }
    }

    /// Back-propagates the cross-entropy of the last forward pass against
    /// `label`, adding `scale ×` the gradient into `grads`.
    fn backward<T: Real>(
        &self,
        params: &Parameters<T>,
        input: &[T],
        label: usize,
        scale: T,
        ws: &mut Workspace<T>,
        grads: &mut Parameters<T>,
    ) {
        let n = self.ops.len();
        let Workspace { acts, argmax, grad_a, grad_b, transpose } = ws;
        // gradient w.r.t. the output of the current layer lives in `cur`
        let (mut cur, mut next) = (grad_a, grad_b);
        for i in (0..n).rev() {
            let x: &[T] = if i == 0 { input } else { &acts[i - 1] };
            let in_len = x.len();
            let out_len = self.sizes[i];
            let need_dx = i > 0;
            let g = &mut grads.layers[i];
            let p = &params.layers[i];
            match self.ops[i] {
                Op::Softmax => {
                    // combined softmax + cross-entropy: dlogits = p − onehot
                    let probs = &acts[i];
                    for (k, d) in next[..in_len].iter_mut().enumerate() {
                        let target = if k == label { T::ONE } else { T::ZERO };
                        *d = (probs[k] - target) * scale;
                    }
                }
                Op::Dense(activation) => {
                    if activation == Activation::Relu {
                        kernels::relu_mask(&acts[i], &mut cur[..out_len]);
                    }
                    let dx = need_dx.then(|| &mut next[..in_len]);
                    kernels::dense_backward(x, &p.weights, &cur[..out_len], &mut g.weights, &mut g.bias, dx);
                }
                Op::Conv(geom, activation) => {
                    if activation == Activation::Relu {
                        kernels::relu_mask(&acts[i], &mut cur[..out_len]);
                    }
                    let dx = need_dx.then(|| &mut next[..in_len]);
                    kernels::conv_backward(&geom, x, &p.weights, &cur[..out_len], &mut g.weights, &mut g.bias, dx, transpose);
                }
                Op::Pool(_) => kernels::pool_backward(&cur[..out_len], &argmax[i], &mut next[..in_len]),
                Op::Flatten => next[..in_len].copy_from_slice(&cur[..out_len]),
            }
            core::mem::swap(&mut cur, &mut next);
        }
    }

    /// Mean categorical cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_gradients<T: Real>(
        &self,
        params: &Parameters<T>,
        batch: &[(&[T], usize)],
    ) -> Result<(f64, Parameters<T>), ModelError> {
        let mut grads = Parameters::zeros(&self.spec)?;
        let mut ws = self.workspace();
        let (loss, _) = self.accumulate_gradients(params, batch, &mut ws, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds the mean-loss gradient of `batch` into `grads` and returns the
    /// mean loss with the number of samples whose argmax was the label.
    /// `grads` is not cleared first.
    pub fn accumulate_gradients<T: Real>(
        &self,
        params: &Parameters<T>,
        batch: &[(&[T], usize)],
        ws: &mut Workspace<T>,
        grads: &mut Parameters<T>,
    ) -> Result<(f64, usize), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        self.check_params(params)?;
        if ws.acts.len() != self.ops.len() {
            *ws = self.workspace();
        }
        let scale = T::from_f64(1.0 / batch.len() as f64);
        let mut loss = 0.0;
        let mut hits = 0;
        for &(input, label) in batch {
            if label >= IssueClass::COUNT {
                return Err(ModelError::InvalidLabel(label));
            }
            self.check_input(input)?;
            self.forward_unchecked(params, input, ws);
            let probs = ws.acts.last().expect("non-empty network");
            if argmax(probs) == label {
                hits += 1;
            }
            loss -= libm::log(probs[label].to_f64());
            self.backward(params, input, label, scale, ws, grads);
        }
        Ok((loss / batch.len() as f64, hits))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::{random_case, random_small_spec};
    use crate::model::spec::InputShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_uniform_output() {
        let spec = NetworkSpec::reference();
        let net = Network::new(spec.clone()).unwrap();
        let params = Parameters::<f64>::zeros(&spec).unwrap();
        let input = vec![0.7; spec.input_len()];
        let mut ws = net.workspace();
        let p = net.forward(&params, &input, &mut ws).unwrap();
        assert_eq!(p, &[1.0 / 3.0; 3]);
        let (loss, _) = net.loss_and_gradients(&params, &[(&input, 0)]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_impulse_is_correlation() {
        let spec = NetworkSpec {
            input_shape: InputShape { height: 5, width: 5, channels: 1 },
            layers: vec![
                LayerSpec::Conv { out_channels: 1, kernel: 3, stride: 1, padding: 1, activation: Activation::Identity },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3, activation: Activation::Identity },
                LayerSpec::SoftmaxOutput,
            ],
        };
        let net = Network::new(spec.clone()).unwrap();
        let mut params = Parameters::<f64>::zeros(&spec).unwrap();
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        params.layers[0].weights = kernel.clone();
        let mut input = vec![0.0; 25];
        input[2 * 5 + 2] = 1.0;
        let mut ws = net.workspace();
        net.forward(&params, &input, &mut ws).unwrap();
        let map = &ws.acts[0];
        // sliding-window oracle
        for oy in 0..5usize {
            for ox in 0..5usize {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let (iy, ix) = (oy + ky, ox + kx);
                        if (1..6).contains(&iy) && (1..6).contains(&ix) {
                            acc += kernel[ky * 3 + kx] * input[(iy - 1) * 5 + ix - 1];
                        }
                    }
                }
                assert_eq!(map[oy * 5 + ox], acc);
            }
        }
        // correlation leaves the kernel rotated half a turn around the impulse
        assert_eq!(map[5 + 1], 9.0);
        assert_eq!(map[3 * 5 + 3], 1.0);
        assert_eq!(map[5 + 3], 7.0);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let net = Network::new(NetworkSpec::reference()).unwrap();
        let params = Parameters::<f32>::zeros(net.spec()).unwrap();
        let mut ws = net.workspace();
        let err = net.forward(&params, &[0.0; 10], &mut ws).unwrap_err();
        assert!(matches!(err, ModelError::Shape { layer: 0, .. }));
        let mut short = params.clone();
        short.layers[5].bias.pop();
        let input = vec![0.0; net.input_len()];
        assert!(matches!(net.forward(&short, &input, &mut ws), Err(ModelError::Shape { layer: 5, .. })));
    }

    #[test]
    fn invalid_label_and_empty_batch() {
        let net = Network::new(NetworkSpec::reference_with_input(16)).unwrap();
        let params = Parameters::<f64>::zeros(net.spec()).unwrap();
        let x = vec![0.1; net.input_len()];
        assert_eq!(net.loss_and_gradients(&params, &[(&x, 3)]).unwrap_err(), ModelError::InvalidLabel(3));
        assert_eq!(net.loss_and_gradients(&params, &[]).unwrap_err(), ModelError::EmptyDataset);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_small_spec(&mut rng);
        let net = Network::new(spec.clone()).unwrap();
        let (params, data) = random_case(&spec, 3, &mut rng).unwrap();
        let once: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let twice: Vec<(&[f64], usize)> = once.iter().chain(&once).copied().collect();
        let (l1, g1) = net.loss_and_gradients(&params, &once).unwrap();
        let (l2, g2) = net.loss_and_gradients(&params, &twice).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn he_init_scale() {
        let spec = NetworkSpec::reference();
        let p = Parameters::<f64>::he_init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dense = &p.layers[5].weights;
        let var = dense.iter().map(|w| w * w).sum::<f64>() / dense.len() as f64;
        assert!((var - 2.0 / 3136.0).abs() < 0.1 * 2.0 / 3136.0, "{var}");
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_is_a_distribution(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_small_spec(&mut rng);
            let net = Network::new(spec.clone()).unwrap();
            let (mut params, data) = random_case(&spec, 1, &mut rng).unwrap();
            params.values_mut().for_each(|v| *v *= 4.0);
            let mut ws = net.workspace();
            let p = net.forward(&params, &data[0].0, &mut ws).unwrap();
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            proptest::prop_assert!(p.iter().all(|&v| v > 0.0));
            let shapes = spec.shapes().unwrap();
            for (act, shape) in ws.acts.iter().zip(&shapes) {
                proptest::prop_assert_eq!(act.len(), shape.size());
            }
        }
    }
}
