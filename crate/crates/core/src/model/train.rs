use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, Parameters};
use super::{image_tensor, ModelError};
use crate::corpus::{derive_seed, IssueClass};
use crate::imaging::{augment, AugmentSpec, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Online augmentation drawn per image per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentPolicy {
    Off,
    /// Uniform quarter turn, fair-coin flips, zoom uniform in `[1, max_zoom]`.
    Geometric { max_zoom: f64 },
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::Geometric { max_zoom: 1.5 }
    }
}

impl AugmentPolicy {
    fn draw<R: Rng>(&self, rng: &mut R) -> AugmentSpec {
        match *self {
            AugmentPolicy::Off => AugmentSpec::IDENTITY,
            AugmentPolicy::Geometric { max_zoom } => AugmentSpec {
                quarter_turns: rng.random_range(0..4),
                flip_horizontal: rng.random_bool(0.5),
                flip_vertical: rng.random_bool(0.5),
                zoom_factor: if max_zoom > 1.0 { rng.random_range(1.0..=max_zoom) } else { 1.0 },
            },
        }
    }
}

/// One labeled training record. `views[0]` is the whole image; any further
/// views are crops around its ground-truth regions. All views must already
/// match the network input size.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub views: Vec<RasterImage>,
    pub label: IssueClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub history: Vec<EpochStats>,
    /// `(epoch, parameters after that epoch)` for each requested snapshot.
    pub snapshots: Vec<(usize, Parameters<f32>)>,
}

/// Knobs outside the core hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub augment: AugmentPolicy,
    /// Probability of drawing the whole-image view when region views exist.
    pub whole_image_share: f64,
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { augment: AugmentPolicy::default(), whole_image_share: 0.5, snapshot_epochs: Vec::new() }
    }
}

/// Mini-batch gradient descent on mean cross-entropy, `w ← w − lr·g`.
pub fn train(
    network: &Network,
    samples: &[TrainingSample],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome, ModelError> {
    let mut partial = Vec::new();
    train_with_partial(network, samples, config, options, &mut partial)
}

/// Like [`train`], but snapshots taken before a divergence are left in
/// `partial`, so callers can keep the epochs that completed.
pub(crate) fn train_with_partial(
    network: &Network,
    samples: &[TrainingSample],
    config: &TrainConfig,
    options: &TrainOptions,
    snapshots: &mut Vec<(usize, Parameters<f32>)>,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let input_len = network.input_len();
    for (i, s) in samples.iter().enumerate() {
        if s.views.is_empty() {
            return Err(ModelError::InvalidConfig(format!("sample {i} has no views")));
        }
        if let Some(v) = s.views.iter().find(|v| v.len() != input_len) {
            return Err(ModelError::Shape {
                layer: 0,
                reason: format!("sample {i} view holds {} values, network expects {input_len}", v.len()),
            });
        }
    }

    let spec = network.spec();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut params = Parameters::<f32>::he_init(spec, &mut init_rng)?;
    let mut grads = Parameters::<f32>::zeros(spec)?;
    let mut ws = network.workspace::<f32>();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);
    let lr = -(config.learning_rate as f32);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            tensors.resize_with(chunk.len(), Vec::new);
            let mut labels = Vec::with_capacity(chunk.len());
            for (&i, t) in chunk.iter().zip(tensors.iter_mut()) {
                let s = &samples[i];
                let view = if s.views.len() > 1 && !rng.random_bool(options.whole_image_share) {
                    &s.views[rng.random_range(1..s.views.len())]
                } else {
                    &s.views[0]
                };
                let aug = options.augment.draw(&mut rng);
                if aug == AugmentSpec::IDENTITY {
                    image_tensor(view, t);
                } else {
                    let (img, _) = augment(view, &aug, &[])?;
                    image_tensor(&img, t);
                }
                labels.push(s.label.code());
            }
            let batch: Vec<(&[f32], usize)> = tensors.iter().map(Vec::as_slice).zip(labels).collect();
            grads.fill_zero();
            let (loss, hits) = network.accumulate_gradients(&params, &batch, &mut ws, &mut grads)?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: b });
            }
            params.add_scaled(&grads, lr);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        if !params.is_finite() {
            return Err(ModelError::Diverged { epoch, batch: order.len().div_ceil(config.batch_size) - 1 });
        }
        let n = samples.len() as f64;
        history.push(EpochStats { epoch, loss: loss_sum / n, accuracy: correct as f64 / n });
        if options.snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, params.clone()));
        }
    }
    Ok(TrainOutcome { params, history, snapshots: core::mem::take(snapshots) })
}
