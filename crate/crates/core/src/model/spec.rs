use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::corpus::IssueClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize, activation: Activation },
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense { units: usize, activation: Activation },
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Height × width × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Conv(8,3×3)/relu → MaxPool(2) → Conv(16,3×3)/relu → MaxPool(2) →
    /// Flatten → Dense(32)/relu → Dense(3) → softmax over 64×64×3 input.
    /// Convolutions are unpadded.
    pub fn reference() -> Self {
        Self::reference_with_input(64)
    }

    pub fn reference_with_input(side: usize) -> Self {
        use Activation::*;
        Self {
            input_shape: InputShape { height: side, width: side, channels: 3 },
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 0, activation: Relu },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 0, activation: Relu },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 32, activation: Relu },
                LayerSpec::Dense { units: IssueClass::COUNT, activation: Identity },
                LayerSpec::SoftmaxOutput,
            ],
        }
    }

    /// Output shape of every layer, validating the chain along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>, ModelError> {
        let i = self.input_shape;
        if i.height == 0 || i.width == 0 || i.channels == 0 {
            return Err(ModelError::InvalidSpec("input shape has a zero dimension".into()));
        }
        let mut shape = Shape::Spatial { h: i.height, w: i.width, c: i.channels };
        let mut out = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            let err = |reason: alloc::string::String| ModelError::Shape { layer: idx, reason };
            shape = match (*layer, shape) {
                (LayerSpec::Conv { out_channels, kernel, stride, padding, .. }, Shape::Spatial { h, w, .. }) => {
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(err(format!("kernel {kernel} is not odd")));
                    }
                    if stride == 0 || out_channels == 0 {
                        return Err(err("stride and out_channels must be at least 1".into()));
                    }
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(err(format!("kernel {kernel} exceeds padded input {ph}x{pw}")));
                    }
                    Shape::Spatial { h: (ph - kernel) / stride + 1, w: (pw - kernel) / stride + 1, c: out_channels }
                }
                (LayerSpec::MaxPool { window, stride }, Shape::Spatial { h, w, c }) => {
                    if window == 0 || stride == 0 {
                        return Err(err("pool window and stride must be at least 1".into()));
                    }
                    if h < window || w < window {
                        return Err(err(format!("pool window {window} exceeds input {h}x{w}")));
                    }
                    Shape::Spatial { h: (h - window) / stride + 1, w: (w - window) / stride + 1, c }
                }
                (LayerSpec::Flatten, s) => Shape::Flat(s.size()),
                (LayerSpec::Dense { units, .. }, Shape::Flat(_)) => {
                    if units == 0 {
                        return Err(err("dense layer needs at least one unit".into()));
                    }
                    Shape::Flat(units)
                }
                (LayerSpec::SoftmaxOutput, Shape::Flat(k)) => {
                    if idx + 1 != n {
                        return Err(err("softmax output must be the last layer".into()));
                    }
                    if k != IssueClass::COUNT {
                        return Err(err(format!("softmax over {k} values, expected {}", IssueClass::COUNT)));
                    }
                    Shape::Flat(k)
                }
                (LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput, Shape::Spatial { .. }) => {
                    return Err(err("expects a flat input; add a flatten layer".into()))
                }
                (LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }, Shape::Flat(_)) => {
                    return Err(err("expects a spatial input".into()))
                }
            };
            out.push(shape);
        }
        if !matches!(self.layers.last(), Some(LayerSpec::SoftmaxOutput)) {
            return Err(ModelError::InvalidSpec("network must end in a softmax output".into()));
        }
        Ok(out)
    }

    pub fn input_len(&self) -> usize {
        let i = self.input_shape;
        i.height * i.width * i.channels
    }

    /// (weights, bias) lengths of every layer; zero for non-parametric ones.
    pub fn parameter_shapes(&self) -> Result<Vec<(usize, usize)>, ModelError> {
        let shapes = self.shapes()?;
        let i = self.input_shape;
        let mut prev = Shape::Spatial { h: i.height, w: i.width, c: i.channels };
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            out.push(match (*layer, prev) {
                (LayerSpec::Conv { out_channels, kernel, .. }, Shape::Spatial { c, .. }) => {
                    (kernel * kernel * c * out_channels, out_channels)
                }
                (LayerSpec::Dense { units, .. }, Shape::Flat(n)) => (units * n, units),
                _ => (0, 0),
            });
            prev = *shape;
        }
        Ok(out)
    }
}
