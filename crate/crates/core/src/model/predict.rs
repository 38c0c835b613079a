use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::network::{argmax, Network, Parameters, Workspace};
use super::{image_tensor, ModelError, Real};
use crate::corpus::IssueClass;
use crate::imaging::{context_window, resize_to_standard, ImagingError, RasterImage};
use crate::regions::RegionProposal;

/// Side of the square ROI crop relative to the proposal's longer side.
pub const ROI_CONTEXT: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: IssueClass,
    /// Largest class probability.
    pub confidence: f64,
    pub probabilities: [f64; 3],
}

impl Prediction {
    /// Renormalizes `probs` and takes the argmax, lowest index on ties.
    pub fn from_probabilities(probs: [f64; 3]) -> Self {
        let sum: f64 = probs.iter().sum();
        let probabilities = if sum > 0.0 && sum.is_finite() { probs.map(|p| p / sum) } else { [1.0 / 3.0; 3] };
        let best = argmax(&probabilities);
        Prediction {
            class: IssueClass::from_code(best).expect("three classes"),
            confidence: probabilities[best],
            probabilities,
        }
    }
}

/// Network-ready tensors for one case: the whole image plus one crop per
/// proposal with its objectness.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase<T> {
    pub whole: Vec<T>,
    pub rois: Vec<(Vec<T>, f64)>,
}

/// Crops and resizes every proposal (with [`ROI_CONTEXT`] surrounding
/// context) and the whole image to the network input size.
pub fn prepare_case<T: Real>(
    network: &Network,
    img: &RasterImage,
    proposals: &[RegionProposal],
) -> Result<PreparedCase<T>, ModelError> {
    let input = network.spec().input_shape;
    if img.channels() != input.channels {
        return Err(ModelError::Shape {
            layer: 0,
            reason: alloc::format!("image has {} channels, network expects {}", img.channels(), input.channels),
        });
    }
    if input.height != input.width {
        return Err(ModelError::InvalidSpec("case prediction needs a square input".into()));
    }
    let side = input.width;
    let mut whole = Vec::new();
    image_tensor(&resize_to_standard(img, side)?, &mut whole);
    let mut rois = Vec::with_capacity(proposals.len());
    for p in proposals {
        if !p.bbox.fits_within(img.width(), img.height()) {
            return Err(ImagingError::InvalidParameter { name: "proposal", reason: "box outside image" }.into());
        }
        let window = context_window(p.bbox, img.width(), img.height(), ROI_CONTEXT);
        let mut t = Vec::new();
        image_tensor(&resize_to_standard(&img.crop(window)?, side)?, &mut t);
        rois.push((t, p.objectness));
    }
    Ok(PreparedCase { whole, rois })
}

fn probabilities<T: Real>(
    network: &Network,
    params: &Parameters<T>,
    input: &[T],
    ws: &mut Workspace<T>,
) -> Result<[f64; 3], ModelError> {
    let p = network.forward(params, input, ws)?;
    Ok([p[0].to_f64(), p[1].to_f64(), p[2].to_f64()])
}

/// Whole-image prediction when there are no ROIs, otherwise the
/// objectness-weighted mean of the ROI probability vectors. Non-positive
/// total objectness falls back to equal weights.
pub fn predict_prepared<T: Real>(
    network: &Network,
    params: &Parameters<T>,
    case: &PreparedCase<T>,
    ws: &mut Workspace<T>,
) -> Result<Prediction, ModelError> {
    if case.rois.is_empty() {
        return Ok(Prediction::from_probabilities(probabilities(network, params, &case.whole, ws)?));
    }
    let mut terms = Vec::with_capacity(case.rois.len());
    for (t, w) in &case.rois {
        terms.push((*w, probabilities(network, params, t, ws)?));
    }
    // fixed summation order keeps the result independent of proposal order
    terms.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
            .then(a.1[2].total_cmp(&b.1[2]))
    });
    let total: f64 = terms.iter().map(|t| t.0).sum();
    let equal = !(total > 0.0 && total.is_finite());
    let mut acc = [0.0; 3];
    for (w, p) in &terms {
        let w = if equal { 1.0 } else { *w };
        for k in 0..3 {
            acc[k] += w * p[k];
        }
    }
    let norm = if equal { terms.len() as f64 } else { total };
    Ok(Prediction::from_probabilities(acc.map(|v| v / norm)))
}

pub fn predict_case<T: Real>(
    network: &Network,
    params: &Parameters<T>,
    img: &RasterImage,
    proposals: &[RegionProposal],
) -> Result<Prediction, ModelError> {
    let case = prepare_case(network, img, proposals)?;
    let mut ws = network.workspace();
    predict_prepared(network, params, &case, &mut ws)
}
