//! Turning standardized scenes into network inputs.
//!
//! Training samples keep their views in the byte domain to bound memory;
//! [`super::image_tensor`] rescales them when a batch is assembled.

use alloc::vec::Vec;

use super::network::Network;
use super::predict::{prepare_case, PreparedCase, ROI_CONTEXT};
use super::train::TrainingSample;
use super::ModelError;
use crate::corpus::{GroundTruthRegion, IssueClass};
use crate::imaging::{context_window, resize_to_standard, RasterImage};
use crate::regions::{propose_regions, ProposerSettings};

/// Whole image plus one context crop per ground-truth region, each resized
/// to the network's square input.
pub fn training_sample(
    network: &Network,
    img: &RasterImage,
    regions: &[GroundTruthRegion],
    label: IssueClass,
) -> Result<TrainingSample, ModelError> {
    let side = square_side(network)?;
    let mut views = Vec::with_capacity(regions.len() + 1);
    views.push(resize_to_standard(img, side)?.to_bytes());
    for r in regions {
        let window = context_window(r.bbox, img.width(), img.height(), ROI_CONTEXT);
        views.push(resize_to_standard(&img.crop(window)?, side)?.to_bytes());
    }
    Ok(TrainingSample { views, label })
}

/// Proposals on `img` followed by [`prepare_case`]; what the service does
/// for a submission, minus the preprocessing.
pub fn evaluation_case(
    network: &Network,
    img: &RasterImage,
    settings: &ProposerSettings,
) -> Result<PreparedCase<f32>, ModelError> {
    let proposals = propose_regions(img, settings).map_err(|e| ModelError::InvalidConfig(alloc::format!("{e}")))?;
    prepare_case(network, img, &proposals)
}

fn square_side(network: &Network) -> Result<usize, ModelError> {
    let s = network.spec().input_shape;
    if s.height != s.width {
        return Err(ModelError::InvalidSpec("views need a square input".into()));
    }
    Ok(s.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_scene, Clutter, Lighting, SceneConditions, Season, Weather};
    use crate::imaging::{preprocess, DEFAULT_BLUR_SIGMA};
    use crate::model::NetworkSpec;

    #[test]
    fn one_view_per_region_plus_whole() {
        let net = Network::new(NetworkSpec::reference()).unwrap();
        let cond = SceneConditions {
            lighting: Lighting::Daylight,
            weather: Weather::Clear,
            clutter: Clutter::Simple,
            season: Season::Summer,
        };
        let (raw, truth) = render_scene(IssueClass::WasteDisposal, cond, 256, 4).unwrap();
        let img = preprocess(&raw, 256, DEFAULT_BLUR_SIGMA).unwrap();
        let s = training_sample(&net, &img, &truth, IssueClass::WasteDisposal).unwrap();
        assert_eq!(s.views.len(), truth.len() + 1);
        assert!(s.views.iter().all(|v| v.width() == 64 && v.height() == 64 && v.bytes().is_some()));
        let case = evaluation_case(&net, &img, &ProposerSettings::default()).unwrap();
        assert_eq!(case.whole.len(), 64 * 64 * 3);
    }
}
