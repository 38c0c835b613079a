//! Region proposals: a deterministic saliency / connected-components stage
//! that turns a standardized image into scored candidate boxes.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{RasterImage, ValueDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 > x0 && y1 > y0 {
            (x1 - x0) * (y1 - y0)
        } else {
            0
        }
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = (self.x + self.w).max(other.x + other.w);
        let y1 = (self.y + self.h).max(other.y + other.h);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Intersection over union; zero for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposerSettings {
    pub saliency_threshold: f64,
    /// Side of the box filter estimating the local background.
    pub background_window: usize,
    pub min_area: usize,
    /// Largest accepted box, as a fraction of the image area.
    pub max_area_fraction: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
    /// Drop components whose box lies inside another component's box. Such
    /// components are usually parts of one object (a windshield inside a
    /// vehicle outline) and would otherwise out-score and suppress it.
    pub drop_nested: bool,
    /// Side the input must have been standardized to; `None` accepts any square.
    pub expected_size: Option<usize>,
}

impl Default for ProposerSettings {
    fn default() -> Self {
        Self {
            saliency_threshold: 0.12,
            background_window: 33,
            min_area: 64,
            max_area_fraction: 0.40,
            nms_iou: 0.3,
            max_proposals: 16,
            drop_nested: true,
            expected_size: Some(crate::imaging::STANDARD_SIZE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProposalError {
    #[error("proposals need a standardized unit-domain image: {0}")]
    Precondition(&'static str),
    #[error("invalid proposer setting `{0}`")]
    InvalidSetting(&'static str),
}

/// |luminance − local box-filtered mean|, with the box clipped at borders.
pub fn saliency_map(img: &RasterImage, window: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let lum = img.luminance();
    let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += lum[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = window / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
            out[y * w + x] = (lum[y * w + x] - mean).abs();
        }
    }
    out
}

/// Bounding boxes of the 4-connected components of `mask`, in raster order
/// of each component's first pixel.
pub fn connected_components(mask: &[bool], w: usize, h: usize) -> Vec<BoundingBox> {
    let mut seen = vec![false; mask.len()];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        boxes.push(BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
    }
    boxes
}

fn proposal_order(a: &RegionProposal, b: &RegionProposal) -> Ordering {
    b.objectness
        .partial_cmp(&a.objectness)
        .unwrap_or(Ordering::Equal)
        .then(a.bbox.x.cmp(&b.bbox.x))
        .then(a.bbox.y.cmp(&b.bbox.y))
        .then(a.bbox.w.cmp(&b.bbox.w))
        .then(a.bbox.h.cmp(&b.bbox.h))
}

/// Greedy suppression: keep the best remaining proposal, drop every other
/// with IoU above `iou_threshold` against it, repeat. Output is sorted by
/// objectness descending, ties by smaller x then y.
pub fn non_max_suppress(proposals: &[RegionProposal], iou_threshold: f64) -> Vec<RegionProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(proposal_order);
    let mut kept: Vec<RegionProposal> = Vec::new();
    for p in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Shrinks `b` to the pixels that differ from the mean luminance of a
/// thin ring just outside it. The box filter smears a dark or bright blob
/// into a halo of background pixels; the ring sees only background, so the
/// halo falls away here.
fn tighten(lum: &[f64], w: usize, h: usize, b: BoundingBox, threshold: f64) -> Option<BoundingBox> {
    const RING: usize = 3;
    let (rx0, ry0) = (b.x.saturating_sub(RING), b.y.saturating_sub(RING));
    let (rx1, ry1) = ((b.x + b.w + RING).min(w), (b.y + b.h + RING).min(h));
    let (mut sum, mut n) = (0.0, 0usize);
    for y in ry0..ry1 {
        for x in rx0..rx1 {
            let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
            if !inside {
                sum += lum[y * w + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Some(b);
    }
    let ring = sum / n as f64;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            if (lum[y * w + x] - ring).abs() > threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// `outer` contains `inner`; identical boxes count only when `outer` comes
/// first, so one of a duplicate pair survives.
fn encloses(outer: &BoundingBox, inner: &BoundingBox, outer_first: bool) -> bool {
    let contains = outer.x <= inner.x
        && outer.y <= inner.y
        && outer.x + outer.w >= inner.x + inner.w
        && outer.y + outer.h >= inner.y + inner.h;
    contains && (outer != inner || outer_first)
}

/// Saliency → threshold → 4-connected components → box tightening →
/// area filter → nested-box removal → objectness → suppression → top `max_proposals`.
pub fn propose_regions(img: &RasterImage, settings: &ProposerSettings) -> Result<Vec<RegionProposal>, ProposalError> {
    if img.domain() != ValueDomain::Unit {
        return Err(ProposalError::Precondition("image is not in the unit domain"));
    }
    if !img.is_square() {
        return Err(ProposalError::Precondition("image is not square"));
    }
    if let Some(size) = settings.expected_size {
        if img.width() != size {
            return Err(ProposalError::Precondition("image is not at the standard size"));
        }
    }
    if settings.background_window == 0 {
        return Err(ProposalError::InvalidSetting("background_window"));
    }
    if !(0.0..=1.0).contains(&settings.nms_iou) {
        return Err(ProposalError::InvalidSetting("nms_iou"));
    }
    let (w, h) = (img.width(), img.height());
    let lum = img.luminance();
    let saliency = saliency_map(img, settings.background_window);
    let mask: Vec<bool> = saliency.iter().map(|&s| s > settings.saliency_threshold).collect();
    let max_area = settings.max_area_fraction * (w * h) as f64;

    let boxes: Vec<BoundingBox> = connected_components(&mask, w, h)
        .into_iter()
        .filter_map(|b| tighten(&lum, w, h, b, settings.saliency_threshold))
        .filter(|b| b.area() >= settings.min_area && (b.area() as f64) <= max_area)
        .collect();
    let candidates: Vec<RegionProposal> = boxes
        .iter()
        .enumerate()
        .filter(|&(i, b)| !settings.drop_nested || !boxes.iter().enumerate().any(|(j, o)| j != i && encloses(o, b, j < i)))
        .map(|(_, &b)| {
            let mut sum = 0.0;
            for y in b.y..b.y + b.h {
                sum += saliency[y * w + b.x..y * w + b.x + b.w].iter().sum::<f64>();
            }
            RegionProposal { bbox: b, objectness: (sum / b.area() as f64).clamp(0.0, 1.0) }
        })
        .collect();

    let mut kept = non_max_suppress(&candidates, settings.nms_iou);
    kept.truncate(settings.max_proposals);
    Ok(kept)
}
