//! Raster preprocessing: standardization, normalization, Gaussian de-noising,
//! label-preserving augmentation and the five-number pixel encoding.
//!
//! Pixels are row-major and channel-interleaved. A raster is either in the
//! byte domain (integers 0..=255) or the unit domain (reals in [0, 1]); every
//! operation states which domain it accepts and preserves.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundTruthRegion;
use crate::regions::BoundingBox;

/// Side length every submission is standardized to before proposals.
pub const STANDARD_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    InvalidImage(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: &'static str },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(&'static str),
    #[error("operation requires {expected:?} values, image holds {found:?}")]
    DomainMismatch { expected: ValueDomain, found: ValueDomain },
}

pub type Result<T> = core::result::Result<T, ImagingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// Integers in 0..=255.
    Byte,
    /// Reals in [0, 1].
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
enum Pixels {
    Byte(Vec<u8>),
    Unit(Vec<f64>),
}

/// A pixel raster with a declared value domain.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Pixels,
}

fn check_shape(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(ImagingError::InvalidImage("zero dimension"));
    }
    if channels != 1 && channels != 3 {
        return Err(ImagingError::InvalidImage("channel count must be 1 or 3"));
    }
    if width * height * channels != len {
        return Err(ImagingError::InvalidImage("pixel count does not match dimensions"));
    }
    Ok(())
}

impl RasterImage {
    pub fn from_bytes(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_shape(width, height, channels, data.len())?;
        Ok(Self { width, height, channels, pixels: Pixels::Byte(data) })
    }

    pub fn from_units(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, channels, data.len())?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImagingError::InvalidImage("unit-domain value outside [0, 1]"));
        }
        Ok(Self { width, height, channels, pixels: Pixels::Unit(data) })
    }

    /// A unit-domain image filled with one value per channel.
    pub fn filled(width: usize, height: usize, color: &[f64]) -> Result<Self> {
        let channels = color.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Self::from_units(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain(&self) -> ValueDomain {
        match self.pixels {
            Pixels::Byte(_) => ValueDomain::Byte,
            Pixels::Unit(_) => ValueDomain::Unit,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Byte(b) => Some(b),
            Pixels::Unit(_) => None,
        }
    }

    pub fn units(&self) -> Option<&[f64]> {
        match &self.pixels {
            Pixels::Unit(u) => Some(u),
            Pixels::Byte(_) => None,
        }
    }

    pub fn into_units(self) -> Option<Vec<f64>> {
        match self.pixels {
            Pixels::Unit(u) => Some(u),
            Pixels::Byte(_) => None,
        }
    }

    /// Raw value at flat index `i`, in the image's own domain.
    pub fn value(&self, i: usize) -> f64 {
        match &self.pixels {
            Pixels::Byte(b) => f64::from(b[i]),
            Pixels::Unit(u) => u[i],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.value((y * self.width + x) * self.channels + c)
    }

    /// Values in the image's own domain, widened to `f64`.
    pub fn values(&self) -> Vec<f64> {
        match &self.pixels {
            Pixels::Byte(b) => b.iter().map(|&v| f64::from(v)).collect(),
            Pixels::Unit(u) => u.clone(),
        }
    }

    /// Arithmetic mean over every stored value.
    pub fn mean(&self) -> f64 {
        let n = self.len() as f64;
        match &self.pixels {
            Pixels::Byte(b) => b.iter().map(|&v| f64::from(v)).sum::<f64>() / n,
            Pixels::Unit(u) => u.iter().sum::<f64>() / n,
        }
    }

    /// Rebuilds an image in this image's domain from real values, rounding
    /// and clamping when the domain is bytes.
    fn with_values(&self, width: usize, height: usize, values: Vec<f64>) -> RasterImage {
        let pixels = match self.pixels {
            Pixels::Byte(_) => Pixels::Byte(values.iter().map(|&v| quantize(v)).collect()),
            Pixels::Unit(_) => Pixels::Unit(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()),
        };
        RasterImage { width, height, channels: self.channels, pixels }
    }

    /// Pure index remap shared by rotations, flips and crops; never touches values.
    fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> RasterImage {
        let c = self.channels;
        let sw = self.width;
        fn gather<T: Copy>(
            data: &[T],
            w: usize,
            h: usize,
            c: usize,
            sw: usize,
            src: &impl Fn(usize, usize) -> (usize, usize),
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(w * h * c);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = src(x, y);
                    let base = (sy * sw + sx) * c;
                    out.extend_from_slice(&data[base..base + c]);
                }
            }
            out
        }
        let pixels = match &self.pixels {
            Pixels::Byte(b) => Pixels::Byte(gather(b, width, height, c, sw, &src)),
            Pixels::Unit(u) => Pixels::Unit(gather(u, width, height, c, sw, &src)),
        };
        RasterImage { width, height, channels: c, pixels }
    }

    /// Quarter turns followed by the requested flips, in one pass.
    fn orient(&self, quarter_turns: u8, flip_h: bool, flip_v: bool) -> RasterImage {
        let (w, h) = (self.width, self.height);
        let (ow, oh) = if quarter_turns % 2 == 1 { (h, w) } else { (w, h) };
        self.remap(ow, oh, |x, y| {
            let x = if flip_h { ow - 1 - x } else { x };
            let y = if flip_v { oh - 1 - y } else { y };
            match quarter_turns % 4 {
                0 => (x, y),
                1 => (y, h - 1 - x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (w - 1 - y, x),
            }
        })
    }

    /// Sub-rectangle copy. The rectangle must lie inside the image.
    pub fn crop(&self, bbox: BoundingBox) -> Result<RasterImage> {
        if bbox.w == 0 || bbox.h == 0 {
            return Err(ImagingError::InvalidParameter { name: "bbox", reason: "empty crop" });
        }
        if bbox.x + bbox.w > self.width || bbox.y + bbox.h > self.height {
            return Err(ImagingError::InvalidParameter { name: "bbox", reason: "crop outside image" });
        }
        Ok(self.remap(bbox.w, bbox.h, |x, y| (bbox.x + x, bbox.y + y)))
    }

    /// Rotates clockwise by `quarter_turns` × 90°.
    pub fn rotate_quarter_turns(&self, quarter_turns: u8) -> RasterImage {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            // dst (x, y) <- src (y, h-1-x) for a clockwise turn
            1 => self.remap(h, w, |x, y| (y, h - 1 - x)),
            2 => self.remap(w, h, |x, y| (w - 1 - x, h - 1 - y)),
            _ => self.remap(h, w, |x, y| (w - 1 - y, x)),
        }
    }

    pub fn flip_horizontal(&self) -> RasterImage {
        let w = self.width;
        self.remap(w, self.height, |x, y| (w - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> RasterImage {
        let h = self.height;
        self.remap(self.width, h, |x, y| (x, h - 1 - y))
    }

    /// Byte-domain copy; unit values map to `round(255 v)`.
    pub fn to_bytes(&self) -> RasterImage {
        match &self.pixels {
            Pixels::Byte(_) => self.clone(),
            Pixels::Unit(u) => RasterImage {
                width: self.width,
                height: self.height,
                channels: self.channels,
                pixels: Pixels::Byte(u.iter().map(|&v| quantize(v * 255.0)).collect()),
            },
        }
    }

    /// Luminance (Rec. 601 weights) as a single-channel unit-domain plane.
    pub fn luminance(&self) -> Vec<f64> {
        let scale = match self.domain() {
            ValueDomain::Byte => 1.0 / 255.0,
            ValueDomain::Unit => 1.0,
        };
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n);
        for p in 0..n {
            let v = if self.channels == 3 {
                let b = p * 3;
                0.299 * self.value(b) + 0.587 * self.value(b + 1) + 0.114 * self.value(b + 2)
            } else {
                self.value(p)
            };
            out.push(v * scale);
        }
        out
    }

    /// Replicates a grayscale raster into three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let pixels = match &self.pixels {
            Pixels::Byte(b) => Pixels::Byte(b.iter().flat_map(|&v| [v, v, v]).collect()),
            Pixels::Unit(u) => Pixels::Unit(u.iter().flat_map(|&v| [v, v, v]).collect()),
        };
        RasterImage { width: w, height: h, channels: 3, pixels }
    }
}

fn quantize(v: f64) -> u8 {
    // round-half-up then clamp; NaN maps to 0. The cast truncates, which
    // is floor for the positive values that reach it.
    let r = v + 0.5;
    if r >= 255.0 {
        255
    } else if r > 0.0 {
        r as u8
    } else {
        0
    }
}

/// Bilinear resample of a whole image to `out_w` × `out_h` using pixel-center
/// alignment (`src = (dst + 0.5) · scale − 0.5`), clamped at the borders.
fn bilinear(img: &RasterImage, out_w: usize, out_h: usize) -> RasterImage {
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let c = img.channels;
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, sx, img.width)).collect();
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, sy, img.height)).collect();
    fn sample<T: Copy + Into<f64>>(
        data: &[T],
        w: usize,
        c: usize,
        cols: &[(usize, usize, f64)],
        rows: &[(usize, usize, f64)],
        out: &mut [f64],
    ) {
        let stride = w * c;
        let out_w = cols.len();
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            let (r0, r1) = (&data[y0 * stride..][..stride], &data[y1 * stride..][..stride]);
            let line = &mut out[y * out_w * c..][..out_w * c];
            for (&(x0, x1, fx), px) in cols.iter().zip(line.chunks_exact_mut(c)) {
                let (a, b) = (&r0[x0 * c..][..c], &r0[x1 * c..][..c]);
                let (d, e) = (&r1[x0 * c..][..c], &r1[x1 * c..][..c]);
                for ch in 0..c {
                    let (p00, p10, p01, p11) = (a[ch].into(), b[ch].into(), d[ch].into(), e[ch].into());
                    let top = p00 + (p10 - p00) * fx;
                    let bottom = p01 + (p11 - p01) * fx;
                    px[ch] = top + (bottom - top) * fy;
                }
            }
        }
    }
    let mut out = vec![0.0; out_w * out_h * c];
    match &img.pixels {
        Pixels::Byte(b) => sample(b, img.width, c, &cols, &rows, &mut out),
        Pixels::Unit(u) => sample(u, img.width, c, &cols, &rows, &mut out),
    }
    img.with_values(out_w, out_h, out)
}

/// Center-crops to the largest centered square, then bilinearly resamples to
/// `target` × `target`. The value domain is preserved.
pub fn resize_to_standard(img: &RasterImage, target: usize) -> Result<RasterImage> {
    if img.width == 0 || img.height == 0 {
        return Err(ImagingError::InvalidImage("zero dimension"));
    }
    if target == 0 {
        return Err(ImagingError::InvalidParameter { name: "target", reason: "must be at least 1" });
    }
    let side = img.width.min(img.height);
    let square = if img.width == img.height {
        img.clone()
    } else {
        let x0 = (img.width - side) / 2;
        let y0 = (img.height - side) / 2;
        img.crop(BoundingBox::new(x0, y0, side, side))?
    };
    Ok(bilinear(&square, target, target))
}

/// Maps a byte image to the unit domain (`v / 255`). Unit input is returned
/// unchanged with a warning.
pub fn normalize(img: &RasterImage) -> RasterImage {
    match &img.pixels {
        Pixels::Byte(b) => RasterImage {
            width: img.width,
            height: img.height,
            channels: img.channels,
            pixels: Pixels::Unit(b.iter().map(|&v| f64::from(v) / 255.0).collect()),
        },
        Pixels::Unit(_) => {
            log::warn!("normalize called on an image already in the unit domain; returning it unchanged");
            img.clone()
        }
    }
}

/// Default de-noising strength of the intake pipeline.
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;

/// The intake chain: standardize to `size`, normalize to the unit domain,
/// then blur (skipped when `sigma` is zero).
pub fn preprocess(img: &RasterImage, size: usize, sigma: f64) -> Result<RasterImage> {
    let std = resize_to_standard(img, size)?;
    let unit = if std.domain() == ValueDomain::Byte { normalize(&std) } else { std };
    if sigma == 0.0 {
        Ok(unit)
    } else {
        gaussian_blur(&unit, sigma)
    }
}

/// Discrete Gaussian of radius `ceil(3σ)`, renormalized to sum to one.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ImagingError::InvalidParameter { name: "sigma", reason: "must be a positive finite number" });
    }
    let radius = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let d = i as f64;
            libm::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Separable Gaussian blur with edge replication, applied per channel.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    let kernel = gaussian_kernel(sigma)?;
    let src = img.units().ok_or(ImagingError::DomainMismatch { expected: ValueDomain::Unit, found: img.domain() })?;
    let (w, h, c) = (img.width, img.height, img.channels);
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + k as isize - r, w);
                    acc += kv * src[(row + sx) * c + ch];
                }
                tmp[(row + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + k as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(RasterImage { width: w, height: h, channels: c, pixels: Pixels::Unit(out) })
}

/// A geometric augmentation: clockwise quarter turns, flips, then a
/// center zoom-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub zoom_factor: f64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec =
        AugmentSpec { quarter_turns: 0, flip_horizontal: false, flip_vertical: false, zoom_factor: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if self.quarter_turns > 3 {
            return Err(ImagingError::InvalidParameter { name: "quarter_turns", reason: "must be in 0..=3" });
        }
        if !(1.0..=2.0).contains(&self.zoom_factor) {
            return Err(ImagingError::InvalidParameter { name: "zoom_factor", reason: "must be in [1, 2]" });
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn rotate_box(b: BoundingBox, side: usize, quarter_turns: u8) -> BoundingBox {
    match quarter_turns % 4 {
        0 => b,
        1 => BoundingBox::new(side - b.y - b.h, b.x, b.h, b.w),
        2 => BoundingBox::new(side - b.x - b.w, side - b.y - b.h, b.w, b.h),
        _ => BoundingBox::new(b.y, side - b.x - b.w, b.h, b.w),
    }
}

/// Applies rotation, flips, then zoom to a square image, mapping the truth
/// boxes through the same geometry. Boxes cropped away by the zoom are dropped.
pub fn augment(
    img: &RasterImage,
    spec: &AugmentSpec,
    truth: &[GroundTruthRegion],
) -> Result<(RasterImage, Vec<GroundTruthRegion>)> {
    spec.validate()?;
    if !img.is_square() {
        return Err(ImagingError::InvalidImage("augmentation expects a square image"));
    }
    let side = img.width;
    if truth.iter().any(|t| !t.bbox.fits_within(side, side)) {
        return Err(ImagingError::InvalidParameter { name: "truth", reason: "region outside image" });
    }

    let mut out = img.orient(spec.quarter_turns, spec.flip_horizontal, spec.flip_vertical);
    let mut boxes: Vec<GroundTruthRegion> = truth
        .iter()
        .map(|t| GroundTruthRegion { bbox: rotate_box(t.bbox, side, spec.quarter_turns), class: t.class })
        .collect();
    if spec.flip_horizontal {
        for t in &mut boxes {
            t.bbox.x = side - t.bbox.x - t.bbox.w;
        }
    }
    if spec.flip_vertical {
        for t in &mut boxes {
            t.bbox.y = side - t.bbox.y - t.bbox.h;
        }
    }

    let window = libm::round(side as f64 / spec.zoom_factor) as usize;
    let window = window.clamp(1, side);
    if window < side {
        let origin = (side - window) / 2;
        out = resize_to_standard(&out.crop(BoundingBox::new(origin, origin, window, window))?, side)?;
        let scale = side as f64 / window as f64;
        boxes = boxes
            .into_iter()
            .filter_map(|t| {
                let b = t.bbox;
                let x0 = b.x.max(origin);
                let y0 = b.y.max(origin);
                let x1 = (b.x + b.w).min(origin + window);
                let y1 = (b.y + b.h).min(origin + window);
                if x1 <= x0 || y1 <= y0 {
                    return None;
                }
                let map0 = |v: usize| libm::floor((v - origin) as f64 * scale) as usize;
                let map1 = |v: usize| (libm::ceil((v - origin) as f64 * scale) as usize).min(side);
                let (nx, ny) = (map0(x0), map0(y0));
                let (nx1, ny1) = (map1(x1).max(nx + 1), map1(y1).max(ny + 1));
                Some(GroundTruthRegion { bbox: BoundingBox::new(nx, ny, nx1 - nx, ny1 - ny), class: t.class })
            })
            .collect();
    }
    Ok((out, boxes))
}

/// Flattens an RGB image into `(x, y, r, g, b)` tuples in row-major order.
pub fn encode_pixel_tuples(img: &RasterImage) -> Result<Vec<f64>> {
    if img.channels != 3 {
        return Err(ImagingError::UnsupportedEncoding("pixel tuples need three color channels"));
    }
    let mut out = Vec::with_capacity(img.width * img.height * 5);
    for y in 0..img.height {
        for x in 0..img.width {
            out.push(x as f64);
            out.push(y as f64);
            for c in 0..3 {
                out.push(img.get(x, y, c));
            }
        }
    }
    Ok(out)
}

/// Square window centered on `bbox`, `context` times its longer side,
/// shifted to stay inside a `width` × `height` image.
pub fn context_window(bbox: BoundingBox, width: usize, height: usize, context: f64) -> BoundingBox {
    let longest = bbox.w.max(bbox.h) as f64;
    let side = (libm::round(longest * context) as usize).clamp(1, width.min(height));
    let cx = bbox.x as f64 + bbox.w as f64 / 2.0;
    let cy = bbox.y as f64 + bbox.h as f64 / 2.0;
    let place = |center: f64, len: usize| -> usize {
        let start = libm::round(center - side as f64 / 2.0);
        start.clamp(0.0, (len - side) as f64) as usize
    };
    BoundingBox::new(place(cx, width), place(cy, height), side, side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::IssueClass;

    fn gradient(w: usize, h: usize, c: usize) -> RasterImage {
        let data = (0..w * h * c).map(|i| ((i * 37) % 256) as u8).collect();
        RasterImage::from_bytes(w, h, c, data).unwrap()
    }

    /// Per-output-pixel bilinear evaluation written independently of `bilinear`.
    fn oracle_resize(img: &RasterImage, x0: usize, y0: usize, side: usize, target: usize) -> Vec<f64> {
        let mut out = Vec::new();
        let s = side as f64 / target as f64;
        for oy in 0..target {
            for ox in 0..target {
                let fx = ((ox as f64 + 0.5) * s - 0.5).max(0.0).min((side - 1) as f64);
                let fy = ((oy as f64 + 0.5) * s - 0.5).max(0.0).min((side - 1) as f64);
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (jx, jy) = ((ix + 1).min(side - 1), (iy + 1).min(side - 1));
                let (ax, ay) = (fx - ix as f64, fy - iy as f64);
                for c in 0..img.channels() {
                    let v = |x: usize, y: usize| img.get(x0 + x, y0 + y, c);
                    let val = v(ix, iy) * (1.0 - ax) * (1.0 - ay)
                        + v(jx, iy) * ax * (1.0 - ay)
                        + v(ix, jy) * (1.0 - ax) * ay
                        + v(jx, jy) * ax * ay;
                    out.push(val);
                }
            }
        }
        out
    }

    #[test]
    fn one_pass_orientation_matches_step_by_step() {
        let img = gradient(5, 4, 3);
        for q in 0..4u8 {
            for fh in [false, true] {
                for fv in [false, true] {
                    let mut want = img.rotate_quarter_turns(q);
                    if fh {
                        want = want.flip_horizontal();
                    }
                    if fv {
                        want = want.flip_vertical();
                    }
                    assert_eq!(img.orient(q, fh, fv), want, "{q} {fh} {fv}");
                }
            }
        }
    }

    #[test]
    fn resize_identity_at_target() {
        let img = gradient(256, 256, 3);
        assert_eq!(resize_to_standard(&img, 256).unwrap(), img);
    }

    #[test]
    fn resize_constant_is_fixed_point() {
        let img = RasterImage::from_bytes(512, 512, 3, vec![128; 512 * 512 * 3]).unwrap();
        let out = resize_to_standard(&img, 256).unwrap();
        assert_eq!((out.width(), out.height()), (256, 256));
        assert!(out.bytes().unwrap().iter().all(|&v| v == 128));
    }

    #[test]
    fn resize_matches_per_pixel_oracle() {
        let img = normalize(&gradient(300, 200, 3));
        let out = resize_to_standard(&img, 256).unwrap();
        let expected = oracle_resize(&img, 50, 0, 200, 256);
        let got = out.units().unwrap();
        let max = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-6, "max diff {max}");
    }

    #[test]
    fn resize_rejects_bad_target() {
        let img = gradient(4, 4, 1);
        assert!(matches!(resize_to_standard(&img, 0), Err(ImagingError::InvalidParameter { .. })));
        assert!(RasterImage::from_bytes(0, 4, 1, vec![]).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let img = RasterImage::from_bytes(3, 1, 1, vec![0, 51, 255]).unwrap();
        let n = normalize(&img);
        assert_eq!(n.units().unwrap(), &[0.0, 0.2, 1.0]);
        // already unit: unchanged
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = RasterImage::filled(4, 4, &[0.5]).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
        let bytes = gradient(4, 4, 1);
        assert!(matches!(gaussian_blur(&bytes, 1.0), Err(ImagingError::DomainMismatch { .. })));
    }

    #[test]
    fn blur_constant_is_identity() {
        let img = RasterImage::filled(20, 15, &[0.3, 0.6, 0.9]).unwrap();
        let out = gaussian_blur(&img, 1.7).unwrap();
        for (a, b) in out.units().unwrap().iter().zip(img.units().unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Dense 2-D convolution of a single-channel plane with edge replication.
    fn dense_blur_oracle(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(((-(dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                        acc += weights[k] / total * src[sy * w + sx];
                        k += 1;
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn blur_impulse_is_kernel_outer_product() {
        let (w, h) = (21, 21);
        let mut data = vec![0.0; w * h];
        data[10 * w + 10] = 1.0;
        let img = RasterImage::from_units(w, h, 1, data.clone()).unwrap();
        let out = gaussian_blur(&img, 1.0).unwrap();
        let got = out.units().unwrap();
        let k = gaussian_kernel(1.0).unwrap();
        let dense = dense_blur_oracle(&data, w, h, 1.0);
        for y in 0..h {
            for x in 0..w {
                let kx = x as isize - 10 + 3;
                let ky = y as isize - 10 + 3;
                let outer = if (0..7).contains(&kx) && (0..7).contains(&ky) { k[kx as usize] * k[ky as usize] } else { 0.0 };
                assert!((got[y * w + x] - outer).abs() <= 1e-9);
                assert!((got[y * w + x] - dense[y * w + x]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn blur_preserves_mean_away_from_borders() {
        let (w, h) = (40, 40);
        let mut data = vec![0.0; w * h];
        for (i, (x, y)) in [(12, 15), (20, 20), (27, 24)].into_iter().enumerate() {
            data[y * w + x] = 0.3 + 0.2 * i as f64;
        }
        let img = RasterImage::from_units(w, h, 1, data.clone()).unwrap();
        let out = gaussian_blur(&img, 2.0).unwrap();
        let dense = dense_blur_oracle(&data, w, h, 2.0);
        let dense_mean = dense.iter().sum::<f64>() / dense.len() as f64;
        assert!((out.mean() - img.mean()).abs() < 1e-6);
        assert!((out.mean() - dense_mean).abs() < 1e-9);
    }

    #[test]
    fn augment_identity_is_exact() {
        let img = gradient(16, 16, 3);
        let truth = [GroundTruthRegion { bbox: BoundingBox::new(2, 3, 4, 5), class: IssueClass::WasteDisposal }];
        let (out, boxes) = augment(&img, &AugmentSpec::IDENTITY, &truth).unwrap();
        assert_eq!(out, img);
        assert_eq!(boxes, truth);
    }

    #[test]
    fn augment_half_turn_maps_box() {
        let img = gradient(256, 256, 3);
        let spec = AugmentSpec { quarter_turns: 2, ..AugmentSpec::IDENTITY };
        let truth = [GroundTruthRegion { bbox: BoundingBox::new(10, 20, 30, 40), class: IssueClass::InfrastructureDamage }];
        let (_, boxes) = augment(&img, &spec, &truth).unwrap();
        // oracle: (x', y') = (W - x - w, H - y - h)
        assert_eq!(boxes[0].bbox, BoundingBox::new(256 - 10 - 30, 256 - 20 - 40, 30, 40));
        assert_eq!(boxes[0].bbox, BoundingBox::new(216, 196, 30, 40));
    }

    #[test]
    fn augment_quarter_turn_box_tracks_pixels() {
        // a single marked pixel must land inside the mapped 1x1 box
        let mut data = vec![0u8; 8 * 8];
        data[2 * 8 + 5] = 255;
        let img = RasterImage::from_bytes(8, 8, 1, data).unwrap();
        for turns in 0..4 {
            let spec = AugmentSpec { quarter_turns: turns, ..AugmentSpec::IDENTITY };
            let truth = [GroundTruthRegion { bbox: BoundingBox::new(5, 2, 1, 1), class: IssueClass::WasteDisposal }];
            let (out, boxes) = augment(&img, &spec, &truth).unwrap();
            let b = boxes[0].bbox;
            assert_eq!(out.get(b.x, b.y, 0), 255.0, "turns {turns}");
        }
    }

    #[test]
    fn augment_flip_twice_is_identity() {
        let img = gradient(12, 12, 3);
        let spec = AugmentSpec { flip_horizontal: true, ..AugmentSpec::IDENTITY };
        let (once, _) = augment(&img, &spec, &[]).unwrap();
        assert_ne!(once, img);
        let (twice, _) = augment(&once, &spec, &[]).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn augment_zoom_drops_boxes_outside_window() {
        let img = gradient(100, 100, 1);
        let spec = AugmentSpec { zoom_factor: 2.0, ..AugmentSpec::IDENTITY };
        let truth = [
            GroundTruthRegion { bbox: BoundingBox::new(0, 0, 10, 10), class: IssueClass::WasteDisposal },
            GroundTruthRegion { bbox: BoundingBox::new(45, 45, 10, 10), class: IssueClass::WasteDisposal },
        ];
        let (out, boxes) = augment(&img, &spec, &truth).unwrap();
        assert_eq!(out.width(), 100);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].bbox, BoundingBox::new(40, 40, 20, 20));
    }

    #[test]
    fn augment_rejects_bad_spec() {
        let img = gradient(8, 8, 1);
        let spec = AugmentSpec { zoom_factor: 0.5, ..AugmentSpec::IDENTITY };
        assert!(augment(&img, &spec, &[]).is_err());
        assert!(augment(&gradient(8, 6, 1), &AugmentSpec::IDENTITY, &[]).is_err());
    }

    #[test]
    fn encode_tuples() {
        let img = RasterImage::from_bytes(256, 256, 3, vec![0; 256 * 256 * 3]).unwrap();
        assert_eq!(encode_pixel_tuples(&img).unwrap().len(), 327_680);
        let one = RasterImage::from_bytes(1, 1, 3, vec![7, 8, 9]).unwrap();
        assert_eq!(encode_pixel_tuples(&one).unwrap(), vec![0.0, 0.0, 7.0, 8.0, 9.0]);
        let two = RasterImage::from_bytes(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let t = encode_pixel_tuples(&two).unwrap();
        assert_eq!((t[0], t[1], t[5], t[6]), (0.0, 0.0, 1.0, 0.0));
        let gray = gradient(2, 2, 1);
        assert!(matches!(encode_pixel_tuples(&gray), Err(ImagingError::UnsupportedEncoding(_))));
    }

    #[test]
    fn context_window_stays_inside() {
        let w = context_window(BoundingBox::new(0, 0, 10, 20), 256, 256, 1.5);
        assert_eq!(w, BoundingBox::new(0, 0, 30, 30));
        let w = context_window(BoundingBox::new(240, 100, 16, 16), 256, 256, 2.0);
        assert!(w.x + w.w <= 256);
        let w = context_window(BoundingBox::new(0, 0, 200, 200), 256, 256, 2.0);
        assert_eq!(w, BoundingBox::new(0, 0, 256, 256));
    }
}
