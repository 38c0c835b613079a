//! Procedural scene renderer.
//!
//! A scene is a textured asphalt background plus the primitives of one issue
//! class. Conditions are layered on top in a fixed order: clutter, lighting,
//! weather. Lighting never consumes randomness, so two scenes that differ
//! only in lighting share every other pixel decision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Clutter, CorpusError, GroundTruthRegion, IssueClass, Lighting, Result, SceneConditions, Season, Weather};
use crate::imaging::RasterImage;
use crate::regions::BoundingBox;

pub const MIN_SCENE_SIZE: usize = 64;

const LOW_LIGHT_GAIN: f64 = 0.35;
const WEATHER_NOISE_STD: f64 = 0.08;

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

/// Tracks the pixel extent of whatever is painted through it.
#[derive(Default)]
struct Extent(Option<(usize, usize, usize, usize)>);

impl Extent {
    fn add(&mut self, x: usize, y: usize) {
        self.0 = Some(match self.0 {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }


    fn bbox(&self) -> Option<BoundingBox> {
        self.0.map(|(x0, y0, x1, y1)| BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, color: [f64; 3], extent: Option<&mut Extent>) {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        self.px[y * self.size + x] = color;
        if let Some(e) = extent {
            e.add(x, y);
        }
    }

    fn blend(&mut self, x: i64, y: i64, color: [f64; 3], alpha: f64) {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        let p = &mut self.px[y as usize * self.size + x as usize];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn shift(&mut self, x: i64, y: i64, delta: f64) {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        for v in &mut self.px[y as usize * self.size + x as usize] {
            *v += delta;
        }
    }
}

fn season_tint(season: Season) -> [f64; 3] {
    match season {
        Season::Spring => [-0.01, 0.03, -0.01],
        Season::Summer => [0.03, 0.02, -0.02],
        Season::Autumn => [0.04, 0.00, -0.03],
        Season::Winter => [-0.02, 0.00, 0.04],
    }
}

fn background(canvas: &mut Canvas, season: Season, rng: &mut ChaCha8Rng) {
    let size = canvas.size;
    let base: f64 = rng.random_range(0.40..0.50);
    let tint = season_tint(season);
    let (fx, fy) = (rng.random_range(0.02..0.06), rng.random_range(0.02..0.06));
    let (phx, phy) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    for y in 0..size {
        for x in 0..size {
            let ripple = 0.015 * (libm::sin(x as f64 * fx + phx) + libm::sin(y as f64 * fy + phy));
            let grain = rng.random_range(-0.03..0.03);
            let v = base + ripple + grain;
            canvas.px[y * size + x] = [v + tint[0], v + tint[1], v + tint[2]];
        }
    }
    // faint worn lane markings, well under the proposer's contrast threshold
    let lanes = rng.random_range(1..=2);
    for _ in 0..lanes {
        let horizontal = rng.random_bool(0.5);
        let at = rng.random_range(size / 6..size - size / 6) as i64;
        let dash = rng.random_range(8..16) as i64;
        for t in 0..size as i64 {
            if (t / dash) % 2 == 1 {
                continue;
            }
            for k in 0..3 {
                let (x, y) = if horizontal { (t, at + k) } else { (at + k, t) };
                canvas.shift(x, y, 0.05);
            }
        }
    }
}

fn overlaps_any(b: &BoundingBox, taken: &[BoundingBox], gap: usize) -> bool {
    let grown = BoundingBox::new(b.x.saturating_sub(gap), b.y.saturating_sub(gap), b.w + 2 * gap, b.h + 2 * gap);
    taken.iter().any(|t| grown.intersection_area(t) > 0)
}

/// Picks a top-left corner so that a `w` × `h` footprint stays `margin`
/// inside the canvas and clear of `taken`; gives up after a bounded search.
fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    w: usize,
    h: usize,
    margin: usize,
    taken: &[BoundingBox],
    gap: usize,
) -> Option<(usize, usize)> {
    if w + 2 * margin >= size || h + 2 * margin >= size {
        return None;
    }
    for _ in 0..64 {
        let x = rng.random_range(margin..size - margin - w);
        let y = rng.random_range(margin..size - margin - h);
        if !overlaps_any(&BoundingBox::new(x, y, w, h), taken, gap) {
            return Some((x, y));
        }
    }
    None
}

fn pothole(canvas: &mut Canvas, rng: &mut ChaCha8Rng, scale: f64, taken: &[BoundingBox]) -> Option<BoundingBox> {
    let rx = rng.random_range(10.0..24.0) * scale;
    let ry = rng.random_range(7.0..16.0) * scale;
    let angle = rng.random_range(0.0..PI);
    let wobble_phase = rng.random_range(0.0..2.0 * PI);
    let shade: f64 = rng.random_range(0.08..0.15);
    let reach = libm::ceil(rx.max(ry) * 1.2) as usize;
    let (x0, y0) = place(rng, canvas.size, 2 * reach, 2 * reach, 2, taken, (12.0 * scale) as usize)?;
    let (cx, cy) = ((x0 + reach) as f64, (y0 + reach) as f64);
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    let mut extent = Extent::default();
    for y in y0..y0 + 2 * reach {
        for x in x0..x0 + 2 * reach {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * ca + dy * sa) / rx;
            let v = (-dx * sa + dy * ca) / ry;
            let theta = libm::atan2(v, u);
            let edge = 1.0 + 0.15 * libm::sin(3.0 * theta + wobble_phase);
            if u * u + v * v <= edge * edge {
                let grain = rng.random_range(-0.02..0.02);
                let s = shade + grain;
                canvas.set(x as i64, y as i64, [s + 0.02, s + 0.01, s], Some(&mut extent));
            }
        }
    }
    extent.bbox()
}

fn point_in_convex(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    let mut sign = 0.0;
    for i in 0..n {
        let (ax, ay) = pts[i];
        let (bx, by) = pts[(i + 1) % n];
        let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

const LITTER_COLORS: [[f64; 3]; 5] =
    [[0.93, 0.93, 0.92], [0.70, 0.85, 0.98], [0.75, 0.95, 0.70], [0.98, 0.92, 0.55], [0.95, 0.80, 0.85]];

fn litter_cluster(canvas: &mut Canvas, rng: &mut ChaCha8Rng, scale: f64, taken: &[BoundingBox]) -> Option<BoundingBox> {
    let spread = (8.0 * scale).max(3.0);
    let radius_max = (9.0 * scale).max(3.0);
    let reach = libm::ceil(spread + radius_max) as usize + 1;
    let (x0, y0) = place(rng, canvas.size, 2 * reach, 2 * reach, 2, taken, (14.0 * scale) as usize)?;
    let (cx, cy) = ((x0 + reach) as f64, (y0 + reach) as f64);
    let pieces = rng.random_range(3..=6);
    let mut extent = Extent::default();
    for piece in 0..pieces {
        // the first piece sits on the cluster center; the rest overlap it
        let (ox, oy) = if piece == 0 {
            (cx, cy)
        } else {
            (cx + rng.random_range(-spread..spread), cy + rng.random_range(-spread..spread))
        };
        let r = rng.random_range(0.55..1.0) * radius_max;
        let k = rng.random_range(3..=5);
        let start = rng.random_range(0.0..2.0 * PI);
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let a = start + 2.0 * PI * i as f64 / k as f64 + rng.random_range(-0.3..0.3);
                let rr = r * rng.random_range(0.7..1.0);
                (ox + rr * libm::cos(a), oy + rr * libm::sin(a))
            })
            .collect();
        let color = LITTER_COLORS[rng.random_range(0..LITTER_COLORS.len())];
        let (bx0, by0) = (libm::floor(ox - r) as i64, libm::floor(oy - r) as i64);
        let (bx1, by1) = (libm::ceil(ox + r) as i64, libm::ceil(oy + r) as i64);
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                if point_in_convex(x as f64, y as f64, &pts) {
                    canvas.set(x, y, color, Some(&mut extent));
                }
            }
        }
        // pieces must touch the cluster so the pile reads as one object
        if piece == 0 {
            continue;
        }
        for t in 0..=16 {
            let f = t as f64 / 16.0;
            let (lx, ly) = (cx + (ox - cx) * f, cy + (oy - cy) * f);
            for d in 0..2 {
                canvas.set(lx as i64 + d, ly as i64, color, Some(&mut extent));
            }
        }
    }
    extent.bbox()
}

const VEHICLE_COLORS: [[f64; 3]; 4] = [[0.78, 0.07, 0.07], [0.08, 0.16, 0.62], [0.92, 0.80, 0.08], [0.06, 0.45, 0.16]];

const SHADOW: [f64; 3] = [0.07, 0.07, 0.08];
const FADED_PAINT: f64 = 0.08;

fn parked_vehicle(canvas: &mut Canvas, rng: &mut ChaCha8Rng, scale: f64) -> Option<BoundingBox> {
    let vertical = rng.random_bool(0.5);
    let (mut zw, mut zh) = (rng.random_range(50.0..80.0) * scale, rng.random_range(30.0..48.0) * scale);
    let (mut vw, mut vh) = (rng.random_range(36.0..52.0) * scale, rng.random_range(18.0..26.0) * scale);
    if vertical {
        core::mem::swap(&mut zw, &mut zh);
        core::mem::swap(&mut vw, &mut vh);
    }
    let (zw, zh, vw, vh) = (zw as usize, zh as usize, vw.max(4.0) as usize, vh.max(4.0) as usize);
    let footprint_w = zw + vw;
    let footprint_h = zh + vh;
    let (fx, fy) = place(rng, canvas.size, footprint_w, footprint_h, 2, &[], 0)?;

    // worn hatched no-parking zone: faded paint, below proposal contrast
    let (zx, zy) = (fx + vw / 2, fy + vh / 2);
    let thick = (libm::round(2.0 * scale) as usize).max(1);
    let period = (libm::round(7.0 * scale) as usize).max(3);
    for y in zy..zy + zh {
        for x in zx..zx + zw {
            let border = x < zx + thick || x >= zx + zw - thick || y < zy + thick || y >= zy + zh - thick;
            if border || (x + y) % period < thick {
                canvas.shift(x as i64, y as i64, FADED_PAINT);
            }
        }
    }

    // the vehicle overlaps one corner of the zone
    let vx = zx + rng.random_range(0..=zw / 2) - vw / 2 + vw / 4;
    let vy = zy + rng.random_range(0..=zh / 2) - vh / 2 + vh / 4;
    let body = VEHICLE_COLORS[rng.random_range(0..VEHICLE_COLORS.len())];
    let glass = [0.10, 0.12, 0.15];
    let mut car = Extent::default();
    for y in vy..vy + vh {
        for x in vx..vx + vw {
            let (u, v) = if vertical { ((y - vy) as f64 / vh as f64, (x - vx) as f64 / vw as f64) } else {
                ((x - vx) as f64 / vw as f64, (y - vy) as f64 / vh as f64)
            };
            let windshield = (0.22..0.34).contains(&u) && (0.15..0.85).contains(&v);
            let rear = (0.72..0.80).contains(&u) && (0.2..0.8).contains(&v);
            // tires and cast shadow give a dark rim around the body
            let rim = x < vx + thick || x >= vx + vw - thick || y < vy + thick || y >= vy + vh - thick;
            let color = if rim { SHADOW } else if windshield || rear { glass } else { body };
            canvas.set(x as i64, y as i64, color, Some(&mut car));
        }
    }
    // the offending vehicle is the issue; the painted zone is context
    car.bbox()
}

/// Distractors: manhole covers, pole shadows, leaf litter. Each stays well
/// below the contrast of any class primitive and avoids the issue boxes.
fn clutter(canvas: &mut Canvas, rng: &mut ChaCha8Rng, scale: f64, taken: &[BoundingBox]) {
    let count = rng.random_range(3..=6);
    for _ in 0..count {
        match rng.random_range(0..3) {
            0 => {
                let r = (rng.random_range(6.0..10.0) * scale).max(2.0);
                let d = libm::ceil(2.0 * r) as usize + 1;
                let Some((x0, y0)) = place(rng, canvas.size, d, d, 1, taken, 4) else { continue };
                let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
                for y in y0..y0 + d {
                    for x in x0..x0 + d {
                        let dist = libm::hypot(x as f64 - cx, y as f64 - cy);
                        if dist <= r {
                            let ring = if dist > r - 1.5 { -0.07 } else { 0.04 };
                            canvas.shift(x as i64, y as i64, ring);
                        }
                    }
                }
            }
            1 => {
                let len = (rng.random_range(30.0..70.0) * scale) as i64;
                let angle = rng.random_range(0.0..PI);
                let (x0, y0) = (rng.random_range(0..canvas.size) as i64, rng.random_range(0..canvas.size) as i64);
                for t in 0..len {
                    let x = x0 + libm::round(t as f64 * libm::cos(angle)) as i64;
                    let y = y0 + libm::round(t as f64 * libm::sin(angle)) as i64;
                    let inside = taken.iter().any(|b| {
                        x >= b.x as i64 && y >= b.y as i64 && x < (b.x + b.w) as i64 && y < (b.y + b.h) as i64
                    });
                    if !inside {
                        canvas.shift(x, y, -0.08);
                        canvas.shift(x + 1, y, -0.08);
                    }
                }
            }
            _ => {
                let Some((x0, y0)) = place(rng, canvas.size, 24, 24, 1, taken, 2) else { continue };
                for _ in 0..rng.random_range(6..14) {
                    let x = (x0 + rng.random_range(0..22)) as i64;
                    let y = (y0 + rng.random_range(0..22)) as i64;
                    let tone = [0.45, 0.38, 0.20];
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
                        canvas.blend(x + dx, y + dy, tone, 0.6);
                    }
                }
            }
        }
    }
}

/// Rain/snow streaks plus per-sample Gaussian noise.
fn weather(canvas: &mut Canvas, rng: &mut ChaCha8Rng, scale: f64) {
    let streaks = rng.random_range(30..60);
    let slant: f64 = rng.random_range(-0.5..0.5);
    for _ in 0..streaks {
        let len = (rng.random_range(10.0..25.0) * scale) as i64;
        let (x0, y0) = (rng.random_range(0..canvas.size) as f64, rng.random_range(0..canvas.size) as i64);
        for t in 0..len {
            let x = libm::round(x0 + slant * t as f64) as i64;
            canvas.blend(x, y0 + t, [0.85, 0.87, 0.90], 0.15);
        }
    }
    let noise = Normal::new(0.0, WEATHER_NOISE_STD).expect("finite std");
    for p in &mut canvas.px {
        for v in p.iter_mut() {
            *v += noise.sample(rng);
        }
    }
}

fn draw_primitive(
    class: IssueClass,
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    scale: f64,
    taken: &[BoundingBox],
) -> Option<BoundingBox> {
    match class {
        IssueClass::InfrastructureDamage => pothole(canvas, rng, scale, taken),
        IssueClass::WasteDisposal => litter_cluster(canvas, rng, scale, taken),
        IssueClass::IllegalParkingMisc => parked_vehicle(canvas, rng, scale),
    }
}

fn primitive_count(class: IssueClass, rng: &mut ChaCha8Rng) -> usize {
    match class {
        IssueClass::InfrastructureDamage => rng.random_range(1..=3),
        IssueClass::WasteDisposal => rng.random_range(1..=4),
        IssueClass::IllegalParkingMisc => 1,
    }
}

/// Renders a deterministic unit-domain RGB scene and the exact boxes of its
/// class primitives.
pub fn render_scene(
    class: IssueClass,
    conditions: SceneConditions,
    size: usize,
    seed: u64,
) -> Result<(RasterImage, Vec<GroundTruthRegion>)> {
    render(class, conditions, size, seed, None)
}

/// As [`render_scene`] but with a fixed number of class primitives
/// (illegal parking always draws exactly one).
pub fn render_scene_with_count(
    class: IssueClass,
    conditions: SceneConditions,
    size: usize,
    seed: u64,
    count: usize,
) -> Result<(RasterImage, Vec<GroundTruthRegion>)> {
    if count == 0 {
        return Err(CorpusError::InvalidParameter { name: "count", reason: "a scene needs at least one issue".into() });
    }
    render(class, conditions, size, seed, Some(count))
}

fn render(
    class: IssueClass,
    conditions: SceneConditions,
    size: usize,
    seed: u64,
    count: Option<usize>,
) -> Result<(RasterImage, Vec<GroundTruthRegion>)> {
    if size < MIN_SCENE_SIZE {
        return Err(CorpusError::InvalidParameter {
            name: "size",
            reason: format!("{size} is below the minimum scene size {MIN_SCENE_SIZE}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = size as f64 / 256.0;
    let mut canvas = Canvas { size, px: vec![[0.0; 3]; size * size] };
    background(&mut canvas, conditions.season, &mut rng);

    let drawn = primitive_count(class, &mut rng);
    let wanted = match (class, count) {
        (IssueClass::IllegalParkingMisc, _) => 1,
        (_, Some(n)) => n,
        (_, None) => drawn,
    };
    let mut boxes: Vec<BoundingBox> = Vec::new();
    for _ in 0..wanted {
        if let Some(b) = draw_primitive(class, &mut canvas, &mut rng, scale, &boxes) {
            boxes.push(b);
        }
    }
    if boxes.is_empty() {
        // placement search exhausted; fall back to one primitive on a clean slate
        boxes.extend(draw_primitive(class, &mut canvas, &mut rng, scale, &[]));
    }

    if conditions.clutter == Clutter::Cluttered {
        clutter(&mut canvas, &mut rng, scale, &boxes);
    }
    for p in &mut canvas.px {
        for v in p.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    if conditions.lighting == Lighting::LowLight {
        for p in &mut canvas.px {
            for v in p.iter_mut() {
                *v *= LOW_LIGHT_GAIN;
            }
        }
    }
    if conditions.weather == Weather::Adverse {
        weather(&mut canvas, &mut rng, scale);
    }

    let data: Vec<f64> = canvas.px.iter().flat_map(|p| p.iter().map(|v| v.clamp(0.0, 1.0))).collect();
    let image = RasterImage::from_units(size, size, 3, data)?;
    let regions = boxes.into_iter().map(|bbox| GroundTruthRegion { bbox, class }).collect();
    Ok((image, regions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lum_mean(img: &RasterImage, inside: impl Fn(usize, usize) -> bool) -> f64 {
        let lum = img.luminance();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..img.height() {
            for x in 0..img.width() {
                if inside(x, y) {
                    sum += lum[y * img.width() + x];
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    fn in_box(b: &BoundingBox, x: usize, y: usize) -> bool {
        x >= b.x && y >= b.y && x < b.x + b.w && y < b.y + b.h
    }

    #[test]
    fn deterministic() {
        let cond = SceneConditions {
            lighting: Lighting::LowLight,
            weather: Weather::Adverse,
            clutter: Clutter::Cluttered,
            season: Season::Autumn,
        };
        for class in IssueClass::ALL {
            let a = render_scene(class, cond, 128, 99).unwrap();
            let b = render_scene(class, cond, 128, 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn potholes_are_darker_than_background() {
        for seed in 0..20 {
            let (img, regions) =
                render_scene(IssueClass::InfrastructureDamage, SceneConditions::easy(Season::Summer), 256, seed).unwrap();
            let bg = lum_mean(&img, |x, y| !regions.iter().any(|r| in_box(&r.bbox, x, y)));
            for r in &regions {
                assert!(lum_mean(&img, |x, y| in_box(&r.bbox, x, y)) < bg, "seed {seed}");
            }
        }
    }

    #[test]
    fn low_light_scales_mean() {
        for class in IssueClass::ALL {
            let day = SceneConditions { clutter: Clutter::Cluttered, ..SceneConditions::easy(Season::Winter) };
            let night = SceneConditions { lighting: Lighting::LowLight, ..day };
            let (a, ra) = render_scene(class, day, 256, 5).unwrap();
            let (b, rb) = render_scene(class, night, 256, 5).unwrap();
            assert_eq!(ra, rb);
            assert!((b.mean() - LOW_LIGHT_GAIN * a.mean()).abs() < 1e-6);
        }
    }

    #[test]
    fn regions_inside_and_nonempty() {
        for seed in 0..30 {
            for class in IssueClass::ALL {
                for size in [64, 100, 256] {
                    let (img, regions) = render_scene(class, SceneConditions::easy(Season::Spring), size, seed).unwrap();
                    assert!(!regions.is_empty());
                    for r in &regions {
                        assert!(r.bbox.fits_within(img.width(), img.height()), "{class:?} {size} {seed}");
                        assert_eq!(r.class, class);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_scenes() {
        let err = render_scene(IssueClass::WasteDisposal, SceneConditions::easy(Season::Spring), 63, 0);
        assert!(matches!(err, Err(CorpusError::InvalidParameter { name: "size", .. })));
    }

    #[test]
    fn fixed_count_scenes() {
        let (_, regions) =
            render_scene_with_count(IssueClass::WasteDisposal, SceneConditions::easy(Season::Spring), 256, 3, 1).unwrap();
        assert_eq!(regions.len(), 1);
    }
}
