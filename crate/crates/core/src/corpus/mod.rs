//! Synthetic urban-issue corpus: class and condition bookkeeping, exact
//! count apportionment, stratified train/validation splitting, and the
//! per-record plan that the IO layer renders to disk.

mod scene;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImagingError;
use crate::regions::BoundingBox;

pub use scene::{render_scene, render_scene_with_count, MIN_SCENE_SIZE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {}", .0.join(", "))]
    InvalidConfig(Vec<String>),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("unknown {kind} token `{token}`")]
    UnknownToken { kind: &'static str, token: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = core::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueClass {
    InfrastructureDamage,
    WasteDisposal,
    IllegalParkingMisc,
}

impl IssueClass {
    pub const ALL: [IssueClass; 3] = [Self::InfrastructureDamage, Self::WasteDisposal, Self::IllegalParkingMisc];
    pub const COUNT: usize = 3;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::InfrastructureDamage => "infrastructure_damage",
            Self::WasteDisposal => "waste_disposal",
            Self::IllegalParkingMisc => "illegal_parking_misc",
        }
    }

    /// Plain-language name for citizen-facing text.
    pub fn label(self) -> &'static str {
        match self {
            Self::InfrastructureDamage => "infrastructure damage",
            Self::WasteDisposal => "waste disposal",
            Self::IllegalParkingMisc => "illegal parking / miscellaneous",
        }
    }
}

impl fmt::Display for IssueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for IssueClass {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.token() == s)
            .ok_or_else(|| CorpusError::UnknownToken { kind: "class", token: s.into() })
    }
}

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn token(self) -> &'static str {
                match self { $(Self::$variant => $token),+ }
            }
        }

        impl FromStr for $name {
            type Err = CorpusError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($token => Ok(Self::$variant),)+
                    _ => Err(CorpusError::UnknownToken { kind: $kind, token: s.into() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_enum!(Lighting, "lighting" { Daylight => "daylight", LowLight => "low_light" });
token_enum!(Weather, "weather" { Clear => "clear", Adverse => "adverse" });
token_enum!(Clutter, "clutter" { Simple => "simple", Cluttered => "cluttered" });
token_enum!(Season, "season" { Spring => "spring", Summer => "summer", Autumn => "autumn", Winter => "winter" });

impl Season {
    pub const ALL: [Season; 4] = [Season::Spring, Season::Summer, Season::Autumn, Season::Winter];

    /// Meteorological season of a calendar month (1-12).
    pub fn from_month(month: u32) -> Season {
        match month {
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            9..=11 => Season::Autumn,
            _ => Season::Winter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneConditions {
    pub lighting: Lighting,
    pub weather: Weather,
    pub clutter: Clutter,
    pub season: Season,
}

impl SceneConditions {
    /// Daylight, clear, uncluttered, in the given season.
    pub const fn easy(season: Season) -> Self {
        Self { lighting: Lighting::Daylight, weather: Weather::Clear, clutter: Clutter::Simple, season }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthRegion {
    pub bbox: BoundingBox,
    pub class: IssueClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for GeoBounds {
    /// A 0.2° × 0.2° city box.
    fn default() -> Self {
        Self { lat_min: 44.35, lat_max: 44.55, lon_min: 26.00, lon_max: 26.20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_images: usize,
    pub class_mix: [f64; 3],
    pub low_light_rate: f64,
    pub adverse_weather_rate: f64,
    pub clutter_rate: f64,
    pub image_size: usize,
    pub seed: u64,
    pub bounds: GeoBounds,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_images: 5712,
            class_mix: [0.45, 0.30, 0.25],
            low_light_rate: 0.35,
            adverse_weather_rate: 0.20,
            clutter_rate: 0.25,
            image_size: 256,
            seed: 0,
            bounds: GeoBounds::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mix_sum: f64 = self.class_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|m| !(0.0..=1.0).contains(m)) {
            bad.push(format!("class_mix (sums to {mix_sum})"));
        }
        for (name, rate) in [
            ("low_light_rate", self.low_light_rate),
            ("adverse_weather_rate", self.adverse_weather_rate),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                bad.push(format!("{name} ({rate})"));
            }
        }
        if self.image_size < MIN_SCENE_SIZE {
            bad.push(format!("image_size ({} < {MIN_SCENE_SIZE})", self.image_size));
        }
        let b = &self.bounds;
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max)
            || !(GeoPoint { lat: b.lat_min, lon: b.lon_min }).is_valid()
            || !(GeoPoint { lat: b.lat_max, lon: b.lon_max }).is_valid()
        {
            bad.push("bounds".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CorpusError::InvalidConfig(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path of the raster, relative to the manifest's directory (or absolute).
    pub image_path: String,
    pub class: IssueClass,
    pub conditions: SceneConditions,
    pub regions: Vec<GroundTruthRegion>,
    pub location: GeoPoint,
    pub seed: u64,
}

impl ManifestRecord {
    /// Checks the record-level invariants that need no image access.
    pub fn validate(&self) -> core::result::Result<(), String> {
        if self.regions.is_empty() {
            return Err("record has no regions".into());
        }
        if let Some(r) = self.regions.iter().find(|r| r.bbox.w == 0 || r.bbox.h == 0) {
            return Err(format!("degenerate region {:?}", r.bbox));
        }
        if !self.location.is_valid() {
            return Err(format!("location out of range ({}, {})", self.location.lat, self.location.lon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in &self.records {
            counts[r.class.code()] += 1;
        }
        counts
    }
}

/// Largest-remainder apportionment of `n` over `weights` (which need not be
/// normalized). Ties in the fractional part go to the lower index.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return alloc::vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    // guard against 1713.9999999 style representation error
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(q + 1e-9) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Derives an independent 64-bit seed for item `index` of a seeded run.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything needed to render one record, decided before any pixel work.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub index: usize,
    pub class: IssueClass,
    pub conditions: SceneConditions,
    pub location: GeoPoint,
    pub seed: u64,
}

fn exact_flags(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let count = (libm::round(rate * n as f64) as usize).min(n);
    let mut flags: Vec<bool> = (0..n).map(|i| i < count).collect();
    flags.shuffle(rng);
    flags
}

/// Assigns class, conditions, location and seed to every record. Class
/// counts are apportioned exactly; each condition is a seeded draw of the
/// rounded expected count, independent of class.
pub fn plan_corpus(config: &CorpusConfig) -> Result<Vec<RecordPlan>> {
    config.validate()?;
    let n = config.n_images;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let counts = apportion(n, &config.class_mix);
    let mut classes: Vec<IssueClass> =
        counts.iter().enumerate().flat_map(|(c, &k)| core::iter::repeat_n(IssueClass::ALL[c], k)).collect();
    classes.shuffle(&mut rng);

    let low = exact_flags(n, config.low_light_rate, &mut rng);
    let adverse = exact_flags(n, config.adverse_weather_rate, &mut rng);
    let cluttered = exact_flags(n, config.clutter_rate, &mut rng);
    let season_counts = apportion(n, &[1.0; 4]);
    let mut seasons: Vec<Season> =
        season_counts.iter().enumerate().flat_map(|(s, &k)| core::iter::repeat_n(Season::ALL[s], k)).collect();
    seasons.shuffle(&mut rng);

    let b = config.bounds;
    Ok((0..n)
        .map(|i| {
            let seed = derive_seed(config.seed, i as u64);
            let mut loc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x10C));
            let location = GeoPoint {
                lat: loc_rng.random_range(b.lat_min..b.lat_max),
                lon: loc_rng.random_range(b.lon_min..b.lon_max),
            };
            RecordPlan {
                index: i,
                class: classes[i],
                conditions: SceneConditions {
                    lighting: if low[i] { Lighting::LowLight } else { Lighting::Daylight },
                    weather: if adverse[i] { Weather::Adverse } else { Weather::Clear },
                    clutter: if cluttered[i] { Clutter::Cluttered } else { Clutter::Simple },
                    season: seasons[i],
                },
                location,
                seed,
            }
        })
        .collect())
}

/// Stratified seeded split. The validation share is
/// `floor((1 − train_fraction) · n)`, apportioned across classes by largest
/// remainder; record order is preserved within each output.
pub fn split_train_val(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::InvalidParameter {
            name: "train_fraction",
            reason: format!("{train_fraction} is not strictly between 0 and 1"),
        });
    }
    let n = manifest.len();
    if n == 0 {
        return Err(CorpusError::EmptyManifest);
    }
    let val_total = libm::floor((1.0 - train_fraction) * n as f64 + 1e-9) as usize;
    let class_counts = manifest.class_counts();
    let weights: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    let quotas = apportion(val_total, &weights);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = alloc::vec![false; n];
    for class in IssueClass::ALL {
        let mut members: Vec<usize> = (0..n).filter(|&i| manifest.records[i].class == class).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(quotas[class.code()]) {
            in_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::with_capacity(n - val_total), Vec::with_capacity(val_total));
    for (i, r) in manifest.records.iter().enumerate() {
        if in_val[i] {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((DatasetManifest::new(train), DatasetManifest::new(val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    /// Reference apportionment: hand out seats one at a time to the largest
    /// remaining quota deficit.
    fn apportion_oracle(n: usize, mix: &[f64]) -> Vec<usize> {
        let mut seats = alloc::vec![0usize; mix.len()];
        for _ in 0..n {
            let (best, _) = mix
                .iter()
                .enumerate()
                .map(|(i, m)| (i, n as f64 * m - seats[i] as f64))
                .fold((0, f64::MIN), |acc, (i, d)| if d > acc.1 + 1e-9 { (i, d) } else { acc });
            seats[best] += 1;
        }
        seats
    }

    #[test]
    fn default_mix_apportionment() {
        let counts = apportion(5712, &[0.45, 0.30, 0.25]);
        assert_eq!(counts, apportion_oracle(5712, &[0.45, 0.30, 0.25]));
        assert_eq!(counts, alloc::vec![2570, 1714, 1428]);
        assert_eq!(apportion(0, &[0.45, 0.30, 0.25]), alloc::vec![0, 0, 0]);
    }

    #[test]
    fn default_split_is_4570_1142() {
        let plan = plan_corpus(&CorpusConfig { n_images: 5712, ..Default::default() }).unwrap();
        let m = manifest_from_plan(&plan);
        let (train, val) = split_train_val(&m, 0.8, 7).unwrap();
        assert_eq!((train.len(), val.len()), (4570, 1142));
        let small = manifest_from_plan(&plan[..10]);
        let (t, v) = split_train_val(&small, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_train_val(&DatasetManifest::default(), 0.8, 0), Err(CorpusError::EmptyManifest)));
        let plan = plan_corpus(&CorpusConfig { n_images: 4, ..Default::default() }).unwrap();
        assert!(split_train_val(&manifest_from_plan(&plan), 1.0, 0).is_err());
    }

    #[test]
    fn condition_rates_are_exact_counts() {
        let plan = plan_corpus(&CorpusConfig::default()).unwrap();
        let low = plan.iter().filter(|p| p.conditions.lighting == Lighting::LowLight).count();
        assert!((1885..=2114).contains(&low), "{low}");
        let adverse = plan.iter().filter(|p| p.conditions.weather == Weather::Adverse).count();
        assert!((adverse as f64 / 5712.0 - 0.20).abs() <= 0.02);
        let clutter = plan.iter().filter(|p| p.conditions.clutter == Clutter::Cluttered).count();
        assert!((clutter as f64 / 5712.0 - 0.25).abs() <= 0.02);
        let mut counts = [0; 3];
        for p in &plan {
            counts[p.class.code()] += 1;
        }
        assert_eq!(counts, [2570, 1714, 1428]);
    }

    #[test]
    fn config_validation_lists_fields() {
        let cfg = CorpusConfig { class_mix: [0.5, 0.5, 0.5], clutter_rate: 1.5, image_size: 32, ..Default::default() };
        match cfg.validate() {
            Err(CorpusError::InvalidConfig(fields)) => {
                assert_eq!(fields.len(), 3);
                assert!(fields[0].starts_with("class_mix"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn class_tokens_round_trip() {
        for c in IssueClass::ALL {
            assert_eq!(c.token().parse::<IssueClass>().unwrap(), c);
            assert_eq!(IssueClass::from_code(c.code()), Some(c));
        }
        assert_eq!(IssueClass::InfrastructureDamage.code(), 0);
        assert_eq!(IssueClass::IllegalParkingMisc.code(), 2);
        assert!("pothole".parse::<IssueClass>().is_err());
    }

    pub(crate) fn manifest_from_plan(plan: &[RecordPlan]) -> DatasetManifest {
        DatasetManifest::new(
            plan.iter()
                .map(|p| ManifestRecord {
                    image_path: format!("images/{:06}.ppm", p.index),
                    class: p.class,
                    conditions: p.conditions,
                    regions: alloc::vec![GroundTruthRegion { bbox: BoundingBox::new(0, 0, 1, 1), class: p.class }],
                    location: p.location,
                    seed: p.seed,
                })
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn apportionment_is_close_and_exact(n in 0usize..20_000, a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0) {
            let total = a + b + c;
            let mix = [a / total, b / total, c / total];
            let counts = apportion(n, &mix);
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            for (k, m) in counts.iter().zip(mix) {
                prop_assert!((*k as f64 - n as f64 * m).abs() < 1.0);
            }
        }

        #[test]
        fn split_is_disjoint_exhaustive_and_stratified(n in 1usize..400, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let plan = plan_corpus(&CorpusConfig { n_images: n, seed, ..Default::default() }).unwrap();
            let m = manifest_from_plan(&plan);
            let (train, val) = split_train_val(&m, frac, seed ^ 1).unwrap();
            let key = |r: &ManifestRecord| r.image_path.clone();
            let t: BTreeSet<_> = train.records.iter().map(key).collect();
            let v: BTreeSet<_> = val.records.iter().map(key).collect();
            let all: BTreeSet<_> = m.records.iter().map(key).collect();
            prop_assert!(t.is_disjoint(&v));
            prop_assert_eq!(t.union(&v).cloned().collect::<BTreeSet<_>>(), all);
            let val_share = val.len() as f64 / n as f64;
            let counts = m.class_counts();
            let vcounts = val.class_counts();
            for k in 0..3 {
                prop_assert!((vcounts[k] as f64 - counts[k] as f64 * val_share).abs() <= 1.0);
            }
        }
    }
}
