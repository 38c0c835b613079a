//! Line-delimited JSON manifests.
//!
//! One object per line:
//! `{image, class, lighting, weather, clutter, season, lat, lon, regions, seed}`
//! with `regions` a list of `{x, y, w, h, class}`. Image paths are relative
//! to the manifest's directory unless absolute.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use petition_core::corpus::{
    Clutter, DatasetManifest, GeoPoint, GroundTruthRegion, IssueClass, Lighting, ManifestRecord, SceneConditions,
    Season, Weather,
};
use petition_core::regions::BoundingBox;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: referenced image {path} does not exist")]
    Dangling { line: usize, path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRegion {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    class: IssueClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    image: String,
    class: IssueClass,
    lighting: Lighting,
    weather: Weather,
    clutter: Clutter,
    season: Season,
    lat: f64,
    lon: f64,
    regions: Vec<WireRegion>,
    seed: u64,
}

impl From<&ManifestRecord> for WireRecord {
    fn from(r: &ManifestRecord) -> Self {
        let c = r.conditions;
        WireRecord {
            image: r.image_path.clone(),
            class: r.class,
            lighting: c.lighting,
            weather: c.weather,
            clutter: c.clutter,
            season: c.season,
            lat: r.location.lat,
            lon: r.location.lon,
            regions: r
                .regions
                .iter()
                .map(|g| WireRegion { x: g.bbox.x, y: g.bbox.y, w: g.bbox.w, h: g.bbox.h, class: g.class })
                .collect(),
            seed: r.seed,
        }
    }
}

impl From<WireRecord> for ManifestRecord {
    fn from(w: WireRecord) -> Self {
        ManifestRecord {
            image_path: w.image,
            class: w.class,
            conditions: SceneConditions {
                lighting: w.lighting,
                weather: w.weather,
                clutter: w.clutter,
                season: w.season,
            },
            regions: w
                .regions
                .into_iter()
                .map(|r| GroundTruthRegion { bbox: BoundingBox::new(r.x, r.y, r.w, r.h), class: r.class })
                .collect(),
            location: GeoPoint { lat: w.lat, lon: w.lon },
            seed: w.seed,
        }
    }
}

pub fn record_to_line(record: &ManifestRecord) -> String {
    serde_json::to_string(&WireRecord::from(record)).expect("manifest records serialize")
}

/// Parses and validates one line; `line` is 1-based and only used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<ManifestRecord, ManifestError> {
    let wire: WireRecord =
        serde_json::from_str(text).map_err(|e| ManifestError::Parse { line, reason: e.to_string() })?;
    let record = ManifestRecord::from(wire);
    record.validate().map_err(|reason| ManifestError::Parse { line, reason })?;
    Ok(record)
}

/// Where `record`'s image lives for a manifest stored at `manifest_path`.
pub fn image_path(manifest_path: &Path, record: &ManifestRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Parses every line, then checks that each referenced image exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| io_error(path, source))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(line, i + 1)?;
        let image = image_path(path, &record);
        if !image.is_file() {
            return Err(ManifestError::Dangling { line: i + 1, path: image.display().to_string() });
        }
        records.push(record);
    }
    Ok(DatasetManifest::new(records))
}

/// Writes the whole manifest to a temporary sibling and renames it into
/// place, so readers never see a half-written file.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    write_lines(path, manifest.records.iter().map(record_to_line))
}

pub(crate) fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), ManifestError> {
    write_atomic(path, |f| {
        let mut w = std::io::BufWriter::new(f);
        for line in lines {
            writeln!(w, "{line}")?;
        }
        w.flush()
    })
    .map_err(|source| io_error(path, source))
}

/// Writes through a sibling temporary file renamed over `path`, so readers
/// see the old file or the whole new one.
pub(crate) fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut std::fs::File) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    fill(tmp.as_file_mut())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io { path: path.display().to_string(), source }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(image: &str) -> ManifestRecord {
        ManifestRecord {
            image_path: image.into(),
            class: IssueClass::WasteDisposal,
            conditions: SceneConditions {
                lighting: Lighting::LowLight,
                weather: Weather::Adverse,
                clutter: Clutter::Simple,
                season: Season::Autumn,
            },
            regions: vec![GroundTruthRegion { bbox: BoundingBox::new(3, 4, 50, 60), class: IssueClass::WasteDisposal }],
            location: GeoPoint { lat: 44.4, lon: 26.1 },
            seed: 17,
        }
    }

    #[test]
    fn wire_field_names() {
        let v: serde_json::Value = serde_json::from_str(&record_to_line(&record("images/a.ppm"))).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["class", "clutter", "image", "lat", "lighting", "lon", "regions", "season", "seed", "weather"]);
        assert_eq!(v["lighting"], "low_light");
        assert_eq!(v["class"], "waste_disposal");
        assert_eq!(v["regions"][0], serde_json::json!({"x": 3, "y": 4, "w": 50, "h": 60, "class": "waste_disposal"}));
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("images")).unwrap();
        fs::write(dir.path().join("images/a.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
        let m = DatasetManifest::new(vec![record("images/a.ppm"), record("images/a.ppm")]);
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.ppm"), b"P6\n1 1\n255\n\0\0\0").unwrap();
        let good = record_to_line(&record("a.ppm"));
        let path = dir.path().join("m.jsonl");

        fs::write(&path, format!("{good}\n\n{{\"image\": 3}}\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::Parse { line: 3, .. })));

        let unknown_class = good.replace("\"class\":\"waste_disposal\",\"lighting\"", "\"class\":\"graffiti\",\"lighting\"");
        fs::write(&path, format!("{good}\n{unknown_class}\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::Parse { line: 2, .. })));

        let mut no_regions = record("a.ppm");
        no_regions.regions.clear();
        fs::write(&path, record_to_line(&no_regions)).unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::Parse { line: 1, .. })));

        fs::write(&path, format!("{good}\n{}\n", record_to_line(&record("missing.ppm")))).unwrap();
        match load_manifest(&path) {
            Err(ManifestError::Dangling { line: 2, path }) => assert!(path.ends_with("missing.ppm")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn absolute_image_paths_are_kept() {
        let r = record("/data/x.ppm");
        assert_eq!(image_path(Path::new("/elsewhere/m.jsonl"), &r), PathBuf::from("/data/x.ppm"));
        assert_eq!(image_path(Path::new("/d/m.jsonl"), &record("i/x.ppm")), PathBuf::from("/d/i/x.ppm"));
    }
}
