//! Rendering a corpus to disk and summarizing manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use petition_core::corpus::{plan_corpus, render_scene, CorpusConfig, CorpusError, DatasetManifest, ManifestRecord};
use serde::Serialize;
use thiserror::Error;

use crate::manifest::{save_manifest, ManifestError};
use crate::pnm::{self, PnmError};

/// Directory next to the manifest that holds the pixmaps.
pub const IMAGE_DIR: &str = "images";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Renders every planned record to `out/images/NNNNNN.ppm` and writes
/// `out/manifest.jsonl`. One image is in memory at a time.
pub fn generate_corpus(
    config: &CorpusConfig,
    out: &Path,
    mut progress: impl FnMut(usize, usize),
) -> Result<DatasetManifest, GenerateError> {
    let plans = plan_corpus(config)?;
    let images = out.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|source| GenerateError::Io { path: images.display().to_string(), source })?;
    let mut records = Vec::with_capacity(plans.len());
    for p in &plans {
        let (img, regions) = render_scene(p.class, p.conditions, config.image_size, p.seed)?;
        let name = format!("{IMAGE_DIR}/{:06}.ppm", p.index);
        pnm::write(&out.join(&name), &img)?;
        records.push(ManifestRecord {
            image_path: name,
            class: p.class,
            conditions: p.conditions,
            regions,
            location: p.location,
            seed: p.seed,
        });
        progress(records.len(), plans.len());
    }
    let manifest = DatasetManifest::new(records);
    save_manifest(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub regions: usize,
    pub classes: BTreeMap<String, usize>,
    pub lighting: BTreeMap<String, usize>,
    pub weather: BTreeMap<String, usize>,
    pub clutter: BTreeMap<String, usize>,
    pub season: BTreeMap<String, usize>,
}

pub fn stats(manifest: &DatasetManifest) -> CorpusStats {
    let mut s = CorpusStats {
        records: manifest.len(),
        regions: 0,
        classes: BTreeMap::new(),
        lighting: BTreeMap::new(),
        weather: BTreeMap::new(),
        clutter: BTreeMap::new(),
        season: BTreeMap::new(),
    };
    for r in &manifest.records {
        s.regions += r.regions.len();
        *s.classes.entry(r.class.token().into()).or_default() += 1;
        *s.lighting.entry(r.conditions.lighting.token().into()).or_default() += 1;
        *s.weather.entry(r.conditions.weather.token().into()).or_default() += 1;
        *s.clutter.entry(r.conditions.clutter.token().into()).or_default() += 1;
        *s.season.entry(r.conditions.season.token().into()).or_default() += 1;
    }
    s
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records  {}", self.records)?;
        writeln!(f, "regions  {}", self.regions)?;
        for (title, counts) in [
            ("class", &self.classes),
            ("lighting", &self.lighting),
            ("weather", &self.weather),
            ("clutter", &self.clutter),
            ("season", &self.season),
        ] {
            writeln!(f, "{title}")?;
            for (k, v) in counts {
                let share = if self.records == 0 { 0.0 } else { 100.0 * *v as f64 / self.records as f64 };
                writeln!(f, "  {k:<24}{v:>7}  {share:5.1}%")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    #[test]
    fn generated_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let config = CorpusConfig { n_images: 12, image_size: 96, seed: 5, ..Default::default() };
        let m = generate_corpus(&config, dir.path(), |_, _| {}).unwrap();
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let img = pnm::read(&dir.path().join(&m.records[0].image_path)).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (96, 96, 3));
        let s = stats(&m);
        assert_eq!(s.records, 12);
        assert_eq!(s.classes.values().sum::<usize>(), 12);
        assert!(s.to_string().contains("waste_disposal"));
    }
}
