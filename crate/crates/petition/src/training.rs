//! Training, evaluation and grid search over on-disk manifests, plus
//! checkpoint files.

use std::fmt::Write as _;
use std::path::Path;

use petition_core::corpus::{split_train_val, CorpusError, DatasetManifest, IssueClass};
use petition_core::imaging::{preprocess, ImagingError, RasterImage, DEFAULT_BLUR_SIGMA, STANDARD_SIZE};
use petition_core::metrics::{classification_report, display_percent, ClassificationReport, ConfusionMatrix, MetricsError};
use petition_core::model::{
    checkpoint, evaluation_case, grid_search, predict_prepared, train, training_sample, CheckpointError, GridCell,
    GridOutcome, GridSpace, ModelError, Network, NetworkSpec, Parameters, PreparedCase, TrainConfig, TrainOptions,
    TrainOutcome, TrainingSample,
};
use petition_core::regions::ProposerSettings;
use serde::Serialize;
use thiserror::Error;

use crate::manifest::{image_path, write_lines, ManifestError};
use crate::pnm::{self, PnmError};

/// Training fraction of the validation split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Checkpoint { path: String, source: CheckpointError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, params: &Parameters<f32>) -> Result<(), TrainingError> {
    let io = |source| TrainingError::Io { path: path.display().to_string(), source };
    let bytes = checkpoint::encode(spec, params);
    crate::manifest::write_atomic(path, |f| std::io::Write::write_all(f, &bytes)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, Parameters<f32>), TrainingError> {
    let data = std::fs::read(path).map_err(|source| TrainingError::Io { path: path.display().to_string(), source })?;
    checkpoint::decode(&data).map_err(|source| TrainingError::Checkpoint { path: path.display().to_string(), source })
}

/// Reads a raster and runs the standard resize, normalize and blur chain.
pub fn load_standardized(path: &Path) -> Result<RasterImage, TrainingError> {
    Ok(preprocess(&pnm::read(path)?, STANDARD_SIZE, DEFAULT_BLUR_SIGMA)?)
}

/// Training samples for every record, loading one image at a time.
pub fn training_samples(
    network: &Network,
    manifest_path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<TrainingSample>, TrainingError> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = load_standardized(&image_path(manifest_path, r))?;
            Ok(training_sample(network, &img, &r.regions, r.class)?)
        })
        .collect()
}

/// Proposals and network-ready crops for every record, as the service
/// would compute them.
pub fn evaluation_cases(
    network: &Network,
    manifest_path: &Path,
    manifest: &DatasetManifest,
    settings: &ProposerSettings,
) -> Result<Vec<(PreparedCase<f32>, IssueClass)>, TrainingError> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = load_standardized(&image_path(manifest_path, r))?;
            Ok((evaluation_case(network, &img, settings)?, r.class))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub confusion: Vec<Vec<u64>>,
    pub report: ClassificationReport,
}

pub fn evaluate(
    network: &Network,
    params: &Parameters<f32>,
    cases: &[(PreparedCase<f32>, IssueClass)],
) -> Result<Evaluation, TrainingError> {
    let mut cm = ConfusionMatrix::zeros(IssueClass::COUNT);
    let mut ws = network.workspace();
    for (case, truth) in cases {
        let p = predict_prepared(network, params, case, &mut ws)?;
        cm.add(truth.code(), p.class.code())?;
    }
    let report = classification_report(&cm)?;
    Ok(Evaluation { confusion: cm.rows().map(<[u64]>::to_vec).collect(), report })
}

/// Per-class precision, recall and F1 in whole percent, the layout of a
/// published results table.
pub fn report_table(report: &ClassificationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24}{:>10}{:>8}{:>8}{:>9}", "class", "precision", "recall", "f1", "support");
    for (class, s) in IssueClass::ALL.iter().zip(&report.per_class) {
        let _ = writeln!(
            out,
            "{:<24}{:>10}{:>8}{:>8}{:>9}",
            class.token(),
            display_percent(s.precision),
            display_percent(s.recall),
            display_percent(s.f1),
            s.support
        );
    }
    let _ = writeln!(
        out,
        "{:<24}{:>10}{:>8}{:>8}{:>9}",
        "macro",
        display_percent(report.macro_precision),
        display_percent(report.macro_recall),
        display_percent(report.macro_f1),
        report.total
    );
    let _ = writeln!(out, "accuracy {:.4}", report.accuracy);
    out
}

/// One JSON object per class, then one for the totals.
pub fn report_jsonl(report: &ClassificationReport) -> String {
    let mut out = String::new();
    for (class, s) in IssueClass::ALL.iter().zip(&report.per_class) {
        let line = serde_json::json!({
            "class": class.token(),
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "support": s.support,
            "degenerate": s.degenerate,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    let totals = serde_json::json!({
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "total": report.total,
    });
    out.push_str(&totals.to_string());
    out.push('\n');
    out
}

/// Trains on every record of the manifest.
pub fn train_manifest(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(Network, TrainOutcome), TrainingError> {
    let network = Network::new(NetworkSpec::reference())?;
    let samples = training_samples(&network, manifest_path, manifest)?;
    let outcome = train(&network, &samples, config, &TrainOptions::default())?;
    Ok((network, outcome))
}

#[derive(Debug)]
pub struct GridRun {
    pub network: Network,
    pub outcome: GridOutcome,
    pub validation: Evaluation,
    pub train_len: usize,
    pub val_len: usize,
}

/// Seeded stratified split, grid search over `space`, and a validation
/// report for the winning cell.
pub fn run_grid(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    space: &GridSpace,
    seed: u64,
    on_cell: impl FnMut(&GridCell),
) -> Result<GridRun, TrainingError> {
    let network = Network::new(NetworkSpec::reference())?;
    let (train_m, val_m) = split_train_val(manifest, TRAIN_FRACTION, seed)?;
    let samples = training_samples(&network, manifest_path, &train_m)?;
    let val = evaluation_cases(&network, manifest_path, &val_m, &ProposerSettings::default())?;
    let outcome = grid_search(&network, space, &samples, &val, seed, &TrainOptions::default(), on_cell)?;
    let validation = evaluate(&network, &outcome.best_params, &val)?;
    Ok(GridRun { network, outcome, validation, train_len: train_m.len(), val_len: val_m.len() })
}

/// The grid table as JSON lines.
pub fn write_grid_table(path: &Path, table: &[GridCell]) -> Result<(), TrainingError> {
    Ok(write_lines(path, table.iter().map(|c| serde_json::to_string(c).expect("grid cells serialize")))?)
}
