//! The case service: durable submission, the pipeline worker, operator
//! decisions and read-side queries. [`api`] puts it on HTTP.
//!
//! On disk, a data directory holds `events.jsonl` and `blobs/<id>.pnm`.
//! Every mutation takes the state lock, checks the transition against the
//! current case, appends it to the log, and only then updates memory, so
//! the log and the store never disagree.

pub mod api;
pub mod config;
pub mod log;
pub mod pipeline;
pub mod store;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use petition_core::corpus::{GeoBounds, GeoPoint, IssueClass, ManifestRecord, SceneConditions, Season};
use petition_core::corpus::{GroundTruthRegion, DatasetManifest};
use petition_core::regions::BoundingBox;
use petition_core::workflow::{apply_override, reject, Case, CaseEvent, Channel, Submission, Templates, WorkflowError};
use thiserror::Error;

use crate::manifest::{record_to_line, write_lines, ManifestError};
use crate::pnm;
use crate::rules::{default_rule_table, load_rule_table, load_templates, RulesError};
use crate::training::{load_checkpoint, TrainingError};
use config::ServiceConfig;
use log::{EventLog, LogError, LogRecord};
use pipeline::Pipeline;
use store::{CaseFilter, CaseStore, ClassificationMetrics, HeatmapGrid, Page, StoreError};

pub const LOG_FILE: &str = "events.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("case {0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("event log: {0}")]
    Log(#[from] LogError),
    #[error("replaying seq {seq}: {source}")]
    Replay { seq: u64, source: StoreError },
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("pipeline setup: {0}")]
    Setup(String),
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownCase(id) => ServiceError::NotFound(id),
            StoreError::Invalid { field, reason } => ServiceError::Validation { field, reason },
            StoreError::Workflow(WorkflowError::InvalidParameter { name, reason }) => {
                ServiceError::Validation { field: name, reason }
            }
            other => ServiceError::Conflict(other.to_string()),
        }
    }
}

impl From<WorkflowError> for ServiceError {
    fn from(e: WorkflowError) -> Self {
        StoreError::Workflow(e).into()
    }
}

/// Result of a submission.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Submitted {
    pub id: String,
    /// The idempotency key was already known and no case was created.
    pub duplicate: bool,
}

struct State {
    log: EventLog,
    store: CaseStore,
}

pub struct Service {
    config: ServiceConfig,
    blobs: PathBuf,
    pipeline: Pipeline,
    state: Mutex<State>,
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
    stopping: AtomicBool,
    ids: Mutex<ulid::Generator>,
}

/// Replays `data_dir`'s log into a store, without opening it for writing.
pub fn replay_dir(data_dir: &Path) -> Result<(CaseStore, log::Replay), ServiceError> {
    let replay = log::read_log(&data_dir.join(LOG_FILE))?;
    let store = CaseStore::from_records(&replay.records).map_err(|(seq, source)| ServiceError::Replay { seq, source })?;
    Ok((store, replay))
}

impl Service {
    /// Loads the checkpoint and rules named by `config`, then opens the data
    /// directory.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        let (spec, params) = load_checkpoint(&config.checkpoint)?;
        let rules = match &config.rules {
            Some(p) => load_rule_table(p)?,
            None => default_rule_table(),
        };
        let templates = match &config.templates {
            Some(p) => load_templates(p)?,
            None => Templates::default(),
        };
        let pipeline = Pipeline::new(spec, params, rules, templates, config.threshold, config.proposer.clone())
            .map_err(ServiceError::Setup)?;
        Self::with_pipeline(config, pipeline)
    }

    /// Replays the log and queues every case the pipeline had not finished.
    pub fn with_pipeline(config: ServiceConfig, pipeline: Pipeline) -> Result<Arc<Self>, ServiceError> {
        let blobs = config.data_dir.join(BLOB_DIR);
        std::fs::create_dir_all(&blobs).map_err(|e| ServiceError::Storage(format!("{}: {e}", blobs.display())))?;
        let (log, replay) = EventLog::open(&config.data_dir.join(LOG_FILE), config.fsync)?;
        let store =
            CaseStore::from_records(&replay.records).map_err(|(seq, source)| ServiceError::Replay { seq, source })?;
        let pending: VecDeque<String> = store.unsettled().into();
        ::log::info!("replayed {} events, {} cases, {} to resume", replay.records.len(), store.len(), pending.len());
        Ok(Arc::new(Service {
            config,
            blobs,
            pipeline,
            state: Mutex::new(State { log, store }),
            queue: Mutex::new(pending),
            ready: Condvar::new(),
            stopping: AtomicBool::new(false),
            ids: Mutex::new(ulid::Generator::new()),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn enqueue(&self, id: String) {
        self.queue.lock().unwrap_or_else(|p| p.into_inner()).push_back(id);
        self.ready.notify_one();
    }

    pub fn queue_len(&self) -> usize {
        self.queue.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn blob_path(&self, case: &Case) -> PathBuf {
        self.blobs.join(&case.image_ref)
    }

    /// Checks, logs and applies one event while holding the state lock.
    fn commit_locked(state: &mut State, case_id: &str, event: CaseEvent) -> Result<Case, ServiceError> {
        let at = Utc::now();
        state.store.preview(case_id, &event, at)?;
        let record = state.log.append(case_id, at, event)?;
        state.store.apply(&record).expect("previewed event applies");
        Ok(state.store.get(case_id).expect("case just applied").clone())
    }

    pub fn commit(&self, case_id: &str, event: CaseEvent) -> Result<Case, ServiceError> {
        Self::commit_locked(&mut self.state(), case_id, event)
    }

    /// Stores the blob, logs the submission and queues the case. A known
    /// idempotency key returns the original id and changes nothing.
    pub fn submit(
        &self,
        image: &[u8],
        location: GeoPoint,
        channel: Channel,
        idempotency_key: Option<String>,
    ) -> Result<Submitted, ServiceError> {
        if !(-90.0..=90.0).contains(&location.lat) {
            return Err(ServiceError::Validation { field: "lat", reason: format!("{} is outside [-90, 90]", location.lat) });
        }
        if !(-180.0..=180.0).contains(&location.lon) {
            return Err(ServiceError::Validation { field: "lon", reason: format!("{} is outside [-180, 180]", location.lon) });
        }
        let key = idempotency_key.filter(|k| !k.is_empty());
        if let Some(id) = key.as_deref().and_then(|k| self.state().store.id_for_key(k).map(str::to_string)) {
            return Ok(Submitted { id, duplicate: true });
        }
        let raster =
            pnm::decode(image).map_err(|e| ServiceError::Validation { field: "image", reason: e.to_string() })?;
        let id = self
            .ids
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .generate()
            .map_err(|e| ServiceError::Storage(e.to_string()))?
            .to_string();
        let image_ref = format!("{id}.pnm");
        let blob = self.blobs.join(&image_ref);
        write_blob(&blob, image, self.config.fsync).map_err(|e| ServiceError::Storage(format!("{}: {e}", blob.display())))?;

        let mut state = self.state();
        if let Some(existing) = key.as_deref().and_then(|k| state.store.id_for_key(k).map(str::to_string)) {
            drop(state);
            let _ = std::fs::remove_file(&blob);
            return Ok(Submitted { id: existing, duplicate: true });
        }
        let submission = Submission {
            id: id.clone(),
            submitted_at: Utc::now(),
            channel,
            location,
            image_ref,
            width: raster.width(),
            height: raster.height(),
            idempotency_key: key,
        };
        Self::commit_locked(&mut state, &id, CaseEvent::Submitted(submission))?;
        drop(state);
        self.enqueue(id.clone());
        Ok(Submitted { id, duplicate: false })
    }

    /// Operator decision on a case under review. The first decision wins;
    /// later ones are conflicts.
    pub fn override_case(&self, id: &str, class: IssueClass, operator: &str) -> Result<Case, ServiceError> {
        let mut state = self.state();
        let case = state.store.get(id).ok_or_else(|| ServiceError::NotFound(id.into()))?.clone();
        let (event, _) =
            apply_override(&case, class, operator, Utc::now(), &self.pipeline.rules, &self.pipeline.templates)?;
        let case = Self::commit_locked(&mut state, id, event)?;
        drop(state);
        // the citizen still needs the acknowledgment
        self.enqueue(id.to_string());
        Ok(case)
    }

    pub fn reject_case(&self, id: &str, operator: &str, reason: &str) -> Result<Case, ServiceError> {
        let mut state = self.state();
        let case = state.store.get(id).ok_or_else(|| ServiceError::NotFound(id.into()))?.clone();
        let event = reject(&case, operator, reason, Utc::now())?;
        Self::commit_locked(&mut state, id, event)
    }

    pub fn get(&self, id: &str) -> Option<Case> {
        self.state().store.get(id).cloned()
    }

    pub fn query(&self, filter: &CaseFilter, cursor: Option<&str>, limit: usize) -> Result<Page, ServiceError> {
        Ok(self.state().store.query(filter, cursor, limit)?)
    }

    pub fn heatmap(&self, filter: &CaseFilter, bounds: GeoBounds, rows: usize, cols: usize) -> Result<HeatmapGrid, ServiceError> {
        Ok(self.state().store.heatmap(filter, bounds, rows, cols)?)
    }

    pub fn classification_metrics(&self) -> ClassificationMetrics {
        self.state().store.classification_metrics()
    }

    /// (cases, last seq)
    pub fn counts(&self) -> (usize, u64) {
        let s = self.state();
        (s.store.len(), s.log.last_seq())
    }

    pub fn export_corrections(&self, since: DateTime<Utc>, out: &Path) -> Result<usize, ServiceError> {
        export_corrections(&self.state().store, &self.blobs, since, out)
    }

    /// Takes one queued case and drives it as far as the pipeline can.
    /// `None` when the queue is empty.
    pub fn process_next(&self) -> Option<String> {
        let id = self.queue.lock().unwrap_or_else(|p| p.into_inner()).pop_front()?;
        self.process(&id);
        Some(id)
    }

    fn process(&self, id: &str) {
        let Some(mut case) = self.get(id) else { return };
        let mut standardized = None;
        loop {
            if case.is_settled() {
                return;
            }
            let step = match case.status {
                petition_core::workflow::CaseStatus::Received | petition_core::workflow::CaseStatus::Preprocessed => {
                    self.early_stages(&case, &mut standardized)
                }
                _ => match self.pipeline.advance(&case, Utc::now()) {
                    Some(r) => r,
                    None => return,
                },
            };
            let event = match step {
                Ok(e) => e,
                Err((stage, reason)) => {
                    ::log::warn!("case {id}: {stage} failed: {reason}");
                    CaseEvent::Failed { stage, reason }
                }
            };
            case = match self.commit(id, event) {
                Ok(c) => c,
                Err(e) => {
                    // a concurrent decision got there first; whoever made it requeues
                    ::log::warn!("case {id}: {e}");
                    return;
                }
            };
        }
    }

    /// Preprocess, then propose and classify. After a restart in
    /// `Preprocessed` the image is standardized again without a new event.
    fn early_stages(&self, case: &Case, standardized: &mut Option<petition_core::imaging::RasterImage>) -> pipeline::StageResult {
        if standardized.is_none() {
            let raw = pnm::read(&self.blob_path(case)).map_err(|e| ("preprocess".to_string(), e.to_string()))?;
            let (img, preprocess_ms) = self.pipeline.standardize(&raw).map_err(|e| ("preprocess".to_string(), e))?;
            *standardized = Some(img);
            if case.status == petition_core::workflow::CaseStatus::Received {
                return Ok(CaseEvent::Preprocessed { preprocess_ms });
            }
        }
        self.pipeline.classify(standardized.as_ref().expect("standardized above"))
    }

    /// Blocks until a case is queued or [`Service::stop`] is called.
    fn next_job(&self) -> Option<String> {
        let mut q = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if self.stopping.load(Ordering::SeqCst) {
                return None;
            }
            if let Some(id) = q.pop_front() {
                return Some(id);
            }
            q = self.ready.wait(q).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn spawn_workers(self: &Arc<Self>, n: usize) -> Vec<JoinHandle<()>> {
        (0..n)
            .map(|i| {
                let svc = Arc::clone(self);
                std::thread::Builder::new()
                    .name(format!("pipeline-{i}"))
                    .spawn(move || {
                        while let Some(id) = svc.next_job() {
                            svc.process(&id);
                        }
                    })
                    .expect("spawn pipeline worker")
            })
            .collect()
    }

    /// Lets workers finish their current case and exit.
    pub fn stop(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        let _guard = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        self.ready.notify_all();
    }
}

fn write_blob(path: &Path, data: &[u8], fsync: bool) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    f.write_all(data)?;
    if fsync {
        f.sync_data()?;
    }
    Ok(())
}

/// Operator decisions since `since` as manifest records, so they can be
/// merged into a training set. Scene conditions are unknown for real
/// submissions and recorded as daylight, clear, simple, with the season of
/// the submission month. Regions are the case's proposals relabeled with
/// the operator's class, or the whole image when there were none.
pub fn correction_records(store: &CaseStore, blobs: &Path, since: DateTime<Utc>) -> Vec<ManifestRecord> {
    use chrono::Datelike;
    store
        .corrections_since(since)
        .into_iter()
        .map(|(correction, case)| {
            let class = correction.corrected_class;
            let mut regions: Vec<GroundTruthRegion> =
                case.proposals.iter().map(|p| GroundTruthRegion { bbox: p.bbox, class }).collect();
            if regions.is_empty() {
                regions.push(GroundTruthRegion { bbox: BoundingBox::new(0, 0, case.width, case.height), class });
            }
            let image = blobs.join(&correction.image_ref);
            let image = std::fs::canonicalize(&image).unwrap_or(image);
            ManifestRecord {
                image_path: image.display().to_string(),
                class,
                conditions: SceneConditions::easy(Season::from_month(case.submitted_at.month())),
                regions,
                location: case.location,
                seed: 0,
            }
        })
        .collect()
}

/// Writes [`correction_records`] to `out` and returns how many. On failure
/// no partial file is left behind.
pub fn export_corrections(store: &CaseStore, blobs: &Path, since: DateTime<Utc>, out: &Path) -> Result<usize, ServiceError> {
    let records = correction_records(store, blobs, since);
    let manifest = DatasetManifest::new(records);
    write_lines(out, manifest.records.iter().map(record_to_line)).map_err(|e: ManifestError| ServiceError::Storage(e.to_string()))?;
    Ok(manifest.len())
}

/// The records of a data directory, for tools that only read.
pub fn read_records(data_dir: &Path) -> Result<Vec<LogRecord>, ServiceError> {
    Ok(log::read_log(&data_dir.join(LOG_FILE))?.records)
}
