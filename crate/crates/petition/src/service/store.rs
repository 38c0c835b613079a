//! In-memory case state folded from the event log, and the read-side
//! queries over it.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use petition_core::corpus::{GeoBounds, IssueClass};
use petition_core::metrics::{classification_report, ClassificationReport, ConfusionMatrix};
use petition_core::workflow::{correction_of, Case, CaseEvent, CaseStatus, CorrectionRecord, WorkflowError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::log::LogRecord;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("case {0} already exists")]
    DuplicateCase(String),
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseFilter {
    pub status: Option<CaseStatus>,
    /// Matches the operator's class when there is one, else the prediction.
    pub class: Option<IssueClass>,
    /// Inclusive lower bound on submission time.
    pub from: Option<DateTime<Utc>>,
    /// Exclusive upper bound on submission time.
    pub to: Option<DateTime<Utc>>,
}

impl CaseFilter {
    pub fn matches(&self, c: &Case) -> bool {
        self.status.is_none_or(|s| c.status == s)
            && self.class.is_none_or(|k| c.final_class() == Some(k))
            && self.from.is_none_or(|t| c.submitted_at >= t)
            && self.to.is_none_or(|t| c.submitted_at < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub cases: Vec<Case>,
    /// Pass back to get the next page; absent on the last one.
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub bounds: GeoBounds,
    pub rows: usize,
    pub cols: usize,
    /// `cells[r][c]`; row 0 is the southern edge, column 0 the western.
    pub cells: Vec<Vec<u64>>,
    /// Matching cases located outside the bounds.
    pub overflow: u64,
    pub matched: u64,
}

/// Operator-reviewed cases scored against the model, plus status counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub cases: usize,
    pub by_status: BTreeMap<String, usize>,
    pub by_class: BTreeMap<String, usize>,
    pub failed: usize,
    pub reviewed: usize,
    /// Rows are the operator's class, columns the model's.
    pub confusion: Vec<Vec<u64>>,
    pub report: Option<ClassificationReport>,
}

#[derive(Debug, Default)]
pub struct CaseStore {
    cases: BTreeMap<String, Case>,
    keys: HashMap<String, String>,
    last_seq: u64,
}

impl CaseStore {
    /// Folds records in order; the first inapplicable one is reported with
    /// its seq.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> Result<Self, (u64, StoreError)> {
        let mut store = CaseStore::default();
        for r in records {
            store.apply(r).map_err(|e| (r.seq, e))?;
        }
        Ok(store)
    }

    /// The case as it would be after `event`, without changing the store.
    pub fn preview(&self, case_id: &str, event: &CaseEvent, at: DateTime<Utc>) -> Result<Case, StoreError> {
        match event {
            CaseEvent::Submitted(s) => {
                if s.id != case_id {
                    return Err(WorkflowError::WrongCase { case: case_id.into(), event: s.id.clone() }.into());
                }
                if self.cases.contains_key(case_id) {
                    return Err(StoreError::DuplicateCase(case_id.into()));
                }
                Ok(Case::new(s.clone()))
            }
            other => {
                let mut c = self.cases.get(case_id).ok_or_else(|| StoreError::UnknownCase(case_id.into()))?.clone();
                c.apply(other, at)?;
                Ok(c)
            }
        }
    }

    pub fn apply(&mut self, record: &LogRecord) -> Result<(), StoreError> {
        let case = self.preview(&record.case_id, &record.event, record.at)?;
        if let Some(k) = &case.idempotency_key {
            self.keys.entry(k.clone()).or_insert_with(|| case.id.clone());
        }
        self.cases.insert(case.id.clone(), case);
        self.last_seq = record.seq;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.get(id)
    }

    pub fn id_for_key(&self, key: &str) -> Option<&str> {
        self.keys.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn cases(&self) -> impl Iterator<Item = &Case> {
        self.cases.values()
    }

    /// Cases the pipeline still owes work, oldest first.
    pub fn unsettled(&self) -> Vec<String> {
        self.cases.values().filter(|c| !c.is_settled()).map(|c| c.id.clone()).collect()
    }

    /// Matching cases in id order, starting after `cursor`.
    pub fn query(&self, filter: &CaseFilter, cursor: Option<&str>, limit: usize) -> Result<Page, StoreError> {
        if limit == 0 || limit > MAX_PAGE_SIZE {
            return Err(StoreError::Invalid { field: "limit", reason: format!("must be 1..={MAX_PAGE_SIZE}") });
        }
        let start = match cursor {
            None => std::ops::Bound::Unbounded,
            Some(c) => {
                let id = decode_cursor(c)?;
                std::ops::Bound::Excluded(id)
            }
        };
        let mut matching =
            self.cases.range::<String, _>((start, std::ops::Bound::Unbounded)).map(|(_, c)| c).filter(|c| filter.matches(c));
        let cases: Vec<Case> = matching.by_ref().take(limit).cloned().collect();
        let next_cursor = match (cases.last(), matching.next()) {
            (Some(last), Some(_)) => Some(encode_cursor(&last.id)),
            _ => None,
        };
        Ok(Page { cases, next_cursor })
    }

    pub fn heatmap(
        &self,
        filter: &CaseFilter,
        bounds: GeoBounds,
        rows: usize,
        cols: usize,
    ) -> Result<HeatmapGrid, StoreError> {
        if rows == 0 || cols == 0 {
            return Err(StoreError::Invalid { field: "rows/cols", reason: "must be at least 1".into() });
        }
        let finite = [bounds.lat_min, bounds.lat_max, bounds.lon_min, bounds.lon_max].iter().all(|v| v.is_finite());
        if !finite || bounds.lat_min >= bounds.lat_max || bounds.lon_min >= bounds.lon_max {
            return Err(StoreError::Invalid { field: "bounds", reason: "need lat_min < lat_max and lon_min < lon_max".into() });
        }
        let mut grid = HeatmapGrid { bounds, rows, cols, cells: vec![vec![0; cols]; rows], overflow: 0, matched: 0 };
        for c in self.cases.values().filter(|c| filter.matches(c)) {
            grid.matched += 1;
            match bin(c.location.lat, bounds.lat_min, bounds.lat_max, rows)
                .zip(bin(c.location.lon, bounds.lon_min, bounds.lon_max, cols))
            {
                Some((r, k)) => grid.cells[r][k] += 1,
                None => grid.overflow += 1,
            }
        }
        Ok(grid)
    }

    /// Operator decisions made at or after `since`, in case order.
    pub fn corrections_since(&self, since: DateTime<Utc>) -> Vec<(CorrectionRecord, &Case)> {
        self.cases.values().filter_map(|c| correction_of(c).filter(|r| r.at >= since).map(|r| (r, c))).collect()
    }

    pub fn classification_metrics(&self) -> ClassificationMetrics {
        let mut m = ClassificationMetrics {
            cases: self.cases.len(),
            by_status: CaseStatus::ALL.iter().map(|s| (format!("{s:?}"), 0)).collect(),
            by_class: IssueClass::ALL.iter().map(|k| (k.token().to_string(), 0)).collect(),
            failed: 0,
            reviewed: 0,
            confusion: Vec::new(),
            report: None,
        };
        let mut cm = ConfusionMatrix::zeros(IssueClass::COUNT);
        for c in self.cases.values() {
            *m.by_status.entry(format!("{:?}", c.status)).or_default() += 1;
            if let Some(k) = c.final_class() {
                *m.by_class.entry(k.token().to_string()).or_default() += 1;
            }
            if c.failure.is_some() {
                m.failed += 1;
            }
            if let (Some(o), Some(p)) = (&c.override_, c.prediction) {
                cm.add(o.class.code(), p.class.code()).expect("class codes are in range");
                m.reviewed += 1;
            }
        }
        m.confusion = cm.rows().map(<[u64]>::to_vec).collect();
        m.report = classification_report(&cm).ok();
        m
    }
}

/// Cell index of `v` in `[lo, hi]` split into `n` equal bins; the upper
/// edge belongs to the last bin.
fn bin(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(lo..=hi).contains(&v) {
        return None;
    }
    Some((((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
}

const CURSOR_PREFIX: &str = "c1.";

fn encode_cursor(id: &str) -> String {
    format!("{CURSOR_PREFIX}{id}")
}

fn decode_cursor(cursor: &str) -> Result<String, StoreError> {
    cursor
        .strip_prefix(CURSOR_PREFIX)
        .filter(|id| ulid::Ulid::from_string(id).is_ok())
        .map(str::to_string)
        .ok_or_else(|| StoreError::Invalid { field: "cursor", reason: format!("`{cursor}` is not a cursor from this API") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use petition_core::corpus::GeoPoint;
    use petition_core::model::Prediction;
    use petition_core::workflow::{Channel, Override, Submission, TriageDecision};
    use proptest::prelude::*;

    fn t(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    fn id(n: u64) -> String {
        ulid::Ulid::from_parts(1_700_000_000_000 + n, u128::from(n)).to_string()
    }

    struct Builder {
        store: CaseStore,
        seq: u64,
    }

    impl Builder {
        fn new() -> Self {
            Builder { store: CaseStore::default(), seq: 0 }
        }

        fn push(&mut self, case_id: &str, event: CaseEvent, at: DateTime<Utc>) {
            self.seq += 1;
            self.store.apply(&LogRecord { seq: self.seq, at, case_id: case_id.into(), event }).unwrap();
        }

        fn submit(&mut self, n: u64, lat: f64, lon: f64) -> String {
            let id = id(n);
            let s = Submission {
                id: id.clone(),
                submitted_at: t(n as i64),
                channel: Channel::Web,
                location: GeoPoint { lat, lon },
                image_ref: format!("{id}.pnm"),
                width: 8,
                height: 8,
                idempotency_key: Some(format!("key-{n}")),
            };
            self.push(&id, CaseEvent::Submitted(s), t(n as i64));
            id
        }

        fn classify(&mut self, id: &str, class: IssueClass, confidence: f64) {
            let mut probs = [(1.0 - confidence) / 2.0; 3];
            probs[class.code()] = confidence;
            self.push(id, CaseEvent::Preprocessed { preprocess_ms: 1.0 }, t(100));
            let prediction = Prediction::from_probabilities(probs);
            self.push(id, CaseEvent::Classified { prediction, proposals: vec![], propose_ms: 1.0, classify_ms: 1.0 }, t(100));
            let dispatch = confidence >= 0.8;
            self.push(id, CaseEvent::Triaged(TriageDecision { confidence, threshold: 0.8, dispatch }), t(100));
        }
    }

    #[test]
    fn submitted_twice_is_rejected() {
        let mut b = Builder::new();
        let a = b.submit(1, 44.4, 26.1);
        let again = b.store.get(&a).unwrap().clone();
        let s = Submission {
            id: a.clone(),
            submitted_at: again.submitted_at,
            channel: again.channel,
            location: again.location,
            image_ref: again.image_ref,
            width: 8,
            height: 8,
            idempotency_key: None,
        };
        assert_eq!(b.store.preview(&a, &CaseEvent::Submitted(s), t(0)), Err(StoreError::DuplicateCase(a.clone())));
        assert_eq!(b.store.id_for_key("key-1"), Some(a.as_str()));
        assert!(matches!(
            b.store.preview("nope", &CaseEvent::Preprocessed { preprocess_ms: 0.0 }, t(0)),
            Err(StoreError::UnknownCase(_))
        ));
    }

    #[test]
    fn empty_store_gives_empty_page() {
        let page = CaseStore::default().query(&CaseFilter::default(), None, 10).unwrap();
        assert!(page.cases.is_empty());
        assert_eq!(page.next_cursor, None);
    }

    #[test]
    fn bad_cursor_and_limit() {
        let s = CaseStore::default();
        assert!(matches!(s.query(&CaseFilter::default(), Some("zzz"), 10), Err(StoreError::Invalid { field: "cursor", .. })));
        assert!(matches!(s.query(&CaseFilter::default(), None, 0), Err(StoreError::Invalid { field: "limit", .. })));
    }

    #[test]
    fn filters_by_status_class_and_time() {
        let mut b = Builder::new();
        let ids: Vec<String> = (0..6).map(|n| b.submit(n, 44.4, 26.1)).collect();
        b.classify(&ids[1], IssueClass::WasteDisposal, 0.5);
        b.classify(&ids[2], IssueClass::WasteDisposal, 0.9);
        b.classify(&ids[3], IssueClass::InfrastructureDamage, 0.4);
        let q = |f: CaseFilter| -> Vec<String> {
            b.store.query(&f, None, 100).unwrap().cases.into_iter().map(|c| c.id).collect()
        };
        assert_eq!(q(CaseFilter { status: Some(CaseStatus::PendingReview), ..Default::default() }), [ids[1].clone(), ids[3].clone()]);
        assert_eq!(q(CaseFilter { class: Some(IssueClass::WasteDisposal), ..Default::default() }), [ids[1].clone(), ids[2].clone()]);
        assert_eq!(q(CaseFilter { from: Some(t(2)), to: Some(t(4)), ..Default::default() }), [ids[2].clone(), ids[3].clone()]);
        assert_eq!(b.store.unsettled(), [ids[0].clone(), ids[2].clone(), ids[4].clone(), ids[5].clone()]);
    }

    proptest! {
        #[test]
        fn pages_concatenate_to_the_full_result(n in 0u64..30, page in 1usize..7, modulus in 1u64..4) {
            let mut b = Builder::new();
            let ids: Vec<String> = (0..n).map(|i| b.submit(i, 44.4, 26.1)).collect();
            for (i, id) in ids.iter().enumerate() {
                if i as u64 % modulus == 0 {
                    b.classify(id, IssueClass::WasteDisposal, 0.3);
                }
            }
            let f = CaseFilter { status: Some(CaseStatus::PendingReview), ..Default::default() };
            let all = b.store.query(&f, None, MAX_PAGE_SIZE).unwrap().cases;
            let mut joined = Vec::new();
            let mut cursor: Option<String> = None;
            let mut pages = 0;
            loop {
                let p = b.store.query(&f, cursor.as_deref(), page).unwrap();
                pages += 1;
                prop_assert!(p.cases.len() <= page);
                joined.extend(p.cases);
                match p.next_cursor {
                    Some(c) => cursor = Some(c),
                    None => break,
                }
            }
            prop_assert_eq!(&joined, &all);
            prop_assert_eq!(pages, all.len().div_ceil(page).max(1));
        }
    }

    #[test]
    fn five_matches_in_pages_of_two() {
        let mut b = Builder::new();
        for n in 0..5 {
            b.submit(n, 44.4, 26.1);
        }
        let p1 = b.store.query(&CaseFilter::default(), None, 2).unwrap();
        let p2 = b.store.query(&CaseFilter::default(), p1.next_cursor.as_deref(), 2).unwrap();
        let p3 = b.store.query(&CaseFilter::default(), p2.next_cursor.as_deref(), 2).unwrap();
        assert_eq!((p1.cases.len(), p2.cases.len(), p3.cases.len()), (2, 2, 1));
        assert_eq!(p3.next_cursor, None);
    }

    #[test]
    fn heatmap_center_and_empty() {
        let bounds = GeoBounds { lat_min: 0.0, lat_max: 2.0, lon_min: 10.0, lon_max: 12.0 };
        let mut b = Builder::new();
        let empty = b.store.heatmap(&CaseFilter::default(), bounds, 2, 3).unwrap();
        assert_eq!(empty.cells, vec![vec![0; 3]; 2]);
        b.submit(0, 1.0, 11.0);
        let g = b.store.heatmap(&CaseFilter::default(), bounds, 1, 1).unwrap();
        assert_eq!(g.cells, vec![vec![1]]);
        let inverted = GeoBounds { lat_min: 2.0, lat_max: 0.0, ..bounds };
        assert!(matches!(b.store.heatmap(&CaseFilter::default(), inverted, 1, 1), Err(StoreError::Invalid { .. })));
        assert!(b.store.heatmap(&CaseFilter::default(), bounds, 0, 1).is_err());
    }

    #[test]
    fn heatmap_matches_direct_binning() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let bounds = GeoBounds { lat_min: 44.0, lat_max: 45.0, lon_min: 26.0, lon_max: 27.0 };
        let mut b = Builder::new();
        let mut points = Vec::new();
        for n in 0..100 {
            let (lat, lon) = (rng.random_range(44.0..45.0), rng.random_range(26.0..27.0));
            points.push((lat, lon));
            b.submit(n, lat, lon);
        }
        // outside on purpose
        b.submit(100, 46.0, 26.5);
        b.submit(101, 44.5, 25.0);
        let g = b.store.heatmap(&CaseFilter::default(), bounds, 2, 2).unwrap();
        let mut oracle = [[0u64; 2]; 2];
        for (lat, lon) in points {
            let r = if lat < 44.5 { 0 } else { 1 };
            let c = if lon < 26.5 { 0 } else { 1 };
            oracle[r][c] += 1;
        }
        assert_eq!(g.cells, oracle.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        assert_eq!(g.cells.iter().flatten().sum::<u64>(), 100);
        assert_eq!(g.overflow, 2);
        assert_eq!(g.matched, 102);
    }

    #[test]
    fn metrics_count_reviewed_cases() {
        let mut b = Builder::new();
        let a = b.submit(0, 44.4, 26.1);
        let c = b.submit(1, 44.4, 26.1);
        b.classify(&a, IssueClass::WasteDisposal, 0.5);
        b.classify(&c, IssueClass::WasteDisposal, 0.5);
        let report = |id: &str| petition_core::workflow::DispatchReport {
            case_id: id.into(),
            department: "d".into(),
            regulation_citation: "c".into(),
            class: IssueClass::InfrastructureDamage,
            priority: petition_core::workflow::Priority::High,
            sla_hours: 1,
            confidence: 1.0,
            location: GeoPoint { lat: 44.4, lon: 26.1 },
            created_at: t(200),
            narrative: String::new(),
        };
        let o = Override { class: IssueClass::InfrastructureDamage, operator: "op".into(), at: t(200) };
        b.push(&a, CaseEvent::Overridden { override_: o, report: report(&a) }, t(200));
        let m = b.store.classification_metrics();
        assert_eq!(m.reviewed, 1);
        assert_eq!(m.confusion[0][1], 1);
        assert_eq!(m.by_status["PendingReview"], 1);
        assert_eq!(m.by_status["Dispatched"], 1);
        assert_eq!(b.store.corrections_since(t(0)).len(), 1);
        assert!(b.store.corrections_since(t(201)).is_empty());
    }
}
