//! Case lifecycle: the status machine, confidence triage, rule-table
//! dispatch reports and citizen acknowledgments.
//!
//! A [`Case`] only changes through [`Case::apply`], one [`CaseEvent`] at a
//! time, so folding a log of events reproduces the case exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GeoPoint, IssueClass};
use crate::model::Prediction;
use crate::regions::RegionProposal;

pub const DEFAULT_TRIAGE_THRESHOLD: f64 = 0.80;

pub const DEFAULT_REPORT_TEMPLATE: &str = include_str!("../templates/en/report.txt");
pub const DEFAULT_MESSAGE_TEMPLATE: &str = include_str!("../templates/en/message.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkflowError {
    #[error("illegal transition: {event} on a {from:?} case")]
    IllegalTransition { from: CaseStatus, event: &'static str },
    #[error("no regulation rule for class {0:?}")]
    MissingRule(IssueClass),
    #[error("duplicate regulation rule for class {0:?}")]
    DuplicateRule(IssueClass),
    #[error("template error: {0}")]
    Template(String),
    #[error("case {0} has no final class")]
    NoFinalClass(String),
    #[error("event for case {event} applied to case {case}")]
    WrongCase { case: String, event: String },
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    MobileApp,
    Web,
    Email,
}

impl Channel {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "mobile_app" => Some(Channel::MobileApp),
            "web" => Some(Channel::Web),
            "email" => Some(Channel::Email),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseStatus {
    Received,
    Preprocessed,
    Classified,
    PendingReview,
    Dispatched,
    Notified,
    Rejected,
}

impl CaseStatus {
    pub const ALL: [CaseStatus; 7] = [
        CaseStatus::Received,
        CaseStatus::Preprocessed,
        CaseStatus::Classified,
        CaseStatus::PendingReview,
        CaseStatus::Dispatched,
        CaseStatus::Notified,
        CaseStatus::Rejected,
    ];

    pub fn can_transition_to(self, next: CaseStatus) -> bool {
        use CaseStatus::*;
        matches!(
            (self, next),
            (Received, Preprocessed)
                | (Preprocessed, Classified)
                | (Classified, Dispatched)
                | (Classified, PendingReview)
                | (PendingReview, Dispatched)
                | (PendingReview, Rejected)
                | (Dispatched, Notified)
        )
    }

    /// No transition leaves these.
    pub fn is_terminal(self) -> bool {
        matches!(self, CaseStatus::Notified | CaseStatus::Rejected)
    }

    pub fn parse(token: &str) -> Option<Self> {
        CaseStatus::ALL.into_iter().find(|s| format!("{s:?}") == token)
    }
}

/// Pipeline stages with recorded timings.
pub const STAGES: [&str; 5] = ["preprocess", "propose", "classify", "report", "notify"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub class: IssueClass,
    pub operator: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub operator: String,
    pub reason: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageDecision {
    pub confidence: f64,
    pub threshold: f64,
    pub dispatch: bool,
}

/// Routes a prediction: dispatch when `confidence ≥ threshold`, otherwise
/// human review.
pub fn triage(prediction: &Prediction, threshold: f64) -> TriageDecision {
    TriageDecision {
        confidence: prediction.confidence,
        threshold,
        dispatch: prediction.confidence >= threshold,
    }
}

pub fn validate_threshold(threshold: f64) -> Result<(), WorkflowError> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(WorkflowError::InvalidParameter { name: "threshold", reason: format!("{threshold} is outside (0, 1]") })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    High,
    Normal,
    Low,
}

impl Priority {
    pub fn token(self) -> &'static str {
        match self {
            Priority::High => "high",
            Priority::Normal => "normal",
            Priority::Low => "low",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulationRule {
    pub class: IssueClass,
    pub department: String,
    pub citation: String,
    pub priority: Priority,
    pub sla_hours: u32,
}

/// At most one rule per class. Completeness is checked separately so a
/// partial table still reports the missing class at use time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleTable {
    rules: BTreeMap<IssueClass, RegulationRule>,
}

impl RuleTable {
    pub fn new(rules: impl IntoIterator<Item = RegulationRule>) -> Result<Self, WorkflowError> {
        let mut map = BTreeMap::new();
        for r in rules {
            let class = r.class;
            if map.insert(class, r).is_some() {
                return Err(WorkflowError::DuplicateRule(class));
            }
        }
        Ok(Self { rules: map })
    }

    pub fn get(&self, class: IssueClass) -> Result<&RegulationRule, WorkflowError> {
        self.rules.get(&class).ok_or(WorkflowError::MissingRule(class))
    }

    /// Errors with the first class that has no rule.
    pub fn check_complete(&self) -> Result<(), WorkflowError> {
        IssueClass::ALL.iter().try_for_each(|&c| self.get(c).map(|_| ()))
    }

    pub fn rules(&self) -> impl Iterator<Item = &RegulationRule> {
        self.rules.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// Plain text with `{{name}}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, WorkflowError> {
        let mut pieces = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| WorkflowError::Template("unclosed `{{`".into()))?;
            let name = after[..close].trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(WorkflowError::Template(format!("bad placeholder `{}`", &after[..close])));
            }
            pieces.push(Piece::Slot(name.to_string()));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self { pieces })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Text(_) => None,
        })
    }

    /// Unknown placeholders are an error rather than left blank.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, WorkflowError> {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => out.push_str(
                    values
                        .get(name.as_str())
                        .ok_or_else(|| WorkflowError::Template(format!("unknown placeholder `{name}`")))?,
                ),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub report: Template,
    pub message: Template,
}

impl Templates {
    pub fn parse(report: &str, message: &str) -> Result<Self, WorkflowError> {
        let t = Self { report: Template::parse(report)?, message: Template::parse(message)? };
        // fail at load time, not on the first dispatched case
        let probe = slot_values_probe();
        t.report.render(&probe)?;
        t.message.render(&probe)?;
        Ok(t)
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::parse(DEFAULT_REPORT_TEMPLATE, DEFAULT_MESSAGE_TEMPLATE).expect("shipped templates are valid")
    }
}

const SLOTS: [&str; 11] = [
    "case_id",
    "class",
    "class_label",
    "department",
    "citation",
    "priority",
    "sla_hours",
    "location",
    "confidence",
    "submitted_at",
    "channel",
];

fn slot_values_probe() -> BTreeMap<&'static str, String> {
    SLOTS.iter().map(|&s| (s, String::new())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchReport {
    pub case_id: String,
    pub department: String,
    pub regulation_citation: String,
    pub class: IssueClass,
    pub priority: Priority,
    pub sla_hours: u32,
    /// Model confidence; 1 when an operator decided the class.
    pub confidence: f64,
    pub location: GeoPoint,
    pub created_at: DateTime<Utc>,
    pub narrative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitizenMessage {
    pub case_id: String,
    pub created_at: DateTime<Utc>,
    pub body: String,
}

/// An operator's label for a case image, usable as training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub case_id: String,
    pub image_ref: String,
    pub corrected_class: IssueClass,
    pub predicted_class: Option<IssueClass>,
    pub operator: String,
    pub at: DateTime<Utc>,
}

impl CorrectionRecord {
    /// The operator agreed with the model.
    pub fn is_confirmation(&self) -> bool {
        self.predicted_class == Some(self.corrected_class)
    }
}

/// What a submission carries before any processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    pub submitted_at: DateTime<Utc>,
    pub channel: Channel,
    pub location: GeoPoint,
    pub image_ref: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// Every state change a case can undergo. Each variant is one log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum CaseEvent {
    Submitted(Submission),
    Preprocessed {
        preprocess_ms: f64,
    },
    Classified {
        prediction: Prediction,
        proposals: Vec<RegionProposal>,
        propose_ms: f64,
        classify_ms: f64,
    },
    Triaged(TriageDecision),
    Overridden {
        #[serde(rename = "override")]
        override_: Override,
        report: DispatchReport,
    },
    Rejected(Rejection),
    Dispatched {
        report: DispatchReport,
        report_ms: f64,
    },
    Notified {
        message: CitizenMessage,
        notify_ms: f64,
    },
    /// A pipeline stage failed; the case stays where it was and is not
    /// retried automatically.
    Failed {
        stage: String,
        reason: String,
    },
}

impl CaseEvent {
    pub fn name(&self) -> &'static str {
        match self {
            CaseEvent::Submitted(_) => "Submitted",
            CaseEvent::Preprocessed { .. } => "Preprocessed",
            CaseEvent::Classified { .. } => "Classified",
            CaseEvent::Triaged(_) => "Triaged",
            CaseEvent::Overridden { .. } => "Overridden",
            CaseEvent::Rejected(_) => "Rejected",
            CaseEvent::Dispatched { .. } => "Dispatched",
            CaseEvent::Notified { .. } => "Notified",
            CaseEvent::Failed { .. } => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub submitted_at: DateTime<Utc>,
    pub channel: Channel,
    pub location: GeoPoint,
    pub image_ref: String,
    pub width: usize,
    pub height: usize,
    pub idempotency_key: Option<String>,
    pub status: CaseStatus,
    pub prediction: Option<Prediction>,
    pub proposals: Vec<RegionProposal>,
    pub triage: Option<TriageDecision>,
    #[serde(rename = "override")]
    pub override_: Option<Override>,
    pub rejection: Option<Rejection>,
    pub report: Option<DispatchReport>,
    pub message: Option<CitizenMessage>,
    pub failure: Option<String>,
    /// Stage name to milliseconds; see [`STAGES`].
    pub stage_timings: BTreeMap<String, f64>,
    /// Time of the last applied event.
    pub updated_at: DateTime<Utc>,
}

impl Case {
    pub fn new(s: Submission) -> Self {
        Case {
            id: s.id,
            submitted_at: s.submitted_at,
            channel: s.channel,
            location: s.location,
            image_ref: s.image_ref,
            width: s.width,
            height: s.height,
            idempotency_key: s.idempotency_key,
            status: CaseStatus::Received,
            prediction: None,
            proposals: Vec::new(),
            triage: None,
            override_: None,
            rejection: None,
            report: None,
            message: None,
            failure: None,
            stage_timings: BTreeMap::new(),
            updated_at: s.submitted_at,
        }
    }

    /// Override class if an operator decided, else the predicted class.
    pub fn final_class(&self) -> Option<IssueClass> {
        self.override_.as_ref().map(|o| o.class).or(self.prediction.map(|p| p.class))
    }

    /// The automatic pipeline has nothing left to do for this case.
    pub fn is_settled(&self) -> bool {
        self.failure.is_some() || self.status.is_terminal() || self.status == CaseStatus::PendingReview
    }

    fn illegal(&self, event: &CaseEvent) -> WorkflowError {
        WorkflowError::IllegalTransition { from: self.status, event: event.name() }
    }

    fn move_to(&mut self, next: CaseStatus, event: &CaseEvent) -> Result<(), WorkflowError> {
        if self.status.can_transition_to(next) {
            self.status = next;
            Ok(())
        } else {
            Err(self.illegal(event))
        }
    }

    /// Applies one event, or leaves the case untouched and errors.
    pub fn apply(&mut self, event: &CaseEvent, at: DateTime<Utc>) -> Result<(), WorkflowError> {
        if self.failure.is_some() {
            return Err(self.illegal(event));
        }
        let mut next = self.clone();
        next.apply_inner(event)?;
        next.updated_at = at;
        *self = next;
        Ok(())
    }

    fn apply_inner(&mut self, event: &CaseEvent) -> Result<(), WorkflowError> {
        match event {
            CaseEvent::Submitted(_) => return Err(self.illegal(event)),
            CaseEvent::Preprocessed { preprocess_ms } => {
                self.move_to(CaseStatus::Preprocessed, event)?;
                self.stage_timings.insert("preprocess".into(), *preprocess_ms);
            }
            CaseEvent::Classified { prediction, proposals, propose_ms, classify_ms } => {
                self.move_to(CaseStatus::Classified, event)?;
                self.prediction = Some(*prediction);
                self.proposals = proposals.clone();
                self.stage_timings.insert("propose".into(), *propose_ms);
                self.stage_timings.insert("classify".into(), *classify_ms);
            }
            CaseEvent::Triaged(decision) => {
                if self.status != CaseStatus::Classified || self.triage.is_some() {
                    return Err(self.illegal(event));
                }
                if !decision.dispatch {
                    self.move_to(CaseStatus::PendingReview, event)?;
                }
                self.triage = Some(*decision);
            }
            CaseEvent::Dispatched { report, report_ms } => {
                // automatic dispatch needs a dispatching triage decision
                if !matches!(self.triage, Some(TriageDecision { dispatch: true, .. })) || report.case_id != self.id {
                    return Err(self.illegal(event));
                }
                self.move_to(CaseStatus::Dispatched, event)?;
                self.report = Some(report.clone());
                self.stage_timings.insert("report".into(), *report_ms);
            }
            CaseEvent::Overridden { override_, report } => {
                if self.status != CaseStatus::PendingReview || report.case_id != self.id {
                    return Err(self.illegal(event));
                }
                self.move_to(CaseStatus::Dispatched, event)?;
                self.override_ = Some(override_.clone());
                self.report = Some(report.clone());
            }
            CaseEvent::Rejected(r) => {
                self.move_to(CaseStatus::Rejected, event)?;
                self.rejection = Some(r.clone());
            }
            CaseEvent::Notified { message, notify_ms } => {
                if message.case_id != self.id {
                    return Err(self.illegal(event));
                }
                self.move_to(CaseStatus::Notified, event)?;
                self.message = Some(message.clone());
                self.stage_timings.insert("notify".into(), *notify_ms);
            }
            CaseEvent::Failed { stage, reason } => {
                if self.status.is_terminal() {
                    return Err(self.illegal(event));
                }
                self.failure = Some(format!("{stage}: {reason}"));
            }
        }
        Ok(())
    }
}

/// Builds a case from its full event history.
pub fn fold_case<'a>(
    events: impl IntoIterator<Item = (&'a CaseEvent, DateTime<Utc>)>,
) -> Result<Option<Case>, WorkflowError> {
    let mut case: Option<Case> = None;
    for (e, at) in events {
        match (&mut case, e) {
            (None, CaseEvent::Submitted(s)) => case = Some(Case::new(s.clone())),
            (None, other) => {
                return Err(WorkflowError::IllegalTransition { from: CaseStatus::Received, event: other.name() })
            }
            (Some(c), other) => c.apply(other, at)?,
        }
    }
    Ok(case)
}

fn format_location(p: GeoPoint) -> String {
    format!("{:.5}, {:.5}", p.lat, p.lon)
}

fn slot_values(case: &Case, class: IssueClass, rule: &RegulationRule, confidence: f64) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("case_id", case.id.clone());
    v.insert("class", class.token().to_string());
    v.insert("class_label", class.label().to_string());
    v.insert("department", rule.department.clone());
    v.insert("citation", rule.citation.clone());
    v.insert("priority", rule.priority.token().to_string());
    v.insert("sla_hours", rule.sla_hours.to_string());
    v.insert("location", format_location(case.location));
    v.insert("confidence", format!("{:.1}%", confidence * 100.0));
    v.insert("submitted_at", case.submitted_at.format("%Y-%m-%d %H:%M UTC").to_string());
    v.insert(
        "channel",
        match case.channel {
            Channel::MobileApp => "mobile app",
            Channel::Web => "web",
            Channel::Email => "email",
        }
        .to_string(),
    );
    debug_assert!(SLOTS.iter().all(|s| v.contains_key(s)));
    v
}

/// The report for the case's final class. An operator-decided class is
/// reported with confidence 1.
pub fn generate_report(
    case: &Case,
    rules: &RuleTable,
    templates: &Templates,
    created_at: DateTime<Utc>,
) -> Result<DispatchReport, WorkflowError> {
    let class = case.final_class().ok_or_else(|| WorkflowError::NoFinalClass(case.id.clone()))?;
    let rule = rules.get(class)?;
    let confidence = match (&case.override_, case.prediction) {
        (Some(_), _) | (None, None) => 1.0,
        (None, Some(p)) => p.confidence,
    };
    let narrative = templates.report.render(&slot_values(case, class, rule, confidence))?;
    Ok(DispatchReport {
        case_id: case.id.clone(),
        department: rule.department.clone(),
        regulation_citation: rule.citation.clone(),
        class,
        priority: rule.priority,
        sla_hours: rule.sla_hours,
        confidence,
        location: case.location,
        created_at,
        narrative,
    })
}

/// Acknowledgment text; class, department and deadline come from the
/// report so the two never disagree.
pub fn draft_citizen_message(
    case: &Case,
    report: &DispatchReport,
    templates: &Templates,
    created_at: DateTime<Utc>,
) -> Result<CitizenMessage, WorkflowError> {
    let rule = RegulationRule {
        class: report.class,
        department: report.department.clone(),
        citation: report.regulation_citation.clone(),
        priority: report.priority,
        sla_hours: report.sla_hours,
    };
    let body = templates.message.render(&slot_values(case, report.class, &rule, report.confidence))?;
    Ok(CitizenMessage { case_id: case.id.clone(), created_at, body })
}

/// Validates an operator decision on a case under review and returns the
/// event to append together with the correction it produces.
pub fn apply_override(
    case: &Case,
    corrected_class: IssueClass,
    operator: &str,
    at: DateTime<Utc>,
    rules: &RuleTable,
    templates: &Templates,
) -> Result<(CaseEvent, CorrectionRecord), WorkflowError> {
    if case.status != CaseStatus::PendingReview || case.failure.is_some() {
        return Err(WorkflowError::IllegalTransition { from: case.status, event: "Overridden" });
    }
    if operator.trim().is_empty() {
        return Err(WorkflowError::InvalidParameter { name: "operator", reason: "must not be empty".into() });
    }
    let override_ = Override { class: corrected_class, operator: operator.to_string(), at };
    let mut decided = case.clone();
    decided.override_ = Some(override_.clone());
    let report = generate_report(&decided, rules, templates, at)?;
    let correction = CorrectionRecord {
        case_id: case.id.clone(),
        image_ref: case.image_ref.clone(),
        corrected_class,
        predicted_class: case.prediction.map(|p| p.class),
        operator: operator.to_string(),
        at,
    };
    Ok((CaseEvent::Overridden { override_, report }, correction))
}

/// The correction an applied override stands for.
pub fn correction_of(case: &Case) -> Option<CorrectionRecord> {
    let o = case.override_.as_ref()?;
    Some(CorrectionRecord {
        case_id: case.id.clone(),
        image_ref: case.image_ref.clone(),
        corrected_class: o.class,
        predicted_class: case.prediction.map(|p| p.class),
        operator: o.operator.clone(),
        at: o.at,
    })
}

pub fn reject(case: &Case, operator: &str, reason: &str, at: DateTime<Utc>) -> Result<CaseEvent, WorkflowError> {
    if !case.status.can_transition_to(CaseStatus::Rejected) || case.failure.is_some() {
        return Err(WorkflowError::IllegalTransition { from: case.status, event: "Rejected" });
    }
    if operator.trim().is_empty() {
        return Err(WorkflowError::InvalidParameter { name: "operator", reason: "must not be empty".into() });
    }
    Ok(CaseEvent::Rejected(Rejection { operator: operator.to_string(), reason: reason.to_string(), at }))
}
