//! What the worker runs for each case: preprocess, propose, classify,
//! triage, report, notify.

use std::time::Instant;

use petition_core::imaging::{preprocess, RasterImage, DEFAULT_BLUR_SIGMA, STANDARD_SIZE};
use petition_core::model::{predict_case, Network, NetworkSpec, Parameters};
use petition_core::regions::{propose_regions, ProposerSettings};
use petition_core::workflow::{
    draft_citizen_message, generate_report, triage, Case, CaseEvent, CaseStatus, RuleTable, Templates,
};

/// Everything the stages need; immutable once built.
pub struct Pipeline {
    pub network: Network,
    pub params: Parameters<f32>,
    pub rules: RuleTable,
    pub templates: Templates,
    pub threshold: f64,
    pub proposer: ProposerSettings,
}

/// The event a stage produced, or why it failed.
pub type StageResult = Result<CaseEvent, (String, String)>;

impl Pipeline {
    pub fn new(
        spec: NetworkSpec,
        params: Parameters<f32>,
        rules: RuleTable,
        templates: Templates,
        threshold: f64,
        proposer: ProposerSettings,
    ) -> Result<Self, String> {
        let network = Network::new(spec).map_err(|e| e.to_string())?;
        rules.check_complete().map_err(|e| e.to_string())?;
        Ok(Pipeline { network, params, rules, templates, threshold, proposer })
    }

    /// Standardized image, kept between the preprocess and classify stages.
    pub fn standardize(&self, raw: &RasterImage) -> Result<(RasterImage, f64), String> {
        let t = Instant::now();
        let img = preprocess(raw, STANDARD_SIZE, DEFAULT_BLUR_SIGMA).map_err(|e| e.to_string())?;
        Ok((img, ms(t)))
    }

    /// Proposals and prediction as one `Classified` event.
    pub fn classify(&self, img: &RasterImage) -> StageResult {
        let t = Instant::now();
        let proposals = propose_regions(img, &self.proposer).map_err(|e| ("propose".to_string(), e.to_string()))?;
        let propose_ms = ms(t);
        let t = Instant::now();
        let prediction = predict_case(&self.network, &self.params, img, &proposals)
            .map_err(|e| ("classify".to_string(), e.to_string()))?;
        Ok(CaseEvent::Classified { prediction, proposals, propose_ms, classify_ms: ms(t) })
    }

    /// The next event for a case past classification, or `None` when the
    /// pipeline has nothing more to do.
    pub fn advance(&self, case: &Case, now: chrono::DateTime<chrono::Utc>) -> Option<StageResult> {
        match (case.status, case.triage) {
            (CaseStatus::Classified, None) => {
                let prediction = case.prediction?;
                Some(Ok(CaseEvent::Triaged(triage(&prediction, self.threshold))))
            }
            (CaseStatus::Classified, Some(d)) if d.dispatch => {
                let t = Instant::now();
                Some(
                    generate_report(case, &self.rules, &self.templates, now)
                        .map(|report| CaseEvent::Dispatched { report, report_ms: ms(t) })
                        .map_err(|e| ("report".to_string(), e.to_string())),
                )
            }
            (CaseStatus::Dispatched, _) => {
                let t = Instant::now();
                let report = case.report.as_ref()?;
                Some(
                    draft_citizen_message(case, report, &self.templates, now)
                        .map(|message| CaseEvent::Notified { message, notify_ms: ms(t) })
                        .map_err(|e| ("notify".to_string(), e.to_string())),
                )
            }
            _ => None,
        }
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}
