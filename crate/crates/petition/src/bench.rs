//! Load generation against a running service, over its public API only.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use petition_core::bench::{
    jevons_rounds, poisson_arrivals, summarize, BenchError, BenchResult, JevonsRound, LatencySummary, LoadModelConfig,
    RoundMeasurement, StageLatencies,
};
use petition_core::corpus::{plan_corpus, render_scene, CorpusConfig, CorpusError, GeoPoint, RecordPlan};
use petition_core::metrics::efficiency_gain;
use petition_core::workflow::Case;
use reqwest::blocking::{multipart, Client as Http};
use serde::Serialize;
use thiserror::Error;

use crate::pnm;
use crate::service::api::IDEMPOTENCY_HEADER;

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("service unreachable at {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("{method} {path}: HTTP {status}: {body}")]
    Http { method: &'static str, path: String, status: u16, body: String },
    #[error("cases parked in an error state: {}", .0.join(", "))]
    FailedCases(Vec<String>),
    #[error("case {0} did not settle in time")]
    Timeout(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("encoding scene: {0}")]
    Encode(String),
}

/// Blocking client for the case API.
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        let http = Http::builder().timeout(Duration::from_secs(60)).build().expect("http client");
        Client { base: base_url.trim_end_matches('/').to_string(), http }
    }

    fn unreachable(&self, e: reqwest::Error) -> HarnessError {
        HarnessError::Unreachable { url: self.base.clone(), reason: e.to_string() }
    }

    fn check(method: &'static str, path: &str, resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, HarnessError> {
        if resp.status().is_success() {
            Ok(resp)
        } else {
            let status = resp.status().as_u16();
            Err(HarnessError::Http { method, path: path.into(), status, body: resp.text().unwrap_or_default() })
        }
    }

    pub fn health(&self) -> Result<serde_json::Value, HarnessError> {
        self.get_json("/healthz")
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, HarnessError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().map_err(|e| self.unreachable(e))?;
        Self::check("GET", path, resp)?.json().map_err(|e| self.unreachable(e))
    }

    pub fn post_json<T: serde::de::DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T, HarnessError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().map_err(|e| self.unreachable(e))?;
        Self::check("POST", path, resp)?.json().map_err(|e| self.unreachable(e))
    }

    /// Returns the case id.
    pub fn submit(&self, image: Vec<u8>, at: GeoPoint, channel: &str, key: Option<&str>) -> Result<String, HarnessError> {
        let form = multipart::Form::new()
            .part("image", multipart::Part::bytes(image).file_name("scene.ppm"))
            .text("lat", at.lat.to_string())
            .text("lon", at.lon.to_string())
            .text("channel", channel.to_string());
        let mut req = self.http.post(format!("{}/cases", self.base)).multipart(form);
        if let Some(k) = key {
            req = req.header(IDEMPOTENCY_HEADER, k);
        }
        let resp = req.send().map_err(|e| self.unreachable(e))?;
        let v: serde_json::Value = Self::check("POST", "/cases", resp)?.json().map_err(|e| self.unreachable(e))?;
        Ok(v["id"].as_str().unwrap_or_default().to_string())
    }

    pub fn case(&self, id: &str) -> Result<Case, HarnessError> {
        self.get_json(&format!("/cases/{id}"))
    }

    /// Polls until the pipeline is done with the case.
    pub fn wait_settled(&self, id: &str, deadline: Instant) -> Result<Case, HarnessError> {
        loop {
            let c = self.case(id)?;
            if c.is_settled() {
                return Ok(c);
            }
            if Instant::now() >= deadline {
                return Err(HarnessError::Timeout(id.into()));
            }
            std::thread::sleep(POLL);
        }
    }
}

/// Seeded corpus scenes, cycled, as submission payloads.
pub struct SceneSource {
    plans: Vec<RecordPlan>,
    size: usize,
    next: usize,
}

impl SceneSource {
    pub fn new(seed: u64, count: usize) -> Result<Self, HarnessError> {
        let config = CorpusConfig { n_images: count.max(1), seed, ..Default::default() };
        Ok(SceneSource { plans: plan_corpus(&config)?, size: config.image_size, next: 0 })
    }

    /// P6 bytes and location of the next scene.
    pub fn next_scene(&mut self) -> Result<(Vec<u8>, GeoPoint), HarnessError> {
        let p = &self.plans[self.next % self.plans.len()];
        self.next += 1;
        let (img, _) = render_scene(p.class, p.conditions, self.size, p.seed)?;
        Ok((pnm::encode(&img).map_err(|e| HarnessError::Encode(e.to_string()))?, p.location))
    }
}

/// End-to-end time of a settled case: submission to its last event.
pub fn total_ms(case: &Case) -> f64 {
    (case.updated_at - case.submitted_at).num_microseconds().unwrap_or(i64::MAX) as f64 / 1000.0
}

#[derive(Debug, Clone, Serialize)]
pub struct StagesReport {
    pub summary: LatencySummary,
    pub efficiency_gain: Option<f64>,
    pub samples: Vec<(String, StageLatencies)>,
}

/// Submits `n` scenes one at a time, waiting for each to settle, and
/// aggregates the stage timings the service recorded.
pub fn measure_stages(client: &Client, n: usize, scenes: &mut SceneSource) -> Result<StagesReport, HarnessError> {
    let mut samples = Vec::with_capacity(n);
    let mut failed = Vec::new();
    for _ in 0..n {
        let (img, at) = scenes.next_scene()?;
        let id = client.submit(img, at, "mobile_app", None)?;
        let case = client.wait_settled(&id, Instant::now() + Duration::from_secs(120))?;
        if case.failure.is_some() {
            failed.push(id.clone());
        }
        samples.push((id, StageLatencies::of_case(&case, total_ms(&case))));
    }
    if !failed.is_empty() {
        return Err(HarnessError::FailedCases(failed));
    }
    let latencies: Vec<StageLatencies> = samples.iter().map(|s| s.1).collect();
    let summary = summarize(&latencies);
    let gain = (!summary.empty)
        .then(|| efficiency_gain(petition_core::bench::MANUAL_BASELINE_SECONDS, summary.mean.total / 1000.0).ok())
        .flatten();
    Ok(StagesReport { summary, efficiency_gain: gain, samples })
}

#[derive(Debug, Clone, Copy)]
pub struct ThroughputPlan {
    pub rate_per_hour: f64,
    pub duration: Duration,
    pub seed: u64,
    /// How long after the last arrival a case may still settle and count.
    pub grace: Duration,
}

/// Open-loop Poisson arrivals for the planned duration, then a wait of at
/// most `grace` for stragglers.
pub fn run_throughput(client: &Client, plan: &ThroughputPlan, scenes: &mut SceneSource) -> Result<BenchResult, HarnessError> {
    let arrivals = poisson_arrivals(plan.rate_per_hour, plan.duration.as_secs_f64(), plan.seed)?;
    let start = Instant::now();
    let mut ids = Vec::with_capacity(arrivals.len());
    for &t in &arrivals {
        let due = start + Duration::from_secs_f64(t);
        let (img, at) = scenes.next_scene()?;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        ids.push(client.submit(img, at, "mobile_app", None)?);
    }
    if let Some(rest) = (start + plan.duration).checked_duration_since(Instant::now()) {
        std::thread::sleep(rest);
    }
    let deadline = start + plan.duration + plan.grace;
    let mut totals = Vec::new();
    let mut failed = Vec::new();
    for id in &ids {
        match client.wait_settled(id, deadline) {
            Ok(c) if c.failure.is_some() => failed.push(id.clone()),
            Ok(c) => totals.push(total_ms(&c)),
            Err(HarnessError::Timeout(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if !failed.is_empty() {
        return Err(HarnessError::FailedCases(failed));
    }
    Ok(BenchResult::new(plan.rate_per_hour, ids.len(), totals.len(), &totals))
}

/// Runs rounds of [`run_throughput`] under the elastic-demand law.
pub fn run_jevons(
    client: &Client,
    config: &LoadModelConfig,
    round_duration: Duration,
    seed: u64,
    grace: Duration,
    scenes: &mut SceneSource,
) -> Result<(Vec<JevonsRound>, Vec<BenchResult>), HarnessError> {
    let mut results = Vec::new();
    let rounds = jevons_rounds(config, |round, rate| {
        let plan = ThroughputPlan {
            rate_per_hour: rate,
            duration: round_duration,
            seed: petition_core::corpus::derive_seed(seed, round as u64),
            grace,
        };
        let r = run_throughput(client, &plan, scenes)?;
        let m = RoundMeasurement { mean_latency_s: r.mean_total_ms / 1000.0, saturated: r.saturated };
        results.push(r);
        Ok::<_, HarnessError>(m)
    })?;
    Ok((rounds, results))
}

pub fn stages_table(r: &StagesReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "cases {}{}", r.summary.cases, if r.summary.empty { " (empty run)" } else { "" });
    let _ = writeln!(out, "{:<12}{:>12}{:>12}", "stage", "mean ms", "p95 ms");
    let names = ["preprocess", "propose", "classify", "report", "notify", "total"];
    let mean = r.summary.mean.fields();
    let p95 = r.summary.p95.fields();
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(out, "{name:<12}{:>12.1}{:>12.1}", mean[i], p95[i]);
    }
    if let Some(g) = r.efficiency_gain {
        let _ = writeln!(out, "efficiency gain vs manual {:.4}", g);
    }
    out
}

pub fn throughput_table(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>10}{:>12}{:>10}{:>11}{:>10}{:>10}{:>7}{:>8}",
        "offered/h", "completed/h", "arrivals", "completed", "mean ms", "p95 ms", "sat", "gain"
    );
    for r in results {
        let gain = r.efficiency_gain.map_or("-".to_string(), |g| format!("{g:.4}"));
        let _ = writeln!(
            out,
            "{:>10.1}{:>12.1}{:>10}{:>11}{:>10.1}{:>10.1}{:>7}{:>8}",
            r.offered_rate, r.completed_rate, r.arrivals, r.completed, r.mean_total_ms, r.p95_total_ms, r.saturated, gain
        );
    }
    out
}

pub fn jevons_table(rounds: &[JevonsRound]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}{:>12}{:>14}{:>7}", "round", "offered/h", "latency s", "sat");
    for r in rounds {
        let _ = writeln!(out, "{:>6}{:>12.1}{:>14.3}{:>7}", r.round, r.offered_rate, r.mean_latency_s, r.saturated);
    }
    out
}
