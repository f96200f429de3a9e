//! Two-stage generate-then-verify annotation.
//!
//! Stage 1 asks a backend for a full annotation (reasoning, per-page judgments, answer) and
//! keeps it only if the answer matches ground truth. Stage 2 re-queries with the stage-1
//! annotation as content and keeps the record only on a second match.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psf::{parse_response, render_prompt, render_response, EvidenceJudgment, PsfKind, StructuredResponse};
use crate::reward::{anls, AnlsConfig};
use crate::seed::{fnv1a, stream};
use crate::synth::{answer_oracle, QASample, SyntheticDocument};

/// Annotations use the inferred-count judgment grammar.
pub const ANNOTATION_PSF: PsfKind = PsfKind::JudgmentsInferCount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Verify,
}

impl Stage {
    fn index(self) -> u64 {
        match self {
            Stage::Generate => 1,
            Stage::Verify => 2,
        }
    }
}

/// What a backend sees: the sample, the stage, the prompt text and the content to annotate.
#[derive(Debug, Clone)]
pub struct AnnotationRequest<'a> {
    pub sample: &'a QASample,
    pub stage: Stage,
    pub prompt: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("environment variable `{0}` holding the bearer token is not set")]
    MissingCredentials(String),
    #[error("endpoint returned HTTP {status}")]
    Status { status: u16 },
    #[error("network error: {0}")]
    Network(String),
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Status { status } => *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
            _ => false,
        }
    }
}

/// Returns the raw annotation text for one request, or a transport error. Never partial.
pub trait AnnotatorBackend: Sync {
    fn annotate(&self, req: &AnnotationRequest<'_>) -> Result<String, TransportError>;
}

pub fn render_document(sample: &QASample) -> String {
    sample
        .pages
        .iter()
        .enumerate()
        .map(|(i, page)| {
            let facts: Vec<String> = page.iter().map(|f| format!("{} = {}", f.key(), f.value())).collect();
            format!("Page {}: {}", i + 1, facts.join("; "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn stage1_request(sample: &QASample) -> AnnotationRequest<'_> {
    AnnotationRequest {
        sample,
        stage: Stage::Generate,
        prompt: render_prompt(ANNOTATION_PSF, &sample.question, None).expect("inferred-count prompt needs no count"),
        content: render_document(sample),
    }
}

/// Verification request: the question plus the stage-1 annotation, with the document pages.
pub fn stage2_request<'a>(sample: &'a QASample, stage1: &Candidate) -> AnnotationRequest<'a> {
    let annotated = serde_json::json!({
        "question": sample.question,
        "think": stage1.think,
        "evidence_judgments": stage1.evidence_judgments,
        "answer": stage1.answer,
    });
    AnnotationRequest {
        sample,
        stage: Stage::Verify,
        prompt: format!(
            "{}\nVerify the annotation below by answering the question again from the annotated pages.",
            render_prompt(ANNOTATION_PSF, &sample.question, None).expect("inferred-count prompt needs no count")
        ),
        content: format!("{annotated}\n{}", render_document(sample)),
    }
}

/// Answers from the synthetic world's oracle, optionally corrupted.
///
/// Each `(seed, sample, stage)` triple has its own noise stream, so the two stages fail
/// independently and reruns are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBackend {
    pub seed: u64,
    /// Probability that the answer is corrupted in a given stage.
    pub corruption_prob: f64,
    /// Probability that the output loses its closing answer tag.
    pub format_corruption_prob: f64,
}

impl OracleBackend {
    pub fn new(seed: u64, corruption_prob: f64) -> Self {
        Self { seed, corruption_prob, format_corruption_prob: 0.0 }
    }
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Replaces between one and all characters, each by a different character.
fn corrupt<R: Rng>(answer: &str, rng: &mut R) -> String {
    let mut chars: Vec<char> = answer.to_lowercase().chars().collect();
    if chars.is_empty() {
        return "x".into();
    }
    let k = rng.random_range(1..=chars.len());
    for i in rand::seq::index::sample(rng, chars.len(), k).into_vec() {
        let old = chars[i];
        chars[i] = loop {
            let c = ALPHABET[rng.random_range(0..ALPHABET.len())] as char;
            if c != old {
                break c;
            }
        };
    }
    chars.into_iter().collect()
}

impl AnnotatorBackend for OracleBackend {
    fn annotate(&self, req: &AnnotationRequest<'_>) -> Result<String, TransportError> {
        let doc = SyntheticDocument::from_sample(req.sample);
        let truth = answer_oracle(req.sample, &doc).map_err(|e| TransportError::Backend(e.to_string()))?;
        let mut rng = stream(self.seed, fnv1a(&req.sample.id), req.stage.index());
        let answer =
            if rng.random_bool(self.corruption_prob) { corrupt(&truth.answer, &mut rng) } else { truth.answer };
        let judgments = (1..=doc.page_count()).map(|p| truth.evidence.contains(&p)).collect();
        let pages: Vec<String> = truth.evidence.iter().map(usize::to_string).collect();
        let think = format!("The question is answered by page(s) {}.", pages.join(", "));
        let resp = StructuredResponse::new(think, Some(EvidenceJudgment::Judgments(judgments)), answer);
        let mut text = render_response(&resp, ANNOTATION_PSF).map_err(|e| TransportError::Backend(e.to_string()))?;
        if rng.random_bool(self.format_corruption_prob) {
            text.truncate(text.len() - "</answer>".len());
        }
        Ok(text)
    }
}

/// JSON-over-HTTP backend: POST `{prompt, content}`, expect `{text}`.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout: Duration,
    pub attempts: u32,
    pub backoff: Duration,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct RemoteReply {
    text: String,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, token_env: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self {
            endpoint: endpoint.into(),
            token_env: token_env.into(),
            timeout,
            attempts: 3,
            backoff: Duration::from_millis(200),
            agent,
        }
    }

    fn once(&self, token: &str, req: &AnnotationRequest<'_>) -> Result<String, TransportError> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(RemoteRequest { prompt: &req.prompt, content: &req.content })
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status });
        }
        let reply: RemoteReply = resp.into_body().read_json().map_err(|e| TransportError::Decode(e.to_string()))?;
        Ok(reply.text)
    }
}

impl AnnotatorBackend for RemoteBackend {
    fn annotate(&self, req: &AnnotationRequest<'_>) -> Result<String, TransportError> {
        let token =
            std::env::var(&self.token_env).map_err(|_| TransportError::MissingCredentials(self.token_env.clone()))?;
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.once(&token, req) {
                Err(e) if e.retryable() && attempt < self.attempts => {
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// ANLS cutoff used when scoring the candidate.
    pub anls_threshold: f64,
    /// Minimum ANLS for a candidate to count as consistent with ground truth.
    pub match_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { anls_threshold: 0.5, match_threshold: 0.9 }
    }
}

pub fn match_answers(candidate: &str, golds: &[String], cfg: &MatchConfig) -> bool {
    anls(candidate, golds, &AnlsConfig::with_threshold(cfg.anls_threshold)).is_ok_and(|s: f64| s >= cfg.match_threshold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw: String,
    pub think: String,
    pub evidence_judgments: Vec<bool>,
    pub answer: String,
}

impl Candidate {
    fn from_response(raw: String, r: StructuredResponse) -> Self {
        let evidence_judgments = match r.evidence {
            Some(EvidenceJudgment::Judgments(js)) => js,
            _ => Vec::new(),
        };
        Self { raw, think: r.think, evidence_judgments, answer: r.answer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    Stage1Mismatch,
    Stage2Mismatch,
    TransportError,
    FormatError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub stage1_candidate: Option<Candidate>,
    pub stage1_match: bool,
    pub stage2_candidate: Option<Candidate>,
    pub stage2_match: Option<bool>,
    pub retained: bool,
    pub rejection_reason: Option<RejectionReason>,
    /// Transport or parse error message behind a rejection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub samples: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub total: usize,
    pub retained: usize,
    pub retention_rate: f64,
    pub rejections: BTreeMap<RejectionReason, usize>,
    /// Retained samples and pages per question category.
    pub categories: Vec<CategoryCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub retained: Vec<AnnotationRecord>,
    pub rejected: Vec<AnnotationRecord>,
    pub summary: PipelineSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub matching: MatchConfig,
    /// Maximum concurrent backend calls.
    pub max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { matching: MatchConfig::default(), max_in_flight: 8 }
    }
}

fn stage<B: AnnotatorBackend + ?Sized>(
    backend: &B,
    req: &AnnotationRequest<'_>,
) -> Result<Candidate, (RejectionReason, String)> {
    let raw = backend.annotate(req).map_err(|e| (RejectionReason::TransportError, e.to_string()))?;
    let parsed = parse_response(&raw, ANNOTATION_PSF).map_err(|e| (RejectionReason::FormatError, e.to_string()))?;
    Ok(Candidate::from_response(raw, parsed))
}

fn annotate_one<B: AnnotatorBackend + ?Sized>(backend: &B, sample: &QASample, cfg: &MatchConfig) -> AnnotationRecord {
    let mut rec = AnnotationRecord {
        sample_id: sample.id.clone(),
        stage1_candidate: None,
        stage1_match: false,
        stage2_candidate: None,
        stage2_match: None,
        retained: false,
        rejection_reason: None,
        detail: None,
    };
    let reject = |mut rec: AnnotationRecord, (reason, detail): (RejectionReason, String)| {
        rec.rejection_reason = Some(reason);
        rec.detail = Some(detail);
        rec
    };

    let c1 = match stage(backend, &stage1_request(sample)) {
        Ok(c) => c,
        Err(e) => return reject(rec, e),
    };
    rec.stage1_match = match_answers(&c1.answer, &sample.answers, cfg);
    let req2 = stage2_request(sample, &c1);
    rec.stage1_candidate = Some(c1);
    if !rec.stage1_match {
        rec.rejection_reason = Some(RejectionReason::Stage1Mismatch);
        return rec;
    }

    let c2 = match stage(backend, &req2) {
        Ok(c) => c,
        Err(e) => return reject(rec, e),
    };
    let ok = match_answers(&c2.answer, &sample.answers, cfg);
    rec.stage2_candidate = Some(c2);
    rec.stage2_match = Some(ok);
    rec.retained = ok;
    if !ok {
        rec.rejection_reason = Some(RejectionReason::Stage2Mismatch);
    }
    rec
}

/// Runs both stages over `samples` with at most `max_in_flight` concurrent calls.
/// Output order follows input order.
pub fn run_pipeline<B: AnnotatorBackend + ?Sized>(
    samples: &[QASample],
    backend: &B,
    cfg: &PipelineConfig,
) -> PipelineOutput {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.max_in_flight.max(1)).build().expect("thread pool");
    let records: Vec<AnnotationRecord> =
        pool.install(|| samples.par_iter().map(|s| annotate_one(backend, s, &cfg.matching)).collect());

    let mut rejections = BTreeMap::new();
    let mut categories: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (rec, sample) in records.iter().zip(samples) {
        if let Some(r) = rec.rejection_reason {
            *rejections.entry(r).or_insert(0) += 1;
        }
        if rec.retained {
            let name = sample
                .category
                .map_or("uncategorized".to_string(), |c| serde_json::to_value(c).unwrap().as_str().unwrap().to_string());
            let e = categories.entry(name).or_default();
            e.0 += 1;
            e.1 += sample.page_count();
        }
    }
    let (retained, rejected): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.retained);
    let total = samples.len();
    let summary = PipelineSummary {
        total,
        retained: retained.len(),
        retention_rate: if total == 0 { 0.0 } else { retained.len() as f64 / total as f64 },
        rejections,
        categories: categories
            .into_iter()
            .map(|(category, (samples, images))| CategoryCount { category, samples, images })
            .collect(),
        note: retained.is_empty().then(|| "no records retained".to_string()),
    };
    PipelineOutput { retained, rejected, summary }
}

/// A sample extended with its retained annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EviBenchRecord {
    #[serde(flatten)]
    pub sample: QASample,
    pub think: String,
    pub evidence_judgments: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("record for unknown sample `{0}`")]
    UnknownSample(String),
}

pub fn evibench_records(samples: &[QASample], retained: &[AnnotationRecord]) -> Result<Vec<EviBenchRecord>, ExportError> {
    let by_id: BTreeMap<&str, &QASample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    retained
        .iter()
        .filter(|r| r.retained)
        .map(|r| {
            let sample = by_id.get(r.sample_id.as_str()).ok_or_else(|| ExportError::UnknownSample(r.sample_id.clone()))?;
            let c = r.stage1_candidate.as_ref().expect("retained records carry a stage-1 candidate");
            Ok(EviBenchRecord {
                sample: (*sample).clone(),
                think: c.think.clone(),
                evidence_judgments: c.evidence_judgments.clone(),
            })
        })
        .collect()
}

pub fn export_evibench(samples: &[QASample], retained: &[AnnotationRecord], path: &Path) -> Result<usize, ExportError> {
    let records = evibench_records(samples, retained)?;
    let io_err = |source| ExportError::Io { path: path.to_path_buf(), source };
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r).expect("records serialize")).map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(records.len())
}
