//! Page selection formats: strict parsers, canonical renderers and prompt templates.
//!
//! Four grammars are supported. All share `<think>` and `<answer>` blocks; they differ in
//! the `<evidence_page>` block:
//!
//! * [`PsfKind::IndicesList`]: explicit 1-based page numbers, `1, 3, 5`.
//! * [`PsfKind::JudgmentsWithCount`]: one `T`/`F` per page; the prompt states the page count.
//! * [`PsfKind::JudgmentsInferCount`]: one `T`/`F` per page; the model must infer the count.
//! * [`PsfKind::NoEvidence`]: no evidence block at all.
//!
//! Parsing never attempts recovery. Anything that does not match the grammar exactly is a
//! [`FormatError`], which the reward layer maps to a zero format reward.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK: &str = "think";
pub const EVIDENCE: &str = "evidence_page";
pub const ANSWER: &str = "answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum PsfKind {
    IndicesList,
    JudgmentsWithCount,
    #[default]
    JudgmentsInferCount,
    NoEvidence,
}

impl PsfKind {
    pub const ALL: [PsfKind; 4] = [
        PsfKind::IndicesList,
        PsfKind::JudgmentsWithCount,
        PsfKind::JudgmentsInferCount,
        PsfKind::NoEvidence,
    ];

    pub fn has_evidence(self) -> bool {
        self != PsfKind::NoEvidence
    }

    /// Whether the evidence block is a per-page `T`/`F` sequence (and therefore count-gated).
    pub fn is_judgment(self) -> bool {
        matches!(self, PsfKind::JudgmentsWithCount | PsfKind::JudgmentsInferCount)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            PsfKind::IndicesList => "psf1",
            PsfKind::JudgmentsWithCount => "psf2",
            PsfKind::JudgmentsInferCount => "psf3",
            PsfKind::NoEvidence => "none",
        }
    }
}


impl fmt::Display for PsfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for PsfKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "psf1" | "indices_list" => Ok(PsfKind::IndicesList),
            "psf2" | "judgments_with_count" => Ok(PsfKind::JudgmentsWithCount),
            "psf3" | "judgments_infer_count" => Ok(PsfKind::JudgmentsInferCount),
            "none" | "no_evidence" => Ok(PsfKind::NoEvidence),
            other => Err(format!("unknown page selection format `{other}` (expected psf1|psf2|psf3|none)")),
        }
    }
}

/// Parsed content of an `<evidence_page>` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvidenceJudgment {
    /// One judgment per emitted page, in page order.
    Judgments(Vec<bool>),
    /// Explicit 1-based page numbers.
    Pages(BTreeSet<usize>),
}

impl EvidenceJudgment {
    /// Predicted evidence pages, 1-based.
    pub fn predicted_set(&self) -> BTreeSet<usize> {
        match self {
            EvidenceJudgment::Judgments(js) => js
                .iter()
                .enumerate()
                .filter_map(|(i, &t)| t.then_some(i + 1))
                .collect(),
            EvidenceJudgment::Pages(p) => p.clone(),
        }
    }

    /// Number of judgments emitted; undefined for an explicit page list.
    pub fn predicted_count(&self) -> Option<usize> {
        match self {
            EvidenceJudgment::Judgments(js) => Some(js.len()),
            EvidenceJudgment::Pages(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredResponse {
    pub think: String,
    pub evidence: Option<EvidenceJudgment>,
    pub answer: String,
    pub raw: String,
}

impl StructuredResponse {
    pub fn new(think: impl Into<String>, evidence: Option<EvidenceJudgment>, answer: impl Into<String>) -> Self {
        Self { think: think.into(), evidence, answer: answer.into(), raw: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing tag `{0}`")]
    MissingTag(String),
    #[error("tag `{0}` appears more than once")]
    DuplicateTag(String),
    #[error("tags out of order")]
    WrongOrder,
    #[error("tag `{0}` is not allowed in this format")]
    UnexpectedTag(String),
    #[error("bad judgment token `{0}` (expected T or F)")]
    BadJudgmentToken(String),
    #[error("bad page index `{0}` (expected a positive integer)")]
    BadPageIndex(String),
    #[error("page {0} listed more than once")]
    DuplicatePage(usize),
    #[error("evidence block is empty")]
    EmptyEvidence,
    #[error("answer block is empty")]
    EmptyAnswer,
    #[error("text outside tag blocks before `</answer>`")]
    StrayText,
    #[error("text after `</answer>`")]
    TrailingGarbage,
}

impl FormatError {
    /// Stable class name, used in reports and tests.
    pub fn class(&self) -> &'static str {
        match self {
            FormatError::MissingTag(_) => "MissingTag",
            FormatError::DuplicateTag(_) => "DuplicateTag",
            FormatError::WrongOrder => "WrongOrder",
            FormatError::UnexpectedTag(_) => "UnexpectedTag",
            FormatError::BadJudgmentToken(_) => "BadJudgmentToken",
            FormatError::BadPageIndex(_) => "BadPageIndex",
            FormatError::DuplicatePage(_) => "DuplicatePage",
            FormatError::EmptyEvidence => "EmptyEvidence",
            FormatError::EmptyAnswer => "EmptyAnswer",
            FormatError::StrayText => "StrayText",
            FormatError::TrailingGarbage => "TrailingGarbage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("response is not valid for {psf}: {reason}")]
    InvalidForPsf { psf: PsfKind, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("psf2 prompts need a page count")]
    MissingCount,
}

fn open(tag: &str) -> String {
    format!("<{tag}>")
}

fn close(tag: &str) -> String {
    format!("</{tag}>")
}

fn tags_for(psf: PsfKind) -> &'static [&'static str] {
    if psf.has_evidence() {
        &[THINK, EVIDENCE, ANSWER]
    } else {
        &[THINK, ANSWER]
    }
}

/// Parses `raw` under the grammar `psf`.
pub fn parse_response(raw: &str, psf: PsfKind) -> Result<StructuredResponse, FormatError> {
    let tags = tags_for(psf);

    if !psf.has_evidence() && (raw.contains(&open(EVIDENCE)) || raw.contains(&close(EVIDENCE))) {
        return Err(FormatError::UnexpectedTag(EVIDENCE.to_string()));
    }

    // Occurrence counts are checked for every tag before any ordering check, so a single
    // deleted or duplicated tag always reports MissingTag or DuplicateTag.
    let mut positions = Vec::with_capacity(tags.len() * 2);
    for tag in tags {
        for marker in [open(tag), close(tag)] {
            let mut hits = raw.match_indices(marker.as_str());
            match (hits.next(), hits.next()) {
                (None, _) => return Err(FormatError::MissingTag(marker)),
                (Some(_), Some(_)) => return Err(FormatError::DuplicateTag(marker)),
                (Some((pos, _)), None) => positions.push((pos, marker.len())),
            }
        }
    }
    if positions.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0) {
        return Err(FormatError::WrongOrder);
    }

    // positions = [open0, close0, open1, close1, ...]
    let gap = |from: usize, to: usize| &raw[from..to];
    if !gap(0, positions[0].0).trim().is_empty() {
        return Err(FormatError::StrayText);
    }
    let mut bodies = Vec::with_capacity(tags.len());
    for (i, pair) in positions.chunks(2).enumerate() {
        let (o, c) = (pair[0], pair[1]);
        bodies.push(raw[o.0 + o.1..c.0].trim());
        if i + 1 < tags.len() {
            let next_open = positions[2 * (i + 1)].0;
            if !gap(c.0 + c.1, next_open).trim().is_empty() {
                return Err(FormatError::StrayText);
            }
        }
    }
    let last = positions[positions.len() - 1];
    if !raw[last.0 + last.1..].trim().is_empty() {
        return Err(FormatError::TrailingGarbage);
    }

    let think = bodies[0].to_string();
    let answer = bodies[bodies.len() - 1];
    let evidence = if psf.has_evidence() { Some(parse_evidence(bodies[1], psf)?) } else { None };
    if answer.is_empty() {
        return Err(FormatError::EmptyAnswer);
    }

    Ok(StructuredResponse { think, evidence, answer: answer.to_string(), raw: raw.to_string() })
}

fn parse_evidence(body: &str, psf: PsfKind) -> Result<EvidenceJudgment, FormatError> {
    if body.is_empty() {
        return Err(FormatError::EmptyEvidence);
    }
    let tokens = body.split(',').map(str::trim);
    if psf.is_judgment() {
        tokens
            .map(|t| match t {
                "T" => Ok(true),
                "F" => Ok(false),
                other => Err(FormatError::BadJudgmentToken(other.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(EvidenceJudgment::Judgments)
    } else {
        let mut pages = BTreeSet::new();
        for t in tokens {
            let page = (!t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
                .then(|| t.parse::<usize>().ok())
                .flatten()
                .filter(|&p| p >= 1)
                .ok_or_else(|| FormatError::BadPageIndex(t.to_string()))?;
            if !pages.insert(page) {
                return Err(FormatError::DuplicatePage(page));
            }
        }
        Ok(EvidenceJudgment::Pages(pages))
    }
}

fn contains_tag(s: &str) -> bool {
    [THINK, EVIDENCE, ANSWER].iter().any(|t| s.contains(&open(t)) || s.contains(&close(t)))
}

/// Emits the canonical text for `resp` under `psf`.
pub fn render_response(resp: &StructuredResponse, psf: PsfKind) -> Result<String, RenderError> {
    let invalid = |reason| RenderError::InvalidForPsf { psf, reason };
    if contains_tag(&resp.think) || contains_tag(&resp.answer) {
        return Err(invalid("think or answer contains a reserved tag"));
    }
    if resp.answer.trim().is_empty() {
        return Err(invalid("empty answer"));
    }
    if resp.answer.trim() != resp.answer || resp.think.trim() != resp.think {
        return Err(invalid("leading or trailing whitespace does not survive parsing"));
    }

    let mut out = format!("<{THINK}>{}</{THINK}>", resp.think);
    match (psf, &resp.evidence) {
        (PsfKind::NoEvidence, None) => {}
        (PsfKind::NoEvidence, Some(_)) => return Err(invalid("evidence present")),
        (_, None) => return Err(invalid("evidence missing")),
        (PsfKind::IndicesList, Some(EvidenceJudgment::Pages(pages))) => {
            if pages.is_empty() || pages.contains(&0) {
                return Err(invalid("page list must be nonempty and 1-based"));
            }
            let body = pages.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
            out.push_str(&format!("<{EVIDENCE}>{body}</{EVIDENCE}>"));
        }
        (PsfKind::IndicesList, Some(_)) => return Err(invalid("expected a page list")),
        (_, Some(EvidenceJudgment::Judgments(js))) => {
            if js.is_empty() {
                return Err(invalid("no judgments"));
            }
            let body = js.iter().map(|&t| if t { "T" } else { "F" }).collect::<Vec<_>>().join(", ");
            out.push_str(&format!("<{EVIDENCE}>{body}</{EVIDENCE}>"));
        }
        (_, Some(_)) => return Err(invalid("expected per-page judgments")),
    }
    out.push_str(&format!("<{ANSWER}>{}</{ANSWER}>", resp.answer));
    Ok(out)
}

const INTRO_ANY: &str = "You will be given one or more images along with a question.";
const TASK: &str = "Your task is to understand the visual content and answer the question.";
const THINK_STEP: &str =
    "First, think carefully about the question and present your reasoning in <think> and </think>.";
const ANSWER_STEP: &str = "provide your answer in <answer> and </answer>. The answer should be one or more words or phrases.";

fn system_prompt(psf: PsfKind, page_count: Option<usize>) -> Result<String, PromptError> {
    let text = match psf {
        PsfKind::IndicesList => format!(
            "{INTRO_ANY} {TASK} {THINK_STEP} Next, identify all images that contain the necessary evidence to \
             support your answer, and list their page numbers in <evidence_page> and </evidence_page>, using \
             integers separated by commas (e.g., 2 or 1, 3, 5). Finally, {ANSWER_STEP}"
        ),
        PsfKind::JudgmentsWithCount => {
            let cnt = page_count.ok_or(PromptError::MissingCount)?;
            format!(
                "You will be given {cnt} images and a question. {TASK} {THINK_STEP} Next, determine whether each \
                 page contains relevant evidence to answer the question. Provide your judgment in <evidence_page> \
                 and </evidence_page> using a comma-separated sequence of T (True) or F (False), one for each \
                 page, in order (e.g., T, F, T, F). Finally, {ANSWER_STEP}"
            )
        }
        PsfKind::JudgmentsInferCount => format!(
            "{INTRO_ANY} {TASK} {THINK_STEP} Next, identify how many pages (images) are provided, and for each \
             page, determine whether it contains relevant evidence to answer the question. List your judgments \
             in <evidence_page> and </evidence_page> using a comma-separated sequence of T (True) or F (False), \
             one for each page, in order (e.g., T, F, T, F). Finally, {ANSWER_STEP}"
        ),
        PsfKind::NoEvidence => format!("{INTRO_ANY} {TASK} {THINK_STEP} Next, {ANSWER_STEP}"),
    };
    Ok(text)
}

/// Full system + user prompt for `psf`, with the question substituted.
///
/// `page_count` is required for [`PsfKind::JudgmentsWithCount`] and ignored otherwise.
pub fn render_prompt(psf: PsfKind, question: &str, page_count: Option<usize>) -> Result<String, PromptError> {
    let system = system_prompt(psf, page_count)?;
    Ok(format!("System: {system}\nUser: {question}. Assistant:"))
}
