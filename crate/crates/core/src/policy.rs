//! A small differentiable policy over structured responses.
//!
//! The policy factorizes a response into one Bernoulli relevance judgment per page and a
//! categorical choice among candidate answers (every fact value in the document, plus `yes`
//! and `no`). The think block is a fixed template and carries no probability mass.
//!
//! Page `j` has a feature vector `f_j` (see [`PAGE_FEATURES`]). Its judgment logit is
//! `<page_weights, f_j> / temperature`. Candidate `c` has a feature matrix `Phi_c` of shape
//! `PAGE_FEATURES x ANSWER_SLOTS` and score `<answer_weights, Phi_c>_F / temperature`. All
//! logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`; a clamped logit has zero gradient.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psf::{render_response, EvidenceJudgment, PsfKind, StructuredResponse};
use crate::scalar::{log_sigmoid, log_sum_exp, sigmoid, Scalar};
use crate::synth::{question_keys, QASample, NO, YES};

/// Page feature layout: question-key overlap, page length, position, bias, multi-key question.
pub const PAGE_FEATURES: usize = 5;
pub const FEAT_OVERLAP: usize = 0;
pub const FEAT_LENGTH: usize = 1;
pub const FEAT_POSITION: usize = 2;
pub const FEAT_BIAS: usize = 3;
pub const FEAT_MULTI_KEY: usize = 4;

/// Answer slots: queried value on page, any value on page, yes, no, yes-and-agree, no-and-agree.
pub const ANSWER_SLOTS: usize = 6;
const SLOT_QUERIED: usize = 0;
const SLOT_PRESENT: usize = 1;
const SLOT_YES: usize = 2;
const SLOT_NO: usize = 3;
const SLOT_YES_AGREE: usize = 4;
const SLOT_NO_AGREE: usize = 5;

pub const ANSWER_WEIGHTS: usize = PAGE_FEATURES * ANSWER_SLOTS;
pub const PARAM_COUNT: usize = PAGE_FEATURES + ANSWER_WEIGHTS;
pub const LOGIT_CLAMP: f64 = 30.0;
const LENGTH_SCALE: f64 = 10.0;

pub const THINK_TEMPLATE: &str = "Check each page for the keys named in the question, then answer from the relevant pages.";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("response not supported by the policy: {0}")]
    UnsupportedResponse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-sample inputs to the policy, computed once by [`featurize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures<T> {
    pub pages: Vec<[T; PAGE_FEATURES]>,
    pub candidates: Vec<String>,
    /// Row-major `PAGE_FEATURES x ANSWER_SLOTS` matrix per candidate.
    pub candidate_features: Vec<[T; ANSWER_WEIGHTS]>,
}

impl<T: Scalar> SampleFeatures<T> {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn candidate_index(&self, answer: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == answer)
    }
}

fn renderable(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && !s.contains('<')
}

/// Deterministic page and candidate features for a sample.
pub fn featurize<T: Scalar>(sample: &QASample) -> SampleFeatures<T> {
    let n = sample.page_count();
    let keys = question_keys(&sample.question, &sample.pages);
    let multi = keys.len() >= 2;
    let pages: Vec<[T; PAGE_FEATURES]> = sample
        .pages
        .iter()
        .enumerate()
        .map(|(j, page)| {
            let overlap = page.iter().filter(|f| keys.contains(&f.key())).count();
            let mut f = [T::zero(); PAGE_FEATURES];
            f[FEAT_OVERLAP] = T::of_usize(overlap);
            f[FEAT_LENGTH] = T::of(page.len() as f64 / LENGTH_SCALE);
            f[FEAT_POSITION] = if n > 1 { T::of(j as f64 / (n - 1) as f64) } else { T::zero() };
            f[FEAT_BIAS] = T::one();
            f[FEAT_MULTI_KEY] = if multi { T::one() } else { T::zero() };
            f
        })
        .collect();

    let queried: Vec<&str> = sample
        .pages
        .iter()
        .flatten()
        .filter(|f| keys.contains(&f.key()))
        .map(|f| f.value())
        .collect();
    let agree = multi && queried.windows(2).all(|w| w[0] == w[1]);

    let mut candidates: Vec<String> = Vec::new();
    for value in sample.pages.iter().flatten().map(|f| f.value()).chain([YES, NO]) {
        if renderable(value) && !candidates.iter().any(|c| c == value) {
            candidates.push(value.to_string());
        }
    }

    let mean: [T; PAGE_FEATURES] = if n == 0 {
        [T::zero(); PAGE_FEATURES]
    } else {
        let mut m = [T::zero(); PAGE_FEATURES];
        for f in &pages {
            for d in 0..PAGE_FEATURES {
                m[d] = m[d] + f[d];
            }
        }
        m.map(|v| v / T::of_usize(n))
    };

    let candidate_features = candidates
        .iter()
        .map(|c| {
            let mut phi = [T::zero(); ANSWER_WEIGHTS];
            let mut add = |slot: usize, f: &[T; PAGE_FEATURES], w: T| {
                for d in 0..PAGE_FEATURES {
                    phi[d * ANSWER_SLOTS + slot] = phi[d * ANSWER_SLOTS + slot] + f[d] * w;
                }
            };
            for (j, page) in sample.pages.iter().enumerate() {
                let present = page.iter().filter(|f| f.value() == c).count();
                let hit = page.iter().filter(|f| f.value() == c && keys.contains(&f.key())).count();
                if hit > 0 {
                    add(SLOT_QUERIED, &pages[j], T::of_usize(hit));
                }
                if present > 0 {
                    add(SLOT_PRESENT, &pages[j], T::of_usize(present));
                }
            }
            let yes = c == YES;
            let no = c == NO;
            if yes {
                add(SLOT_YES, &mean, T::one());
            }
            if no {
                add(SLOT_NO, &mean, T::one());
            }
            if agree && yes {
                add(SLOT_YES_AGREE, &mean, T::one());
            }
            if agree && no {
                add(SLOT_NO_AGREE, &mean, T::one());
            }
            phi
        })
        .collect();

    SampleFeatures { pages, candidates, candidate_features }
}

/// Flat parameter vector with named views.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    flat: Vec<T>,
    temperature: T,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(temperature: T) -> Self {
        assert!(temperature > T::zero(), "temperature must be positive");
        Self { flat: vec![T::zero(); PARAM_COUNT], temperature }
    }

    /// Zero weights except the page bias, set so every page starts with relevance `page_prior`.
    pub fn init(temperature: T, page_prior: T) -> Self {
        assert!(page_prior > T::zero() && page_prior < T::one(), "page prior must lie in (0, 1)");
        let mut p = Self::zeros(temperature);
        p.flat[FEAT_BIAS] = (page_prior / (T::one() - page_prior)).ln() * temperature;
        p
    }

    pub fn from_flat(flat: Vec<T>, temperature: T) -> Result<Self, PolicyError> {
        if flat.len() != PARAM_COUNT {
            return Err(PolicyError::Checkpoint(format!("expected {PARAM_COUNT} parameters, got {}", flat.len())));
        }
        if !(temperature > T::zero()) {
            return Err(PolicyError::Checkpoint("temperature must be positive".into()));
        }
        Ok(Self { flat, temperature })
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn page_weights(&self) -> &[T] {
        &self.flat[..PAGE_FEATURES]
    }

    pub fn page_weights_mut(&mut self) -> &mut [T] {
        &mut self.flat[..PAGE_FEATURES]
    }

    /// Row-major `PAGE_FEATURES x ANSWER_SLOTS`.
    pub fn answer_weights(&self) -> &[T] {
        &self.flat[PAGE_FEATURES..]
    }

    pub fn answer_weights_mut(&mut self) -> &mut [T] {
        &mut self.flat[PAGE_FEATURES..]
    }

    /// `self -= step * grad`.
    pub fn descend(&mut self, grad: &[T], step: T) {
        assert_eq!(grad.len(), self.flat.len());
        for (w, g) in self.flat.iter_mut().zip(grad) {
            *w = *w - step * *g;
        }
    }
}

/// Per-page Bernoulli and answer categorical for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredDist<T> {
    pub page_logits: Vec<T>,
    pub page_probs: Vec<T>,
    pub answer_logits: Vec<T>,
    pub answer_probs: Vec<T>,
    page_active: Vec<bool>,
    answer_active: Vec<bool>,
}

impl<T: Scalar> FactoredDist<T> {
    pub fn page_count(&self) -> usize {
        self.page_probs.len()
    }

    pub fn answer_log_probs(&self) -> Vec<T> {
        let lse = log_sum_exp(&self.answer_logits);
        self.answer_logits.iter().map(|&s| s - lse).collect()
    }
}

fn clamp_logit<T: Scalar>(z: T) -> (T, bool) {
    let c = T::of(LOGIT_CLAMP);
    if z > c {
        (c, false)
    } else if z < -c {
        (-c, false)
    } else {
        (z, true)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn distribution<T: Scalar>(params: &PolicyParams<T>, feats: &SampleFeatures<T>) -> FactoredDist<T> {
    let t = params.temperature;
    let (page_logits, page_active): (Vec<T>, Vec<bool>) =
        feats.pages.iter().map(|f| clamp_logit(dot(params.page_weights(), f) / t)).unzip();
    let page_probs = page_logits.iter().map(|&l| sigmoid(l)).collect();
    let (answer_logits, answer_active): (Vec<T>, Vec<bool>) = feats
        .candidate_features
        .iter()
        .map(|phi| clamp_logit(dot(params.answer_weights(), phi) / t))
        .unzip();
    let lse = log_sum_exp(&answer_logits);
    let answer_probs = answer_logits.iter().map(|&s| (s - lse).exp()).collect();
    FactoredDist { page_logits, page_probs, answer_logits, answer_probs, page_active, answer_active }
}

/// Backpropagates logit-space coefficients into flat parameter coordinates.
///
/// `page_coef[j]` is `dL/d(page logit j)`; `answer_coef[c]` is `dL/d(answer logit c)`.
pub fn chain_to_params<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    dist: &FactoredDist<T>,
    page_coef: Option<&[T]>,
    answer_coef: &[T],
) -> Vec<T> {
    let inv_t = T::one() / params.temperature;
    let mut grad = vec![T::zero(); PARAM_COUNT];
    if let Some(page_coef) = page_coef {
        for ((f, &c), &active) in feats.pages.iter().zip(page_coef).zip(&dist.page_active) {
            if active {
                for d in 0..PAGE_FEATURES {
                    grad[d] = grad[d] + c * f[d] * inv_t;
                }
            }
        }
    }
    for ((phi, &c), &active) in feats.candidate_features.iter().zip(answer_coef).zip(&dist.answer_active) {
        if active && c != T::zero() {
            for (g, &x) in grad[PAGE_FEATURES..].iter_mut().zip(phi.iter()) {
                *g = *g + c * x * inv_t;
            }
        }
    }
    grad
}

/// A response in policy coordinates: per-page judgments (absent when the format has no
/// evidence block) and a candidate index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub judgments: Option<Vec<bool>>,
    pub answer: usize,
}

impl Action {
    pub fn predicted_pages(&self) -> BTreeSet<usize> {
        self.judgments
            .iter()
            .flatten()
            .enumerate()
            .filter_map(|(j, &t)| t.then_some(j + 1))
            .collect()
    }
}

pub fn log_prob_action<T: Scalar>(dist: &FactoredDist<T>, action: &Action) -> T {
    let pages: T = action
        .judgments
        .iter()
        .flatten()
        .zip(&dist.page_logits)
        .map(|(&y, &l)| if y { log_sigmoid(l) } else { log_sigmoid(-l) })
        .sum();
    pages + dist.answer_logits[action.answer] - log_sum_exp(&dist.answer_logits)
}

pub fn grad_log_prob_action<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    dist: &FactoredDist<T>,
    action: &Action,
) -> Vec<T> {
    let page_coef: Option<Vec<T>> = action.judgments.as_ref().map(|js| {
        js.iter().zip(&dist.page_probs).map(|(&y, &p)| if y { T::one() - p } else { -p }).collect()
    });
    let answer_coef: Vec<T> = dist
        .answer_probs
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == action.answer { T::one() - p } else { -p })
        .collect();
    chain_to_params(params, feats, dist, page_coef.as_deref(), &answer_coef)
}

/// Maps a parsed response onto the policy's action space.
pub fn action_from_response<T: Scalar>(feats: &SampleFeatures<T>, resp: &StructuredResponse) -> Result<Action, PolicyError> {
    let n = feats.page_count();
    let unsupported = |msg: String| PolicyError::UnsupportedResponse(msg);
    let judgments = match &resp.evidence {
        None => None,
        Some(EvidenceJudgment::Judgments(js)) => {
            if js.len() != n {
                return Err(unsupported(format!("{} judgments for {n} pages", js.len())));
            }
            Some(js.clone())
        }
        Some(EvidenceJudgment::Pages(pages)) => {
            if let Some(&p) = pages.iter().find(|&&p| p == 0 || p > n) {
                return Err(unsupported(format!("page {p} outside 1..={n}")));
            }
            Some((1..=n).map(|p| pages.contains(&p)).collect())
        }
    };
    let answer = feats
        .candidate_index(&resp.answer)
        .ok_or_else(|| unsupported(format!("answer `{}` is not a candidate", resp.answer)))?;
    Ok(Action { judgments, answer })
}

/// Exact log-probability of a parsed response.
pub fn log_prob<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    resp: &StructuredResponse,
) -> Result<T, PolicyError> {
    let action = action_from_response(feats, resp)?;
    Ok(log_prob_action(&distribution(params, feats), &action))
}

/// [`log_prob`] with unsupported responses mapped to negative infinity.
pub fn log_prob_or_neg_inf<T: Scalar>(params: &PolicyParams<T>, feats: &SampleFeatures<T>, resp: &StructuredResponse) -> T {
    log_prob(params, feats, resp).unwrap_or_else(|_| T::neg_infinity())
}

pub fn grad_log_prob<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    resp: &StructuredResponse,
) -> Result<Vec<T>, PolicyError> {
    let action = action_from_response(feats, resp)?;
    Ok(grad_log_prob_action(params, feats, &distribution(params, feats), &action))
}

/// Renders an action as raw text under `psf`.
///
/// An explicit page list with no pages has no valid rendering; it is emitted as an empty
/// evidence block, which fails to parse and scores zero.
pub fn render_action<T: Scalar>(feats: &SampleFeatures<T>, action: &Action, psf: PsfKind) -> String {
    let answer = feats.candidates[action.answer].clone();
    let evidence = match (psf, &action.judgments) {
        (PsfKind::NoEvidence, _) | (_, None) => None,
        (PsfKind::IndicesList, Some(_)) => {
            let pages = action.predicted_pages();
            if pages.is_empty() {
                return format!(
                    "<think>{THINK_TEMPLATE}</think><evidence_page></evidence_page><answer>{answer}</answer>"
                );
            }
            Some(EvidenceJudgment::Pages(pages))
        }
        (_, Some(js)) => Some(EvidenceJudgment::Judgments(js.clone())),
    };
    let resp = StructuredResponse::new(THINK_TEMPLATE, evidence, answer);
    render_response(&resp, psf).expect("policy actions are renderable")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse<T> {
    pub raw: String,
    pub action: Action,
    pub logp: T,
}

/// Draws one response. Page judgments are drawn only when `psf` has an evidence block, and
/// `logp` covers exactly the factors that were drawn.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(dist: &FactoredDist<T>, with_evidence: bool, rng: &mut R) -> Action {
    let judgments = with_evidence.then(|| {
        dist.page_probs.iter().map(|p| rng.random::<f64>() < p.as_f64()).collect::<Vec<_>>()
    });
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let last = dist.answer_probs.len() - 1;
    let answer = dist
        .answer_probs
        .iter()
        .position(|p| {
            acc += p.as_f64();
            u < acc
        })
        .unwrap_or(last);
    Action { judgments, answer }
}

pub fn sample_response<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    psf: PsfKind,
    rng: &mut R,
) -> SampledResponse<T> {
    let dist = distribution(params, feats);
    let action = sample_action(&dist, psf.has_evidence(), rng);
    let logp = log_prob_action(&dist, &action);
    SampledResponse { raw: render_action(feats, &action, psf), action, logp }
}

/// Greedy decoding: a page is relevant when its probability is at least one half; the answer
/// is the first most probable candidate.
pub fn greedy_action<T: Scalar>(dist: &FactoredDist<T>, with_evidence: bool) -> Action {
    let half = T::of(0.5);
    let judgments = with_evidence.then(|| dist.page_probs.iter().map(|&p| p >= half).collect());
    let mut answer = 0;
    for (c, &p) in dist.answer_probs.iter().enumerate() {
        if p > dist.answer_probs[answer] {
            answer = c;
        }
    }
    Action { judgments, answer }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub page_features: usize,
    pub answer_shape: [usize; 2],
    pub len: usize,
    pub temperature: f64,
    pub seed: u64,
}

const CHECKPOINT_FORMAT: &str = "evigrpo-policy-f64le";

/// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json` (header).
pub fn save_checkpoint<T: Scalar>(params: &PolicyParams<T>, seed: u64, dir: &Path, stem: &str) -> Result<(), PolicyError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        page_features: PAGE_FEATURES,
        answer_shape: [PAGE_FEATURES, ANSWER_SLOTS],
        len: PARAM_COUNT,
        temperature: params.temperature.as_f64(),
        seed,
    };
    let bytes: Vec<u8> = params.flat.iter().flat_map(|w| w.as_f64().to_le_bytes()).collect();
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let json = serde_json::to_string_pretty(&header).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, stem: &str) -> Result<(PolicyParams<T>, CheckpointHeader), PolicyError> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)
        .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT
        || header.page_features != PAGE_FEATURES
        || header.answer_shape != [PAGE_FEATURES, ANSWER_SLOTS]
        || header.len != PARAM_COUNT
    {
        return Err(PolicyError::Checkpoint(format!("incompatible header {header:?}")));
    }
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    if bytes.len() != 8 * header.len {
        return Err(PolicyError::Checkpoint(format!("expected {} bytes, found {}", 8 * header.len, bytes.len())));
    }
    let flat = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((PolicyParams::from_flat(flat, T::of(header.temperature))?, header))
}
