//! Synthetic multi-page documents and QA samples with known evidence pages.
//!
//! A document is a list of pages; each page holds symbolic `(key, value)` facts. Keys are
//! unique within a document. Questions come from two fixed templates:
//!
//! * lookup: `What is the value of <key>?`, answered by the value, evidence = the key's page;
//! * comparison: `Do <k1> and <k2> have equal values?`, answered `yes`/`no`, evidence = both pages.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const YES: &str = "yes";
pub const NO: &str = "no";

/// One `(key, value)` fact; serialized as a two-element array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact(pub String, pub String);

impl Fact {
    pub fn key(&self) -> &str {
        &self.0
    }

    pub fn value(&self) -> &str {
        &self.1
    }
}

pub type Page = Vec<Fact>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub pages: Vec<Page>,
}

impl SyntheticDocument {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// Rebuilds the document a sample was drawn from; samples carry their page payloads.
    pub fn from_sample(sample: &QASample) -> Self {
        Self { doc_id: sample.id.clone(), pages: sample.pages.clone() }
    }

    /// 1-based page and value for `key`.
    pub fn lookup(&self, key: &str) -> Option<(usize, &str)> {
        self.pages.iter().enumerate().find_map(|(i, page)| {
            page.iter().find(|f| f.key() == key).map(|f| (i + 1, f.value()))
        })
    }
}

/// Question categories used by the annotation benchmark. The generator emits only
/// `Factual` (lookup) and `Comparison` questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    Factual,
    Reasoning,
    Comparison,
    Summary,
    Procedural,
    Motivation,
    Result,
}

/// A question over a multi-page document, in the on-disk JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub question: String,
    pub pages: Vec<Page>,
    pub answers: Vec<String>,
    /// Gold evidence pages, 1-based.
    pub evidence_pages: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<QuestionCategory>,
}

impl QASample {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn hop_count(&self) -> usize {
        self.hops.unwrap_or(self.evidence_pages.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_documents: usize,
    /// Inclusive page-count range.
    pub page_count_range: (usize, usize),
    /// Inclusive facts-per-page range.
    pub facts_per_page_range: (usize, usize),
    /// `hop_distribution[k]` is the probability of a `k + 1`-hop question.
    pub hop_distribution: Vec<f64>,
    /// Size of the key vocabulary; keys are drawn without replacement within a document.
    pub vocabulary_size: usize,
    /// Probability that a lookup document also holds a one-character near-miss of the answer.
    pub near_miss_prob: f64,
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self::multi_page(0, 200)
    }
}

impl CorpusConfig {
    /// Multi-page corpus with 4 to 10 pages and an even mix of 1- and 2-hop questions.
    pub fn multi_page(seed: u64, num_documents: usize) -> Self {
        Self {
            seed,
            num_documents,
            page_count_range: (4, 10),
            facts_per_page_range: (2, 5),
            hop_distribution: vec![0.5, 0.5],
            vocabulary_size: 1000,
            near_miss_prob: 0.5,
            id_prefix: "multi".into(),
        }
    }

    /// Single-page lookup corpus.
    pub fn single_page(seed: u64, num_documents: usize) -> Self {
        Self {
            page_count_range: (1, 1),
            hop_distribution: vec![1.0],
            id_prefix: "single".into(),
            ..Self::multi_page(seed, num_documents)
        }
    }

    fn max_hops(&self) -> usize {
        self.hop_distribution.iter().rposition(|&p| p > 0.0).map_or(0, |i| i + 1)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InfeasibleConfig(msg));
        let (pmin, pmax) = self.page_count_range;
        let (fmin, fmax) = self.facts_per_page_range;
        if pmin == 0 || pmin > pmax {
            return bad(format!("page_count_range {pmin}..={pmax} is empty or includes 0"));
        }
        if fmin == 0 || fmin > fmax {
            return bad(format!("facts_per_page_range {fmin}..={fmax} is empty or includes 0"));
        }
        if self.hop_distribution.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("hop_distribution has a negative or non-finite entry".into());
        }
        let total: f64 = self.hop_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("hop_distribution sums to {total}, not 1"));
        }
        let max_hops = self.max_hops();
        if max_hops > 2 {
            return bad(format!("{max_hops}-hop questions have no template (max 2)"));
        }
        if max_hops > pmin {
            return bad(format!("{max_hops}-hop questions need at least {max_hops} pages, min page count is {pmin}"));
        }
        if self.vocabulary_size < pmax * fmax {
            return bad(format!(
                "vocabulary_size {} cannot supply {} unique keys per document",
                self.vocabulary_size,
                pmax * fmax
            ));
        }
        if !(0.0..=1.0).contains(&self.near_miss_prob) {
            return bad("near_miss_prob outside [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("infeasible corpus config: {0}")]
    InfeasibleConfig(String),
    #[error("key `{0}` not found in document")]
    KeyNotFound(String),
    #[error("question does not match a known template: {0}")]
    UnrecognizedQuestion(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<SyntheticDocument>,
    pub samples: Vec<QASample>,
}

fn key_name(i: usize, width: usize) -> String {
    format!("k{i:0width$}")
}

fn value_name(v: u32) -> String {
    format!("v{v:04}")
}

/// Same length, exactly one character different.
fn near_miss(value: &str, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = value.chars().collect();
    let pos = rng.random_range(1.max(chars.len().saturating_sub(4))..chars.len());
    let old = chars[pos];
    let mut new = old;
    while new == old {
        new = char::from(b'0' + rng.random_range(0..10u8));
    }
    chars[pos] = new;
    chars.into_iter().collect()
}

fn lookup_question(key: &str) -> String {
    format!("What is the value of {key}?")
}

fn compare_question(k1: &str, k2: &str) -> String {
    format!("Do {k1} and {k2} have equal values?")
}

/// Generates a corpus, one sample per document. Deterministic in `cfg.seed`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.vocabulary_size.max(2) - 1).to_string().len();
    let mut documents = Vec::with_capacity(cfg.num_documents);
    let mut samples = Vec::with_capacity(cfg.num_documents);

    for d in 0..cfg.num_documents {
        let n_pages = rng.random_range(cfg.page_count_range.0..=cfg.page_count_range.1);
        let sizes: Vec<usize> = (0..n_pages)
            .map(|_| rng.random_range(cfg.facts_per_page_range.0..=cfg.facts_per_page_range.1))
            .collect();
        let total: usize = sizes.iter().sum();
        let keys = index::sample(&mut rng, cfg.vocabulary_size, total).into_vec();
        let mut keys = keys.into_iter();
        let mut pages: Vec<Page> = sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| Fact(key_name(keys.next().unwrap(), width), value_name(rng.random_range(0..10_000))))
                    .collect()
            })
            .collect();

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let hops = cfg
            .hop_distribution
            .iter()
            .position(|&p| {
                acc += p;
                u < acc
            })
            .unwrap_or(cfg.max_hops() - 1)
            + 1;

        let id = format!("{}-{d:05}", cfg.id_prefix);
        let sample = if hops == 1 {
            let page = rng.random_range(0..n_pages);
            let slot = rng.random_range(0..pages[page].len());
            let Fact(key, value) = pages[page][slot].clone();
            // Values may repeat across keys; only the queried key's page is evidence.
            if rng.random_bool(cfg.near_miss_prob) && total > 1 {
                let others: Vec<(usize, usize)> = pages
                    .iter()
                    .enumerate()
                    .flat_map(|(p, facts)| (0..facts.len()).map(move |s| (p, s)))
                    .filter(|&(p, s)| (p, s) != (page, slot))
                    .collect();
                let (p, s) = others[rng.random_range(0..others.len())];
                pages[p][s].1 = near_miss(&value, &mut rng);
            }
            QASample {
                id,
                question: lookup_question(&key),
                pages: pages.clone(),
                answers: vec![value],
                evidence_pages: BTreeSet::from([page + 1]),
                hops: Some(1),
                category: Some(QuestionCategory::Factual),
            }
        } else {
            let chosen = index::sample(&mut rng, n_pages, 2).into_vec();
            let (pa, pb) = (chosen[0], chosen[1]);
            let sa = rng.random_range(0..pages[pa].len());
            let sb = rng.random_range(0..pages[pb].len());
            let equal = rng.random_bool(0.5);
            let va = pages[pa][sa].1.clone();
            if equal {
                pages[pb][sb].1 = va.clone();
            } else {
                while pages[pb][sb].1 == va {
                    pages[pb][sb].1 = if rng.random_bool(0.5) {
                        near_miss(&va, &mut rng)
                    } else {
                        value_name(rng.random_range(0..10_000))
                    };
                }
            }
            let (ka, kb) = (pages[pa][sa].0.clone(), pages[pb][sb].0.clone());
            QASample {
                id,
                question: compare_question(&ka, &kb),
                pages: pages.clone(),
                answers: vec![if equal { YES } else { NO }.to_string()],
                evidence_pages: BTreeSet::from([pa + 1, pb + 1]),
                hops: Some(2),
                category: Some(QuestionCategory::Comparison),
            }
        };
        documents.push(SyntheticDocument { doc_id: sample.id.clone(), pages });
        samples.push(sample);
    }

    let corpus = Corpus { documents, samples };
    for (doc, sample) in corpus.documents.iter().zip(&corpus.samples) {
        let oracle = answer_oracle(sample, doc)?;
        assert_eq!(oracle.answer, sample.answers[0], "generator/oracle disagreement on {}", sample.id);
        assert_eq!(oracle.evidence, sample.evidence_pages, "generator/oracle disagreement on {}", sample.id);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleAnswer {
    pub answer: String,
    pub evidence: BTreeSet<usize>,
}

/// Recomputes answer and minimal evidence from the question text and raw facts only.
pub fn answer_oracle(sample: &QASample, doc: &SyntheticDocument) -> Result<OracleAnswer, SynthError> {
    let q = sample.question.as_str();
    let find = |key: &str| doc.lookup(key).ok_or_else(|| SynthError::KeyNotFound(key.to_string()));
    if let Some(key) = q.strip_prefix("What is the value of ").and_then(|r| r.strip_suffix('?')) {
        let (page, value) = find(key)?;
        return Ok(OracleAnswer { answer: value.to_string(), evidence: BTreeSet::from([page]) });
    }
    if let Some((k1, k2)) = q
        .strip_prefix("Do ")
        .and_then(|r| r.strip_suffix(" have equal values?"))
        .and_then(|r| r.split_once(" and "))
    {
        let ((p1, v1), (p2, v2)) = (find(k1)?, find(k2)?);
        let answer = if v1 == v2 { YES } else { NO };
        return Ok(OracleAnswer { answer: answer.to_string(), evidence: BTreeSet::from([p1, p2]) });
    }
    Err(SynthError::UnrecognizedQuestion(q.to_string()))
}

/// Tokens of the question that name keys present in `pages`.
pub fn question_keys<'a>(question: &str, pages: &'a [Page]) -> Vec<&'a str> {
    let tokens: BTreeSet<&str> = question
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .collect();
    let mut seen = HashMap::new();
    pages
        .iter()
        .flatten()
        .filter(|f| tokens.contains(f.key()))
        .filter(|f| seen.insert(f.key(), ()).is_none())
        .map(Fact::key)
        .collect()
}
