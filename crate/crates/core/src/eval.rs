//! Dataset ingestion, metrics and reports.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{distribution, featurize, greedy_action, render_action, PolicyParams};
use crate::psf::{parse_response, PsfKind};
use crate::reward::{anls, AnlsConfig, RewardError};
use crate::scalar::Scalar;
use crate::synth::QASample;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: malformed record: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: schema violation in `{field}`: {message}")]
    SchemaViolation { line: usize, field: &'static str, message: String },
    #[error("no prediction for sample `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown sample `{0}`")]
    UnknownSample(String),
    #[error("duplicate prediction for sample `{0}`")]
    DuplicatePrediction(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

fn check_record(sample: &QASample, line: usize) -> Result<(), EvalError> {
    let violation = |field, message: String| Err(EvalError::SchemaViolation { line, field, message });
    if sample.pages.is_empty() {
        return violation("pages", "document has no pages".into());
    }
    if sample.answers.is_empty() {
        return violation("answers", "no gold answers".into());
    }
    let n = sample.page_count();
    if let Some(&p) = sample.evidence_pages.iter().find(|&&p| p == 0 || p > n) {
        return violation("evidence_pages", format!("page {p} outside 1..={n}"));
    }
    Ok(())
}

/// Parses dataset JSONL. Blank lines are skipped; unknown fields are ignored.
pub fn parse_dataset(text: &str) -> Result<Vec<QASample>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let sample: QASample =
            serde_json::from_str(raw).map_err(|e| EvalError::ParseError { line, message: e.to_string() })?;
        check_record(&sample, line)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QASample>, EvalError> {
    parse_dataset(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn dataset_jsonl(samples: &[QASample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("samples serialize"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, samples: &[QASample]) -> Result<(), EvalError> {
    fs::write(path, dataset_jsonl(samples)).map_err(io_err(path))
}

/// `|P ∩ G| / |G|`, or `None` when `G` is empty.
pub fn evidence_recall(predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    Some(predicted.intersection(gold).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub response: String,
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::ParseError { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    parse_predictions(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn save_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<(), EvalError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for p in preds {
        writeln!(f, "{}", serde_json::to_string(p).expect("predictions serialize")).map_err(io_err(path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset_name: String,
    pub n_samples: usize,
    pub mean_anls: f64,
    /// `None` when no sample has gold evidence or the format carries no evidence.
    pub evidence_recall: Option<f64>,
    pub format_rate: f64,
    /// Mean document length in pages.
    pub mean_pages: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub recall_aggregation: String,
    pub recall_excludes_empty_gold: bool,
    pub anls_threshold: f64,
    pub decoding: String,
}

impl ReportMetadata {
    pub fn new(anls_threshold: f64) -> Self {
        Self {
            recall_aggregation: "macro".into(),
            recall_excludes_empty_gold: true,
            anls_threshold,
            decoding: "greedy (page if p >= 0.5, answer argmax)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub anls: f64,
    pub parsed: bool,
    pub recall: Option<f64>,
}

/// Scores one raw response. Unparseable responses get ANLS 0 and an empty page set.
pub fn score_response<T: Scalar>(
    sample: &QASample,
    raw: &str,
    psf: PsfKind,
    cfg: &AnlsConfig<T>,
) -> Result<SampleScore, EvalError> {
    let parsed = parse_response(raw, psf).ok();
    let anls_value = match &parsed {
        Some(r) => anls(&r.answer, &sample.answers, cfg)?.as_f64(),
        None => 0.0,
    };
    let recall = if psf.has_evidence() {
        let predicted = parsed.as_ref().and_then(|r| r.evidence.as_ref()).map(|e| e.predicted_set()).unwrap_or_default();
        evidence_recall(&predicted, &sample.evidence_pages)
    } else {
        None
    };
    Ok(SampleScore { anls: anls_value, parsed: parsed.is_some(), recall })
}

fn aggregate(name: &str, samples: &[QASample], scores: &[SampleScore]) -> EvalRow {
    let n = samples.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>, count: usize| {
        if count == 0 {
            0.0
        } else {
            xs.sum::<f64>() / count as f64
        }
    };
    let recalls: Vec<f64> = scores.iter().filter_map(|s| s.recall).collect();
    EvalRow {
        dataset_name: name.to_string(),
        n_samples: n,
        mean_anls: mean(&mut scores.iter().map(|s| s.anls), n),
        evidence_recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        format_rate: mean(&mut scores.iter().map(|s| if s.parsed { 1.0 } else { 0.0 }), n),
        mean_pages: mean(&mut samples.iter().map(|s| s.page_count() as f64), n),
    }
}

/// Evaluates a prediction file against `dataset`. Every sample needs exactly one prediction.
pub fn evaluate_predictions<T: Scalar>(
    name: &str,
    dataset: &[QASample],
    predictions: &[PredictionRecord],
    psf: PsfKind,
    cfg: &AnlsConfig<T>,
) -> Result<EvalRow, EvalError> {
    let ids: BTreeSet<&str> = dataset.iter().map(|s| s.id.as_str()).collect();
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !ids.contains(p.id.as_str()) {
            return Err(EvalError::UnknownSample(p.id.clone()));
        }
        if by_id.insert(&p.id, &p.response).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
    }
    if let Some(s) = dataset.iter().find(|s| !by_id.contains_key(s.id.as_str())) {
        return Err(EvalError::MissingPrediction(s.id.clone()));
    }
    let scores = dataset
        .par_iter()
        .map(|s| score_response(s, by_id[s.id.as_str()], psf, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(name, dataset, &scores))
}

/// Greedy-decoded responses of `params` on every sample.
pub fn greedy_predictions<T: Scalar>(params: &PolicyParams<T>, dataset: &[QASample], psf: PsfKind) -> Vec<PredictionRecord> {
    dataset
        .par_iter()
        .map(|s| {
            let feats = featurize::<T>(s);
            let action = greedy_action(&distribution(params, &feats), psf.has_evidence());
            PredictionRecord { id: s.id.clone(), response: render_action(&feats, &action, psf) }
        })
        .collect()
}

pub fn evaluate_policy<T: Scalar>(
    name: &str,
    params: &PolicyParams<T>,
    dataset: &[QASample],
    psf: PsfKind,
    cfg: &AnlsConfig<T>,
) -> Result<EvalRow, EvalError> {
    evaluate_predictions(name, dataset, &greedy_predictions(params, dataset, psf), psf, cfg)
}

/// Macro recall of the page head decoded at `p >= 0.5`, whether or not the format emits it.
/// This is how a policy trained without evidence output is scored for retrieval.
pub fn decoded_evidence_recall<T: Scalar>(params: &PolicyParams<T>, dataset: &[QASample]) -> Option<f64> {
    let recalls: Vec<f64> = dataset
        .par_iter()
        .filter_map(|s| {
            let dist = distribution(params, &featurize::<T>(s));
            let predicted = greedy_action(&dist, true).predicted_pages();
            evidence_recall(&predicted, &s.evidence_pages)
        })
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Dataset | Samples | ANLS | Evidence recall | Format rate (%) | Mean pages |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for r in &report.rows {
                let recall = r.evidence_recall.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
                out.push_str(&format!(
                    "| {} | {} | {:.2} | {} | {:.2} | {:.2} |\n",
                    r.dataset_name,
                    r.n_samples,
                    100.0 * r.mean_anls,
                    recall,
                    100.0 * r.format_rate,
                    r.mean_pages
                ));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::{render_response, EvidenceJudgment, StructuredResponse};
    use crate::synth::{generate_corpus, CorpusConfig};

    const PSF3: PsfKind = PsfKind::JudgmentsInferCount;

    fn corpus() -> Vec<QASample> {
        generate_corpus(&CorpusConfig::multi_page(11, 30)).unwrap().samples
    }

    fn perfect(s: &QASample) -> String {
        let judg = (1..=s.page_count()).map(|p| s.evidence_pages.contains(&p)).collect();
        render_response(&StructuredResponse::new("t", Some(EvidenceJudgment::Judgments(judg)), s.answers[0].clone()), PSF3)
            .unwrap()
    }

    fn preds(samples: &[QASample], f: impl Fn(&QASample) -> String) -> Vec<PredictionRecord> {
        samples.iter().map(|s| PredictionRecord { id: s.id.clone(), response: f(s) }).collect()
    }

    #[test]
    fn round_trips_generator_output() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_dataset(&path, &c).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), c);
    }

    #[test]
    fn empty_and_blank_files() {
        assert!(parse_dataset("").unwrap().is_empty());
        assert!(parse_dataset("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn rejects_page_zero_with_line_number() {
        let mut c = corpus();
        c[1].evidence_pages = BTreeSet::from([0]);
        match parse_dataset(&dataset_jsonl(&c[..3])) {
            Err(EvalError::SchemaViolation { line: 2, field: "evidence_pages", .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut c = corpus();
        let n = c[0].page_count();
        c[0].evidence_pages = BTreeSet::from([n + 1]);
        assert!(matches!(parse_dataset(&dataset_jsonl(&c[..1])), Err(EvalError::SchemaViolation { line: 1, .. })));
        c[0].evidence_pages.clear();
        c[0].answers.clear();
        assert!(matches!(
            parse_dataset(&dataset_jsonl(&c[..1])),
            Err(EvalError::SchemaViolation { field: "answers", .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n{{nope\n", dataset_jsonl(&corpus()[..1]).trim());
        assert!(matches!(parse_dataset(&text), Err(EvalError::ParseError { line: 2, .. })));
    }

    #[test]
    fn extra_fields_are_ignored() {
        let c = corpus();
        let mut v: serde_json::Value = serde_json::to_value(&c[0]).unwrap();
        v["think"] = "x".into();
        v["evidence_judgments"] = serde_json::json!(["T"]);
        assert_eq!(parse_dataset(&v.to_string()).unwrap(), vec![c[0].clone()]);
    }

    #[test]
    fn recall_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert!((evidence_recall(&s(&[1, 2]), &s(&[1, 2, 3])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(evidence_recall(&s(&[2, 5]), &s(&[2, 5])), Some(1.0));
        assert_eq!(evidence_recall(&s(&[]), &s(&[4])), Some(0.0));
        assert_eq!(evidence_recall(&s(&[1]), &s(&[])), None);
    }

    #[test]
    fn perfect_and_malformed_predictions() {
        let c = corpus();
        let cfg = AnlsConfig::<f64>::default();
        let row = evaluate_predictions("d", &c, &preds(&c, perfect), PSF3, &cfg).unwrap();
        assert_eq!((row.mean_anls, row.evidence_recall, row.format_rate), (1.0, Some(1.0), 1.0));
        let row = evaluate_predictions("d", &c, &preds(&c, |_| "garbage".into()), PSF3, &cfg).unwrap();
        assert_eq!((row.mean_anls, row.evidence_recall, row.format_rate), (0.0, Some(0.0), 0.0));
        assert_eq!(row.n_samples, c.len());
    }

    #[test]
    fn three_sample_fixture() {
        let base = &corpus()[0];
        let mk = |id: &str, gold: &str| QASample { id: id.into(), answers: vec![gold.into()], ..base.clone() };
        let data = vec![mk("a", "paris"), mk("b", "kitten"), mk("c", "abc")];
        let response = |a: &str| format!("<think>t</think><answer>{a}</answer>");
        let p = vec![
            PredictionRecord { id: "a".into(), response: response("Paris") },
            PredictionRecord { id: "b".into(), response: response("sitting") },
            PredictionRecord { id: "c".into(), response: response("xyz") },
        ];
        let row = evaluate_predictions("fx", &data, &p, PsfKind::NoEvidence, &AnlsConfig::<f64>::default()).unwrap();
        // 1, 1 - 3/7, 0
        assert!((row.mean_anls - (1.0 + 4.0 / 7.0) / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", 100.0 * row.mean_anls), "52.38");
        assert_eq!(row.evidence_recall, None);
    }

    #[test]
    fn prediction_bookkeeping_errors() {
        let c = corpus();
        let cfg = AnlsConfig::<f64>::default();
        let mut p = preds(&c, perfect);
        p.pop();
        assert!(matches!(evaluate_predictions("d", &c, &p, PSF3, &cfg), Err(EvalError::MissingPrediction(_))));
        let mut p = preds(&c, perfect);
        p.push(p[0].clone());
        assert!(matches!(evaluate_predictions("d", &c, &p, PSF3, &cfg), Err(EvalError::DuplicatePrediction(_))));
        let mut p = preds(&c, perfect);
        p[0].id = "zzz".into();
        assert!(matches!(evaluate_predictions("d", &c, &p, PSF3, &cfg), Err(EvalError::UnknownSample(_))));
    }

    #[test]
    fn mean_anls_agrees_with_reward_kernel() {
        let mangle = |a: &str| format!("{}x", a.chars().take(3).collect::<String>());
        let c = corpus();
        let cfg = AnlsConfig::<f64>::default();
        let p = preds(&c, |s| format!("<think>t</think><answer>{}</answer>", mangle(&s.answers[0])));
        let row = evaluate_predictions("d", &c, &p, PsfKind::NoEvidence, &cfg).unwrap();
        let direct: f64 =
            c.iter().map(|s| anls(&mangle(&s.answers[0]), &s.answers, &cfg).unwrap()).sum::<f64>() / c.len() as f64;
        assert!((row.mean_anls - direct).abs() < 1e-12);
    }

    #[test]
    fn recall_versus_f1_ordering() {
        use crate::reward::evidence_f1;
        for n in 1..=6usize {
            let set = |m: u32| (1..=n).filter(|p| m >> (p - 1) & 1 == 1).collect::<BTreeSet<_>>();
            for pm in 0..1u32 << n {
                for gm in 1..1u32 << n {
                    let (p, g) = (set(pm), set(gm));
                    let f1: f64 = evidence_f1(&p, &g, n, Some(n), true).unwrap();
                    let recall = evidence_recall(&p, &g).unwrap();
                    // precision >= recall exactly when |P| <= |G|, and F1 sits between them
                    if p.len() >= g.len() {
                        assert!(recall >= f1 - 1e-15, "{p:?} {g:?}");
                    }
                    if p.len() <= g.len() {
                        assert!(recall <= f1 + 1e-15, "{p:?} {g:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn format_rate_times_n_is_integer() {
        let c = corpus();
        let p = preds(&c, |s| if s.page_count() % 2 == 0 { perfect(s) } else { "x".into() });
        let row = evaluate_predictions("d", &c, &p, PSF3, &AnlsConfig::<f64>::default()).unwrap();
        let k = row.format_rate * row.n_samples as f64;
        assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn markdown_matches_json_and_is_deterministic() {
        let c = corpus();
        let cfg = AnlsConfig::<f64>::default();
        let p = preds(&c, |s| if s.page_count() > 6 { perfect(s) } else { "x".into() });
        let report = EvalReport {
            metadata: ReportMetadata::new(0.5),
            rows: vec![evaluate_predictions("synthetic", &c, &p, PSF3, &cfg).unwrap()],
        };
        let json = emit_report(&report, ReportFormat::Json);
        assert_eq!(json, emit_report(&report, ReportFormat::Json));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        let md = emit_report(&back, ReportFormat::Markdown);
        let r = &report.rows[0];
        assert!(md.contains(&format!("{:.2}", 100.0 * r.mean_anls)));
        assert!(md.contains(&format!("{:.2}", 100.0 * r.evidence_recall.unwrap())));
        assert!(json.find("recall_aggregation").unwrap() < json.find("rows").unwrap());

        let empty = EvalReport { metadata: ReportMetadata::new(0.5), rows: vec![] };
        assert_eq!(emit_report(&empty, ReportFormat::Markdown).lines().count(), 2);
    }

    #[test]
    fn greedy_policy_evaluation_is_well_formed() {
        let c = corpus();
        let params = PolicyParams::<f64>::init(1.0, 0.25);
        let row = evaluate_policy("d", &params, &c, PSF3, &AnlsConfig::default()).unwrap();
        assert_eq!(row.format_rate, 1.0);
        // prior 0.25 selects nothing, recall is zero
        assert_eq!(row.evidence_recall, Some(0.0));
        assert_eq!(decoded_evidence_recall(&params, &c), Some(0.0));
        let none = evaluate_policy("d", &params, &c, PsfKind::NoEvidence, &AnlsConfig::default()).unwrap();
        assert_eq!(none.evidence_recall, None);
        // PSF-1 with no page selected renders an empty list, which does not parse
        let psf1 = evaluate_policy("d", &params, &c, PsfKind::IndicesList, &AnlsConfig::default()).unwrap();
        assert_eq!(psf1.format_rate, 0.0);
    }
}
