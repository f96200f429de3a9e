//! Training loop and curriculum.
//!
//! Each step snapshots the current policy as `pi_old`, draws `G` responses per sample,
//! scores them, standardizes rewards within each group and takes a gradient step on the
//! clipped objective. A curriculum runs a single-page stage, then a multi-page stage; by
//! default the KL reference is re-anchored to the current policy at the start of each stage.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate_policy, EvalError, EvalRow};
use crate::grpo::{objective, GrpoError, KlMode, ObjectiveConfig, Rollout, RolloutGroup};
use crate::policy::{distribution, featurize, log_prob_action, sample_response, PolicyParams, SampleFeatures};
use crate::psf::PsfKind;
use crate::reward::{total_reward, AnlsConfig};
use crate::scalar::Scalar;
use crate::seed::stream;
use crate::synth::QASample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefRefresh {
    PerStage,
    Never,
}

impl FromStr for RefRefresh {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_stage" | "per-stage" => Ok(RefRefresh::PerStage),
            "never" => Ok(RefRefresh::Never),
            other => Err(format!("unknown ref_refresh `{other}` (expected per_stage|never)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub epochs_per_stage: usize,
    /// When set, each stage runs exactly this many steps, reshuffling across epochs.
    pub steps_per_stage: Option<usize>,
    /// Gradient steps taken on each rollout batch.
    pub updates_per_batch: usize,
    pub std_epsilon: f64,
    pub seed: u64,
    pub psf: PsfKind,
    pub ref_refresh: RefRefresh,
    pub kl_mode: KlMode,
    pub temperature: f64,
    /// Initial relevance probability of every page.
    pub page_prior: f64,
    pub anls_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            batch_size: 16,
            beta: 0.04,
            clip_eps: 0.2,
            learning_rate: 0.05,
            epochs_per_stage: 1,
            steps_per_stage: None,
            updates_per_batch: 1,
            std_epsilon: 1e-8,
            seed: 0,
            psf: PsfKind::JudgmentsInferCount,
            ref_refresh: RefRefresh::PerStage,
            kl_mode: KlMode::ExactFactored,
            temperature: 1.0,
            page_prior: 0.25,
            anls_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.std_epsilon > 0.0) || !(self.temperature > 0.0) {
            return bad("learning_rate, std_epsilon and temperature must be positive");
        }
        if !(self.page_prior > 0.0 && self.page_prior < 1.0) {
            return bad("page_prior must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.anls_threshold) {
            return bad("anls_threshold must lie in [0, 1]");
        }
        if self.updates_per_batch == 0 || (self.steps_per_stage.is_none() && self.epochs_per_stage == 0) {
            return bad("updates_per_batch and epochs_per_stage must be at least 1");
        }
        Ok(())
    }

    pub fn objective<T: Scalar>(&self) -> ObjectiveConfig<T> {
        ObjectiveConfig {
            clip_eps: T::of(self.clip_eps),
            kl_weight: T::of(self.beta),
            kl_mode: self.kl_mode,
            std_epsilon: T::of(self.std_epsilon),
        }
    }

    pub fn anls<T: Scalar>(&self) -> AnlsConfig<T> {
        AnlsConfig::with_threshold(T::of(self.anls_threshold))
    }

    pub fn initial_policy<T: Scalar>(&self) -> PolicyParams<T> {
        PolicyParams::init(T::of(self.temperature), T::of(self.page_prior))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus `{0}` is empty")]
    EmptyCorpus(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub mean_total_reward: f64,
    pub mean_format: f64,
    pub mean_acc: f64,
    pub mean_evi: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub records: Vec<StepRecord>,
}

/// A sample with its policy features computed once.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub sample: QASample,
    pub features: SampleFeatures<T>,
}

pub fn prepare<T: Scalar>(samples: &[QASample]) -> Vec<Prepared<T>> {
    samples.iter().map(|s| Prepared { sample: s.clone(), features: featurize(s) }).collect()
}

/// One optimization step on `batch`. Deterministic in `(cfg.seed, step)`.
pub fn grpo_step<T: Scalar>(
    params: &mut PolicyParams<T>,
    reference: &PolicyParams<T>,
    batch: &[&Prepared<T>],
    cfg: &TrainConfig,
    step: u64,
    stage: &str,
) -> Result<StepRecord, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let old = params.clone();
    let anls_cfg = cfg.anls::<T>();
    let psf = cfg.psf;

    let groups: Vec<RolloutGroup<'_, T>> = batch
        .par_iter()
        .enumerate()
        .map(|(b, item)| {
            let mut rng = stream(cfg.seed, step, b as u64);
            let ref_dist = distribution(reference, &item.features);
            let mut group = RolloutGroup::new(item.sample.id.clone(), &item.features, psf.has_evidence());
            for _ in 0..cfg.group_size {
                let out = sample_response(&old, &item.features, psf, &mut rng);
                let logp_ref = log_prob_action(&ref_dist, &out.action);
                let reward = total_reward(&out.raw, &item.sample, psf, &anls_cfg);
                group.responses.push(Rollout { raw: out.raw, action: Some(out.action), logp_old: out.logp, logp_ref, reward });
            }
            group.fill_advantages(T::of(cfg.std_epsilon))?;
            Ok(group)
        })
        .collect::<Result<_, GrpoError>>()?;

    let obj_cfg = cfg.objective::<T>();
    let lr = T::of(cfg.learning_rate);
    let mut first = None;
    for _ in 0..cfg.updates_per_batch {
        let value = objective(&groups, params, reference, &obj_cfg)?;
        params.descend(&value.gradient, lr);
        first.get_or_insert(value);
    }
    let value = first.expect("at least one update");

    let n = groups.iter().map(|g| g.responses.len()).sum::<usize>() as f64;
    let mean = |f: &dyn Fn(&Rollout<T>) -> T| {
        groups.iter().flat_map(|g| &g.responses).map(|r| f(r).as_f64()).sum::<f64>() / n
    };
    Ok(StepRecord {
        stage: stage.to_string(),
        step,
        mean_total_reward: mean(&|r| r.reward.total),
        mean_format: mean(&|r| r.reward.format),
        mean_acc: mean(&|r| r.reward.accuracy),
        mean_evi: mean(&|r| r.reward.evidence),
        mean_kl: value.mean_kl.as_f64(),
        loss: value.loss.as_f64(),
        grad_norm: value.gradient.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt(),
    })
}

/// Trains through `stages` in order, each a `(label, samples)` pair.
pub fn train_stages<T: Scalar>(
    cfg: &TrainConfig,
    init: PolicyParams<T>,
    stages: &[(&str, &[Prepared<T>])],
) -> Result<(PolicyParams<T>, Vec<StageTrace>), TrainError> {
    cfg.validate()?;
    let mut params = init;
    let mut reference = params.clone();
    let mut step = 0u64;
    let mut traces = Vec::with_capacity(stages.len());

    for (stage_index, (label, data)) in stages.iter().enumerate() {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus(label.to_string()));
        }
        if cfg.ref_refresh == RefRefresh::PerStage {
            reference = params.clone();
        }
        let mut records = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch = 0u64;
        let budget = cfg.steps_per_stage;
        'epochs: loop {
            if budget.is_none() && epoch as usize >= cfg.epochs_per_stage {
                break;
            }
            order.sort_unstable();
            order.shuffle(&mut stream(cfg.seed ^ 0x5EED, stage_index as u64, epoch));
            for chunk in order.chunks(cfg.batch_size) {
                if budget.is_some_and(|b| records.len() >= b) {
                    break 'epochs;
                }
                let batch: Vec<&Prepared<T>> = chunk.iter().map(|&i| &data[i]).collect();
                records.push(grpo_step(&mut params, &reference, &batch, cfg, step, label)?);
                step += 1;
            }
            epoch += 1;
        }
        traces.push(StageTrace { stage: label.to_string(), records });
    }
    Ok((params, traces))
}

/// Single-page warm-up stage followed by a multi-page stage.
pub fn run_curriculum<T: Scalar>(
    cfg: &TrainConfig,
    single: &[QASample],
    multi: &[QASample],
) -> Result<(PolicyParams<T>, Vec<StageTrace>), TrainError> {
    if single.is_empty() {
        return Err(TrainError::EmptyCorpus("single".into()));
    }
    if multi.is_empty() {
        return Err(TrainError::EmptyCorpus("multi".into()));
    }
    let (s, m) = (prepare::<T>(single), prepare::<T>(multi));
    train_stages(cfg, cfg.initial_policy(), &[("single", &s), ("multi", &m)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    SingleOnly,
    MultiOnly,
    Mixed,
    Curriculum,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::SingleOnly => "single",
            DataMode::MultiOnly => "multi",
            DataMode::Mixed => "mixdata",
            DataMode::Curriculum => "curriculum",
        })
    }
}

/// Trains under a data composition. Single-stage modes get the same total step budget as
/// the two curriculum stages when a step budget is configured.
pub fn run_data_mode<T: Scalar>(
    cfg: &TrainConfig,
    mode: DataMode,
    single: &[QASample],
    multi: &[QASample],
) -> Result<(PolicyParams<T>, Vec<StageTrace>), TrainError> {
    let one_stage = |label: &str, data: Vec<QASample>| {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus(label.to_string()));
        }
        let mut c = cfg.clone();
        c.steps_per_stage = cfg.steps_per_stage.map(|s| 2 * s);
        train_stages(&c, cfg.initial_policy(), &[(label, &prepare::<T>(&data))])
    };
    match mode {
        DataMode::Curriculum => run_curriculum(cfg, single, multi),
        DataMode::SingleOnly => one_stage("single", single.to_vec()),
        DataMode::MultiOnly => one_stage("multi", multi.to_vec()),
        DataMode::Mixed => one_stage("mixed", single.iter().chain(multi).cloned().collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub psf: PsfKind,
    pub data: DataMode,
}

impl AblationVariant {
    pub fn new(name: &str, psf: PsfKind, data: DataMode) -> Self {
        Self { name: name.to_string(), psf, data }
    }

    /// Training paradigm, data composition, strategy and page-selection-format variants.
    pub fn standard_set() -> Vec<Self> {
        use DataMode::*;
        use PsfKind::*;
        vec![
            Self::new("grpo-mixdata", NoEvidence, Mixed),
            Self::new("evigrpo-single", JudgmentsInferCount, SingleOnly),
            Self::new("evigrpo-multi", JudgmentsInferCount, MultiOnly),
            Self::new("evigrpo-mixdata", JudgmentsInferCount, Mixed),
            Self::new("psf1", IndicesList, Curriculum),
            Self::new("psf2", JudgmentsWithCount, Curriculum),
            Self::new("ours", JudgmentsInferCount, Curriculum),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psf: PsfKind,
    pub data: DataMode,
    pub prompt_has_count: bool,
    pub steps: usize,
    pub final_mean_reward: f64,
    pub eval: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every variant on the same corpora and seed.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[AblationVariant],
    single: &[QASample],
    multi: &[QASample],
    heldout: &[QASample],
) -> Result<AblationReport, TrainError> {
    let rows = variants
        .par_iter()
        .map(|v| {
            let cfg = TrainConfig { psf: v.psf, ..base.clone() };
            let (params, traces) = run_data_mode::<f64>(&cfg, v.data, single, multi)?;
            let eval = evaluate_policy(&v.name, &params, heldout, v.psf, &cfg.anls())?;
            let records: Vec<&StepRecord> = traces.iter().flat_map(|t| &t.records).collect();
            // only formats that need the page count refuse to render without one
            let prompt_has_count = crate::psf::render_prompt(v.psf, "?", None).is_err();
            Ok(AblationRow {
                variant: v.name.clone(),
                psf: v.psf,
                data: v.data,
                prompt_has_count,
                steps: records.len(),
                final_mean_reward: records.last().map_or(0.0, |r| r.mean_total_reward),
                eval,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(AblationReport { seed: base.seed, rows })
}

pub fn ablation_markdown(report: &AblationReport) -> String {
    let mut out = String::from("| Variant | PSF | Data | Count in prompt | Steps | ANLS | Evidence recall | Format rate |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        let recall = r.eval.evidence_recall.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} | {} | {:.2} |\n",
            r.variant,
            r.psf,
            r.data,
            if r.prompt_has_count { "yes" } else { "no" },
            r.steps,
            100.0 * r.eval.mean_anls,
            recall,
            r.eval.format_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusConfig};

    fn corpora() -> (Vec<QASample>, Vec<QASample>) {
        (
            generate_corpus(&CorpusConfig::single_page(1, 40)).unwrap().samples,
            generate_corpus(&CorpusConfig::multi_page(2, 40)).unwrap().samples,
        )
    }

    #[test]
    fn first_step_at_reference_has_zero_surrogate_and_kl() {
        let (_, multi) = corpora();
        let data = prepare::<f64>(&multi[..4]);
        let batch: Vec<_> = data.iter().collect();
        let cfg = TrainConfig::default();
        let mut params = cfg.initial_policy::<f64>();
        let reference = params.clone();
        let rec = grpo_step(&mut params, &reference, &batch, &cfg, 0, "t").unwrap();
        assert!(rec.loss.abs() < 1e-12, "{}", rec.loss);
        assert_eq!(rec.mean_kl, 0.0);
        assert_eq!(rec.mean_format, 1.0);
    }

    #[test]
    fn identical_rewards_only_move_by_kl() {
        let (_, multi) = corpora();
        let data = prepare::<f64>(&multi[..2]);
        let batch: Vec<_> = data.iter().collect();
        // with an infinite std guard every group is degenerate
        let cfg = TrainConfig { std_epsilon: f64::INFINITY, ..TrainConfig::default() };
        let start = cfg.initial_policy::<f64>();
        let mut params = start.clone();
        grpo_step(&mut params, &start, &batch, &cfg, 0, "t").unwrap();
        assert_eq!(params, start, "policy at reference with zero advantages must not move");

        let mut reference = start.clone();
        reference.answer_weights_mut()[0] = 1.0;
        let mut params = start.clone();
        grpo_step(&mut params, &reference, &batch, &cfg, 0, "t").unwrap();
        assert!(params.answer_weights()[0] > start.answer_weights()[0], "KL pulls toward reference");
    }

    #[test]
    fn deterministic_training() {
        let (single, multi) = corpora();
        let cfg = TrainConfig { steps_per_stage: Some(6), seed: 3, ..TrainConfig::default() };
        let a = run_curriculum::<f64>(&cfg, &single, &multi).unwrap();
        let b = run_curriculum::<f64>(&cfg, &single, &multi).unwrap();
        assert_eq!(a, b);
        let labels: Vec<_> = a.1.iter().map(|t| t.stage.as_str()).collect();
        assert_eq!(labels, ["single", "multi"]);
        let steps: Vec<u64> = a.1.iter().flat_map(|t| t.records.iter().map(|r| r.step)).collect();
        assert_eq!(steps, (0..12).collect::<Vec<_>>());
        assert!(a.1.iter().flat_map(|t| &t.records).all(|r| (0.0..=3.0).contains(&r.mean_total_reward) && r.mean_kl >= 0.0));
    }

    #[test]
    fn per_stage_refresh_zeroes_kl_at_stage_start() {
        let (single, multi) = corpora();
        for mode in [KlMode::ExactFactored, KlMode::K3Estimator] {
            let cfg = TrainConfig { steps_per_stage: Some(5), kl_mode: mode, ..TrainConfig::default() };
            let (_, traces) = run_curriculum::<f64>(&cfg, &single, &multi).unwrap();
            assert_eq!(traces[1].records[0].mean_kl, 0.0);
            assert!(traces[0].records[4].mean_kl > 0.0);
            let never = TrainConfig { ref_refresh: RefRefresh::Never, ..cfg };
            let (_, traces) = run_curriculum::<f64>(&never, &single, &multi).unwrap();
            assert!(traces[1].records[0].mean_kl > 0.0);
        }
    }

    #[test]
    fn epoch_mode_covers_the_corpus_once() {
        let (single, multi) = corpora();
        let cfg = TrainConfig::default();
        let (_, traces) = run_curriculum::<f64>(&cfg, &single, &multi).unwrap();
        assert_eq!(traces[0].records.len(), 3); // 40 samples, batch 16
        assert_eq!(traces[1].records.len(), 3);
    }

    #[test]
    fn no_evidence_rewards_bounded_by_two() {
        let (single, multi) = corpora();
        let cfg = TrainConfig { psf: PsfKind::NoEvidence, steps_per_stage: Some(4), ..TrainConfig::default() };
        let (params, traces) = run_curriculum::<f64>(&cfg, &single, &multi).unwrap();
        assert!(traces.iter().flat_map(|t| &t.records).all(|r| r.mean_total_reward <= 2.0 && r.mean_evi == 0.0));
        // page head untouched without evidence judgments
        assert_eq!(params.page_weights(), cfg.initial_policy::<f64>().page_weights());
    }

    #[test]
    fn empty_corpus_and_bad_config() {
        let (single, _) = corpora();
        assert!(matches!(run_curriculum::<f64>(&TrainConfig::default(), &single, &[]), Err(TrainError::EmptyCorpus(_))));
        let cfg = TrainConfig { group_size: 1, ..TrainConfig::default() };
        assert!(matches!(run_curriculum::<f64>(&cfg, &single, &single), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn trains_in_f32() {
        let (single, multi) = corpora();
        let cfg = TrainConfig { steps_per_stage: Some(3), ..TrainConfig::default() };
        let (params, traces) = run_curriculum::<f32>(&cfg, &single, &multi).unwrap();
        assert_eq!(traces.iter().map(|t| t.records.len()).sum::<usize>(), 6);
        assert!(params.flat().iter().all(|w| w.is_finite()));
    }
}
