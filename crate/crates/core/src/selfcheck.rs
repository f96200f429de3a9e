//! Oracle checks behind the `check-rewards` and `grad-check` subcommands.
//!
//! Each check compares the library against a separately coded reference (bitmask F1,
//! full-matrix edit distance, central finite differences) and reports PASS or FAIL.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grpo::{group_advantages, objective, KlMode, ObjectiveConfig, Rollout, RolloutGroup};
use crate::policy::{
    distribution, featurize, log_prob_action, sample_response, PolicyParams, SampleFeatures, PARAM_COUNT,
};
use crate::psf::{parse_response, PsfKind, ANSWER, EVIDENCE, THINK};
use crate::reward::{anls, evidence_f1, format_reward, total_reward, AnlsConfig};
use crate::seed::stream;
use crate::synth::{generate_corpus, CorpusConfig, QASample};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn bits(mask: u32, n: usize) -> std::collections::BTreeSet<usize> {
    (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect()
}

/// Evidence F1 against a bitmask oracle over every `(P, G)` pair for `N <= max_pages`,
/// under no gate and under the gate with matching and mismatching counts.
pub fn check_evidence_exhaustive(max_pages: usize) -> CheckResult {
    let mut cases = 0u64;
    for n in 1..=max_pages {
        for pm in 0..1u32 << n {
            let p = bits(pm, n);
            for gm in 0..1u32 << n {
                let g = bits(gm, n);
                let (k, sp, sg) = ((pm & gm).count_ones(), pm.count_ones(), gm.count_ones());
                let plain = if sp + sg == 0 { 0.0 } else { (2 * k) as f64 / (sp + sg) as f64 };
                for (count, gate) in [(None, false), (Some(n), true), (Some(n + 1), true), (Some(n - 1), true)] {
                    let expect = if gate && count != Some(n) { 0.0 } else { plain };
                    let got: f64 = match evidence_f1(&p, &g, n, count, gate) {
                        Ok(v) => v,
                        Err(e) => return CheckResult::new("evidence_f1", false, format!("{p:?} {g:?}: {e}")),
                    };
                    if got != expect {
                        return CheckResult::new("evidence_f1", false, format!("{p:?} {g:?} N={n}: {got} != {expect}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    CheckResult::new("evidence_f1", true, format!("{cases} cases, N <= {max_pages}, exact"))
}

/// Full-matrix Levenshtein distance over chars.
pub fn levenshtein_matrix(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Reference ANLS: normalize, full-matrix distance, keep similarity `>= 1 - tau`, max over golds.
pub fn anls_reference(pred: &str, golds: &[String], tau: f64) -> f64 {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let p = norm(pred);
    golds
        .iter()
        .map(|g| {
            let g = norm(g);
            let len = p.chars().count().max(g.chars().count());
            if len == 0 {
                return 1.0;
            }
            let s = 1.0 - levenshtein_matrix(&p, &g) as f64 / len as f64;
            if s >= 1.0 - tau {
                s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

pub fn random_text<R: Rng>(rng: &mut R, max_len: usize) -> String {
    const CHARS: &[char] = &['a', 'b', 'c', 'd', 'A', 'B', ' ', '1', '2', 'é'];
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| *CHARS.choose(rng).unwrap()).collect()
}

pub fn check_anls(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = stream(seed, 0xA115, 0);
    let cfg = AnlsConfig::<f64>::default();
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let pred = random_text(&mut rng, 30);
        // derive some golds from the prediction so the credited range is exercised
        let golds: Vec<String> = (0..rng.random_range(1..=2))
            .map(|_| {
                if rng.random_bool(0.5) {
                    let mut g: Vec<char> = pred.chars().collect();
                    for _ in 0..rng.random_range(0..=4usize) {
                        if !g.is_empty() {
                            let at = rng.random_range(0..g.len());
                            g[at] = 'z';
                        }
                    }
                    g.into_iter().collect()
                } else {
                    random_text(&mut rng, 30)
                }
            })
            .collect();
        let got = anls(&pred, &golds, &cfg).expect("golds nonempty");
        let want = anls_reference(&pred, &golds, 0.5);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-12 {
            return CheckResult::new("anls", false, format!("pair {i}: {pred:?} vs {golds:?}: {got} != {want}"));
        }
    }
    CheckResult::new("anls", true, format!("{pairs} pairs, max |diff| = {worst:e}"))
}

pub fn random_params<R: Rng>(rng: &mut R, scale: f64) -> PolicyParams<f64> {
    let flat = (0..PARAM_COUNT).map(|_| rng.random_range(-scale..=scale)).collect();
    PolicyParams::from_flat(flat, rng.random_range(0.5..1.5)).expect("length matches")
}

/// A corrupted response and the error class the parser must report for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mutation {
    pub text: String,
    pub expected_class: &'static str,
}

/// Applies one random corruption to a well-formed response.
pub fn mutate<R: Rng>(raw: &str, psf: PsfKind, rng: &mut R) -> Mutation {
    let tags: &[&str] = if psf.has_evidence() { &[THINK, EVIDENCE, ANSWER] } else { &[THINK, ANSWER] };
    let tag = *tags.choose(rng).unwrap();
    let marker = if rng.random_bool(0.5) { format!("<{tag}>") } else { format!("</{tag}>") };
    // insertion points outside any existing marker
    let mut boundaries = Vec::new();
    let mut inside = false;
    for (i, c) in raw.char_indices() {
        if c == '<' {
            inside = true;
        }
        if !inside {
            boundaries.push(i);
        }
        if c == '>' {
            inside = false;
        }
    }
    boundaries.push(raw.len());
    let m = |text: String, expected_class| Mutation { text, expected_class };
    let block = |t: &str| {
        let (o, c) = (format!("<{t}>"), format!("</{t}>"));
        let start = raw.find(&o).unwrap();
        let end = raw.find(&c).unwrap() + c.len();
        (start, end)
    };
    loop {
        match rng.random_range(0..7) {
            0 => return m(raw.replacen(&marker, "", 1), "MissingTag"),
            1 => {
                let at = *boundaries.choose(rng).unwrap();
                return m(format!("{}{marker}{}", &raw[..at], &raw[at..]), "DuplicateTag");
            }
            2 => {
                // misspell a tag name
                let bad = marker.replacen(tag, &format!("{tag}x"), 1);
                return m(raw.replacen(&marker, &bad, 1), "MissingTag");
            }
            3 => {
                // move the think block to the end
                let (s, e) = block(THINK);
                return m(format!("{}{}", &raw[e..], &raw[s..e]), "WrongOrder");
            }
            4 => return m(format!("{raw} extra"), "TrailingGarbage"),
            5 => {
                let (s, e) = block(ANSWER);
                return m(format!("{}<answer> </answer>{}", &raw[..s], &raw[e..]), "EmptyAnswer");
            }
            _ if psf.has_evidence() => {
                let (s, e) = block(EVIDENCE);
                let open = format!("<{EVIDENCE}>").len();
                let close = format!("</{EVIDENCE}>").len();
                let body = &raw[s + open..e - close];
                let mut tokens: Vec<String> = body.split(',').map(|t| t.trim().to_string()).collect();
                let i = rng.random_range(0..tokens.len());
                let (replacement, class) = if psf.is_judgment() {
                    (*["X", "t", "TF", "yes", "1"].choose(rng).unwrap(), "BadJudgmentToken")
                } else {
                    (*["0", "p2", "-1", "x", "2.5"].choose(rng).unwrap(), "BadPageIndex")
                };
                tokens[i] = replacement.to_string();
                let text = format!("{}{}{}{}", &raw[..s + open], tokens.join(", "), &raw[e - close..e], &raw[e..]);
                return m(text, class);
            }
            _ => continue,
        }
    }
}

/// Samples from random policies always parse; every mutation scores zero with the expected class.
pub fn check_format(n: usize, seed: u64) -> CheckResult {
    let corpus = generate_corpus(&CorpusConfig::multi_page(seed, 64)).expect("corpus");
    let feats: Vec<SampleFeatures<f64>> = corpus.samples.iter().map(featurize).collect();
    let mut rng = stream(seed, 0xF0, 0);
    let psfs = [PsfKind::JudgmentsInferCount, PsfKind::JudgmentsWithCount, PsfKind::NoEvidence];
    let cfg = AnlsConfig::<f64>::default();
    for i in 0..n {
        let psf = psfs[i % psfs.len()];
        let k = i % feats.len();
        let params = random_params(&mut rng, 2.0);
        let out = sample_response(&params, &feats[k], psf, &mut rng);
        if format_reward::<f64>(&out.raw, psf) != 1.0 {
            return CheckResult::new("format", false, format!("sampled response rejected: {:?}", out.raw));
        }
        let mutation = mutate(&out.raw, psf, &mut rng);
        let class = parse_response(&mutation.text, psf).err().map(|e| e.class());
        let score = total_reward(&mutation.text, &corpus.samples[k], psf, &cfg).total;
        if class != Some(mutation.expected_class) || score != 0.0 {
            return CheckResult::new(
                "format",
                false,
                format!("{:?}: got {class:?} (reward {score}), want {}", mutation.text, mutation.expected_class),
            );
        }
    }
    CheckResult::new("format", true, format!("{n} sampled responses parse, {n} mutations rejected with the right class"))
}

pub fn check_advantages(groups: usize, seed: u64) -> CheckResult {
    let mut rng = stream(seed, 0xAD, 0);
    for i in 0..groups {
        let rewards: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..3.0)).collect();
        let a = group_advantages(&rewards, 1e-8).expect("group of 8");
        let mean = a.iter().sum::<f64>() / 8.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-9 {
            return CheckResult::new("advantages", false, format!("group {i}: mean {mean}, std {std}"));
        }
        let flat = group_advantages(&[rewards[0]; 8], 1e-8).expect("group of 8");
        if flat.iter().any(|&x| x != 0.0) {
            return CheckResult::new("advantages", false, format!("equal group {i} gave {flat:?}"));
        }
    }
    CheckResult::new("advantages", true, format!("{groups} groups standardized, equal groups zeroed"))
}

/// Reward-side oracle suite.
pub fn check_rewards(seed: u64) -> Vec<CheckResult> {
    vec![check_evidence_exhaustive(6), check_anls(10_000, seed), check_format(10_000, seed), check_advantages(1_000, seed)]
}

/// Inputs for one objective evaluation: samples plus current, behavior and reference policies.
pub struct RandomBatch {
    pub samples: Vec<QASample>,
    pub features: Vec<SampleFeatures<f64>>,
    pub policy: PolicyParams<f64>,
    pub old: PolicyParams<f64>,
    pub reference: PolicyParams<f64>,
    pub psf: PsfKind,
    rng: ChaCha8Rng,
}

impl RandomBatch {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = stream(seed, 0x6AD, index);
        let samples = generate_corpus(&CorpusConfig::multi_page(rng.random(), 4)).expect("corpus").samples;
        let features = samples.iter().map(featurize).collect();
        let policy = random_params(&mut rng, 1.0);
        // behavior policy near the current one, so both clipped and unclipped ratios occur
        let mut old = policy.clone();
        for w in old.flat_mut() {
            *w += rng.random_range(-0.3..0.3);
        }
        let mut reference = random_params(&mut rng, 1.0);
        let t = policy.temperature();
        reference = PolicyParams::from_flat(reference.flat().to_vec(), t).expect("length matches");
        let old = PolicyParams::from_flat(old.flat().to_vec(), t).expect("length matches");
        let psf = *[PsfKind::JudgmentsInferCount, PsfKind::IndicesList, PsfKind::NoEvidence].choose(&mut rng).unwrap();
        Self { samples, features, policy, old, reference, psf, rng }
    }

    /// `group_size` responses per sample drawn from the behavior policy.
    pub fn groups(&mut self, group_size: usize) -> Vec<RolloutGroup<'_, f64>> {
        let cfg = AnlsConfig::default();
        let mut out = Vec::new();
        for (f, s) in self.features.iter().zip(&self.samples) {
            let mut group = RolloutGroup::new(s.id.clone(), f, self.psf.has_evidence());
            let rd = distribution(&self.reference, f);
            for _ in 0..group_size {
                let r = sample_response(&self.old, f, self.psf, &mut self.rng);
                let logp_ref = log_prob_action(&rd, &r.action);
                let reward = total_reward(&r.raw, s, self.psf, &cfg);
                group.responses.push(Rollout { raw: r.raw, action: Some(r.action), logp_old: r.logp, logp_ref, reward });
            }
            group.fill_advantages(1e-8).expect("group of at least two");
            out.push(group);
        }
        out
    }
}

/// Largest per-coordinate relative error between the analytic objective gradient and
/// central differences with step `h`; the denominator is floored at `floor`.
pub fn objective_fd_error(
    groups: &[RolloutGroup<'_, f64>],
    policy: &PolicyParams<f64>,
    reference: &PolicyParams<f64>,
    cfg: &ObjectiveConfig<f64>,
    h: f64,
    floor: f64,
) -> f64 {
    let analytic = objective(groups, policy, reference, cfg).expect("objective").gradient;
    let loss = |p: &PolicyParams<f64>| objective(groups, p, reference, cfg).expect("objective").loss;
    (0..PARAM_COUNT)
        .map(|k| {
            let mut plus = policy.clone();
            plus.flat_mut()[k] += h;
            let mut minus = policy.clone();
            minus.flat_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

pub fn grad_check(seed: u64, batches: usize) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for mode in [KlMode::ExactFactored, KlMode::K3Estimator] {
        let cfg = ObjectiveConfig { kl_mode: mode, ..ObjectiveConfig::default() };
        let mut worst = 0.0f64;
        for b in 0..batches {
            let mut batch = RandomBatch::new(seed, b as u64);
            let (policy, reference) = (batch.policy.clone(), batch.reference.clone());
            let groups = batch.groups(8);
            worst = worst.max(objective_fd_error(&groups, &policy, &reference, &cfg, 1e-5, 1e-6));
        }
        let name = format!("objective gradient ({mode:?})");
        results.push(CheckResult::new(&name, worst < 1e-4, format!("{batches} batches, max relative error {worst:.2e}")));
    }
    results
}
