//! Acceptance suite: one PASS/FAIL line per criterion. Oracles here are coded separately
//! from the library (rational arithmetic, full-matrix DP, finite differences, binomial bounds).

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use num_traits::ToPrimitive;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use evigrpo::anno::{run_pipeline, OracleBackend, PipelineConfig};
use evigrpo::eval::{decoded_evidence_recall, evaluate_policy};
use evigrpo::grpo::{group_advantages, objective, KlMode, ObjectiveConfig, Rollout, RolloutGroup};
use evigrpo::policy::{distribution, featurize, log_prob_action, sample_response, PolicyParams, PARAM_COUNT};
use evigrpo::psf::{parse_response, PsfKind};
use evigrpo::reward::{anls, evidence_f1, format_reward, total_reward, AnlsConfig};
use evigrpo::synth::{generate_corpus, CorpusConfig, QASample};
use evigrpo::trainer::{prepare, run_data_mode, train_stages, DataMode, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn set_of(mask: u32, n: usize) -> BTreeSet<usize> {
    (1..=n).filter(|&p| mask & (1 << (p - 1)) != 0).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut cases = 0u64;
    for n in 1..=6usize {
        for pm in 0u32..1 << n {
            let p = set_of(pm, n);
            for gm in 0u32..1 << n {
                let g = set_of(gm, n);
                let hit = p.iter().filter(|x| g.contains(x)).count() as u64;
                let denom = (p.len() + g.len()) as u64;
                let f1 = if denom == 0 { Ratio::from_integer(0u64) } else { Ratio::new(2 * hit, denom) };
                for (gate, count) in [(false, None), (true, Some(n)), (true, Some(n + 1)), (true, Some(n - 1))] {
                    let want = if gate && count != Some(n) { Ratio::from_integer(0) } else { f1 };
                    let got: f64 = evidence_f1(&p, &g, n, count, gate).unwrap();
                    if got != want.to_f64().unwrap() {
                        return outcome(false, format!("N={n} P={p:?} G={g:?} gate={gate}: {got} vs {want}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(within(Duration::from_secs(5), t), format!("{cases} cases exact in {t:.2?} (limit 5s)"))
}

fn dp_distance(a: &[char], b: &[char]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..=a.len() {
        for j in 0..=b.len() {
            m[i][j] = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                (m[i - 1][j] + 1).min(m[i][j - 1] + 1).min(m[i - 1][j - 1] + (a[i - 1] != b[j - 1]) as usize)
            };
        }
    }
    m[a.len()][b.len()]
}

fn reference_anls(pred: &str, gold: &str, tau: f64) -> f64 {
    let clean = |s: &str| s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ").chars().collect::<Vec<_>>();
    let (a, b) = (clean(pred), clean(gold));
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let sim = 1.0 - dp_distance(&a, &b) as f64 / longest as f64;
    if sim >= 1.0 - tau {
        sim
    } else {
        0.0
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let alphabet = ['a', 'b', 'c', 'X', 'Y', ' ', '7', 'ß'];
    let word = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(0..=30);
        (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
    };
    let cfg = AnlsConfig::<f64>::default();
    let mut worst = 0.0f64;
    let mut credited = 0;
    for _ in 0..10_000 {
        let pred = word(&mut rng);
        // half the golds are light edits of the prediction so the credited band is exercised
        let gold = if rng.random_bool(0.5) {
            let mut c: Vec<char> = pred.chars().collect();
            for _ in 0..rng.random_range(0..=5) {
                if c.is_empty() || rng.random_bool(0.3) {
                    c.push('q');
                } else {
                    let i = rng.random_range(0..c.len());
                    c.remove(i);
                }
            }
            c.into_iter().collect()
        } else {
            word(&mut rng)
        };
        let want = reference_anls(&pred, &gold, 0.5);
        let got = anls(&pred, std::slice::from_ref(&gold), &cfg).unwrap();
        credited += (want > 0.0) as usize;
        worst = worst.max((got - want).abs());
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && within(Duration::from_secs(10), t),
        format!("10000 pairs, {credited} credited, max |diff| {worst:e}, {t:.2?} (limit 10s)"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let r: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..3.0)).collect();
        let a = group_advantages(&r, 1e-8).unwrap();
        let mean = a.iter().sum::<f64>() / 8.0;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let equal_zero = (0..100).all(|i| group_advantages(&[i as f64 * 0.03; 8], 1e-8).unwrap().iter().all(|&x| x == 0.0));
    let t = start.elapsed();
    outcome(
        worst_mean <= 1e-9 && worst_std <= 1e-9 && equal_zero && within(Duration::from_secs(1), t),
        format!("max |mean| {worst_mean:e}, max |std-1| {worst_std:e}, equal groups zeroed: {equal_zero}, {t:.2?}"),
    )
}

fn random_policy(rng: &mut ChaCha8Rng, temperature: f64) -> PolicyParams<f64> {
    PolicyParams::from_flat((0..PARAM_COUNT).map(|_| rng.random_range(-1.0..1.0)).collect(), temperature).unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for b in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + b);
        let samples = generate_corpus(&CorpusConfig::multi_page(b, 4)).unwrap().samples;
        let feats: Vec<_> = samples.iter().map(featurize::<f64>).collect();
        let temperature = rng.random_range(0.6..1.4);
        let policy = random_policy(&mut rng, temperature);
        let mut old = policy.clone();
        old.flat_mut().iter_mut().for_each(|w| *w += rng.random_range(-0.3..0.3));
        let reference = random_policy(&mut rng, temperature);
        let psf = [PsfKind::JudgmentsInferCount, PsfKind::IndicesList, PsfKind::NoEvidence][b as usize % 3];
        let kl_mode = if b % 2 == 0 { KlMode::ExactFactored } else { KlMode::K3Estimator };
        let groups: Vec<RolloutGroup<'_, f64>> = feats
            .iter()
            .zip(&samples)
            .map(|(f, s)| {
                let mut g = RolloutGroup::new(s.id.clone(), f, psf.has_evidence());
                let rd = distribution(&reference, f);
                for _ in 0..8 {
                    let r = sample_response(&old, f, psf, &mut rng);
                    g.responses.push(Rollout {
                        logp_ref: log_prob_action(&rd, &r.action),
                        reward: total_reward(&r.raw, s, psf, &AnlsConfig::default()),
                        raw: r.raw,
                        action: Some(r.action),
                        logp_old: r.logp,
                    });
                }
                g.fill_advantages(1e-8).unwrap();
                g
            })
            .collect();
        let cfg = ObjectiveConfig { kl_mode, ..ObjectiveConfig::default() };
        let grad = objective(&groups, &policy, &reference, &cfg).unwrap().gradient;
        let fd: Vec<f64> = (0..PARAM_COUNT)
            .map(|k| {
                let mut p = policy.clone();
                p.flat_mut()[k] += h;
                let up = objective(&groups, &p, &reference, &cfg).unwrap().loss;
                p.flat_mut()[k] -= 2.0 * h;
                let down = objective(&groups, &p, &reference, &cfg).unwrap().loss;
                (up - down) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&grad).max(norm(&fd)).max(1e-12);
        worst = worst.max(rel);
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && within(Duration::from_secs(60), t),
        format!("100 batches, worst relative error {worst:.2e} (limit 1e-4), {t:.2?}"),
    )
}

struct Split {
    train: Vec<QASample>,
    heldout: Vec<QASample>,
}

fn split(seed: u64) -> Split {
    let mut all = generate_corpus(&CorpusConfig::multi_page(seed, 300)).unwrap().samples;
    let heldout = all.split_off(200);
    Split { train: all, heldout }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let data = split(seed);
            let cfg = TrainConfig { seed, steps_per_stage: Some(500), ..TrainConfig::default() };
            let prepared = prepare::<f64>(&data.train);
            let (params, _) = train_stages(&cfg, cfg.initial_policy(), &[("multi", &prepared)]).unwrap();
            let row = evaluate_policy("heldout", &params, &data.heldout, cfg.psf, &cfg.anls()).unwrap();
            (row.evidence_recall.unwrap(), row.mean_anls)
        })
        .collect();
    let good = results.iter().filter(|(r, a)| *r >= 0.95 && *a >= 0.90).count();
    let t = start.elapsed();
    let shown: Vec<String> = results.iter().map(|(r, a)| format!("{r:.2}/{a:.2}")).collect();
    outcome(
        good >= 8 && within(Duration::from_secs(120), t),
        format!("{good}/10 seeds reach recall>=0.95 and ANLS>=0.90 [recall/anls {}], {t:.1?}", shown.join(" ")),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let data = split(seed);
            let single = generate_corpus(&CorpusConfig::single_page(seed + 1000, 200)).unwrap().samples;
            let run = |psf| {
                let cfg = TrainConfig { seed, psf, steps_per_stage: Some(250), ..TrainConfig::default() };
                run_data_mode::<f64>(&cfg, DataMode::Mixed, &single, &data.train).unwrap().0
            };
            let evi = run(PsfKind::JudgmentsInferCount);
            let evi_recall = evaluate_policy("h", &evi, &data.heldout, PsfKind::JudgmentsInferCount, &AnlsConfig::default())
                .unwrap()
                .evidence_recall
                .unwrap();
            let plain = run(PsfKind::NoEvidence);
            (evi_recall, decoded_evidence_recall(&plain, &data.heldout).unwrap())
        })
        .collect();
    let wins = results.iter().filter(|(e, g)| e > g).count();
    let shown: Vec<String> = results.iter().map(|(e, g)| format!("{e:.2}>{g:.2}")).collect();
    outcome(
        wins >= 8,
        format!("EviGRPO recall beats NoEvidence decoded recall in {wins}/10 seeds [{}], {:.1?}", shown.join(" "), start.elapsed()),
    )
}

/// One corruption of a well-formed response and the class it must produce.
fn corrupt(raw: &str, psf: PsfKind, rng: &mut ChaCha8Rng) -> (String, &'static str) {
    let mut tags = vec!["think", "answer"];
    if psf.has_evidence() {
        tags.push("evidence_page");
    }
    let tag = *tags.choose(rng).unwrap();
    let marker = if rng.random_bool(0.5) { format!("<{tag}>") } else { format!("</{tag}>") };
    match rng.random_range(0..if psf.is_judgment() { 4 } else { 3 }) {
        0 => (raw.replacen(&marker, "", 1), "MissingTag"),
        1 => {
            let open = format!("<{tag}>");
            let close = format!("</{tag}>");
            let s = raw.find(&open).unwrap();
            let e = raw.find(&close).unwrap() + close.len();
            (format!("{}{}", &raw[s..e], raw), "DuplicateTag")
        }
        2 => (raw.replacen(&marker, &marker.replace(tag, &tag[1..]), 1), "MissingTag"),
        _ => {
            let open = "<evidence_page>";
            let s = raw.find(open).unwrap() + open.len();
            (format!("{}Y{}", &raw[..s], &raw[s + 1..]), "BadJudgmentToken")
        }
    }
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let samples = generate_corpus(&CorpusConfig::multi_page(7, 50)).unwrap().samples;
    let feats: Vec<_> = samples.iter().map(featurize::<f64>).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let psfs = [PsfKind::JudgmentsInferCount, PsfKind::JudgmentsWithCount, PsfKind::NoEvidence];
    let (mut parsed, mut rejected) = (0, 0);
    let mut failure = None;
    for i in 0..10_000 {
        let psf = psfs[i % 3];
        let k = rng.random_range(0..samples.len());
        let params = PolicyParams::from_flat((0..PARAM_COUNT).map(|_| rng.random_range(-2.0..2.0)).collect(), 1.0).unwrap();
        let r = sample_response(&params, &feats[k], psf, &mut rng);
        if format_reward::<f64>(&r.raw, psf) == 1.0 {
            parsed += 1;
        } else {
            failure.get_or_insert(format!("sample rejected: {}", r.raw));
        }
        let (bad, class) = corrupt(&r.raw, psf, &mut rng);
        let got = parse_response(&bad, psf).err().map(|e| e.class());
        let score = total_reward::<f64>(&bad, &samples[k], psf, &AnlsConfig::default()).total;
        if got == Some(class) && score == 0.0 && format_reward::<f64>(&bad, psf) == 0.0 {
            rejected += 1;
        } else {
            failure.get_or_insert(format!("{bad:?}: {got:?} instead of {class}"));
        }
    }
    let t = start.elapsed();
    outcome(
        parsed == 10_000 && rejected == 10_000 && within(Duration::from_secs(10), t),
        format!("{parsed}/10000 sampled parse, {rejected}/10000 mutated rejected with expected class, {t:.2?}{}",
            failure.map(|f| format!("; first failure {f}")).unwrap_or_default()),
    )
}

fn criterion_8() -> Outcome {
    let n = 10_000;
    let samples = generate_corpus(&CorpusConfig::multi_page(8, n)).unwrap().samples;
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, p) in [0.0, 0.3, 0.5].into_iter().enumerate() {
        let out = run_pipeline(&samples, &OracleBackend::new(80 + i as u64, p), &PipelineConfig::default());
        let q: f64 = (1.0 - p) * (1.0 - p);
        let se = (q * (1.0 - q) / n as f64).sqrt();
        let rate = out.summary.retention_rate;
        let pass = (rate - q).abs() <= 3.0 * se;
        ok &= pass;
        lines.push(format!("p={p}: {rate:.4} vs {q:.4} (3se {:.4})", 3.0 * se));
    }
    outcome(ok, lines.join(", "))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evigrpo"))
        .args(args)
        .args(["--seed", "7", "--out", dir.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_9() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for args in [&["gen-data"][..], &["train", "--steps-per-stage", "30"], &["eval"]] {
            if let Err(e) = run_cli(d.path(), args) {
                return outcome(false, e);
            }
        }
    }
    let files = [
        "single.jsonl",
        "corpus.jsonl",
        "heldout.jsonl",
        "trace.jsonl",
        "checkpoint.bin",
        "checkpoint.json",
        "report.json",
        "report.md",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f));
        let b = std::fs::read(dirs[1].path().join(f));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b && !a.is_empty() => {}
            _ => differing.push(f),
        }
    }
    outcome(differing.is_empty(), format!("{} files compared, differing or missing: {differing:?}", files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("evidence reward oracle", criterion_1),
        ("ANLS oracle", criterion_2),
        ("advantage normalization", criterion_3),
        ("gradient correctness", criterion_4),
        ("toy convergence", criterion_5),
        ("evidence mechanism matters", criterion_6),
        ("format grammar conformance", criterion_7),
        ("annotation pipeline statistics", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.passed as usize;
        println!("criterion {} ({name}): {} - {}", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
