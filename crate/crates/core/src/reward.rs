//! Verifiable rewards: format validity, ANLS answer accuracy and count-gated evidence F1.
//!
//! The total reward of a response is the plain sum of the three components. A response that
//! fails to parse scores zero on every component.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psf::{parse_response, PsfKind};
use crate::scalar::Scalar;
use crate::synth::QASample;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("gold answer list is empty")]
    EmptyGoldList,
    #[error("page {page} outside 1..={pages}")]
    PageOutOfRange { page: usize, pages: usize },
    #[error("count gate requested without a predicted count")]
    MissingPredictedCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub format: T,
    pub accuracy: T,
    pub evidence: T,
    pub total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn zero() -> Self {
        Self { format: T::zero(), accuracy: T::zero(), evidence: T::zero(), total: T::zero() }
    }

    fn compose(format: T, accuracy: T, evidence: T) -> Self {
        Self { format, accuracy, evidence, total: format + accuracy + evidence }
    }
}

/// ANLS settings. `threshold` is the largest normalized edit distance that still earns credit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnlsConfig<T> {
    pub threshold: T,
    pub lowercase: bool,
    pub trim: bool,
    pub collapse_whitespace: bool,
}

impl<T: Scalar> Default for AnlsConfig<T> {
    fn default() -> Self {
        Self { threshold: T::of(0.5), lowercase: true, trim: true, collapse_whitespace: true }
    }
}

impl<T: Scalar> AnlsConfig<T> {
    pub fn with_threshold(threshold: T) -> Self {
        assert!(threshold >= T::zero() && threshold <= T::one(), "ANLS threshold must lie in [0, 1]");
        Self { threshold, ..Self::default() }
    }

    pub fn normalize(&self, s: &str) -> String {
        let mut out = if self.collapse_whitespace {
            let mut collapsed = String::with_capacity(s.len());
            let mut in_space = false;
            for c in s.chars() {
                if c.is_whitespace() {
                    if !in_space {
                        collapsed.push(' ');
                    }
                    in_space = true;
                } else {
                    collapsed.push(c);
                    in_space = false;
                }
            }
            collapsed
        } else {
            s.to_string()
        };
        if self.trim {
            out = out.trim().to_string();
        }
        if self.lowercase {
            out = out.to_lowercase();
        }
        out
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return a.len().max(b.len());
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Thresholded normalized Levenshtein similarity, maximized over the gold answers.
pub fn anls<T: Scalar, S: AsRef<str>>(pred: &str, golds: &[S], cfg: &AnlsConfig<T>) -> Result<T, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGoldList);
    }
    let pred = cfg.normalize(pred);
    let pred_len = pred.chars().count();
    let floor = T::one() - cfg.threshold;
    let best = golds
        .iter()
        .map(|g| {
            let g = cfg.normalize(g.as_ref());
            let longest = pred_len.max(g.chars().count());
            let sim = if longest == 0 {
                T::one()
            } else {
                T::one() - T::of_usize(levenshtein(&pred, &g)) / T::of_usize(longest)
            };
            if sim >= floor {
                sim
            } else {
                T::zero()
            }
        })
        .fold(T::zero(), T::max);
    Ok(best)
}

/// F1 overlap between predicted and gold pages, zeroed when the gate is on and the predicted
/// judgment count differs from the page count.
pub fn evidence_f1<T: Scalar>(
    predicted: &BTreeSet<usize>,
    gold: &BTreeSet<usize>,
    pages: usize,
    predicted_count: Option<usize>,
    gate: bool,
) -> Result<T, RewardError> {
    let out_of_range = |set: &BTreeSet<usize>| set.iter().copied().find(|&p| p == 0 || p > pages);
    if let Some(page) = out_of_range(gold) {
        return Err(RewardError::PageOutOfRange { page, pages });
    }
    if gate {
        match predicted_count {
            None => return Err(RewardError::MissingPredictedCount),
            Some(c) if c != pages => return Ok(T::zero()),
            Some(_) => {}
        }
    }
    if let Some(page) = out_of_range(predicted) {
        return Err(RewardError::PageOutOfRange { page, pages });
    }
    let denom = predicted.len() + gold.len();
    if denom == 0 {
        return Ok(T::zero());
    }
    let overlap = predicted.intersection(gold).count();
    Ok(T::of_usize(2 * overlap) / T::of_usize(denom))
}

pub fn format_reward<T: Scalar>(raw: &str, psf: PsfKind) -> T {
    if parse_response(raw, psf).is_ok() {
        T::one()
    } else {
        T::zero()
    }
}

/// Scores one raw response against a sample.
///
/// Explicit page lists are scored with plain F1 (no count gate); judgment formats are gated.
/// A page list naming a page beyond the document earns no evidence reward.
pub fn total_reward<T: Scalar>(raw: &str, sample: &QASample, psf: PsfKind, cfg: &AnlsConfig<T>) -> RewardBreakdown<T> {
    let Ok(resp) = parse_response(raw, psf) else {
        return RewardBreakdown::zero();
    };
    let accuracy = anls(&resp.answer, &sample.answers, cfg).unwrap_or_else(|_| T::zero());
    let evidence = match &resp.evidence {
        None => T::zero(),
        Some(ev) => evidence_f1(
            &ev.predicted_set(),
            &sample.evidence_pages,
            sample.page_count(),
            ev.predicted_count(),
            psf.is_judgment(),
        )
        .unwrap_or_else(|_| T::zero()),
    };
    RewardBreakdown::compose(T::one(), accuracy, evidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Fact;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn sample() -> QASample {
        QASample {
            id: "s".into(),
            question: "What is the value of k1?".into(),
            pages: vec![vec![Fact("k0".into(), "v0".into())], vec![Fact("k1".into(), "v0042".into())], vec![]],
            answers: vec!["v0042".into()],
            evidence_pages: set(&[2]),
            hops: Some(1),
            category: None,
        }
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("x", "x"), 0);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn anls_examples() {
        let cfg = AnlsConfig::<f64>::default();
        assert_eq!(anls("hello", &["hello"], &cfg).unwrap(), 1.0);
        let s = anls("kitten", &["sitting"], &cfg).unwrap();
        assert!((s - (1.0 - 3.0 / 7.0)).abs() < 1e-15);
        assert_eq!(anls("abc", &["xyz"], &cfg).unwrap(), 0.0);
        assert_eq!(anls::<f64, &str>("abc", &[], &cfg), Err(RewardError::EmptyGoldList));
        assert_eq!(anls("  Hello   World ", &["hello world"], &cfg).unwrap(), 1.0);
        assert_eq!(anls("", &[" "], &cfg).unwrap(), 1.0);
        assert_eq!(anls("", &["a"], &cfg).unwrap(), 0.0);
        // distance exactly half the length is kept
        assert_eq!(anls("ab", &["ax"], &cfg).unwrap(), 0.5);
        assert_eq!(anls("abc", &["xyz", "abd"], &cfg).unwrap(), 1.0 - 1.0 / 3.0);
        let f32_score: f32 = anls("kitten", &["sitting"], &AnlsConfig::default()).unwrap();
        assert!((f32_score - 0.571_428_6).abs() < 1e-6);
    }

    #[test]
    fn anls_case_sensitivity_is_configurable() {
        let strict = AnlsConfig::<f64> { lowercase: false, ..AnlsConfig::default() };
        assert_eq!(anls("ABC", &["abc"], &strict).unwrap(), 0.0);
        assert_eq!(anls("ABC", &["abc"], &AnlsConfig::<f64>::default()).unwrap(), 1.0);
    }

    #[test]
    fn evidence_examples() {
        let f = |p: &[usize], g: &[usize], n, np: Option<usize>, gate| evidence_f1::<f64>(&set(p), &set(g), n, np, gate);
        assert_eq!(f(&[1, 3], &[1, 3, 5], 5, Some(5), true).unwrap(), 0.8);
        assert_eq!(f(&[2], &[2], 4, Some(4), true).unwrap(), 1.0);
        assert_eq!(f(&[1], &[1], 5, Some(4), true).unwrap(), 0.0);
        assert_eq!(f(&[1], &[1], 5, None, false).unwrap(), 1.0);
        assert_eq!(f(&[], &[], 3, Some(3), true).unwrap(), 0.0);
        assert_eq!(f(&[7], &[1], 5, None, false), Err(RewardError::PageOutOfRange { page: 7, pages: 5 }));
        assert_eq!(f(&[1], &[0], 5, None, false), Err(RewardError::PageOutOfRange { page: 0, pages: 5 }));
        assert_eq!(f(&[1], &[1], 5, None, true), Err(RewardError::MissingPredictedCount));
        // a mismatched count gates out before predicted pages are range-checked
        assert_eq!(f(&[6], &[1], 5, Some(6), true).unwrap(), 0.0);
    }

    #[test]
    fn format_reward_examples() {
        let psf = PsfKind::JudgmentsInferCount;
        assert_eq!(format_reward::<f64>("<think>a</think><evidence_page>T</evidence_page><answer>b</answer>", psf), 1.0);
        assert_eq!(format_reward::<f64>("<think>a</think><evidence_page>T</evidence_page><answer>b", psf), 0.0);
        assert_eq!(
            format_reward::<f64>("<think>a</think><evidence_page>T, maybe, F</evidence_page><answer>b</answer>", psf),
            0.0
        );
    }

    #[test]
    fn total_reward_examples() {
        let s = sample();
        let cfg = AnlsConfig::<f64>::default();
        let psf = PsfKind::JudgmentsInferCount;
        let perfect = "<think>t</think><evidence_page>F, T, F</evidence_page><answer>v0042</answer>";
        let r = total_reward(perfect, &s, psf, &cfg);
        assert_eq!((r.format, r.accuracy, r.evidence, r.total), (1.0, 1.0, 1.0, 3.0));

        let wrong = "<think>t</think><evidence_page>F, T, F</evidence_page><answer>zzzzz</answer>";
        let r = total_reward(wrong, &s, psf, &cfg);
        assert_eq!((r.format, r.accuracy, r.evidence, r.total), (1.0, 0.0, 1.0, 2.0));

        let r = total_reward("<think>t</think><answer>v0042", &s, psf, &cfg);
        assert_eq!(r, RewardBreakdown::zero());

        let short = "<think>t</think><evidence_page>F, T</evidence_page><answer>v0042</answer>";
        assert_eq!(total_reward(short, &s, psf, &cfg).evidence, 0.0);
        // explicit page lists bypass the count gate
        let listed = "<think>t</think><evidence_page>2</evidence_page><answer>v0042</answer>";
        assert_eq!(total_reward(listed, &s, PsfKind::IndicesList, &cfg).total, 3.0);
        let beyond = "<think>t</think><evidence_page>2, 9</evidence_page><answer>v0042</answer>";
        assert_eq!(total_reward(beyond, &s, PsfKind::IndicesList, &cfg).evidence, 0.0);

        let plain = "<think>t</think><answer>v0043</answer>";
        let r = total_reward(plain, &s, PsfKind::NoEvidence, &cfg);
        assert_eq!((r.format, r.evidence), (1.0, 0.0));
        assert!((r.accuracy - 0.8).abs() < 1e-15);
        assert!(r.total <= 2.0);
    }
}
