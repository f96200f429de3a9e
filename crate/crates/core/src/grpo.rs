//! Group-relative advantages and the clipped-surrogate objective with a KL anchor.
//!
//! For a group of `G` responses to one question, advantages are the rewards standardized
//! with the group mean and population standard deviation. The loss minimized is
//!
//! ```text
//! loss = -mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i) + beta * mean_i KL_i
//! ```
//!
//! with `r_i = pi(o_i) / pi_old(o_i)` a sequence-level ratio. The gradient is exact; where
//! the clipped branch is selected by the `min` the surrogate contributes no gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    chain_to_params, distribution, grad_log_prob_action, log_prob_action, Action, FactoredDist, PolicyParams,
    SampleFeatures, PARAM_COUNT,
};
use crate::reward::RewardBreakdown;
use crate::scalar::{log_sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrpoError {
    #[error("group of {0} responses; at least 2 are needed")]
    GroupTooSmall(usize),
    #[error("non-finite log-probability")]
    NonFiniteLogProb,
    #[error("distribution shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Closed-form KL summed over the policy's independent factors.
    ExactFactored,
    /// `exp(d) - d - 1` with `d = log pi_ref(o) - log pi(o)` at the sampled response.
    K3Estimator,
}

impl std::str::FromStr for KlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" | "exact_factored" => Ok(KlMode::ExactFactored),
            "k3" | "k3_estimator" => Ok(KlMode::K3Estimator),
            other => Err(format!("unknown KL mode `{other}` (expected exact|k3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig<T> {
    pub clip_eps: T,
    pub kl_weight: T,
    pub kl_mode: KlMode,
    pub std_epsilon: T,
}

impl<T: Scalar> Default for ObjectiveConfig<T> {
    fn default() -> Self {
        Self { clip_eps: T::of(0.2), kl_weight: T::of(0.04), kl_mode: KlMode::ExactFactored, std_epsilon: T::of(1e-8) }
    }
}

/// Standardized rewards. Falls back to all zeros when the population std is below
/// `std_epsilon`.
pub fn group_advantages<T: Scalar>(rewards: &[T], std_epsilon: T) -> Result<Vec<T>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = T::of_usize(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std < std_epsilon {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// `min(ratio * A, clip(ratio) * A)` for one response.
pub fn surrogate_term<T: Scalar>(logp_new: T, logp_old: T, advantage: T, clip_eps: T) -> Result<T, GrpoError> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(GrpoError::NonFiniteLogProb);
    }
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.max(T::one() - clip_eps).min(T::one() + clip_eps);
    Ok((ratio * advantage).min(clipped * advantage))
}

fn check_shapes<T: Scalar>(p: &FactoredDist<T>, q: &FactoredDist<T>) -> Result<(), GrpoError> {
    if p.page_logits.len() != q.page_logits.len() || p.answer_logits.len() != q.answer_logits.len() {
        return Err(GrpoError::ShapeMismatch(format!(
            "{}+{} vs {}+{} factors",
            p.page_logits.len(),
            p.answer_logits.len(),
            q.page_logits.len(),
            q.answer_logits.len()
        )));
    }
    Ok(())
}

/// Bernoulli KL written in logits: `p (l_p - l_q) + log s(-l_p) - log s(-l_q)`.
fn bernoulli_kl<T: Scalar>(lp: T, lq: T, p: T) -> T {
    p * (lp - lq) + log_sigmoid(-lp) - log_sigmoid(-lq)
}

/// Closed-form `KL(p || q)` over the factored action space. Page factors are included only
/// when the response format carries per-page judgments.
pub fn kl_exact<T: Scalar>(p: &FactoredDist<T>, q: &FactoredDist<T>, include_pages: bool) -> Result<T, GrpoError> {
    check_shapes(p, q)?;
    let pages: T = if include_pages {
        p.page_logits
            .iter()
            .zip(&q.page_logits)
            .zip(&p.page_probs)
            .map(|((&lp, &lq), &pp)| bernoulli_kl(lp, lq, pp))
            .sum()
    } else {
        T::zero()
    };
    let (lp, lq) = (p.answer_log_probs(), q.answer_log_probs());
    let answer: T = p.answer_probs.iter().zip(lp.iter().zip(&lq)).map(|(&pc, (&a, &b))| pc * (a - b)).sum();
    // clamp tiny negative rounding noise
    Ok((pages + answer).max(T::zero()))
}

pub fn kl_k3<T: Scalar>(logp_policy: T, logp_ref: T) -> T {
    let d = logp_ref - logp_policy;
    (d.exp() - d - T::one()).max(T::zero())
}

/// KL term for one response under `mode`. `sampled` supplies `(log pi(o), log pi_ref(o))`
/// for the K3 estimator.
pub fn kl_term<T: Scalar>(
    policy: &FactoredDist<T>,
    reference: &FactoredDist<T>,
    mode: KlMode,
    include_pages: bool,
    sampled: Option<(T, T)>,
) -> Result<T, GrpoError> {
    match mode {
        KlMode::ExactFactored => kl_exact(policy, reference, include_pages),
        KlMode::K3Estimator => {
            check_shapes(policy, reference)?;
            let (lp, lr) = sampled.ok_or(GrpoError::NonFiniteLogProb)?;
            if !lp.is_finite() || !lr.is_finite() {
                return Err(GrpoError::NonFiniteLogProb);
            }
            Ok(kl_k3(lp, lr))
        }
    }
}

/// Gradient of [`kl_exact`] with respect to the policy parameters.
pub fn grad_kl_exact<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &SampleFeatures<T>,
    p: &FactoredDist<T>,
    q: &FactoredDist<T>,
    include_pages: bool,
) -> Vec<T> {
    // d KL_bern / d l_p = p (1 - p) (l_p - l_q)
    let page_coef: Option<Vec<T>> = include_pages.then(|| {
        p.page_probs
            .iter()
            .zip(p.page_logits.iter().zip(&q.page_logits))
            .map(|(&pp, (&lp, &lq))| pp * (T::one() - pp) * (lp - lq))
            .collect()
    });
    // d KL_cat / d s_c = p_c (log p_c - log q_c - KL_cat)
    let (lp, lq) = (p.answer_log_probs(), q.answer_log_probs());
    let kl_cat: T = p.answer_probs.iter().zip(lp.iter().zip(&lq)).map(|(&pc, (&a, &b))| pc * (a - b)).sum();
    let answer_coef: Vec<T> =
        p.answer_probs.iter().zip(lp.iter().zip(&lq)).map(|(&pc, (&a, &b))| pc * (a - b - kl_cat)).collect();
    chain_to_params(params, feats, p, page_coef.as_deref(), &answer_coef)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    pub raw: String,
    /// `None` when the response falls outside the policy's support; such responses are
    /// excluded from the ratio and KL terms.
    pub action: Option<Action>,
    pub logp_old: T,
    pub logp_ref: T,
    pub reward: RewardBreakdown<T>,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup<'a, T> {
    pub sample_id: String,
    pub features: &'a SampleFeatures<T>,
    /// Whether responses carry page judgments (false for the no-evidence format).
    pub evidence_modeled: bool,
    pub responses: Vec<Rollout<T>>,
    pub advantages: Vec<T>,
}

impl<'a, T: Scalar> RolloutGroup<'a, T> {
    pub fn new(sample_id: impl Into<String>, features: &'a SampleFeatures<T>, evidence_modeled: bool) -> Self {
        Self { sample_id: sample_id.into(), features, evidence_modeled, responses: Vec::new(), advantages: Vec::new() }
    }

    pub fn fill_advantages(&mut self, std_epsilon: T) -> Result<(), GrpoError> {
        let rewards: Vec<T> = self.responses.iter().map(|r| r.reward.total).collect();
        self.advantages = group_advantages(&rewards, std_epsilon)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue<T> {
    pub loss: T,
    pub gradient: Vec<T>,
    pub mean_surrogate: T,
    pub mean_kl: T,
    /// Responses that entered the ratio (supported by the policy).
    pub responses: usize,
}

/// Loss and exact gradient over a batch of groups whose advantages are filled in.
pub fn objective<T: Scalar>(
    groups: &[RolloutGroup<'_, T>],
    policy: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    cfg: &ObjectiveConfig<T>,
) -> Result<ObjectiveValue<T>, GrpoError> {
    if groups.is_empty() || groups.iter().all(|g| g.responses.is_empty()) {
        return Err(GrpoError::EmptyBatch);
    }
    let mut surrogate_sum = T::zero();
    let mut kl_sum = T::zero();
    let mut grad = vec![T::zero(); PARAM_COUNT];
    let mut count = 0usize;
    let add = |grad: &mut Vec<T>, g: &[T], w: T| {
        for (acc, &x) in grad.iter_mut().zip(g) {
            *acc = *acc + w * x;
        }
    };

    for group in groups {
        if group.advantages.len() != group.responses.len() {
            return Err(GrpoError::ShapeMismatch(format!(
                "{} advantages for {} responses in {}",
                group.advantages.len(),
                group.responses.len(),
                group.sample_id
            )));
        }
        let feats = group.features;
        let dist = distribution(policy, feats);
        let need_ref_dist = cfg.kl_mode == KlMode::ExactFactored && cfg.kl_weight != T::zero();
        let ref_dist = need_ref_dist.then(|| distribution(reference, feats));
        let exact_kl = match &ref_dist {
            Some(rd) => Some((kl_exact(&dist, rd, group.evidence_modeled)?, grad_kl_exact(policy, feats, &dist, rd, group.evidence_modeled))),
            None => None,
        };

        for (resp, &adv) in group.responses.iter().zip(&group.advantages) {
            let Some(action) = &resp.action else { continue };
            let logp = log_prob_action(&dist, action);
            let surrogate = surrogate_term(logp, resp.logp_old, adv, cfg.clip_eps)?;
            surrogate_sum = surrogate_sum + surrogate;
            count += 1;

            let ratio = (logp - resp.logp_old).exp();
            let unclipped = ratio * adv;
            let needs_logp_grad = (adv != T::zero() && unclipped <= surrogate)
                || (cfg.kl_mode == KlMode::K3Estimator && cfg.kl_weight != T::zero());
            let glp = needs_logp_grad.then(|| grad_log_prob_action(policy, feats, &dist, action));

            // surrogate gradient flows only through the unclipped branch
            if let Some(glp) = &glp {
                if adv != T::zero() && unclipped <= surrogate {
                    add(&mut grad, glp, -(adv * ratio));
                }
            }

            if cfg.kl_weight != T::zero() {
                match cfg.kl_mode {
                    KlMode::ExactFactored => {
                        let (kl, gkl) = exact_kl.as_ref().expect("reference distribution computed");
                        kl_sum = kl_sum + *kl;
                        add(&mut grad, gkl, cfg.kl_weight);
                    }
                    KlMode::K3Estimator => {
                        if !resp.logp_ref.is_finite() {
                            return Err(GrpoError::NonFiniteLogProb);
                        }
                        kl_sum = kl_sum + kl_k3(logp, resp.logp_ref);
                        // d/dtheta [e^d - d - 1] with d = logp_ref - logp
                        let coef = T::one() - (resp.logp_ref - logp).exp();
                        add(&mut grad, glp.as_ref().expect("log-prob gradient computed"), cfg.kl_weight * coef);
                    }
                }
            } else if cfg.kl_mode == KlMode::ExactFactored {
                // beta = 0: KL still reported for monitoring
                kl_sum = kl_sum + kl_exact(&dist, &distribution(reference, feats), group.evidence_modeled)?;
            } else if resp.logp_ref.is_finite() {
                kl_sum = kl_sum + kl_k3(logp, resp.logp_ref);
            }
        }
    }

    if count == 0 {
        return Ok(ObjectiveValue {
            loss: T::zero(),
            gradient: grad,
            mean_surrogate: T::zero(),
            mean_kl: T::zero(),
            responses: 0,
        });
    }
    let m = T::of_usize(count);
    for g in grad.iter_mut() {
        *g = *g / m;
    }
    let mean_surrogate = surrogate_sum / m;
    let mean_kl = kl_sum / m;
    Ok(ObjectiveValue {
        loss: -mean_surrogate + cfg.kl_weight * mean_kl,
        gradient: grad,
        mean_surrogate,
        mean_kl,
        responses: count,
    })
}
