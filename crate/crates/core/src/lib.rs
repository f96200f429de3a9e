//! Evidence-guided GRPO for multi-page document question answering, at desk scale.
//!
//! The crate pairs the verifiable reward design (format, ANLS answer accuracy, count-gated
//! evidence F1) and the group-relative clipped objective with a synthetic multi-page
//! document world and a small factored policy whose log-probabilities and gradients are
//! exact, so every piece of the training loop can be checked against an oracle.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! `f64`, which is what the trainer, evaluator and CLI use.

pub mod anno;
pub mod cli;
pub mod config;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod psf;
pub mod reward;
pub mod scalar;
pub mod seed;
pub mod selfcheck;
pub mod synth;
pub mod trainer;

pub use scalar::Scalar;

pub type Policy = policy::PolicyParams<f64>;
pub type Dist = policy::FactoredDist<f64>;
pub type Features = policy::SampleFeatures<f64>;
pub type Rewards = reward::RewardBreakdown<f64>;
pub type Anls = reward::AnlsConfig<f64>;
pub type Objective = grpo::ObjectiveConfig<f64>;
pub type Group<'a> = grpo::RolloutGroup<'a, f64>;

pub type PolicyF32 = policy::PolicyParams<f32>;
pub type FeaturesF32 = policy::SampleFeatures<f32>;
