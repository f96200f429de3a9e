//! Flat `key = value` experiment files (TOML syntax).
//!
//! Every key is optional. Values resolve as command-line flag, then file, then built-in default.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anno::{MatchConfig, PipelineConfig};
use crate::grpo::KlMode;
use crate::psf::PsfKind;
use crate::trainer::{RefRefresh, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

/// One layer of settings. Both the config file and the command line produce one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub psf: Option<String>,
    // training
    pub group_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub beta: Option<f64>,
    pub clip_eps: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs_per_stage: Option<usize>,
    pub steps_per_stage: Option<usize>,
    pub updates_per_batch: Option<usize>,
    pub std_epsilon: Option<f64>,
    pub ref_refresh: Option<String>,
    pub kl_mode: Option<String>,
    pub temperature: Option<f64>,
    pub page_prior: Option<f64>,
    pub anls_threshold: Option<f64>,
    // data
    pub single_docs: Option<usize>,
    pub multi_docs: Option<usize>,
    pub heldout_docs: Option<usize>,
    // annotation
    pub corruption_prob: Option<f64>,
    pub format_corruption_prob: Option<f64>,
    pub match_threshold: Option<f64>,
    pub max_in_flight: Option<usize>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub token_env: Option<String>,
    pub timeout_secs: Option<u64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Layer { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl Layer {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse { path: path.to_path_buf(), message })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// `self` wins wherever it is set.
    pub fn over(self, lower: Layer) -> Layer {
        overlay!(
            self, lower, seed, out, psf, group_size, batch_size, beta, clip_eps, learning_rate, epochs_per_stage,
            steps_per_stage, updates_per_batch, std_epsilon, ref_refresh, kl_mode, temperature, page_prior,
            anls_threshold, single_docs, multi_docs, heldout_docs, corruption_prob, format_corruption_prob,
            match_threshold, max_in_flight, backend, endpoint, token_env, timeout_secs
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub single_docs: usize,
    pub multi_docs: usize,
    pub heldout_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnoSettings {
    pub backend: BackendKind,
    pub corruption_prob: f64,
    pub format_corruption_prob: f64,
    pub endpoint: Option<String>,
    pub token_env: String,
    pub timeout: Duration,
    pub pipeline: PipelineConfig,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub anno: AnnoSettings,
}

fn parsed<T: std::str::FromStr<Err = String>>(key: &'static str, v: Option<String>) -> Result<Option<T>, ConfigError> {
    v.map(|s| s.parse().map_err(|message| ConfigError::Invalid { key, message })).transpose()
}

fn prob(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(ConfigError::Invalid { key, message: format!("{v} is not in [0, 1]") })
    }
}

impl Settings {
    pub fn resolve(layer: Layer) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let seed = layer.seed.unwrap_or(0);
        let psf: PsfKind = parsed("psf", layer.psf)?.unwrap_or(d.psf);
        let ref_refresh: RefRefresh = parsed("ref_refresh", layer.ref_refresh)?.unwrap_or(d.ref_refresh);
        let kl_mode: KlMode = parsed("kl_mode", layer.kl_mode)?.unwrap_or(d.kl_mode);
        let train = TrainConfig {
            group_size: layer.group_size.unwrap_or(d.group_size),
            batch_size: layer.batch_size.unwrap_or(d.batch_size),
            beta: layer.beta.unwrap_or(d.beta),
            clip_eps: layer.clip_eps.unwrap_or(d.clip_eps),
            learning_rate: layer.learning_rate.unwrap_or(d.learning_rate),
            epochs_per_stage: layer.epochs_per_stage.unwrap_or(d.epochs_per_stage),
            steps_per_stage: layer.steps_per_stage.or(d.steps_per_stage),
            updates_per_batch: layer.updates_per_batch.unwrap_or(d.updates_per_batch),
            std_epsilon: layer.std_epsilon.unwrap_or(d.std_epsilon),
            seed,
            psf,
            ref_refresh,
            kl_mode,
            temperature: layer.temperature.unwrap_or(d.temperature),
            page_prior: layer.page_prior.unwrap_or(d.page_prior),
            anls_threshold: layer.anls_threshold.unwrap_or(d.anls_threshold),
        };
        train.validate().map_err(|e| ConfigError::Invalid { key: "training", message: e.to_string() })?;

        let backend = match layer.backend.as_deref() {
            None | Some("oracle") => BackendKind::Oracle,
            Some("remote") => BackendKind::Remote,
            Some(other) => {
                return Err(ConfigError::Invalid { key: "backend", message: format!("`{other}` (expected oracle|remote)") })
            }
        };
        if backend == BackendKind::Remote && layer.endpoint.is_none() {
            return Err(ConfigError::Invalid { key: "endpoint", message: "required for the remote backend".into() });
        }
        let matching = MatchConfig {
            anls_threshold: train.anls_threshold,
            match_threshold: prob("match_threshold", layer.match_threshold.unwrap_or(0.9))?,
        };
        let anno = AnnoSettings {
            backend,
            corruption_prob: prob("corruption_prob", layer.corruption_prob.unwrap_or(0.0))?,
            format_corruption_prob: prob("format_corruption_prob", layer.format_corruption_prob.unwrap_or(0.0))?,
            endpoint: layer.endpoint,
            token_env: layer.token_env.unwrap_or_else(|| "EVIGRPO_API_TOKEN".into()),
            timeout: Duration::from_secs(layer.timeout_secs.unwrap_or(30)),
            pipeline: PipelineConfig { matching, max_in_flight: layer.max_in_flight.unwrap_or(8).max(1) },
        };
        Ok(Settings {
            seed,
            out: layer.out.unwrap_or_else(|| PathBuf::from("out")),
            train,
            data: DataSettings {
                single_docs: layer.single_docs.unwrap_or(200),
                multi_docs: layer.multi_docs.unwrap_or(200),
                heldout_docs: layer.heldout_docs.unwrap_or(100),
            },
            anno,
        })
    }
}
