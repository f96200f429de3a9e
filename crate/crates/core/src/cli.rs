//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error (printed with help), 2 runtime error or failed check.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use crate::anno::{export_evibench, run_pipeline, AnnotatorBackend, OracleBackend, RemoteBackend};
use crate::config::{BackendKind, ConfigError, Layer, Settings};
use crate::eval::{
    decoded_evidence_recall, emit_report, evaluate_policy, evaluate_predictions, load_dataset, load_predictions,
    save_dataset, EvalError, EvalReport, ReportFormat, ReportMetadata,
};
use crate::policy::{load_checkpoint, save_checkpoint, PolicyError};
use crate::psf::PsfKind;
use crate::selfcheck::{check_rewards, grad_check, CheckResult};
use crate::synth::{generate_corpus, CorpusConfig, QASample, SynthError};
use crate::trainer::{ablation_markdown, run_ablation, run_data_mode, AblationVariant, DataMode, TrainError};

pub const SINGLE_FILE: &str = "single.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_STEM: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "evigrpo", version, about = "Evidence-guided GRPO on a synthetic multi-page document world")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat key = value config file; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Page selection format [default: psf3]
    #[arg(long, global = true, value_parser = ["psf1", "psf2", "psf3", "none"])]
    pub psf: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Responses sampled per question (G) [default: 8]
    #[arg(long, value_name = "G")]
    pub group_size: Option<usize>,
    /// Questions per optimization step [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// KL penalty weight (beta) [default: 0.04]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ratio clipping range (epsilon) [default: 0.2]
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// Gradient descent step size [default: 0.05]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Epochs per curriculum stage [default: 1]
    #[arg(long)]
    pub epochs_per_stage: Option<usize>,
    /// Fixed number of steps per stage, overriding epochs [default: unset]
    #[arg(long)]
    pub steps_per_stage: Option<usize>,
    /// KL estimator: exact | k3 [default: exact]
    #[arg(long)]
    pub kl_mode: Option<String>,
    /// Reference refresh: per_stage | never [default: per_stage]
    #[arg(long)]
    pub ref_refresh: Option<String>,
    /// Initial page relevance probability [default: 0.25]
    #[arg(long)]
    pub page_prior: Option<f64>,
}

impl TrainArgs {
    fn layer(&self) -> Layer {
        Layer {
            group_size: self.group_size,
            batch_size: self.batch_size,
            beta: self.beta,
            clip_eps: self.clip_eps,
            learning_rate: self.learning_rate,
            epochs_per_stage: self.epochs_per_stage,
            steps_per_stage: self.steps_per_stage,
            kl_mode: self.kl_mode.clone(),
            ref_refresh: self.ref_refresh.clone(),
            page_prior: self.page_prior,
            ..Layer::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding single.jsonl, corpus.jsonl and heldout.jsonl [default: --out]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate single-page, multi-page and held-out corpora
    GenData {
        /// Single-page training documents [default: 200]
        #[arg(long)]
        single_docs: Option<usize>,
        /// Multi-page training documents [default: 200]
        #[arg(long)]
        multi_docs: Option<usize>,
        /// Held-out multi-page documents [default: 100]
        #[arg(long)]
        heldout_docs: Option<usize>,
    },
    /// Train a policy (curriculum by default) and write trace and checkpoint
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Data composition: curriculum | mixdata | single | multi [default: curriculum]
        #[arg(long, default_value = "curriculum", hide_default_value = true)]
        mode: String,
    },
    /// Evaluate a checkpoint, or a prediction file, and write report.json and report.md
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Dataset to evaluate [default: <data>/heldout.jsonl]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// JSONL of {"id", "response"} records; evaluates these instead of a checkpoint
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
        /// Directory holding checkpoint.bin and checkpoint.json [default: --out]
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant on shared data
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the two-stage annotation pipeline and export the retained set
    Annotate {
        /// Samples to annotate [default: <data>/corpus.jsonl]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Backend: oracle | remote [default: oracle]
        #[arg(long)]
        backend: Option<String>,
        /// Per-stage answer corruption probability for the oracle backend [default: 0]
        #[arg(long)]
        corruption_prob: Option<f64>,
        /// Minimum ANLS for an answer to match ground truth [default: 0.9]
        #[arg(long)]
        match_threshold: Option<f64>,
        /// Remote endpoint URL
        #[arg(long)]
        endpoint: Option<String>,
        /// Environment variable holding the bearer token [default: EVIGRPO_API_TOKEN]
        #[arg(long)]
        token_env: Option<String>,
        /// Concurrent backend calls [default: 8]
        #[arg(long)]
        max_in_flight: Option<usize>,
    },
    /// Check rewards, ANLS, format grammar and advantages against independent oracles
    CheckRewards,
    /// Check the objective gradient against central finite differences
    GradCheck {
        /// Random batches per KL mode [default: 100]
        #[arg(long, default_value_t = 100, hide_default_value = true)]
        batches: usize,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Export(#[from] crate::anno::ExportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Synth(_) => "data",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Policy(_) => "checkpoint",
            CliError::Export(_) | CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::ChecksFailed(_) => "check",
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

struct Corpora {
    single: Vec<QASample>,
    multi: Vec<QASample>,
    heldout: Vec<QASample>,
}

fn generate(settings: &Settings) -> Result<Corpora, CliError> {
    let d = &settings.data;
    let single = generate_corpus(&CorpusConfig::single_page(settings.seed ^ 0x5151, d.single_docs))?.samples;
    let mut multi = generate_corpus(&CorpusConfig::multi_page(settings.seed, d.multi_docs + d.heldout_docs))?.samples;
    let heldout = multi.split_off(d.multi_docs);
    Ok(Corpora { single, multi, heldout })
}

fn save_corpora(dir: &Path, c: &Corpora) -> Result<(), CliError> {
    ensure_dir(dir)?;
    save_dataset(&dir.join(SINGLE_FILE), &c.single)?;
    save_dataset(&dir.join(CORPUS_FILE), &c.multi)?;
    save_dataset(&dir.join(HELDOUT_FILE), &c.heldout)?;
    Ok(())
}

/// Loads corpora from `dir`, generating and saving them first if absent.
fn corpora(settings: &Settings, dir: &Path) -> Result<Corpora, CliError> {
    let files = [SINGLE_FILE, CORPUS_FILE, HELDOUT_FILE].map(|f| dir.join(f));
    if files.iter().all(|f| f.exists()) {
        return Ok(Corpora {
            single: load_dataset(&files[0])?,
            multi: load_dataset(&files[1])?,
            heldout: load_dataset(&files[2])?,
        });
    }
    let c = generate(settings)?;
    save_corpora(dir, &c)?;
    Ok(c)
}

fn print_checks(results: &[CheckResult]) -> Result<(), CliError> {
    for r in results {
        println!("{r}");
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::ChecksFailed(n)),
    }
}

fn data_mode(s: &str) -> Result<DataMode, CliError> {
    match s {
        "curriculum" => Ok(DataMode::Curriculum),
        "mixdata" | "mixed" => Ok(DataMode::Mixed),
        "single" => Ok(DataMode::SingleOnly),
        "multi" => Ok(DataMode::MultiOnly),
        other => Err(CliError::Usage(format!("unknown --mode `{other}` (expected curriculum|mixdata|single|multi)"))),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cli_layer = Layer { seed: g.seed, out: g.out.clone(), psf: g.psf.clone(), ..Layer::default() };
    cli_layer = match &cli.command {
        Command::GenData { single_docs, multi_docs, heldout_docs } => Layer {
            single_docs: *single_docs,
            multi_docs: *multi_docs,
            heldout_docs: *heldout_docs,
            ..Layer::default()
        },
        Command::Train { train, .. } | Command::Ablate { train, .. } => train.layer(),
        Command::Annotate { backend, corruption_prob, match_threshold, endpoint, token_env, max_in_flight, .. } => Layer {
            backend: backend.clone(),
            corruption_prob: *corruption_prob,
            match_threshold: *match_threshold,
            endpoint: endpoint.clone(),
            token_env: token_env.clone(),
            max_in_flight: *max_in_flight,
            ..Layer::default()
        },
        _ => Layer::default(),
    }
    .over(cli_layer);
    let file_layer = match &g.config {
        Some(path) => Layer::from_file(path)?,
        None => Layer::default(),
    };
    let settings = Settings::resolve(cli_layer.over(file_layer))?;
    let out = settings.out.clone();
    let data_dir = |d: &DataArgs| d.data.clone().unwrap_or_else(|| out.clone());

    match cli.command {
        Command::GenData { .. } => {
            let c = generate(&settings)?;
            save_corpora(&out, &c)?;
            println!(
                "wrote {} single-page, {} multi-page and {} held-out samples to {}",
                c.single.len(),
                c.multi.len(),
                c.heldout.len(),
                out.display()
            );
        }
        Command::Train { data, mode, .. } => {
            let mode = data_mode(&mode)?;
            let c = corpora(&settings, &data_dir(&data))?;
            let (params, traces) = run_data_mode::<f64>(&settings.train, mode, &c.single, &c.multi)?;
            ensure_dir(&out)?;
            let mut trace = String::new();
            for rec in traces.iter().flat_map(|t| &t.records) {
                trace.push_str(&serde_json::to_string(rec).expect("records serialize"));
                trace.push('\n');
            }
            write(&out.join(TRACE_FILE), &trace)?;
            save_checkpoint(&params, settings.seed, &out, CHECKPOINT_STEM)?;
            if let Some(last) = traces.iter().flat_map(|t| &t.records).last() {
                println!(
                    "{} steps ({mode}), final mean reward {:.4}, kl {:.4}",
                    last.step + 1,
                    last.mean_total_reward,
                    last.mean_kl
                );
            }
        }
        Command::Eval { data, dataset, predictions, checkpoint } => {
            let psf = settings.train.psf;
            let anls_cfg = settings.train.anls::<f64>();
            let dataset_path = dataset.unwrap_or_else(|| data_dir(&data).join(HELDOUT_FILE));
            let samples = load_dataset(&dataset_path)?;
            let name = dataset_path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
            let row = match predictions {
                Some(p) => evaluate_predictions(&name, &samples, &load_predictions(&p)?, psf, &anls_cfg)?,
                None => {
                    let dir = checkpoint.unwrap_or_else(|| out.clone());
                    let (params, _) = load_checkpoint::<f64>(&dir, CHECKPOINT_STEM)?;
                    let row = evaluate_policy(&name, &params, &samples, psf, &anls_cfg)?;
                    if psf == PsfKind::NoEvidence {
                        if let Some(r) = decoded_evidence_recall(&params, &samples) {
                            println!("page head decoded at p >= 0.5: recall {:.2}", 100.0 * r);
                        }
                    }
                    row
                }
            };
            let report = EvalReport { metadata: ReportMetadata::new(settings.train.anls_threshold), rows: vec![row] };
            ensure_dir(&out)?;
            write(&out.join("report.json"), &emit_report(&report, ReportFormat::Json))?;
            let md = emit_report(&report, ReportFormat::Markdown);
            write(&out.join("report.md"), &md)?;
            print!("{md}");
        }
        Command::Ablate { data, .. } => {
            let c = corpora(&settings, &data_dir(&data))?;
            let report =
                run_ablation(&settings.train, &AblationVariant::standard_set(), &c.single, &c.multi, &c.heldout)?;
            ensure_dir(&out)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write(&out.join("ablation.json"), &json)?;
            let md = ablation_markdown(&report);
            write(&out.join("ablation.md"), &md)?;
            print!("{md}");
        }
        Command::Annotate { dataset, data, .. } => {
            let path = dataset.unwrap_or_else(|| data_dir(&data).join(CORPUS_FILE));
            let samples = load_dataset(&path)?;
            let a = &settings.anno;
            let backend: Box<dyn AnnotatorBackend> = match a.backend {
                BackendKind::Oracle => Box::new(OracleBackend {
                    seed: settings.seed,
                    corruption_prob: a.corruption_prob,
                    format_corruption_prob: a.format_corruption_prob,
                }),
                BackendKind::Remote => Box::new(RemoteBackend::new(
                    a.endpoint.clone().expect("validated in config"),
                    a.token_env.clone(),
                    a.timeout,
                )),
            };
            let result = run_pipeline(&samples, backend.as_ref(), &a.pipeline);
            ensure_dir(&out)?;
            let mut records: Vec<_> = result.retained.iter().chain(&result.rejected).collect();
            let order: std::collections::HashMap<&str, usize> =
                samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
            records.sort_by_key(|r| order[r.sample_id.as_str()]);
            let mut text = String::new();
            for r in records {
                text.push_str(&serde_json::to_string(r).expect("records serialize"));
                text.push('\n');
            }
            write(&out.join("annotations.jsonl"), &text)?;
            export_evibench(&samples, &result.retained, &out.join("evibench.jsonl"))?;
            let summary = serde_json::to_string_pretty(&result.summary).expect("summary serializes") + "\n";
            write(&out.join("annotation_summary.json"), &summary)?;
            print!("{summary}");
        }
        Command::CheckRewards => print_checks(&check_rewards(settings.seed))?,
        Command::GradCheck { batches } => print_checks(&grad_check(settings.seed, batches))?,
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", Cli::command().render_help());
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_help());
            1
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_defaults() {
        let mut cmd = Cli::command();
        cmd.build();
        let train = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for needle in ["[default: 8]", "[default: 16]", "[default: 0.04]", "[default: 0.2]", "--config", "--psf"] {
            assert!(train.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["evigrpo"]), 1);
        assert_eq!(run(["evigrpo", "train", "--beta", "x"]), 1);
        assert_eq!(run(["evigrpo", "gen-data", "--psf", "psf7"]), 1);
        assert_eq!(run(["evigrpo", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        assert_eq!(run(["evigrpo", "gen-data", "--config", missing.to_str().unwrap()]), 2);
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["evigrpo", "eval", "--out", out]), 2);
    }
}
