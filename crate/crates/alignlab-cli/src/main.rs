//! `alignlab` command-line interface.
//!
//! Subcommands: gen-data, train, evaluate, verify-bound, adam-check,
//! grad-check, compare. Every command reads a JSON config (or explicit
//! flags for `evaluate`), writes its outputs plus a `manifest.json`
//! into `--out-dir`, and is deterministic given (config, seed).
//!
//! Exit codes: 0 success, 2 config error, 3 runtime/numeric error,
//! 4 assertion (bound or ordering) failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use alignlab::datagen::{generate_corpus, load_corpus, save_corpus, split_corpus, Corpus, CorpusConfig, Split};
use alignlab::encoders::{init_params, load_checkpoint, save_checkpoint, Arch};
use alignlab::error::{Error, Result};
use alignlab::harness::{
    assemble_report, comparison_warnings, train, ExperimentConfig, SeedResult, Strategy, TrainLog,
};
use alignlab::losses::{grad_check, EpochLanguagePlan, LossConfig, LossKind};
use alignlab::metrics::compute_metrics_report;
use alignlab::optim::{OptKind, OptimizerConfig};
use alignlab::rng::{stream_rng, stream_seed, Stream};
use alignlab::theory::{adam_momentum_error_check, twin_train, BoundTrace, EpochRecord, TwinTrainConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ASSERT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "alignlab",
    version,
    about = "Desk-scale laboratory for multilingual audio-text contrastive training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multilingual corpus and write it as an ALNC binary.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the corpus seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one strategy on an existing corpus; writes a checkpoint and loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute retrieval-consistency metrics for a checkpoint on a corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Which split to evaluate: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Softmax temperature used by the rank tables.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Twin-train under the joint and sampled pair distributions and check
    /// the weight-error bound every epoch. SGD only; exit 4 on violation.
    VerifyBound {
        #[arg(long, required_unless_present = "replay")]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the twin-training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Re-check an existing bound trace (JSON lines) instead of training.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Check the Adam first-order momentum error bound; exit 4 on violation.
    AdamCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replaces the seed list from the config with a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic loss gradients against finite differences; exit 4
    /// when the worst relative error exceeds the threshold.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the base seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the three-strategy comparison across seeds and report ordering
    /// verdicts. Without --config, runs the built-in default benchmark.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replaces the seed list from the config with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel per-seed workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Exit 4 unless all three qualitative-ordering verdicts hold.
        #[arg(long)]
        assert_ordering: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            let mut cause = std::error::Error::source(&err);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Map library errors onto the exit-code contract: bad inputs and
/// malformed files are config errors (2); everything else that can
/// only happen mid-run is a runtime/numeric error (3).
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Context { source, .. } => exit_code_for(source),
        Error::InvalidConfig(_)
        | Error::InvalidTemperature(_)
        | Error::ArchMismatch(_)
        | Error::InvalidPlan(_)
        | Error::Parse { .. }
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::GenData { config, out_dir, seed } => cmd_gen_data(&config, &out_dir, seed),
        Cmd::Train { config, out_dir, seed } => cmd_train(&config, &out_dir, seed),
        Cmd::Evaluate { checkpoint, corpus, out_dir, split, tau } => {
            cmd_evaluate(&checkpoint, &corpus, &out_dir, &split, tau)
        }
        Cmd::VerifyBound { config, out_dir, seed, replay } => {
            cmd_verify_bound(config.as_deref(), &out_dir, seed, replay.as_deref())
        }
        Cmd::AdamCheck { config, out_dir, seed } => cmd_adam_check(&config, &out_dir, seed),
        Cmd::GradCheck { config, out_dir, seed } => cmd_grad_check(&config, &out_dir, seed),
        Cmd::Compare { config, out_dir, seed, jobs, assert_ordering } => {
            cmd_compare(config.as_deref(), &out_dir, seed, jobs, assert_ordering)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Re-run provenance written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<String>,
}

struct ManifestBuilder {
    command: &'static str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    started_unix: u64,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            config_path: None,
            config_sha256: None,
            seed: None,
            started_unix: unix_now(),
            outputs: Vec::new(),
        }
    }

    fn config(&mut self, path: &Path, raw: &str) {
        self.config_path = Some(path.display().to_string());
        let mut hasher = Sha256::new();
        hasher.update(raw.as_bytes());
        self.config_sha256 = Some(format!("{:x}", hasher.finalize()));
    }

    /// Writes `manifest.json`; every listed output must already exist.
    fn finish(self, out_dir: &Path) -> Result<()> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            if !p.exists() {
                return Err(Error::io(
                    p.display().to_string(),
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "output listed in manifest is missing",
                    ),
                ));
            }
            outputs.push(p.display().to_string());
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            config_path: self.config_path,
            config_sha256: self.config_sha256,
            seed: self.seed,
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        write_text(&out_dir.join("manifest.json"), &text)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a JSON config, reporting the offending line and field by name.
fn parse_config<T: DeserializeOwned>(path: &Path, raw: &str) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Paths inside configs resolve relative to the config file's directory.
fn resolve_relative(config_path: &Path, target: &str) -> PathBuf {
    let target = Path::new(target);
    if target.is_absolute() {
        target.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(target)
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn default_split_fractions() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    corpus: CorpusConfig,
    #[serde(default = "default_split_fractions")]
    split_fractions: (f64, f64, f64),
    /// Defaults to a split stream derived from the corpus seed.
    #[serde(default)]
    split_seed: Option<u64>,
}

fn cmd_gen_data(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let raw = read_text(config_path)?;
    let mut cfg: GenDataConfig = parse_config(config_path, &raw)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("gen-data");
    manifest.config(config_path, &raw);
    manifest.seed = Some(cfg.corpus.seed);

    let mut corpus = generate_corpus(&cfg.corpus)?;
    let split_seed = cfg
        .split_seed
        .unwrap_or_else(|| stream_seed(cfg.corpus.seed, Stream::Split));
    split_corpus(&mut corpus, cfg.split_fractions, split_seed)?;

    let corpus_path = out_dir.join("corpus.alnc");
    save_corpus(&corpus, &corpus_path)?;
    println!(
        "wrote {} ({} instances, {} languages)",
        corpus_path.display(),
        corpus.n_instances(),
        corpus.n_languages()
    );
    manifest.outputs.push(corpus_path);
    manifest.finish(out_dir)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    corpus_path: String,
    strategy: Strategy,
    arch: Arch,
    #[serde(default)]
    optimizer: OptimizerConfig,
    #[serde(default)]
    loss: LossConfig,
    epochs: usize,
    #[serde(default)]
    batch_size: Option<usize>,
    seed: u64,
}

/// A placeholder corpus config matching a corpus loaded from disk, so
/// `ExperimentConfig::validate` can check the architecture against it.
fn corpus_cfg_for(corpus: &Corpus) -> CorpusConfig {
    CorpusConfig {
        n_instances: corpus.n_instances(),
        n_languages: corpus.n_languages(),
        d_latent: 1,
        d_audio: corpus.d_audio(),
        d_text: corpus.d_text(),
        audio_noise_sigma: 0.0,
        per_language_noise_sigma: vec![0.0; corpus.n_languages()],
        language_offset_scale: 0.0,
        seed: 0,
    }
}

fn check_arch_against_corpus(arch: &Arch, corpus: &Corpus) -> Result<()> {
    arch.validate()?;
    if arch.d_audio != corpus.d_audio() || arch.d_text != corpus.d_text() {
        return Err(Error::ArchMismatch(format!(
            "arch input dims (d_audio={}, d_text={}) do not match corpus dims (d_audio={}, d_text={})",
            arch.d_audio,
            arch.d_text,
            corpus.d_audio(),
            corpus.d_text()
        )));
    }
    Ok(())
}

fn cmd_train(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let raw = read_text(config_path)?;
    let mut cfg: TrainCliConfig = parse_config(config_path, &raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = load_corpus(&resolve_relative(config_path, &cfg.corpus_path))?;
    check_arch_against_corpus(&cfg.arch, &corpus)?;
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("train");
    manifest.config(config_path, &raw);
    manifest.seed = Some(cfg.seed);

    let (params, log) = if cfg.epochs == 0 {
        // Zero epochs: the checkpoint is exactly the seeded initialization.
        cfg.optimizer.validate()?;
        cfg.loss.validate()?;
        let params = init_params(stream_seed(cfg.seed, Stream::Init), cfg.arch)?;
        let log = TrainLog {
            strategy: cfg.strategy,
            seed: cfg.seed,
            epoch_losses: Vec::new(),
            texts_per_epoch: 0,
            train_size: corpus.split_indices(Split::Train).len(),
        };
        (params, log)
    } else {
        let exp = ExperimentConfig {
            corpus: corpus_cfg_for(&corpus),
            arch: cfg.arch,
            optimizer: cfg.optimizer,
            loss: cfg.loss,
            strategy: cfg.strategy,
            epochs: cfg.epochs,
            seeds: vec![cfg.seed],
            split_fractions: default_split_fractions(),
            eval_split: Split::Test,
            batch_size: cfg.batch_size,
        };
        train(cfg.strategy, &corpus, &exp, cfg.seed)?
    };

    let ckpt_path = out_dir.join("checkpoint.alnp");
    save_checkpoint(&params, &ckpt_path)?;
    let loss_path = out_dir.join("loss.csv");
    write_text(&loss_path, &log.to_csv())?;
    println!(
        "trained {} for {} epochs; final loss {}",
        cfg.strategy.name(),
        cfg.epochs,
        log.epoch_losses
            .last()
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a (init only)".into())
    );
    manifest.outputs.push(ckpt_path);
    manifest.outputs.push(loss_path);
    manifest.finish(out_dir)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(
    checkpoint: &Path,
    corpus_path: &Path,
    out_dir: &Path,
    split: &str,
    tau: Option<f64>,
) -> Result<u8> {
    let params = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_path)?;
    check_arch_against_corpus(params.arch(), &corpus)?;
    let subset = match split {
        "train" => corpus.split_indices(Split::Train),
        "val" => corpus.split_indices(Split::Val),
        "test" => corpus.split_indices(Split::Test),
        "all" => (0..corpus.n_instances()).collect(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?}; expected train, val, test, or all"
            )))
        }
    };
    if subset.is_empty() {
        return Err(Error::InvalidConfig(format!("split {split:?} is empty")));
    }
    let loss_cfg = match tau {
        Some(t) => LossConfig { tau: t },
        None => LossConfig::default(),
    };
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("evaluate");

    let report = compute_metrics_report(&params, &corpus, &subset, &loss_cfg)?;
    let json_path = out_dir.join("metrics.json");
    write_text(&json_path, &report.to_json())?;
    let csv_path = out_dir.join("metrics.csv");
    write_text(&csv_path, &report.to_csv())?;
    println!(
        "evaluated {} queries on split {split}: avg T2A R@1 {:.4}, MRV {:.4}",
        report.n_queries, report.t2a.avg_r_at_1, report.mrv
    );
    manifest.outputs.push(json_path);
    manifest.outputs.push(csv_path);
    manifest.finish(out_dir)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify-bound
// ---------------------------------------------------------------------------

fn default_bound_optimizer() -> OptimizerConfig {
    OptimizerConfig::sgd(1e-3).with_clip(5.0)
}

fn default_twin_epochs() -> usize {
    5
}

fn default_steps_per_epoch() -> usize {
    4
}

fn default_lipschitz_samples() -> usize {
    32
}

fn default_perturbation_scale() -> f64 {
    1e-2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundCliConfig {
    corpus: CorpusConfig,
    arch: Arch,
    #[serde(default = "default_bound_optimizer")]
    optimizer: OptimizerConfig,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default = "default_twin_epochs")]
    epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    steps_per_epoch: usize,
    #[serde(default = "default_lipschitz_samples")]
    lipschitz_samples: usize,
    #[serde(default = "default_perturbation_scale")]
    perturbation_scale: f64,
    #[serde(default)]
    seed: u64,
}

fn report_trace(trace: &BoundTrace) -> u8 {
    for r in &trace.records {
        println!(
            "epoch {}: measured {:.6e} <= bound {:.6e} ... {}",
            r.epoch,
            r.measured_error,
            r.bound_rhs,
            if r.violated { "VIOLATED" } else { "ok" }
        );
    }
    if trace.all_within_bound() {
        println!("bound holds at every epoch");
        0
    } else {
        eprintln!("error: weight-error bound violated");
        EXIT_ASSERT
    }
}

fn cmd_verify_bound(
    config_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    replay: Option<&Path>,
) -> Result<u8> {
    if let Some(trace_path) = replay {
        // Re-check an existing trace: recompute each epoch's verdict
        // from its recorded measured error and bound.
        let raw = read_text(trace_path)?;
        let mut records = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: EpochRecord =
                serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: trace_path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            rec.violated = rec.measured_error > rec.bound_rhs;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "trace {} contains no epoch records",
                trace_path.display()
            )));
        }
        return Ok(report_trace(&BoundTrace { records }));
    }

    let config_path = config_path.expect("clap requires --config without --replay");
    let raw = read_text(config_path)?;
    let mut cfg: BoundCliConfig = parse_config(config_path, &raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.optimizer.kind == OptKind::Adam {
        return Err(Error::InvalidConfig(
            "verify-bound checks the SGD weight-error bound only; \
             use the adam-check subcommand for the Adam momentum bound"
                .into(),
        ));
    }
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("verify-bound");
    manifest.config(config_path, &raw);
    manifest.seed = Some(cfg.seed);

    let corpus = generate_corpus(&cfg.corpus)?;
    let twin_cfg = TwinTrainConfig {
        epochs: cfg.epochs,
        steps_per_epoch: cfg.steps_per_epoch,
        lipschitz_samples: cfg.lipschitz_samples,
        perturbation_scale: cfg.perturbation_scale,
        seed: cfg.seed,
    };
    let trace = twin_train(&corpus, cfg.arch, &cfg.optimizer, &cfg.loss, &twin_cfg)?;

    let trace_path = out_dir.join("bound_trace.jsonl");
    write_text(&trace_path, &(trace.to_jsonl() + "\n"))?;
    manifest.outputs.push(trace_path);
    manifest.finish(out_dir)?;
    Ok(report_trace(&trace))
}

// ---------------------------------------------------------------------------
// adam-check
// ---------------------------------------------------------------------------

fn default_adam_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

fn default_check_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamCheckConfig {
    corpus: CorpusConfig,
    arch: Arch,
    #[serde(default = "default_adam_optimizer")]
    optimizer: OptimizerConfig,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default = "default_check_seeds")]
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct AdamCheckOutput {
    seed: u64,
    measured: f64,
    rhs: f64,
    g_max: f64,
    dist_error: f64,
    passed: bool,
}

fn cmd_adam_check(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let raw = read_text(config_path)?;
    let mut cfg: AdamCheckConfig = parse_config(config_path, &raw)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("adam-check needs at least one seed".into()));
    }
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("adam-check");
    manifest.config(config_path, &raw);

    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let mut corpus_cfg = cfg.corpus.clone();
        corpus_cfg.seed = stream_seed(s, Stream::Corpus);
        let corpus = generate_corpus(&corpus_cfg)?;
        let rep = adam_momentum_error_check(&corpus, cfg.arch, &cfg.optimizer, &cfg.loss, s)?;
        println!(
            "seed {s}: measured {:.6e} <= rhs {:.6e} ... {}",
            rep.measured,
            rep.rhs,
            if rep.passed { "ok" } else { "VIOLATED" }
        );
        results.push(AdamCheckOutput {
            seed: s,
            measured: rep.measured,
            rhs: rep.rhs,
            g_max: rep.g_max,
            dist_error: rep.dist_error,
            passed: rep.passed,
        });
    }
    let all_passed = results.iter().all(|r| r.passed);
    let json = serde_json::json!({ "results": results, "all_passed": all_passed });
    let report_path = out_dir.join("adam_check.json");
    write_text(&report_path, &serde_json::to_string_pretty(&json).expect("serializable"))?;
    manifest.outputs.push(report_path);
    manifest.finish(out_dir)?;
    if all_passed {
        Ok(0)
    } else {
        eprintln!("error: Adam momentum bound violated");
        Ok(EXIT_ASSERT)
    }
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

fn default_grad_losses() -> Vec<LossKind> {
    vec![LossKind::MlClap, LossKind::Kcl, LossKind::Cacl]
}

fn default_grad_seeds() -> usize {
    3
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_threshold() -> f64 {
    1e-4
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GradCheckConfig {
    corpus: CorpusConfig,
    arch: Arch,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default = "default_grad_losses")]
    losses: Vec<LossKind>,
    #[serde(default = "default_grad_seeds")]
    n_seeds: usize,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct GradCheckOutput {
    loss: LossKind,
    seed: u64,
    max_rel_error: f64,
    worst_coordinate: usize,
    passed: bool,
}

fn cmd_grad_check(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let raw = read_text(config_path)?;
    let mut cfg: GradCheckConfig = parse_config(config_path, &raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.losses.is_empty() || cfg.n_seeds == 0 {
        return Err(Error::InvalidConfig(
            "grad-check needs at least one loss and one seed".into(),
        ));
    }
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("grad-check");
    manifest.config(config_path, &raw);
    manifest.seed = Some(cfg.seed);

    let mut results = Vec::new();
    for offset in 0..cfg.n_seeds {
        let s = cfg.seed.wrapping_add(offset as u64);
        let mut corpus_cfg = cfg.corpus.clone();
        corpus_cfg.seed = stream_seed(s, Stream::Corpus);
        let corpus = generate_corpus(&corpus_cfg)?;
        let batch: Vec<usize> = (0..corpus.n_instances()).collect();
        let params = init_params(stream_seed(s, Stream::Init), cfg.arch)?;
        let mut plan_rng = stream_rng(s, Stream::Plan);
        for &kind in &cfg.losses {
            let plan = match kind {
                LossKind::Kcl => None,
                LossKind::MlClap => Some(EpochLanguagePlan::baseline(
                    &mut plan_rng,
                    batch.len(),
                    corpus.n_languages(),
                )?),
                LossKind::Cacl => Some(EpochLanguagePlan::cacl(
                    &mut plan_rng,
                    batch.len(),
                    corpus.n_languages(),
                )?),
            };
            let rep = grad_check(
                kind,
                &params,
                &corpus,
                &batch,
                plan.as_ref(),
                &cfg.loss,
                cfg.epsilon,
            )?;
            let passed = rep.max_rel_error <= cfg.threshold;
            println!(
                "{:?} seed {s}: max rel error {:.3e} (threshold {:.1e}) ... {}",
                kind,
                rep.max_rel_error,
                cfg.threshold,
                if passed { "ok" } else { "FAILED" }
            );
            results.push(GradCheckOutput {
                loss: kind,
                seed: s,
                max_rel_error: rep.max_rel_error,
                worst_coordinate: rep.worst_coordinate,
                passed,
            });
        }
    }
    let all_passed = results.iter().all(|r| r.passed);
    let json = serde_json::json!({
        "epsilon": cfg.epsilon,
        "threshold": cfg.threshold,
        "results": results,
        "all_passed": all_passed,
    });
    let report_path = out_dir.join("grad_check.json");
    write_text(&report_path, &serde_json::to_string_pretty(&json).expect("serializable"))?;
    manifest.outputs.push(report_path);
    manifest.finish(out_dir)?;
    if all_passed {
        Ok(0)
    } else {
        eprintln!("error: analytic gradient disagrees with finite differences");
        Ok(EXIT_ASSERT)
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(
    config_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    jobs: usize,
    assert_ordering: bool,
) -> Result<u8> {
    if jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be >= 1".into()));
    }
    let mut manifest = ManifestBuilder::new("compare");
    let mut cfg = match config_path {
        Some(p) => {
            let raw = read_text(p)?;
            let cfg: ExperimentConfig = parse_config(p, &raw)?;
            manifest.config(p, &raw);
            cfg
        }
        None => ExperimentConfig::default_benchmark(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
        manifest.seed = Some(s);
    }
    cfg.validate()?;
    ensure_out_dir(out_dir)?;

    let warnings = comparison_warnings(&cfg);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let per_seed = run_seeds_parallel(&cfg, jobs)?;
    let report = assemble_report(per_seed, warnings);

    let json_path = out_dir.join("comparison.json");
    write_text(&json_path, &report.to_json())?;
    let csv_path = out_dir.join("summary.csv");
    write_text(&csv_path, &report.summary_csv())?;

    println!(
        "median MRV: mlclap {:.4}, kcl {:.4}, cacl {:.4}",
        report.median_mrv.mlclap, report.median_mrv.kcl, report.median_mrv.cacl
    );
    println!(
        "mean avg R@1: mlclap {:.4}, kcl {:.4}, cacl {:.4}",
        report.mean_avg_r_at_1.mlclap, report.mean_avg_r_at_1.kcl, report.mean_avg_r_at_1.cacl
    );
    let v = &report.verdicts;
    println!(
        "orderings: mrv kcl<=cacl {}, mrv cacl<=mlclap {}, r@1 kcl>=mlclap {}",
        v.mrv_kcl_le_cacl, v.mrv_cacl_le_mlclap, v.r1_kcl_ge_mlclap
    );
    manifest.outputs.push(json_path);
    manifest.outputs.push(csv_path);
    manifest.finish(out_dir)?;

    if assert_ordering && !(v.mrv_kcl_le_cacl && v.mrv_cacl_le_mlclap && v.r1_kcl_ge_mlclap) {
        eprintln!("error: qualitative ordering assertion failed");
        return Ok(EXIT_ASSERT);
    }
    Ok(0)
}

/// Run per-seed comparisons on up to `jobs` worker threads, preserving
/// the config's seed order in the result.
fn run_seeds_parallel(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SeedResult>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let seeds = cfg.seeds.clone();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SeedResult>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let workers = jobs.min(seeds.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= seeds.len() {
                    break;
                }
                let result = alignlab::harness::run_seed(cfg, seeds[idx]);
                slots.lock().expect("worker panicked")[idx] = Some(result);
            });
        }
    });

    let mut out = Vec::with_capacity(seeds.len());
    for slot in slots.into_inner().expect("worker panicked") {
        out.push(slot.expect("every seed was processed")?);
    }
    Ok(out)
}
