//! Desk-scale comparative experiment: train the three strategies on
//! identical corpora and initializations per seed, evaluate on a
//! held-out split, and report qualitative-ordering verdicts on medians
//! across seeds.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_corpus, split_corpus, Corpus, CorpusConfig, Split};
use crate::encoders::{init_params, Arch, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{eval_loss, EpochLanguagePlan, LossConfig, LossKind};
use crate::metrics::{compute_metrics_report, MetricsReport};
use crate::optim::{adam_step, sgd_step, AdamState, OptKind, OptimizerConfig};
use crate::rng::{stream_rng, stream_seed, Stream};

/// Training strategy under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    MlClap,
    Kcl,
    Cacl,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::MlClap, Strategy::Kcl, Strategy::Cacl];

    pub fn loss_kind(self) -> LossKind {
        match self {
            Strategy::MlClap => LossKind::MlClap,
            Strategy::Kcl => LossKind::Kcl,
            Strategy::Cacl => LossKind::Cacl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MlClap => "mlclap",
            Strategy::Kcl => "kcl",
            Strategy::Cacl => "cacl",
        }
    }

    /// Text embeddings encoded per epoch for a train split of size n
    /// with k languages: n, n*k, 2n respectively.
    pub fn texts_per_epoch(self, n: usize, k: usize) -> usize {
        match self {
            Strategy::MlClap => n,
            Strategy::Kcl => n * k,
            Strategy::Cacl => 2 * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub arch: Arch,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub strategy: Strategy,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// train/val/test fractions, summing to 1.
    pub split_fractions: (f64, f64, f64),
    pub eval_split: Split,
    /// None means full-batch epochs.
    pub batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.arch.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if self.arch.d_audio != self.corpus.d_audio || self.arch.d_text != self.corpus.d_text {
            return Err(Error::ArchMismatch(format!(
                "arch dims ({}, {}) do not match corpus dims ({}, {})",
                self.arch.d_audio, self.arch.d_text, self.corpus.d_audio, self.corpus.d_text
            )));
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
            }
        }
        Ok(())
    }

    /// Desk-scale default benchmark: N=200, K=4, 30 epochs, eta=1e-3
    /// SGD, 10 seeds. Mini-batches of 2 and a sharpened temperature
    /// compensate for the small fixed learning rate so all three
    /// strategies train to a useful operating point within 30 epochs.
    pub fn default_benchmark() -> Self {
        let corpus = CorpusConfig::default_benchmark();
        ExperimentConfig {
            arch: Arch {
                d_audio: corpus.d_audio,
                d_text: corpus.d_text,
                d_embed: 16,
                hidden: Some(48),
            },
            corpus,
            optimizer: OptimizerConfig::sgd(1e-3),
            loss: LossConfig { tau: 0.002 },
            strategy: Strategy::Kcl,
            epochs: 30,
            seeds: (0..10).collect(),
            split_fractions: (0.7, 0.1, 0.2),
            eval_split: Split::Test,
            batch_size: Some(2),
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub texts_per_epoch: usize,
    pub train_size: usize,
}

impl TrainLog {
    /// CSV with one row per epoch, for external plotting.
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["epoch,loss".to_string()];
        for (e, l) in self.epoch_losses.iter().enumerate() {
            rows.push(format!("{e},{l}"));
        }
        rows.join("\n") + "\n"
    }
}

fn draw_plan(
    strategy: Strategy,
    rng: &mut impl rand::Rng,
    n: usize,
    k: usize,
) -> Result<Option<EpochLanguagePlan>> {
    match strategy {
        Strategy::Kcl => Ok(None),
        Strategy::MlClap => Ok(Some(EpochLanguagePlan::baseline(rng, n, k)?)),
        Strategy::Cacl => Ok(Some(EpochLanguagePlan::cacl(rng, n, k)?)),
    }
}

fn plan_slice(plan: &Option<EpochLanguagePlan>, range: std::ops::Range<usize>, k: usize) -> Result<Option<EpochLanguagePlan>> {
    match plan {
        None => Ok(None),
        Some(p) => Ok(Some(EpochLanguagePlan::fixed(
            p.q[range].to_vec(),
            p.mode,
            k,
        )?)),
    }
}

/// Train one strategy on the corpus's train split. Deterministic given
/// the seed; plans are drawn fresh per epoch.
pub fn train(
    strategy: Strategy,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(EncoderParams, TrainLog)> {
    cfg.validate()?;
    let annotate = |e: Error| e.context(format!("strategy {}, seed {seed}", strategy.name()));
    train_inner(strategy, corpus, cfg, seed).map_err(annotate)
}

fn train_inner(
    strategy: Strategy,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(EncoderParams, TrainLog)> {
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig("empty train split".into()));
    }
    let k = corpus.n_languages();
    let kind = strategy.loss_kind();
    let mut params = init_params(stream_seed(seed, Stream::Init), cfg.arch)?;
    let mut plan_rng = stream_rng(seed, Stream::Plan);
    let mut adam = AdamState::new(params.flatten().len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut plan_rng);
        let plan = draw_plan(strategy, &mut plan_rng, order.len(), k)?;
        let batch_size = cfg.batch_size.unwrap_or(order.len()).min(order.len());
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        let mut start = 0;
        while start < order.len() {
            let mut end = (start + batch_size).min(order.len());
            // A trailing single instance makes a degenerate contrastive
            // batch; fold it into the previous one.
            if order.len() - end == 1 {
                end = order.len();
            }
            let batch = &order[start..end];
            let batch_plan = plan_slice(&plan, start..end, k)?;
            let out = eval_loss(kind, &params, corpus, batch, batch_plan.as_ref(), &cfg.loss)?;
            if !out.value.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            let w = match cfg.optimizer.kind {
                OptKind::Sgd => sgd_step(params.flatten(), &out.grad, &cfg.optimizer)?,
                OptKind::Adam => {
                    let (w, st) = adam_step(params.flatten(), &out.grad, &adam, &cfg.optimizer)?;
                    adam = st;
                    w
                }
            };
            params = EncoderParams::unflatten(cfg.arch, w)?;
            epoch_loss += out.value;
            n_batches += 1;
            start = end;
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }

    Ok((
        params,
        TrainLog {
            strategy,
            seed,
            epoch_losses,
            texts_per_epoch: strategy.texts_per_epoch(train_idx.len(), k),
            train_size: train_idx.len(),
        },
    ))
}

/// Build the per-seed corpus shared by all strategies.
pub fn seed_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Corpus> {
    let mut corpus_cfg = cfg.corpus.clone();
    corpus_cfg.seed = stream_seed(seed, Stream::Corpus);
    let mut corpus = generate_corpus(&corpus_cfg)?;
    split_corpus(&mut corpus, cfg.split_fractions, stream_seed(seed, Stream::Split))?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mlclap: MetricsReport,
    pub kcl: MetricsReport,
    pub cacl: MetricsReport,
}

impl SeedResult {
    pub fn get(&self, s: Strategy) -> &MetricsReport {
        match s {
            Strategy::MlClap => &self.mlclap,
            Strategy::Kcl => &self.kcl,
            Strategy::Cacl => &self.cacl,
        }
    }
}

/// One value per strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerStrategy {
    pub mlclap: f64,
    pub kcl: f64,
    pub cacl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OrderingVerdicts {
    /// median MRV: kcl <= cacl
    pub mrv_kcl_le_cacl: bool,
    /// median MRV: cacl <= mlclap
    pub mrv_cacl_le_mlclap: bool,
    /// mean averaged T2A R@1: kcl >= mlclap
    pub r1_kcl_ge_mlclap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub per_seed: Vec<SeedResult>,
    pub median_mrv: PerStrategy,
    pub mean_avg_r_at_1: PerStrategy,
    pub verdicts: OrderingVerdicts,
    pub warnings: Vec<String>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl ComparisonReport {
    fn strategy_stat(&self, s: Strategy, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.per_seed.iter().map(|r| f(r.get(s))).collect()
    }

    /// Recompute summary statistics and verdicts from the stored
    /// per-seed reports; the cached fields must always match this.
    pub fn recompute_summary(&self) -> (PerStrategy, PerStrategy, OrderingVerdicts) {
        let med = |s| median(&mut self.strategy_stat(s, |m| m.mrv));
        let median_mrv = PerStrategy {
            mlclap: med(Strategy::MlClap),
            kcl: med(Strategy::Kcl),
            cacl: med(Strategy::Cacl),
        };
        let avg = |s| mean(&self.strategy_stat(s, |m| m.t2a.avg_r_at_1));
        let mean_avg_r_at_1 = PerStrategy {
            mlclap: avg(Strategy::MlClap),
            kcl: avg(Strategy::Kcl),
            cacl: avg(Strategy::Cacl),
        };
        let verdicts = OrderingVerdicts {
            mrv_kcl_le_cacl: median_mrv.kcl <= median_mrv.cacl,
            mrv_cacl_le_mlclap: median_mrv.cacl <= median_mrv.mlclap,
            r1_kcl_ge_mlclap: mean_avg_r_at_1.kcl >= mean_avg_r_at_1.mlclap,
        };
        (median_mrv, mean_avg_r_at_1, verdicts)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Summary CSV: one row per (strategy, statistic).
    pub fn summary_csv(&self) -> String {
        let mut rows = vec!["strategy,statistic,value".to_string()];
        for (s, mrv, r1) in [
            ("mlclap", self.median_mrv.mlclap, self.mean_avg_r_at_1.mlclap),
            ("kcl", self.median_mrv.kcl, self.mean_avg_r_at_1.kcl),
            ("cacl", self.median_mrv.cacl, self.mean_avg_r_at_1.cacl),
        ] {
            rows.push(format!("{s},median_mrv,{mrv}"));
            rows.push(format!("{s},mean_avg_r_at_1,{r1}"));
        }
        rows.push(format!(
            "all,verdict_mrv_kcl_le_cacl,{}",
            self.verdicts.mrv_kcl_le_cacl
        ));
        rows.push(format!(
            "all,verdict_mrv_cacl_le_mlclap,{}",
            self.verdicts.mrv_cacl_le_mlclap
        ));
        rows.push(format!(
            "all,verdict_r1_kcl_ge_mlclap,{}",
            self.verdicts.r1_kcl_ge_mlclap
        ));
        rows.join("\n") + "\n"
    }
}

/// Train all three strategies on one seed's shared corpus and
/// initialization, evaluating each on the held-out split.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let corpus = seed_corpus(cfg, seed)?;
    let eval_idx = corpus.split_indices(cfg.eval_split);
    if eval_idx.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "empty evaluation split {:?}",
            cfg.eval_split
        )));
    }
    let mut reports = Vec::new();
    for strategy in Strategy::ALL {
        if strategy == Strategy::Cacl && cfg.corpus.n_languages < 2 {
            // CACL degenerates to ML-CLAP semantics with K=1 but its
            // plan constructor rejects K<2; reuse ML-CLAP's model.
            let (params, _) = train(Strategy::MlClap, &corpus, cfg, seed)?;
            reports.push(compute_metrics_report(&params, &corpus, &eval_idx, &cfg.loss)?);
            continue;
        }
        let (params, _) = train(strategy, &corpus, cfg, seed)?;
        reports.push(compute_metrics_report(&params, &corpus, &eval_idx, &cfg.loss)?);
    }
    let [mlclap, kcl, cacl]: [MetricsReport; 3] = reports.try_into().expect("three strategies");
    Ok(SeedResult {
        seed,
        mlclap,
        kcl,
        cacl,
    })
}

/// Warnings attached to a comparison run before it starts.
pub fn comparison_warnings(cfg: &ExperimentConfig) -> Vec<String> {
    let mut warnings = Vec::new();
    if cfg.seeds.len() < 5 {
        warnings.push(format!(
            "only {} seeds; orderings on medians are recommended with >= 5",
            cfg.seeds.len()
        ));
    }
    if cfg.corpus.n_languages < 2 {
        warnings.push(
            "single-language corpus: strategies coincide and verdicts are uninformative".into(),
        );
    }
    warnings
}

/// Assemble per-seed results (in seed order) into the final report,
/// computing summary statistics and verdicts from the stored numbers.
pub fn assemble_report(per_seed: Vec<SeedResult>, warnings: Vec<String>) -> ComparisonReport {
    let mut report = ComparisonReport {
        per_seed,
        median_mrv: PerStrategy {
            mlclap: 0.0,
            kcl: 0.0,
            cacl: 0.0,
        },
        mean_avg_r_at_1: PerStrategy {
            mlclap: 0.0,
            kcl: 0.0,
            cacl: 0.0,
        },
        verdicts: OrderingVerdicts {
            mrv_kcl_le_cacl: false,
            mrv_cacl_le_mlclap: false,
            r1_kcl_ge_mlclap: false,
        },
        warnings,
    };
    let (median_mrv, mean_r1, verdicts) = report.recompute_summary();
    report.median_mrv = median_mrv;
    report.mean_avg_r_at_1 = mean_r1;
    report.verdicts = verdicts;
    report
}

/// Train all three strategies on identical corpora and initializations
/// per seed and evaluate on the held-out split.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let warnings = comparison_warnings(cfg);
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        per_seed.push(run_seed(cfg, seed)?);
    }
    Ok(assemble_report(per_seed, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyOverhead {
    pub strategy: Strategy,
    pub texts_per_epoch: usize,
    pub wall_clock_secs: f64,
    /// Rough working-set estimate: parameters (3 copies for optimizer
    /// state) plus one epoch of audio and text embeddings, in bytes.
    pub peak_working_set_bytes: usize,
}

/// Per-strategy text-count accounting and measured wall-clock for one
/// training run on the first seed.
pub fn overhead_report(cfg: &ExperimentConfig) -> Result<Vec<StrategyOverhead>> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let corpus = seed_corpus(cfg, seed)?;
    let n = corpus.split_indices(Split::Train).len();
    let k = corpus.n_languages();
    let param_bytes = 8 * cfg.arch.param_count() * 3;
    let mut out = Vec::new();
    for strategy in Strategy::ALL {
        if strategy == Strategy::Cacl && k < 2 {
            continue;
        }
        let start = Instant::now();
        let (_, log) = train(strategy, &corpus, cfg, seed)?;
        let wall = start.elapsed().as_secs_f64();
        let texts = strategy.texts_per_epoch(n, k);
        debug_assert_eq!(texts, log.texts_per_epoch);
        out.push(StrategyOverhead {
            strategy,
            texts_per_epoch: texts,
            wall_clock_secs: wall,
            peak_working_set_bytes: param_bytes + 8 * cfg.arch.d_embed * (n + texts),
        });
    }
    Ok(out)
}
