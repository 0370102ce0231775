//! Retrieval and cross-lingual consistency metrics: R@k, mAP10,
//! embedding gap and distance, and mean rank variance (MRV).
//!
//! Ranks are 1-based. Ties are broken by ascending candidate index so
//! results are deterministic across runs and platforms. A2T ranks
//! candidates within one language (one rank table row per language),
//! matching per-language result rows; pooling texts across languages is
//! a deliberate non-choice.

use serde::Serialize;

use crate::datagen::Corpus;
use crate::encoders::{encode_audio, encode_text, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numerics::{cosine_sim, Embedding};

/// Query direction: text-to-audio or audio-to-text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2A,
    A2T,
}

/// ranks[i][k] is the 1-based rank of the true item for query (i, k),
/// where i indexes the evaluation subset in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    pub ranks: Vec<Vec<usize>>,
}

impl RankTable {
    pub fn n_queries(&self) -> usize {
        self.ranks.len()
    }

    pub fn n_languages(&self) -> usize {
        self.ranks.first().map_or(0, |r| r.len())
    }

    pub fn check(&self, n_candidates: usize) -> Result<()> {
        for row in &self.ranks {
            for &r in row {
                if r < 1 || r > n_candidates {
                    return Err(Error::InvalidConfig(format!(
                        "rank {r} outside 1..={n_candidates}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rank of the candidate at `target` by descending similarity, ties
/// broken by ascending index: candidates with strictly greater
/// similarity come first, equal-similarity candidates with a smaller
/// index come first.
fn rank_of(sims: &[f64], target: usize) -> usize {
    let st = sims[target];
    let mut rank = 1;
    for (j, &s) in sims.iter().enumerate() {
        if s > st || (s == st && j < target) {
            rank += 1;
        }
    }
    rank
}

fn embed_audio_subset(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
) -> Result<Vec<Embedding>> {
    subset
        .iter()
        .map(|&i| encode_audio(params, &corpus.audio_features[i]))
        .collect()
}

fn embed_text_subset(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
    lang: usize,
) -> Result<Vec<Embedding>> {
    subset
        .iter()
        .map(|&i| encode_text(params, &corpus.text_features[i][lang]))
        .collect()
}

/// Build the rank table over the given evaluation subset (indices into
/// the corpus). T2A ranks each text query (i, k) against all audio
/// embeddings in the subset; A2T ranks each audio query i against the
/// subset's texts of language k, one table column per language.
pub fn rank_table(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
    direction: Direction,
    _cfg: &LossConfig,
) -> Result<RankTable> {
    if subset.is_empty() {
        return Err(Error::InvalidConfig("evaluation subset is empty".into()));
    }
    if subset.iter().any(|&i| i >= corpus.n_instances()) {
        return Err(Error::InvalidConfig("subset index out of range".into()));
    }
    let k_langs = corpus.n_languages();
    let audio = embed_audio_subset(params, corpus, subset)?;
    let mut ranks = vec![vec![0usize; k_langs]; subset.len()];
    for k in 0..k_langs {
        let texts = embed_text_subset(params, corpus, subset, k)?;
        for pos in 0..subset.len() {
            let sims: Vec<f64> = match direction {
                Direction::T2A => audio
                    .iter()
                    .map(|a| cosine_sim(&texts[pos], a))
                    .collect::<Result<_>>()?,
                Direction::A2T => texts
                    .iter()
                    .map(|t| cosine_sim(&audio[pos], t))
                    .collect::<Result<_>>()?,
            };
            ranks[pos][k] = rank_of(&sims, pos);
        }
    }
    Ok(RankTable { ranks })
}

/// Fraction of queries with rank <= k, per language.
pub fn recall_at_k(table: &RankTable, k: usize) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::InvalidConfig("recall cutoff k must be >= 1".into()));
    }
    if table.ranks.is_empty() {
        return Err(Error::InvalidConfig("empty rank table".into()));
    }
    let n = table.n_queries() as f64;
    let mut hits = vec![0usize; table.n_languages()];
    for row in &table.ranks {
        for (lang, &r) in row.iter().enumerate() {
            if r <= k {
                hits[lang] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n).collect())
}

/// Mean average precision at 10 with one relevant item per query:
/// AP = 1/rank if rank <= 10, else 0; averaged per language.
pub fn map10(table: &RankTable) -> Result<Vec<f64>> {
    if table.ranks.is_empty() {
        return Err(Error::InvalidConfig("empty rank table".into()));
    }
    let n = table.n_queries() as f64;
    let mut ap_sums = vec![0.0; table.n_languages()];
    for row in &table.ranks {
        for (lang, &r) in row.iter().enumerate() {
            if r <= 10 {
                ap_sums[lang] += 1.0 / (r as f64);
            }
        }
    }
    Ok(ap_sums.iter().map(|s| s / n).collect())
}

/// Mean English text embedding minus mean language-k text embedding,
/// plus its L2 norm. English is language index 0, so k must be >= 1.
pub fn embedding_gap(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
    lang: usize,
) -> Result<(Vec<f64>, f64)> {
    check_gap_args(corpus, subset, lang)?;
    let eng = embed_text_subset(params, corpus, subset, 0)?;
    let other = embed_text_subset(params, corpus, subset, lang)?;
    let d = eng[0].dim();
    let n = subset.len() as f64;
    let mut gap = vec![0.0; d];
    for (e, o) in eng.iter().zip(&other) {
        for dim in 0..d {
            gap[dim] += (e.as_slice()[dim] - o.as_slice()[dim]) / n;
        }
    }
    let norm = gap.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((gap, norm))
}

/// Mean over instances of the distance between English and language-k
/// text embeddings.
pub fn embedding_distance(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
    lang: usize,
) -> Result<f64> {
    check_gap_args(corpus, subset, lang)?;
    let eng = embed_text_subset(params, corpus, subset, 0)?;
    let other = embed_text_subset(params, corpus, subset, lang)?;
    let n = subset.len() as f64;
    let mut total = 0.0;
    for (e, o) in eng.iter().zip(&other) {
        let d: f64 = e
            .as_slice()
            .iter()
            .zip(o.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += d / n;
    }
    Ok(total)
}

fn check_gap_args(corpus: &Corpus, subset: &[usize], lang: usize) -> Result<()> {
    if corpus.n_languages() < 2 {
        return Err(Error::InvalidConfig(
            "gap/distance need at least two languages".into(),
        ));
    }
    if lang == 0 || lang >= corpus.n_languages() {
        return Err(Error::InvalidConfig(format!(
            "gap/distance language index {lang} must be in 1..{}",
            corpus.n_languages()
        )));
    }
    if subset.is_empty() {
        return Err(Error::InvalidConfig("evaluation subset is empty".into()));
    }
    if subset.iter().any(|&i| i >= corpus.n_instances()) {
        return Err(Error::InvalidConfig("subset index out of range".into()));
    }
    Ok(())
}

/// MRV: mean over all (i, k) of the squared deviation of Rank_{ik}
/// from instance i's mean rank across languages.
pub fn mean_rank_variance(table: &RankTable) -> f64 {
    if table.ranks.is_empty() || table.n_languages() == 0 {
        return 0.0;
    }
    let k = table.n_languages() as f64;
    let n = table.n_queries() as f64;
    let mut total = 0.0;
    for row in &table.ranks {
        let mean = row.iter().sum::<usize>() as f64 / k;
        for &r in row {
            total += (r as f64 - mean).powi(2);
        }
    }
    total / (n * k)
}

/// R@1, R@5, and mAP10 per language plus their averages for one
/// query direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMetrics {
    pub r_at_1: Vec<f64>,
    pub r_at_5: Vec<f64>,
    pub map10: Vec<f64>,
    pub avg_r_at_1: f64,
    pub avg_r_at_5: f64,
    pub avg_map10: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn direction_metrics(table: &RankTable) -> Result<DirectionMetrics> {
    let r1 = recall_at_k(table, 1)?;
    let r5 = recall_at_k(table, 5)?;
    let m10 = map10(table)?;
    Ok(DirectionMetrics {
        avg_r_at_1: mean(&r1),
        avg_r_at_5: mean(&r5),
        avg_map10: mean(&m10),
        r_at_1: r1,
        r_at_5: r5,
        map10: m10,
    })
}

/// Full metric report over one evaluation subset. `gap_norm[j]` and
/// `dis[j]` describe language j+1 relative to English (index 0); MRV is
/// computed from the T2A rank table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub languages: Vec<String>,
    pub n_queries: usize,
    pub t2a: DirectionMetrics,
    pub a2t: DirectionMetrics,
    pub gap_norm: Vec<f64>,
    pub dis: Vec<f64>,
    pub mrv: f64,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        let unit = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        for d in [&self.t2a, &self.a2t] {
            if !(unit(&d.r_at_1) && unit(&d.r_at_5) && unit(&d.map10)) {
                return Err(Error::InvalidConfig(
                    "recall/map values outside [0,1]".into(),
                ));
            }
        }
        if self.gap_norm.iter().chain(&self.dis).any(|x| *x < 0.0) || self.mrv < 0.0 {
            return Err(Error::InvalidConfig("negative gap/dis/mrv".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Flat CSV, one row per (language, direction, metric). Averages
    /// use language "avg"; gap/dis use direction "text"; MRV uses
    /// language "all".
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["language,direction,metric,value".to_string()];
        for (dir, m) in [("t2a", &self.t2a), ("a2t", &self.a2t)] {
            for (li, name) in self.languages.iter().enumerate() {
                rows.push(format!("{name},{dir},r_at_1,{}", m.r_at_1[li]));
                rows.push(format!("{name},{dir},r_at_5,{}", m.r_at_5[li]));
                rows.push(format!("{name},{dir},map10,{}", m.map10[li]));
            }
            rows.push(format!("avg,{dir},r_at_1,{}", m.avg_r_at_1));
            rows.push(format!("avg,{dir},r_at_5,{}", m.avg_r_at_5));
            rows.push(format!("avg,{dir},map10,{}", m.avg_map10));
        }
        for (j, (g, d)) in self.gap_norm.iter().zip(&self.dis).enumerate() {
            let name = &self.languages[j + 1];
            rows.push(format!("{name},text,gap_norm,{g}"));
            rows.push(format!("{name},text,dis,{d}"));
        }
        rows.push(format!("all,t2a,mrv,{}", self.mrv));
        rows.join("\n") + "\n"
    }
}

/// Compute every metric over the given subset.
pub fn compute_metrics_report(
    params: &EncoderParams,
    corpus: &Corpus,
    subset: &[usize],
    cfg: &LossConfig,
) -> Result<MetricsReport> {
    let t2a_table = rank_table(params, corpus, subset, Direction::T2A, cfg)?;
    let a2t_table = rank_table(params, corpus, subset, Direction::A2T, cfg)?;
    let mut gap_norm = Vec::new();
    let mut dis = Vec::new();
    for lang in 1..corpus.n_languages() {
        gap_norm.push(embedding_gap(params, corpus, subset, lang)?.1);
        dis.push(embedding_distance(params, corpus, subset, lang)?);
    }
    let report = MetricsReport {
        languages: corpus.language_names.clone(),
        n_queries: subset.len(),
        mrv: mean_rank_variance(&t2a_table),
        t2a: direction_metrics(&t2a_table)?,
        a2t: direction_metrics(&a2t_table)?,
        gap_norm,
        dis,
    };
    report.check()?;
    Ok(report)
}
