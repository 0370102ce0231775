//! Training objectives: the random-language baseline, 1-to-K
//! contrastive learning (KCL), and audio-English co-anchor contrastive
//! learning (CACL), each with exact analytic gradients over all encoder
//! parameters. Gradients are accumulated by hand through the shallow
//! encoder graph; no autodiff.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::encoders::{EncoderParams, ForwardCache};
use crate::error::{Error, Result};
use crate::numerics::{self, log_softmax_row, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: numerics::DEFAULT_TAU,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// One language per instance, uniform over all K languages.
    Baseline,
    /// One non-English language per instance, uniform over {1..K-1}.
    Cacl,
}

/// Per-epoch random language assignment Q = {q_1..q_N} (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochLanguagePlan {
    pub q: Vec<usize>,
    pub mode: PlanMode,
}

impl EpochLanguagePlan {
    pub fn baseline<R: Rng>(rng: &mut R, n: usize, n_languages: usize) -> Result<Self> {
        if n_languages == 0 {
            return Err(Error::InvalidPlan("need at least one language".into()));
        }
        Ok(EpochLanguagePlan {
            q: (0..n).map(|_| rng.gen_range(0..n_languages)).collect(),
            mode: PlanMode::Baseline,
        })
    }

    pub fn cacl<R: Rng>(rng: &mut R, n: usize, n_languages: usize) -> Result<Self> {
        if n_languages < 2 {
            return Err(Error::InvalidPlan(
                "cacl plans require at least 2 languages".into(),
            ));
        }
        Ok(EpochLanguagePlan {
            q: (0..n).map(|_| rng.gen_range(1..n_languages)).collect(),
            mode: PlanMode::Cacl,
        })
    }

    pub fn fixed(q: Vec<usize>, mode: PlanMode, n_languages: usize) -> Result<Self> {
        let plan = EpochLanguagePlan { q, mode };
        plan.check(plan.q.len(), n_languages)?;
        Ok(plan)
    }

    pub fn check(&self, batch_len: usize, n_languages: usize) -> Result<()> {
        if self.q.len() != batch_len {
            return Err(Error::InvalidPlan(format!(
                "plan length {} != batch size {batch_len}",
                self.q.len()
            )));
        }
        let lo = match self.mode {
            PlanMode::Baseline => 0,
            PlanMode::Cacl => 1,
        };
        if self.q.iter().any(|&qi| qi < lo || qi >= n_languages) {
            return Err(Error::InvalidPlan(format!(
                "language index out of range [{lo}, {n_languages})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Embeddings plus forward caches for one side of a contrastive pair.
struct EncodedBatch {
    embs: Vec<Vec<f64>>,
    norms: Vec<f64>,
    caches: Vec<ForwardCache>,
}

impl EncodedBatch {
    fn check_norms(&self) -> Result<()> {
        for (i, n) in self.norms.iter().enumerate() {
            if *n == 0.0 {
                return Err(Error::ZeroNormEmbedding { index: i });
            }
        }
        Ok(())
    }
}

fn encode_audio_batch(params: &EncoderParams, corpus: &Corpus, batch: &[usize]) -> Result<EncodedBatch> {
    let mut embs = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for &i in batch {
        let (y, c) = params.forward_audio(&corpus.audio_features[i])?;
        embs.push(y);
        caches.push(c);
    }
    let norms = embs.iter().map(|e| numerics::norm(e)).collect();
    Ok(EncodedBatch { embs, norms, caches })
}

fn encode_text_batch(
    params: &EncoderParams,
    corpus: &Corpus,
    items: impl Iterator<Item = (usize, usize)>,
) -> Result<EncodedBatch> {
    let mut embs = Vec::new();
    let mut caches = Vec::new();
    for (i, k) in items {
        let (y, c) = params.forward_text(&corpus.text_features[i][k])?;
        embs.push(y);
        caches.push(c);
    }
    let norms = embs.iter().map(|e| numerics::norm(e)).collect();
    Ok(EncodedBatch { embs, norms, caches })
}

/// One direction of InfoNCE: -sum_i log softmax_i(s(u_i, v_.)/tau).
/// Returns the unweighted value and accumulates `weight` times the
/// gradient with respect to each embedding into `gu` / `gv`.
fn directional_infonce(
    u: &EncodedBatch,
    v: &EncodedBatch,
    tau: f64,
    weight: f64,
    gu: &mut [Vec<f64>],
    gv: &mut [Vec<f64>],
) -> Result<f64> {
    let n = u.embs.len();
    debug_assert_eq!(n, v.embs.len());
    u.check_norms()?;
    v.check_norms()?;
    let mut value = 0.0;
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let ui = &u.embs[i];
        let nu = u.norms[i];
        for j in 0..n {
            scores[j] = numerics::dot(ui, &v.embs[j]) / (nu * v.norms[j]);
        }
        let ls = log_softmax_row(&scores, tau)?;
        value -= ls[i];
        for j in 0..n {
            let p = ls[j].exp();
            let coeff = weight * (p - if i == j { 1.0 } else { 0.0 }) / tau;
            if coeff == 0.0 {
                continue;
            }
            let vj = &v.embs[j];
            let nv = v.norms[j];
            let s = scores[j];
            let inv = 1.0 / (nu * nv);
            let gu_i = &mut gu[i];
            for d in 0..ui.len() {
                gu_i[d] += coeff * (vj[d] * inv - s * ui[d] / (nu * nu));
            }
            let gv_j = &mut gv[j];
            for d in 0..ui.len() {
                gv_j[d] += coeff * (ui[d] * inv - s * vj[d] / (nv * nv));
            }
        }
    }
    Ok(value)
}

/// Symmetric two-term InfoNCE over paired embedding lists, unnormalized.
pub fn infonce_pair_loss(u: &[Embedding], v: &[Embedding], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::InvalidConfig("empty embedding lists".into()));
    }
    let wrap = |list: &[Embedding]| EncodedBatch {
        embs: list.iter().map(|e| e.as_slice().to_vec()).collect(),
        norms: list.iter().map(|e| e.norm()).collect(),
        caches: Vec::new(),
    };
    let ub = wrap(u);
    let vb = wrap(v);
    let dim = ub.embs[0].len();
    let mut sink_u = vec![vec![0.0; dim]; u.len()];
    let mut sink_v = vec![vec![0.0; dim]; v.len()];
    let fwd = directional_infonce(&ub, &vb, cfg.tau, 0.0, &mut sink_u, &mut sink_v)?;
    let bwd = directional_infonce(&vb, &ub, cfg.tau, 0.0, &mut sink_v, &mut sink_u)?;
    Ok(fwd + bwd)
}

fn zero_embedding_grads(batch: &EncodedBatch) -> Vec<Vec<f64>> {
    batch.embs.iter().map(|e| vec![0.0; e.len()]).collect()
}

fn finalize(params: &EncoderParams, value: f64, grad: Vec<f64>, what: &str) -> Result<LossOutput> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    debug_assert_eq!(grad.len(), params.flatten().len());
    Ok(LossOutput { value, grad })
}

/// ML-CLAP baseline: symmetric InfoNCE between audio and the one
/// plan-selected text per instance, normalized by 1/(2N).
pub fn mlclap_loss(
    params: &EncoderParams,
    corpus: &Corpus,
    batch: &[usize],
    plan: &EpochLanguagePlan,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if plan.mode != PlanMode::Baseline {
        return Err(Error::InvalidPlan("mlclap_loss needs a baseline plan".into()));
    }
    plan.check(batch.len(), corpus.n_languages())?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n = batch.len() as f64;
    let audio = encode_audio_batch(params, corpus, batch)?;
    let text = encode_text_batch(
        params,
        corpus,
        batch.iter().zip(&plan.q).map(|(&i, &k)| (i, k)),
    )?;
    let norm = 1.0 / (2.0 * n);
    let mut ga = zero_embedding_grads(&audio);
    let mut gt = zero_embedding_grads(&text);
    let v1 = directional_infonce(&audio, &text, cfg.tau, norm, &mut ga, &mut gt)?;
    let v2 = directional_infonce(&text, &audio, cfg.tau, norm, &mut gt, &mut ga)?;
    let mut grad = vec![0.0; params.flatten().len()];
    for (cache, g) in audio.caches.iter().zip(&ga) {
        params.backward_audio(cache, g, &mut grad);
    }
    for (cache, g) in text.caches.iter().zip(&gt) {
        params.backward_text(cache, g, &mut grad);
    }
    finalize(params, norm * (v1 + v2), grad, "mlclap_loss")
}

/// KCL: all K languages per instance; per-language candidate pools,
/// normalized by 1/(2NK).
pub fn kcl_loss(
    params: &EncoderParams,
    corpus: &Corpus,
    batch: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n = batch.len() as f64;
    let k = corpus.n_languages();
    let norm = 1.0 / (2.0 * n * k as f64);
    let audio = encode_audio_batch(params, corpus, batch)?;
    let mut ga = zero_embedding_grads(&audio);
    let mut grad = vec![0.0; params.flatten().len()];
    let mut value = 0.0;
    for lang in 0..k {
        let text = encode_text_batch(params, corpus, batch.iter().map(|&i| (i, lang)))?;
        let mut gt = zero_embedding_grads(&text);
        value += directional_infonce(&audio, &text, cfg.tau, norm, &mut ga, &mut gt)?;
        value += directional_infonce(&text, &audio, cfg.tau, norm, &mut gt, &mut ga)?;
        for (cache, g) in text.caches.iter().zip(&gt) {
            params.backward_text(cache, g, &mut grad);
        }
    }
    for (cache, g) in audio.caches.iter().zip(&ga) {
        params.backward_audio(cache, g, &mut grad);
    }
    finalize(params, norm * value, grad, "kcl_loss")
}

/// CACL: audio / English / random-other-language triplets, three
/// pairwise symmetric InfoNCE components, normalized by 1/(6N).
pub fn cacl_loss(
    params: &EncoderParams,
    corpus: &Corpus,
    batch: &[usize],
    plan: &EpochLanguagePlan,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if corpus.n_languages() < 2 {
        return Err(Error::InvalidConfig("cacl_loss requires K >= 2".into()));
    }
    if plan.mode != PlanMode::Cacl {
        return Err(Error::InvalidPlan("cacl_loss needs a cacl-mode plan".into()));
    }
    plan.check(batch.len(), corpus.n_languages())?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n = batch.len() as f64;
    let norm = 1.0 / (6.0 * n);
    let audio = encode_audio_batch(params, corpus, batch)?;
    let english = encode_text_batch(params, corpus, batch.iter().map(|&i| (i, 0)))?;
    let other = encode_text_batch(
        params,
        corpus,
        batch.iter().zip(&plan.q).map(|(&i, &k)| (i, k)),
    )?;
    let mut ga = zero_embedding_grads(&audio);
    let mut ge = zero_embedding_grads(&english);
    let mut go = zero_embedding_grads(&other);
    let mut value = 0.0;
    // Audio-English alignment
    value += directional_infonce(&audio, &english, cfg.tau, norm, &mut ga, &mut ge)?;
    value += directional_infonce(&english, &audio, cfg.tau, norm, &mut ge, &mut ga)?;
    // Audio-multilingual alignment
    value += directional_infonce(&audio, &other, cfg.tau, norm, &mut ga, &mut go)?;
    value += directional_infonce(&other, &audio, cfg.tau, norm, &mut go, &mut ga)?;
    // English-multilingual alignment (gradient flows only through phi)
    value += directional_infonce(&english, &other, cfg.tau, norm, &mut ge, &mut go)?;
    value += directional_infonce(&other, &english, cfg.tau, norm, &mut go, &mut ge)?;
    let mut grad = vec![0.0; params.flatten().len()];
    for (cache, g) in audio.caches.iter().zip(&ga) {
        params.backward_audio(cache, g, &mut grad);
    }
    for (cache, g) in english.caches.iter().zip(&ge) {
        params.backward_text(cache, g, &mut grad);
    }
    for (cache, g) in other.caches.iter().zip(&go) {
        params.backward_text(cache, g, &mut grad);
    }
    finalize(params, norm * value, grad, "cacl_loss")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    MlClap,
    Kcl,
    Cacl,
}

impl LossKind {
    pub fn needs_plan(self) -> bool {
        !matches!(self, LossKind::Kcl)
    }
}

/// Dispatch over the three objectives; `plan` is ignored for KCL.
pub fn eval_loss(
    kind: LossKind,
    params: &EncoderParams,
    corpus: &Corpus,
    batch: &[usize],
    plan: Option<&EpochLanguagePlan>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    match kind {
        LossKind::Kcl => kcl_loss(params, corpus, batch, cfg),
        LossKind::MlClap => {
            let plan = plan.ok_or_else(|| Error::InvalidPlan("mlclap needs a plan".into()))?;
            mlclap_loss(params, corpus, batch, plan, cfg)
        }
        LossKind::Cacl => {
            let plan = plan.ok_or_else(|| Error::InvalidPlan("cacl needs a plan".into()))?;
            cacl_loss(params, corpus, batch, plan, cfg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub n_coordinates: usize,
}

/// Compare the analytic gradient against central finite differences,
/// coordinate by coordinate. Relative error uses
/// max(|analytic|, |numeric|, 1e-8) as denominator.
pub fn grad_check(
    kind: LossKind,
    params: &EncoderParams,
    corpus: &Corpus,
    batch: &[usize],
    plan: Option<&EpochLanguagePlan>,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be > 0".into()));
    }
    let analytic = eval_loss(kind, params, corpus, batch, plan, cfg)?;
    let arch = *params.arch();
    let base = params.flatten().to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for j in 0..base.len() {
        let mut wp = base.clone();
        wp[j] += epsilon;
        let mut wm = base.clone();
        wm[j] -= epsilon;
        let vp = eval_loss(
            kind,
            &EncoderParams::unflatten(arch, wp)?,
            corpus,
            batch,
            plan,
            cfg,
        )?
        .value;
        let vm = eval_loss(
            kind,
            &EncoderParams::unflatten(arch, wm)?,
            corpus,
            batch,
            plan,
            cfg,
        )?
        .value;
        let numeric = (vp - vm) / (2.0 * epsilon);
        let a = analytic.grad[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = j;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_coordinate: worst,
        n_coordinates: base.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusConfig};
    use crate::encoders::{init_params, Arch};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize, k: usize, seed: u64) -> Corpus {
        generate_corpus(&CorpusConfig {
            n_instances: n,
            n_languages: k,
            d_latent: 3,
            d_audio: 5,
            d_text: 4,
            audio_noise_sigma: 0.1,
            per_language_noise_sigma: vec![0.1; k],
            language_offset_scale: 0.4,
            seed,
        })
        .unwrap()
    }

    fn arch() -> Arch {
        Arch {
            d_audio: 5,
            d_text: 4,
            d_embed: 4,
            hidden: None,
        }
    }

    /// Corpus whose every feature vector is the same, so all embeddings
    /// coincide for any parameters.
    fn uniform_corpus(n: usize, k: usize) -> Corpus {
        Corpus {
            audio_features: vec![vec![0.3, -0.2, 0.5, 0.1, 0.7]; n],
            text_features: vec![vec![vec![0.4, 0.2, -0.6, 0.9]; k]; n],
            language_names: (0..k).map(|i| format!("l{i}")).collect(),
            splits: vec![crate::datagen::Split::Train; n],
        }
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn infonce_pair_single_element_is_zero() {
        let u = vec![emb(&[1.0, 2.0])];
        let v = vec![emb(&[0.5, -1.0])];
        let val = infonce_pair_loss(&u, &v, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(val, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn infonce_pair_identical_lists_give_2n_ln_n() {
        let n = 5;
        let u = vec![emb(&[1.0, 1.0]); n];
        let v = vec![emb(&[2.0, 0.5]); n];
        let val = infonce_pair_loss(&u, &v, &LossConfig { tau: 0.3 }).unwrap();
        assert_abs_diff_eq!(val, 2.0 * n as f64 * (n as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn infonce_pair_hand_set_similarity_matrix() {
        // u1=v1=(1,0), u2=v2=(0,1) gives S = [[1,0],[0,1]]; tau = 1.
        let u = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        let val = infonce_pair_loss(&u, &u, &LossConfig { tau: 1.0 }).unwrap();
        // Direct softmax oracle: each of 4 rows contributes -log(e/(e+1)).
        let per_row = -((1f64.exp()) / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(val, 4.0 * per_row, epsilon = 1e-12);
    }

    #[test]
    fn mlclap_single_instance_zero_loss_and_grad() {
        let corpus = corpus(2, 2, 1);
        let params = init_params(3, arch()).unwrap();
        let plan = EpochLanguagePlan::fixed(vec![1], PlanMode::Baseline, 2).unwrap();
        let out = mlclap_loss(&params, &corpus, &[0], &plan, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.value, 0.0, epsilon = 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn kcl_equals_mlclap_for_single_language() {
        let corpus = corpus(5, 1, 2);
        let params = init_params(4, arch()).unwrap();
        let cfg = LossConfig::default();
        let batch: Vec<usize> = (0..5).collect();
        let plan = EpochLanguagePlan::fixed(vec![0; 5], PlanMode::Baseline, 1).unwrap();
        let a = kcl_loss(&params, &corpus, &batch, &cfg).unwrap();
        let b = mlclap_loss(&params, &corpus, &batch, &plan, &cfg).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_case_values_are_ln_n() {
        let n = 4;
        let params = init_params(5, arch()).unwrap();
        let cfg = LossConfig::default();
        let batch: Vec<usize> = (0..n).collect();

        let c2 = uniform_corpus(n, 2);
        let kcl = kcl_loss(&params, &c2, &batch, &cfg).unwrap();
        assert_abs_diff_eq!(kcl.value, (n as f64).ln(), epsilon = 1e-9);

        let plan = EpochLanguagePlan::fixed(vec![1; n], PlanMode::Cacl, 2).unwrap();
        let cacl = cacl_loss(&params, &c2, &batch, &plan, &cfg).unwrap();
        assert_abs_diff_eq!(cacl.value, (n as f64).ln(), epsilon = 1e-9);

        let bplan = EpochLanguagePlan::fixed(vec![0; n], PlanMode::Baseline, 2).unwrap();
        let ml = mlclap_loss(&params, &c2, &batch, &bplan, &cfg).unwrap();
        assert_abs_diff_eq!(ml.value, (n as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn kcl_uniform_n2_k2_is_ln_2() {
        let params = init_params(6, arch()).unwrap();
        let c = uniform_corpus(2, 2);
        let out = kcl_loss(&params, &c, &[0, 1], &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.value, 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn cacl_single_instance_zero() {
        let corpus = corpus(2, 3, 3);
        let params = init_params(7, arch()).unwrap();
        let plan = EpochLanguagePlan::fixed(vec![2], PlanMode::Cacl, 3).unwrap();
        let out = cacl_loss(&params, &corpus, &[0], &plan, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(out.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cacl_rejects_k1() {
        let corpus = corpus(3, 1, 3);
        let params = init_params(7, arch()).unwrap();
        let plan = EpochLanguagePlan {
            q: vec![0; 3],
            mode: PlanMode::Cacl,
        };
        assert!(cacl_loss(&params, &corpus, &[0, 1, 2], &plan, &LossConfig::default()).is_err());
    }

    #[test]
    fn plan_batch_mismatch_rejected() {
        let corpus = corpus(4, 2, 5);
        let params = init_params(1, arch()).unwrap();
        let plan = EpochLanguagePlan::fixed(vec![0, 1], PlanMode::Baseline, 2).unwrap();
        assert!(matches!(
            mlclap_loss(&params, &corpus, &[0, 1, 2], &plan, &LossConfig::default()),
            Err(Error::InvalidPlan(_))
        ));
    }

    #[test]
    fn losses_nonnegative_and_permutation_equivariant() {
        let corpus = corpus(6, 3, 9);
        let params = init_params(8, arch()).unwrap();
        let cfg = LossConfig::default();
        let batch: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = EpochLanguagePlan::baseline(&mut rng, 6, 3).unwrap();

        let base = mlclap_loss(&params, &corpus, &batch, &plan, &cfg).unwrap();
        let kcl = kcl_loss(&params, &corpus, &batch, &cfg).unwrap();
        assert!(base.value >= 0.0 && kcl.value >= 0.0);

        // Permute instances and the plan consistently.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pbatch: Vec<usize> = perm.iter().map(|&p| batch[p]).collect();
        let pplan = EpochLanguagePlan::fixed(
            perm.iter().map(|&p| plan.q[p]).collect(),
            PlanMode::Baseline,
            3,
        )
        .unwrap();
        let permuted = mlclap_loss(&params, &corpus, &pbatch, &pplan, &cfg).unwrap();
        assert_abs_diff_eq!(base.value, permuted.value, epsilon = 1e-10);
        let kcl_p = kcl_loss(&params, &corpus, &pbatch, &cfg).unwrap();
        assert_abs_diff_eq!(kcl.value, kcl_p.value, epsilon = 1e-10);
    }

    #[test]
    fn grad_check_sanity_on_quadratic() {
        // Central differences on f(w) = 0.5 * sum w^2 recover w itself.
        let w: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.4).collect();
        let f = |w: &[f64]| 0.5 * w.iter().map(|x| x * x).sum::<f64>();
        let eps = 1e-5;
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm = w.clone();
            wm[j] -= eps;
            let numeric = (f(&wp) - f(&wm)) / (2.0 * eps);
            let rel = (numeric - w[j]).abs() / numeric.abs().max(w[j].abs()).max(1e-8);
            assert!(rel < 1e-8, "coord {j}: rel {rel}");
        }
    }

    #[test]
    fn grad_check_kcl_small_batch() {
        let corpus = corpus(4, 3, 21);
        let params = init_params(22, arch()).unwrap();
        let report = grad_check(
            LossKind::Kcl,
            &params,
            &corpus,
            &[0, 1, 2, 3],
            None,
            &LossConfig::default(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_cacl_small_batch() {
        let corpus = corpus(4, 4, 23);
        let params = init_params(24, arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = EpochLanguagePlan::cacl(&mut rng, 4, 4).unwrap();
        let report = grad_check(
            LossKind::Cacl,
            &params,
            &corpus,
            &[0, 1, 2, 3],
            Some(&plan),
            &LossConfig::default(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_mlclap_small_batch() {
        let corpus = corpus(4, 3, 25);
        let params = init_params(26, arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = EpochLanguagePlan::baseline(&mut rng, 4, 3).unwrap();
        let report = grad_check(
            LossKind::MlClap,
            &params,
            &corpus,
            &[0, 1, 2, 3],
            Some(&plan),
            &LossConfig::default(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn grad_check_with_hidden_layer() {
        let deep = Arch {
            hidden: Some(6),
            ..arch()
        };
        let corpus = corpus(3, 2, 31);
        let params = init_params(32, deep).unwrap();
        let report = grad_check(
            LossKind::Kcl,
            &params,
            &corpus,
            &[0, 1, 2],
            None,
            &LossConfig::default(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
