//! Dense vector primitives: cosine similarity, batched similarity
//! matrices, and numerically stable temperature-scaled log-softmax.

use crate::error::{Error, Result};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// An embedding in the shared audio-text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wrap a vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("embedding dim must be > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding construction".into()));
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row-major matrix of cosine similarities, queries x candidates.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity on raw slices. Errors on dim mismatch or a
/// zero-norm input; `index` in the error tells which side collapsed.
pub fn cosine_sim_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 {
        return Err(Error::ZeroNormEmbedding { index: 0 });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNormEmbedding { index: 1 });
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Cosine similarity of two embeddings, in [-1, 1].
pub fn cosine_sim(u: &Embedding, v: &Embedding) -> Result<f64> {
    cosine_sim_slices(u.as_slice(), v.as_slice())
}

/// Batched cosine similarity; entry (i, j) pairs query i with candidate j.
pub fn sim_matrix(queries: &[Embedding], candidates: &[Embedding]) -> Result<SimilarityMatrix> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::InvalidConfig(
            "sim_matrix requires nonempty query and candidate lists".into(),
        ));
    }
    let dim = queries[0].dim();
    for (idx, e) in queries.iter().chain(candidates.iter()).enumerate() {
        if e.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        if e.norm() == 0.0 {
            return Err(Error::ZeroNormEmbedding { index: idx });
        }
    }
    let mut data = Vec::with_capacity(queries.len() * candidates.len());
    for q in queries {
        for c in candidates {
            data.push(cosine_sim(q, c)?);
        }
    }
    Ok(SimilarityMatrix {
        rows: queries.len(),
        cols: candidates.len(),
        data,
    })
}

/// Log of softmax(scores / tau), computed with max subtraction so the
/// exponentials never overflow.
pub fn log_softmax_row(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("log_softmax_row input".into()));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = max
        + scaled
            .iter()
            .map(|s| (s - max).exp())
            .sum::<f64>()
            .ln();
    Ok(scaled.iter().map(|s| s - log_sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_self_similarity() {
        let u = emb(&[3.0, 4.0]);
        assert_abs_diff_eq!(cosine_sim(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_orthogonal() {
        let u = emb(&[1.0, 0.0]);
        let v = emb(&[0.0, 1.0]);
        assert_abs_diff_eq!(cosine_sim(&u, &v).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_hand_computed() {
        // <u,v> / (sqrt(2) * 1)
        let u = emb(&[1.0, 1.0]);
        let v = emb(&[1.0, 0.0]);
        assert_abs_diff_eq!(
            cosine_sim(&u, &v).unwrap(),
            1.0 / 2f64.sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let z = Embedding::new(vec![0.0, 0.0]).unwrap();
        let u = emb(&[1.0, 0.0]);
        assert!(matches!(
            cosine_sim(&z, &u),
            Err(Error::ZeroNormEmbedding { index: 0 })
        ));
        assert!(matches!(
            cosine_sim(&u, &z),
            Err(Error::ZeroNormEmbedding { index: 1 })
        ));
    }

    #[test]
    fn cosine_dim_mismatch() {
        let u = emb(&[1.0, 0.0]);
        let v = emb(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine_sim(&u, &v), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn sim_matrix_single() {
        let u = emb(&[0.5, 0.25]);
        let m = sim_matrix(&[u.clone()], &[u]).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert_abs_diff_eq!(m.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sim_matrix_orthonormal_identity() {
        let basis = vec![
            emb(&[1.0, 0.0, 0.0]),
            emb(&[0.0, 1.0, 0.0]),
            emb(&[0.0, 0.0, 1.0]),
        ];
        let m = sim_matrix(&basis, &basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(m.get(i, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sim_matrix_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            emb(&(0..5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let qs: Vec<_> = (0..4).map(|_| mk(&mut rng)).collect();
        let cs: Vec<_> = (0..4).map(|_| mk(&mut rng)).collect();
        let m = sim_matrix(&qs, &cs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), cosine_sim(&qs[i], &cs[j]).unwrap());
            }
        }
    }

    #[test]
    fn log_softmax_uniform() {
        for tau in [0.07, 1.0, 3.0] {
            let out = log_softmax_row(&[2.5, 2.5, 2.5, 2.5], tau).unwrap();
            for v in out {
                assert_abs_diff_eq!(v, -(4f64.ln()), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_singleton() {
        let out = log_softmax_row(&[42.0], 0.07).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_softmax_matches_high_precision_oracle() {
        // softmax((1,0)/0.07) written out with the ratio formed in one
        // expression; with max subtraction both routes agree to 1e-12.
        let out = log_softmax_row(&[1.0, 0.0], 0.07).unwrap();
        let r = (-1.0 / 0.07f64).exp(); // exp(0/tau - 1/tau)
        let expected0 = -(1.0 + r).ln();
        let expected1 = -1.0 / 0.07 - (1.0 + r).ln();
        assert_abs_diff_eq!(out[0], expected0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], expected1, epsilon = 1e-12);
    }

    #[test]
    fn log_softmax_rejects_bad_tau() {
        assert!(matches!(
            log_softmax_row(&[1.0], 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(matches!(
            log_softmax_row(&[1.0], -1.0),
            Err(Error::InvalidTemperature(_))
        ));
    }

    #[test]
    fn log_softmax_no_overflow_on_large_scores() {
        let out = log_softmax_row(&[1e4, 0.0], 0.07).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn exp_log_softmax_sums_to_one(
            scores in proptest::collection::vec(-50.0..50.0f64, 1..12),
            tau in 0.01..5.0f64,
        ) {
            let out = log_softmax_row(&scores, tau).unwrap();
            let sum: f64 = out.iter().map(|v| v.exp()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_softmax_shift_invariant(
            scores in proptest::collection::vec(-10.0..10.0f64, 1..10),
            shift in -5.0..5.0f64,
            tau in 0.05..2.0f64,
        ) {
            let a = log_softmax_row(&scores, tau).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = log_softmax_row(&shifted, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(0.1..2.0f64, 3),
            v in proptest::collection::vec(0.1..2.0f64, 3),
            alpha in 0.1..10.0f64,
            beta in 0.1..10.0f64,
        ) {
            let ue = emb(&u);
            let ve = emb(&v);
            let s = cosine_sim(&ue, &ve).unwrap();
            prop_assert!((s - cosine_sim(&ve, &ue).unwrap()).abs() < 1e-12);
            let ua = emb(&u.iter().map(|x| alpha * x).collect::<Vec<_>>());
            let vb = emb(&v.iter().map(|x| beta * x).collect::<Vec<_>>());
            prop_assert!((s - cosine_sim(&ua, &vb).unwrap()).abs() < 1e-12);
            prop_assert!(s >= -1.0 - 1e-9 && s <= 1.0 + 1e-9);
        }
    }
}
