//! Principal-component reduction of the embedding space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Embedding, ReducedEmbedding};

/// Fitted PCA reducer: mean, top-K orthonormal directions, and the full
/// eigenvalue spectrum of the sample covariance (descending).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaReducer {
    pub mean: Vec<f64>,
    /// K orthonormal component rows, each of full dimension.
    pub components: Vec<Vec<f64>>,
    /// All eigenvalues sorted descending; the first K belong to `components`.
    pub eigenvalues: Vec<f64>,
}

impl PcaReducer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Share of total variance explained by the retained components.
    pub fn explained_variance_share(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().take(self.k()).sum::<f64>() / total
    }

    /// Projects an embedding onto the retained components after centering.
    pub fn reduce(&self, e: &Embedding) -> Result<ReducedEmbedding> {
        if e.dim() != self.dim() {
            return Err(Error::dim("pca reduce", self.dim(), e.dim()));
        }
        let centered: Vec<f64> = e
            .values()
            .iter()
            .zip(&self.mean)
            .map(|(v, m)| v - m)
            .collect();
        let values = self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect();
        Ok(ReducedEmbedding {
            values,
            explained_variance_share: self.explained_variance_share(),
        })
    }

    /// Maps reduced coordinates back into the full space (mean + span of
    /// the retained components).
    pub fn reconstruct(&self, reduced: &[f64]) -> Result<Vec<f64>> {
        if reduced.len() != self.k() {
            return Err(Error::dim("pca reconstruct", self.k(), reduced.len()));
        }
        let mut out = self.mean.clone();
        for (coef, comp) in reduced.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += coef * c;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits a K-component PCA reducer on an embedding corpus.
pub fn fit_pca(corpus: &[Embedding], k: usize) -> Result<PcaReducer> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if corpus.len() <= k {
        return Err(Error::InvalidParameter(format!(
            "corpus size {} must exceed K={k}",
            corpus.len()
        )));
    }
    let dim = corpus[0].dim();
    if k > dim {
        return Err(Error::dim("pca components", dim, k));
    }
    for e in corpus {
        if e.dim() != dim {
            return Err(Error::dim("pca corpus", dim, e.dim()));
        }
    }

    let n = corpus.len();
    let mut mean = DVector::zeros(dim);
    for e in corpus {
        mean += DVector::from_column_slice(e.values());
    }
    mean /= n as f64;

    let mut cov = DMatrix::zeros(dim, dim);
    for e in corpus {
        let centered = DVector::from_column_slice(e.values()) - &mean;
        cov.syger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    // syger fills the lower triangle; mirror it.
    for i in 0..dim {
        for j in (i + 1)..dim {
            cov[(i, j)] = cov[(j, i)];
        }
    }

    let total_var = cov.trace();
    if total_var <= f64::EPSILON {
        return Err(Error::Degenerate("zero-variance corpus"));
    }

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| eigen.eigenvalues[i].max(0.0))
        .collect();
    let mut components = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut comp: Vec<f64> = eigen.eigenvectors.column(i).iter().copied().collect();
        // Deterministic sign: make the largest-magnitude entry positive.
        let pivot = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if comp[pivot] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.push(comp);
    }

    Ok(PcaReducer {
        mean: mean.iter().copied().collect(),
        components,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::geometry::standard_normal;

    /// Independent O(d^3) eigendecomposition oracle: cyclic Jacobi sweeps on
    /// the sample covariance, kept free of the nalgebra path used above.
    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = c * aip - s * aiq;
                        a[i][q] = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let api = a[p][i];
                        let aqi = a[q][i];
                        a[p][i] = c * api - s * aqi;
                        a[q][i] = s * api + c * aqi;
                    }
                    for i in 0..n {
                        let vip = v[i][p];
                        let viq = v[i][q];
                        v[i][p] = c * vip - s * viq;
                        v[i][q] = s * vip + c * viq;
                    }
                }
            }
        }
        let eigvals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        (eigvals, v)
    }

    fn sample_cov(corpus: &[Embedding]) -> Vec<Vec<f64>> {
        let dim = corpus[0].dim();
        let n = corpus.len() as f64;
        let mut mean = vec![0.0; dim];
        for e in corpus {
            for (m, x) in mean.iter_mut().zip(e.values()) {
                *m += x / n;
            }
        }
        let mut cov = vec![vec![0.0; dim]; dim];
        for e in corpus {
            let c: Vec<f64> = e.values().iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] += c[i] * c[j] / (n - 1.0);
                }
            }
        }
        cov
    }

    fn random_corpus(n: usize, dim: usize, spread: f64, seed: u64) -> Vec<Embedding> {
        let mut rng = crate::rng::stream(seed, "test.pca", 0);
        (0..n)
            .map(|_| {
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                for x in v.iter_mut().skip(0) {
                    *x += spread * standard_normal(&mut rng);
                }
                Embedding::normalized(v).unwrap()
            })
            .collect()
    }

    #[test]
    fn rank_one_data_is_fully_explained_by_one_component() {
        // Points on one line through the mean (pre-normalization geometry is
        // irrelevant here: feed raw unit vectors along a great-circle arc).
        let base = Embedding::normalized(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let dir = [0.0, 1.0, 0.0, 0.0];
        let corpus: Vec<Embedding> = (0..12)
            .map(|i| {
                let t = (i as f64 - 5.5) * 0.05;
                let v: Vec<f64> = base
                    .values()
                    .iter()
                    .zip(&dir)
                    .map(|(b, d)| b + t * d)
                    .collect();
                // Keep the raw affine structure: wrap without renormalizing so
                // the data stays exactly rank one around its mean.
                Embedding::new_unchecked(v)
            })
            .collect();
        let reducer = fit_pca(&corpus, 1).unwrap();
        assert_relative_eq!(reducer.explained_variance_share(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn isotropic_cloud_explained_share_near_two_thirds() {
        let mut rng = crate::rng::stream(23, "test.pca.iso", 0);
        let corpus: Vec<Embedding> = (0..4000)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
                Embedding::new_unchecked(v)
            })
            .collect();
        let reducer = fit_pca(&corpus, 2).unwrap();
        let share = reducer.explained_variance_share();
        assert!(
            (share - 2.0 / 3.0).abs() < 0.03,
            "share {share} not near 2/3"
        );

        // Cross-check the full spectrum against the Jacobi oracle.
        let (mut oracle_vals, _) = jacobi_eigen(sample_cov(&corpus));
        oracle_vals.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in reducer.eigenvalues.iter().zip(&oracle_vals) {
            assert_relative_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn component_subspace_matches_jacobi_oracle() {
        let corpus = random_corpus(300, 8, 0.2, 31);
        let k = 3;
        let reducer = fit_pca(&corpus, k).unwrap();

        let (vals, vecs) = jacobi_eigen(sample_cov(&corpus));
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

        // Subspace agreement: each fitted component must lie in the span of
        // the oracle's top-k eigenvectors (principal angle < 1e-6).
        for comp in &reducer.components {
            let mut projected_norm_sq = 0.0;
            for &oi in order.iter().take(k) {
                let dot: f64 = comp.iter().enumerate().map(|(r, c)| c * vecs[r][oi]).sum();
                projected_norm_sq += dot * dot;
            }
            let angle = projected_norm_sq.min(1.0).sqrt().acos();
            assert!(angle < 1e-6, "principal angle {angle} too large");
        }
    }

    #[test]
    fn components_are_orthonormal_and_eigenvalues_sorted() {
        let corpus = random_corpus(200, 10, 0.3, 37);
        let reducer = fit_pca(&corpus, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = reducer.components[i]
                    .iter()
                    .zip(&reducer.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        for w in reducer.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn reduce_centers_and_projects() {
        let corpus = random_corpus(100, 6, 0.25, 41);
        let reducer = fit_pca(&corpus, 3).unwrap();

        let mean_emb = Embedding::new_unchecked(reducer.mean.clone());
        let at_mean = reducer.reduce(&mean_emb).unwrap();
        for v in &at_mean.values {
            assert!(v.abs() < 1e-10);
        }

        let shifted: Vec<f64> = reducer
            .mean
            .iter()
            .zip(&reducer.components[0])
            .map(|(m, c)| m + c)
            .collect();
        let r = reducer.reduce(&Embedding::new_unchecked(shifted)).unwrap();
        assert_relative_eq!(r.values[0], 1.0, epsilon = 1e-10);
        for v in &r.values[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn rank_k_data_round_trips_exactly() {
        // Data already in a K-dim affine subspace reconstructs exactly.
        let mut rng = crate::rng::stream(43, "test.pca.rank", 0);
        let k = 2;
        let dim = 7;
        let b1: Vec<f64> = (0..dim).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
        let b2: Vec<f64> = (0..dim).map(|i| if i == 2 { 1.0 } else { 0.0 }).collect();
        let corpus: Vec<Embedding> = (0..50)
            .map(|_| {
                let (a, b) = (standard_normal(&mut rng), standard_normal(&mut rng));
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                for i in 0..dim {
                    v[i] += 0.3 * a * b1[i] + 0.2 * b * b2[i];
                }
                Embedding::new_unchecked(v)
            })
            .collect();
        let reducer = fit_pca(&corpus, k).unwrap();
        for e in &corpus {
            let reduced = reducer.reduce(e).unwrap();
            let back = reducer.reconstruct(&reduced.values).unwrap();
            let resid: f64 = back
                .iter()
                .zip(e.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(resid < 1e-8, "reconstruction residual {resid}");
        }
    }

    #[test]
    fn reduction_distance_distortion_is_bounded() {
        // Squared distortion between full and reduced distances is bounded by
        // twice the discarded eigenvalue mass, on average over random pairs.
        let corpus = random_corpus(300, 12, 0.25, 47);
        let k = 4;
        let reducer = fit_pca(&corpus, k).unwrap();
        let tail: f64 = reducer.eigenvalues.iter().skip(k).sum();

        let reduced: Vec<Vec<f64>> = corpus
            .iter()
            .map(|e| reducer.reduce(e).unwrap().values)
            .collect();
        let mut rng = crate::rng::stream(49, "test.pca.pairs", 0);
        let mut mean_distortion = 0.0;
        let n_pairs = 100;
        for _ in 0..n_pairs {
            let i = rng.gen_range(0..corpus.len());
            let j = rng.gen_range(0..corpus.len());
            let full = crate::geometry::distance_unchecked(corpus[i].values(), corpus[j].values());
            let red = crate::geometry::distance_unchecked(&reduced[i], &reduced[j]);
            // Projection never expands distances.
            assert!(red <= full + 1e-12);
            mean_distortion += full * full - red * red;
        }
        mean_distortion /= n_pairs as f64;
        assert!(
            mean_distortion <= 2.0 * 2.0 * tail + 1e-9,
            "mean squared distortion {mean_distortion} above tail bound {}",
            2.0 * 2.0 * tail
        );
    }

    #[test]
    fn degenerate_corpus_errors() {
        let corpus: Vec<Embedding> =
            (0..5).map(|_| Embedding::normalized(vec![1.0, 0.0]).unwrap()).collect();
        assert!(matches!(fit_pca(&corpus, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reducer_round_trips_through_json() {
        let corpus = random_corpus(50, 5, 0.2, 53);
        let reducer = fit_pca(&corpus, 2).unwrap();
        let text = reducer.to_json().unwrap();
        let back = PcaReducer::from_json(&text).unwrap();
        assert_eq!(reducer.mean, back.mean);
        assert_eq!(reducer.components, back.components);
        assert_eq!(reducer.eigenvalues, back.eigenvalues);
    }

    use rand::Rng;
}
