//! Geometry of the visual characteristics space.
//!
//! Products live on a unit hypersphere; Euclidean distance between their
//! characteristic vectors measures design similarity. This module holds the
//! vector types, distance kernels, radial competitor counts, nearest-neighbor
//! queries, and the perturbation-based generator of candidate locations.

mod pca;

pub use pca::{fit_pca, PcaReducer};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Unit-norm characteristic vector in the full embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

const UNIT_NORM_TOL: f64 = 1e-9;

impl Embedding {
    /// Wraps a vector that must already have unit L2 norm (within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Degenerate("empty embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding entries"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidParameter(format!(
                "embedding norm {norm} departs from 1 by more than {UNIT_NORM_TOL}"
            )));
        }
        Ok(Self { values })
    }

    /// Normalizes an arbitrary nonzero vector onto the unit sphere.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding entries"));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(Error::Degenerate("zero-norm embedding"));
        }
        let values = values.iter().map(|v| v / norm).collect();
        Ok(Self { values })
    }

    /// Wraps a vector without the unit-norm check.
    ///
    /// Only used when a caller explicitly opts out of renormalization
    /// (see [`PerturbOptions::renormalize`]).
    pub fn new_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Low-dimensional view of an embedding after PCA reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedEmbedding {
    pub values: Vec<f64>,
    /// Share of corpus variance captured by the reducer that produced this view.
    pub explained_variance_share: f64,
}

impl ReducedEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Number of rivals inside one radial ring around a focal product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialCount {
    pub product_id: u64,
    pub ring_lo: f64,
    pub ring_hi: f64,
    pub count: usize,
}

/// Borrowed (id, coordinates) view used by the distance kernels, so the
/// same code serves full and reduced spaces.
#[derive(Debug, Clone, Copy)]
pub struct ProductPoint<'a> {
    pub id: u64,
    pub coords: &'a [f64],
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("embedding distance", a.dim(), b.dim()));
    }
    Ok(distance_unchecked(a.values(), b.values()))
}

/// Distance kernel on raw coordinate slices; callers guarantee equal length.
#[inline]
pub fn distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Counts rivals of `focal` in each ring, with strict bounds on both ends:
/// a rival at exactly `lo` or `hi` falls in no ring.
pub fn radial_counts(
    focal: u64,
    points: &[ProductPoint<'_>],
    rings: &[(f64, f64)],
) -> Result<Vec<RadialCount>> {
    for &(lo, hi) in rings {
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "ring ({lo}, {hi}) must satisfy 0 <= lo < hi"
            )));
        }
    }
    let focal_point = points
        .iter()
        .find(|p| p.id == focal)
        .ok_or(Error::UnknownProduct(focal))?;

    let mut counts = vec![0usize; rings.len()];
    for p in points {
        if p.id == focal {
            continue;
        }
        let d = distance_unchecked(focal_point.coords, p.coords);
        for (r, &(lo, hi)) in rings.iter().enumerate() {
            if d > lo && d < hi {
                counts[r] += 1;
            }
        }
    }
    Ok(rings
        .iter()
        .zip(counts)
        .map(|(&(lo, hi), count)| RadialCount {
            product_id: focal,
            ring_lo: lo,
            ring_hi: hi,
            count,
        })
        .collect())
}

/// Nearest rivals of a focal product, ascending by distance.
#[derive(Debug, Clone)]
pub struct NearestNeighbors {
    /// `(product_id, distance)` pairs, ties broken by smaller id.
    pub neighbors: Vec<(u64, f64)>,
    /// True when fewer than `k` rivals existed and all were returned.
    pub truncated: bool,
}

/// Returns the `k` nearest rivals of `focal`; ties resolve to the smaller id.
pub fn nearest_k(focal: u64, points: &[ProductPoint<'_>], k: usize) -> Result<NearestNeighbors> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let focal_point = points
        .iter()
        .find(|p| p.id == focal)
        .ok_or(Error::UnknownProduct(focal))?;

    let mut dists: Vec<(u64, f64)> = points
        .iter()
        .filter(|p| p.id != focal)
        .map(|p| (p.id, distance_unchecked(focal_point.coords, p.coords)))
        .collect();
    dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let truncated = dists.len() < k;
    dists.truncate(k);
    Ok(NearestNeighbors {
        neighbors: dists,
        truncated,
    })
}

/// Options for [`perturb_locations`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbOptions {
    /// Project each perturbed vector back onto the unit sphere (default).
    pub renormalize: bool,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self { renormalize: true }
    }
}

/// Generates candidate locations by perturbing randomly sampled seed
/// embeddings with Gaussian noise.
///
/// Noise in dimension `l` has standard deviation `sd_l / sqrt(c)`, where
/// `sd_l` is the per-dimension sample standard deviation of the seed corpus
/// and `c` runs over `c_levels`. Output order is all draws for the first
/// level, then the second, and so on; deterministic given `rng_seed`.
pub fn perturb_locations(
    seeds: &[Embedding],
    c_levels: &[f64],
    n_per_level: usize,
    rng_seed: u64,
    options: &PerturbOptions,
) -> Result<Vec<Embedding>> {
    if seeds.is_empty() {
        return Err(Error::Degenerate("empty seed corpus"));
    }
    if c_levels.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::InvalidParameter("c_levels must be positive".into()));
    }
    let dim = seeds[0].dim();
    for s in seeds {
        if s.dim() != dim {
            return Err(Error::dim("seed embedding", dim, s.dim()));
        }
    }
    let sds = per_dimension_sd(seeds);

    let mut rng = rng::stream(rng_seed, "geometry.perturb", 0);
    let mut out = Vec::with_capacity(c_levels.len() * n_per_level);
    for &c in c_levels {
        let scale = 1.0 / c.sqrt();
        for _ in 0..n_per_level {
            let seed = &seeds[rng.gen_range(0..seeds.len())];
            let mut values: Vec<f64> = seed
                .values()
                .iter()
                .zip(sds.iter())
                .map(|(v, sd)| v + sd * scale * standard_normal(&mut rng))
                .collect();
            if options.renormalize {
                out.push(Embedding::normalized(values)?);
            } else {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("perturbed location"));
                }
                out.push(Embedding::new_unchecked(std::mem::take(&mut values)));
            }
        }
    }
    Ok(out)
}

/// Per-dimension sample standard deviations of an embedding corpus.
pub fn per_dimension_sd(corpus: &[Embedding]) -> Vec<f64> {
    let dim = corpus[0].dim();
    let n = corpus.len() as f64;
    let mut mean = vec![0.0; dim];
    for e in corpus {
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for e in corpus {
        for ((s, v), m) in var.iter_mut().zip(e.values()).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let denom = if corpus.len() > 1 { n - 1.0 } else { 1.0 };
    var.iter().map(|s| (s / denom).sqrt()).collect()
}

/// Draws one standard normal via inverse-CDF of a uniform draw.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    statrs::distribution::Normal::standard().inverse_cdf(u)
}

/// Minimum and maximum pairwise distance over a corpus.
pub fn pairwise_distance_range(corpus: &[Embedding]) -> Result<(f64, f64)> {
    if corpus.len() < 2 {
        return Err(Error::Degenerate("need at least two embeddings"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for i in 0..corpus.len() {
        for j in (i + 1)..corpus.len() {
            let d = distance_unchecked(corpus[i].values(), corpus[j].values());
            min = min.min(d);
            max = max.max(d);
        }
    }
    Ok((min, max))
}

/// Precomputed symmetric pairwise distances for one snapshot's products.
///
/// Built once per snapshot and passed explicitly; there is no global cache.
#[derive(Debug, Clone)]
pub struct DistanceCache {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    dist: Vec<f64>,
}

impl DistanceCache {
    pub fn compute(points: &[ProductPoint<'_>]) -> Self {
        let n = points.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = distance_unchecked(points[i].coords, points[j].coords);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let ids: Vec<u64> = points.iter().map(|p| p.id).collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { ids, index, dist }
    }

    pub fn get(&self, a: u64, b: u64) -> Option<f64> {
        let i = *self.index.get(&a)?;
        let j = *self.index.get(&b)?;
        Some(self.dist[i * self.ids.len() + j])
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}
