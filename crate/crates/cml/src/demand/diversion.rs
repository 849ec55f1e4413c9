//! Diversion ratios and their aggregation along embedding distance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::demand::derivatives::{jacobian_delta_from_engine, outside_gradient_delta};
use crate::demand::shares::ShareEngine;
use crate::demand::{DemandParams, MarketSnapshot};
use crate::error::{Error, Result};
use crate::geometry::{distance_unchecked, nearest_k};

/// Sign convention for reported diversion ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiversionSign {
    /// Divide by the negated own derivative, so substitution reads positive.
    Positive,
    /// The unnegated ratio of derivatives, as the defining formula prints.
    PaperSign,
}

impl Default for DiversionSign {
    fn default() -> Self {
        DiversionSign::Positive
    }
}

/// Diversion ratio matrix: entry (j, k) is the fraction of demand lost by
/// `j` after its own price rise that is captured by `k`.
pub fn diversion_ratios(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    sign: DiversionSign,
) -> Result<DMatrix<f64>> {
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let jac = jacobian_delta_from_engine(&engine, &delta);
    let n = engine.n;
    let mut div = DMatrix::zeros(n, n);
    for j in 0..n {
        let own = jac[(j, j)];
        if own == 0.0 {
            return Err(Error::Degenerate("zero own-price derivative"));
        }
        for k in 0..n {
            if j == k {
                continue;
            }
            div[(j, k)] = match sign {
                DiversionSign::Positive => jac[(k, j)] / -own,
                DiversionSign::PaperSign => jac[(k, j)] / own,
            };
        }
    }
    Ok(div)
}

/// Long-run diversion from product `j`: remove it, recompute shares with the
/// identical draws, and report `(s_k_without_j - s_k) / s_j` per rival.
pub fn long_run_diversion(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    j: u64,
) -> Result<Vec<(u64, f64)>> {
    let idx = snapshot
        .product_index(j)
        .ok_or(Error::UnknownProduct(j))?;
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let base = engine.shares(&delta);

    let mut without = snapshot.clone();
    without.products.remove(idx);
    let engine_w = ShareEngine::from_snapshot(&without, params)?;
    let delta_w = ShareEngine::delta_from(&without, params);
    let removed_share = base.shares[idx];
    if !(removed_share > 0.0) {
        return Err(Error::ZeroShare(j));
    }
    let after = engine_w.shares(&delta_w);

    Ok(without
        .products
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let before = if i < idx { base.shares[i] } else { base.shares[i + 1] };
            (p.id, (after.shares[i] - before) / removed_share)
        })
        .collect())
}

/// One point of the diversion-versus-distance curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivCurvePoint {
    /// Lower edge of the distance band `[d, d + bin_width)`.
    pub d: f64,
    /// Average over focal products of the mean diversion to rivals in band.
    pub mean_div: f64,
    /// Number of (market, focal) pairs with at least one rival in band.
    pub n_focals: usize,
}

/// Aggregates diversion ratios over radial distance bands in the full
/// embedding space, averaged across markets. Bands where no focal product
/// has any rival are skipped rather than zero-filled.
pub fn aggregate_div_by_distance(
    markets: &[MarketSnapshot],
    params: &DemandParams,
    bin_width: f64,
) -> Result<Vec<DivCurvePoint>> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidParameter("bin_width must be positive".into()));
    }
    let n_bins = (1.0 / bin_width).round() as usize; // covers [0, 1)
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];

    for snapshot in markets {
        let div = diversion_ratios(snapshot, params, DiversionSign::Positive)?;
        let n = snapshot.products.len();
        for j in 0..n {
            let mut band_sum = vec![0.0; n_bins];
            let mut band_n = vec![0usize; n_bins];
            for k in 0..n {
                if j == k {
                    continue;
                }
                let d = distance_unchecked(
                    snapshot.products[j].x_emb_full.values(),
                    snapshot.products[k].x_emb_full.values(),
                );
                let bin = (d / bin_width).floor() as usize;
                if bin < n_bins {
                    band_sum[bin] += div[(j, k)];
                    band_n[bin] += 1;
                }
            }
            for b in 0..n_bins {
                if band_n[b] > 0 {
                    sums[b] += band_sum[b] / band_n[b] as f64;
                    counts[b] += 1;
                }
            }
        }
    }

    Ok((0..n_bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| DivCurvePoint {
            d: b as f64 * bin_width,
            mean_div: sums[b] / counts[b] as f64,
            n_focals: counts[b],
        })
        .collect())
}

/// Diversion to the outside good for one product, with distance covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutsideDiversionRow {
    pub product_id: u64,
    pub div_outside: f64,
    pub nearest_distance: Option<f64>,
    pub mean_distance_5: Option<f64>,
    pub mean_distance_10: Option<f64>,
}

/// Diversion to the outside good per product, paired with the distance to
/// the nearest rival and average distances to the 5 and 10 nearest.
pub fn diversion_to_outside(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
) -> Result<Vec<OutsideDiversionRow>> {
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let jac = jacobian_delta_from_engine(&engine, &delta);
    let outside = outside_gradient_delta(&engine, &delta);
    let points = snapshot.points_full();

    let mut rows = Vec::with_capacity(snapshot.products.len());
    for (j, p) in snapshot.products.iter().enumerate() {
        let own = jac[(j, j)];
        if own == 0.0 {
            return Err(Error::Degenerate("zero own-price derivative"));
        }
        let div0 = outside[j] / -own;
        let mean_of = |k: usize| -> Option<f64> {
            let nn = nearest_k(p.id, &points, k).ok()?;
            if nn.neighbors.is_empty() {
                None
            } else {
                Some(nn.neighbors.iter().map(|(_, d)| d).sum::<f64>() / nn.neighbors.len() as f64)
            }
        };
        rows.push(OutsideDiversionRow {
            product_id: p.id,
            div_outside: div0,
            nearest_distance: mean_of(1),
            mean_distance_5: mean_of(5),
            mean_distance_10: mean_of(10),
        });
    }
    Ok(rows)
}
