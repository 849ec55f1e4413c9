//! Fixed costs of product development, positioning-FOC slope estimation,
//! and revealed-profit entry bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::{compute_shares, DemandParams, MarketSnapshot};
use crate::error::{Error, Result};
use crate::estimation::linear::{ols, tsls, wald_zero_test, CovKind, WaldTest};
use crate::supply::{CostParams, EntryBound, NuDraw, OwnershipMap, PricingSettings};

/// Fixed cost of developing a candidate product at reduced coordinates
/// `candidate`, given incumbent reduced coordinates:
/// intercept shock + per-dimension level terms + distance polynomial sums.
pub fn fixed_cost(
    candidate: &[f64],
    incumbents: &[&[f64]],
    cost: &CostParams,
    nu: &NuDraw,
) -> Result<f64> {
    let k = cost.k();
    if candidate.len() != k {
        return Err(Error::dim("fixed cost candidate", k, candidate.len()));
    }
    if nu.slopes.len() != k {
        return Err(Error::dim("fixed cost shocks", k, nu.slopes.len()));
    }
    let mut total = nu.intercept;
    for l in 0..k {
        total += (cost.eta0[l] + nu.slopes[l]) * candidate[l];
        let (e1, e2, e3) = (cost.eta1[l], cost.eta2[l], cost.eta3[l]);
        for inc in incumbents {
            let d = (candidate[l] - inc[l]).abs();
            total += e1 * d + e2 * d * d + e3 * d * d * d;
        }
    }
    Ok(total)
}

/// Gradient regressors of the fixed-cost function for one dimension:
/// `(sum sign, sum 2 d sign, sum 3 d^2 sign)` with `sign(0) = 0`.
///
/// The cost gradient in dimension `l` is
/// `eta0 + nu + eta1 * g1 + eta2 * g2 + eta3 * g3` in these terms.
pub fn fixed_cost_gradient_regressors(
    candidate: &[f64],
    incumbents: &[&[f64]],
    l: usize,
) -> [f64; 3] {
    let mut g = [0.0; 3];
    for inc in incumbents {
        let diff = candidate[l] - inc[l];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let d = diff.abs();
        g[0] += sign;
        g[1] += 2.0 * d * sign;
        g[2] += 3.0 * d * d * sign;
    }
    g
}

/// Expected marginal variable profit of the firm owning product `k` with
/// respect to each embedding coordinate of `k`, by forward differences of
/// the share function with prices held fixed.
///
/// `markets` are the country markets of one period; `shock_draws[s]` holds
/// one demand-shock value per market for draw `s`.
pub fn expected_marginal_profit(
    k: u64,
    markets: &[MarketSnapshot],
    params: &DemandParams,
    shock_draws: &[Vec<f64>],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("step h must be positive".into()));
    }
    if shock_draws.is_empty() {
        return Err(Error::InvalidParameter("need at least one shock draw".into()));
    }
    let dim = params.k();
    let m_total: f64 = markets.iter().map(|m| m.market_size).sum();
    let mut acc = vec![0.0; dim];

    for draws in shock_draws {
        if draws.len() != markets.len() {
            return Err(Error::dim("shock draw vector", markets.len(), draws.len()));
        }
        for (market, &xi) in markets.iter().zip(draws) {
            let idx = market
                .product_index(k)
                .ok_or(Error::UnknownProduct(k))?;
            let firm = market.products[idx].firm_id;
            let mut base = market.clone();
            base.products[idx].xi = xi;
            let s0 = compute_shares(&base, params)?;
            let weight = market.market_size / m_total;
            for l in 0..dim {
                let mut bumped = base.clone();
                bumped.products[idx].x_emb_reduced.values[l] += h;
                let s1 = compute_shares(&bumped, params)?;
                let mut term = 0.0;
                for (j, p) in market.products.iter().enumerate() {
                    if p.firm_id != firm {
                        continue;
                    }
                    let mc = p.mc.ok_or_else(|| {
                        Error::InvalidParameter(format!("product {} has no marginal cost", p.id))
                    })?;
                    let ds = (s1.shares[j] - s0.shares[j]) / h;
                    if !ds.is_finite() {
                        return Err(Error::NonFinite("share forward difference"));
                    }
                    if (s1.shares[j] - s0.shares[j]).abs() > 0.5 {
                        eprintln!(
                            "warning: step h={h} moves share of product {} by more than 0.5; \
                             consider a smaller step",
                            p.id
                        );
                    }
                    term += (p.price - mc) * ds * market.market_size;
                }
                acc[l] += weight * term;
            }
        }
    }
    let n = shock_draws.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// One entrant's observation for the slope regression: per-dimension
/// marginal-profit components, gradient regressors, and instruments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntrantObservation {
    pub entrant_id: u64,
    /// Expected marginal variable profit per embedding dimension.
    pub marginal_profit: Vec<f64>,
    /// Per dimension: (sum sign, sum 2 d sign, sum 3 d^2 sign).
    pub gradient_regressors: Vec<[f64; 3]>,
    /// Per dimension: instruments for the distance regressors.
    pub instruments: Vec<Vec<f64>>,
}

/// Builds the slope-regression observation for one entrant: forward-difference
/// marginal profits plus gradient regressors and instruments computed against
/// the incumbents present in the entry-period snapshot.
pub fn build_entrant_observation(
    entrant_id: u64,
    markets: &[MarketSnapshot],
    params: &DemandParams,
    shock_draws: &[Vec<f64>],
    h: f64,
    sds: &[f64],
) -> Result<EntrantObservation> {
    let marginal_profit = expected_marginal_profit(entrant_id, markets, params, shock_draws, h)?;
    let reference = &markets[0];
    let idx = reference
        .product_index(entrant_id)
        .ok_or(Error::UnknownProduct(entrant_id))?;
    let candidate = reference.products[idx].x_emb_reduced.values.clone();
    let incumbents: Vec<&[f64]> = reference
        .products
        .iter()
        .filter(|p| p.id != entrant_id)
        .map(|p| p.x_emb_reduced.values.as_slice())
        .collect();
    let k = params.k();
    let gradient_regressors: Vec<[f64; 3]> = (0..k)
        .map(|l| fixed_cost_gradient_regressors(&candidate, &incumbents, l))
        .collect();
    let instruments = (0..k)
        .map(|l| entrant_instruments(&incumbents, l, sds))
        .collect();
    Ok(EntrantObservation {
        entrant_id,
        marginal_profit,
        gradient_regressors,
        instruments,
    })
}

/// Instruments for dimension `l`: sums of incumbent coordinates, their
/// squares and cubes, plus counts of local incumbents in the other
/// dimensions (within half a standard deviation).
pub(crate) fn entrant_instruments(incumbents: &[&[f64]], l: usize, sds: &[f64]) -> Vec<f64> {
    let k = sds.len();
    let mut iv = Vec::with_capacity(3 + k - 1);
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for inc in incumbents {
        s1 += inc[l];
        s2 += inc[l] * inc[l];
        s3 += inc[l] * inc[l] * inc[l];
    }
    iv.extend([s1, s2, s3]);
    for lp in 0..k {
        if lp == l {
            continue;
        }
        // Local incumbents along the other dimension, relative to the mean
        // incumbent coordinate.
        let mean: f64 = incumbents.iter().map(|inc| inc[lp]).sum::<f64>()
            / incumbents.len().max(1) as f64;
        let count = incumbents
            .iter()
            .filter(|inc| (inc[lp] - mean).abs() < 0.5 * sds[lp])
            .count();
        iv.push(count as f64);
    }
    iv
}

/// Estimation mode for the cost-slope regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeMode {
    Ols,
    Iv,
}

/// Slope estimates for one embedding dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionSlope {
    pub dimension: usize,
    /// (eta0, eta1, eta2, eta3).
    pub eta: [f64; 4],
    pub se: [f64; 4],
    pub wald_eta123: WaldTest,
    pub r_squared: f64,
    pub first_stage_f: Option<Vec<f64>>,
}

/// Cost-slope estimation output across dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSlopeResult {
    pub mode: SlopeMode,
    pub n_entrants: usize,
    pub dimensions: Vec<DimensionSlope>,
}

/// Regresses each dimension's marginal-profit component on the fixed-cost
/// gradient regressors, recovering the cost slopes; `Iv` mode instruments
/// the distance regressors with incumbent-side instruments.
pub fn estimate_cost_slopes(
    entrants: &[EntrantObservation],
    mode: SlopeMode,
) -> Result<CostSlopeResult> {
    let n = entrants.len();
    if n < 5 {
        return Err(Error::InvalidParameter(format!(
            "{n} entrants cannot identify four slope coefficients"
        )));
    }
    let k = entrants[0].marginal_profit.len();
    let mut dimensions = Vec::with_capacity(k);
    for l in 0..k {
        let y = DVector::from_iterator(n, entrants.iter().map(|e| e.marginal_profit[l]));
        let mut grad = DMatrix::zeros(n, 3);
        for (i, e) in entrants.iter().enumerate() {
            for c in 0..3 {
                grad[(i, c)] = e.gradient_regressors[l][c];
            }
        }
        let names = ["eta0", "eta1", "eta2", "eta3"];
        let dim = match mode {
            SlopeMode::Ols => {
                let mut x = DMatrix::zeros(n, 4);
                for i in 0..n {
                    x[(i, 0)] = 1.0;
                    for c in 0..3 {
                        x[(i, c + 1)] = grad[(i, c)];
                    }
                }
                let fit = ols(&x, &y, &CovKind::Robust, &names)?;
                let wald = wald_zero_test(&fit.coefficients, &fit.cov, &[1, 2, 3], n - 4)?;
                DimensionSlope {
                    dimension: l,
                    eta: [
                        fit.coefficients[0],
                        fit.coefficients[1],
                        fit.coefficients[2],
                        fit.coefficients[3],
                    ],
                    se: [fit.se[0], fit.se[1], fit.se[2], fit.se[3]],
                    wald_eta123: wald,
                    r_squared: fit.r_squared,
                    first_stage_f: None,
                }
            }
            SlopeMode::Iv => {
                let exog = DMatrix::from_element(n, 1, 1.0);
                let n_iv = entrants[0].instruments[l].len();
                let mut excluded = DMatrix::zeros(n, n_iv);
                for (i, e) in entrants.iter().enumerate() {
                    for c in 0..n_iv {
                        excluded[(i, c)] = e.instruments[l][c];
                    }
                }
                let names_iv = ["eta1", "eta2", "eta3", "eta0"];
                let fit = tsls(&y, &grad, &exog, &excluded, &CovKind::Robust, &names_iv)?;
                // tsls orders endogenous first: (eta1, eta2, eta3, eta0).
                let wald = wald_zero_test(&fit.coefficients, &fit.cov, &[0, 1, 2], n - 4)?;
                DimensionSlope {
                    dimension: l,
                    eta: [
                        fit.coefficients[3],
                        fit.coefficients[0],
                        fit.coefficients[1],
                        fit.coefficients[2],
                    ],
                    se: [fit.se[3], fit.se[0], fit.se[1], fit.se[2]],
                    wald_eta123: wald,
                    r_squared: fit.r_squared,
                    first_stage_f: Some(fit.first_stage_f.clone()),
                }
            }
        };
        dimensions.push(dim);
    }
    Ok(CostSlopeResult { mode, n_entrants: n, dimensions })
}

/// Revealed-profit upper bound on entrant `k`'s fixed cost: the average over
/// demand-shock draws of the firm's portfolio variable profit with `k`
/// present minus the profit with `k` removed, re-solving equilibrium prices
/// for every draw.
pub fn entry_bound(
    k: u64,
    markets: &[MarketSnapshot],
    params: &DemandParams,
    ownership: &OwnershipMap,
    xi_pool: &[f64],
    n_shocks: usize,
    seed: u64,
    pricing: &PricingSettings,
) -> Result<EntryBound> {
    use rand::Rng;
    if n_shocks == 0 {
        return Err(Error::InvalidParameter("n_shocks must be >= 1".into()));
    }
    if xi_pool.is_empty() {
        return Err(Error::InvalidParameter("empty demand-shock pool".into()));
    }
    let firm = ownership.firm_of(k).ok_or(Error::UnknownProduct(k))?;
    let mut rng = crate::rng::stream(seed, "supply.entry_bound", k);
    let mut total = 0.0;

    for draw in 0..n_shocks {
        let mut with_profit = 0.0;
        let mut without_profit = 0.0;
        for market in markets {
            let idx = market.product_index(k).ok_or(Error::UnknownProduct(k))?;
            let xi = xi_pool[rng.gen_range(0..xi_pool.len())];

            let mut with_m = market.clone();
            with_m.products[idx].xi = xi;
            let prices = equilibrium_with(&with_m, params, ownership, pricing, draw)?;
            for (p, price) in with_m.products.iter_mut().zip(&prices) {
                p.price = *price;
            }
            with_profit += crate::supply::variable_profit(&with_m, params, ownership, firm)?;

            let mut without_m = market.clone();
            without_m.products.remove(idx);
            let ownership_wo = prune_ownership(ownership, &without_m);
            let prices = equilibrium_with(&without_m, params, &ownership_wo, pricing, draw)?;
            for (p, price) in without_m.products.iter_mut().zip(&prices) {
                p.price = *price;
            }
            without_profit +=
                crate::supply::variable_profit(&without_m, params, &ownership_wo, firm)?;
        }
        total += with_profit - without_profit;
    }
    Ok(EntryBound {
        product_id: k,
        upper_bound: total / n_shocks as f64,
        n_shock_draws: n_shocks,
    })
}

fn equilibrium_with(
    market: &MarketSnapshot,
    params: &DemandParams,
    ownership: &OwnershipMap,
    pricing: &PricingSettings,
    draw: usize,
) -> Result<Vec<f64>> {
    crate::supply::equilibrium_prices(market, params, ownership, pricing)
        .map_err(|e| Error::ShockDraw { draw, source: Box::new(e) })
}

fn prune_ownership(ownership: &OwnershipMap, market: &MarketSnapshot) -> OwnershipMap {
    let map = market
        .products
        .iter()
        .filter_map(|p| ownership.firm_of(p.id).map(|f| (p.id, f)))
        .collect();
    OwnershipMap::new(map)
}
