//! Marginal-cost recovery and the markup-form pricing fixed point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::{DemandParams, MarketSnapshot, ShareEngine};
use crate::error::{Error, Result};
use crate::supply::OwnershipMap;

/// Settings for the pricing fixed point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricingSettings {
    /// Sup-norm tolerance on the price update.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Required sup-norm first-order-condition residual at the solution.
    pub foc_tolerance: f64,
}

impl Default for PricingSettings {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 10_000, foc_tolerance: 1e-8 }
    }
}

/// Dense firm/nest bookkeeping reused across pricing iterations.
struct PricingWorkspace {
    engine: ShareEngine,
    /// Mean utility with the price term removed.
    base_delta: Vec<f64>,
    firm_of: Vec<usize>,
    n_firms: usize,
}

impl PricingWorkspace {
    fn build(
        snapshot: &MarketSnapshot,
        params: &DemandParams,
        ownership: &OwnershipMap,
    ) -> Result<Self> {
        ownership.validate_for(snapshot)?;
        let engine = ShareEngine::from_snapshot(snapshot, params)?;
        let base_delta: Vec<f64> = snapshot
            .products
            .iter()
            .map(|p| crate::demand::mean_utility(p, params) - params.beta_price * p.price)
            .collect();
        let mut firm_ids: Vec<u64> = Vec::new();
        let mut firm_of = Vec::with_capacity(snapshot.products.len());
        for p in &snapshot.products {
            let fid = ownership.firm_of(p.id).ok_or(Error::UnknownProduct(p.id))?;
            let slot = match firm_ids.iter().position(|&f| f == fid) {
                Some(s) => s,
                None => {
                    firm_ids.push(fid);
                    firm_ids.len() - 1
                }
            };
            firm_of.push(slot);
        }
        Ok(Self { engine, base_delta, firm_of, n_firms: firm_ids.len() })
    }

    fn delta_at(&self, params: &DemandParams, prices: &[f64]) -> Vec<f64> {
        self.base_delta
            .iter()
            .zip(prices)
            .map(|(b, p)| b + params.beta_price * p)
            .collect()
    }

    /// Shares, the diagonal of the price Jacobian, and the ownership-masked
    /// cross-derivative product `(Omega .* Gamma') v`, all in one pass.
    fn pricing_terms(
        &self,
        params: &DemandParams,
        prices: &[f64],
        v: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.engine.n;
        let a = self.engine.a;
        let alpha = params.beta_price;
        let delta = self.delta_at(params, prices);
        let mut scratch = crate::demand::shares_scratch(&self.engine);
        let mut shares = vec![0.0; n];
        let mut lambda = vec![0.0; n];
        let mut gamma_v = vec![0.0; n];
        let mut firm_nest = vec![0.0; self.n_firms * self.engine.n_nests];
        let mut firm_total = vec![0.0; self.n_firms];

        let weights = self.engine.draws.weights().to_vec();
        for (i, &wt) in weights.iter().enumerate() {
            self.engine.draw_probs(&delta, i, &mut scratch);
            firm_nest.iter_mut().for_each(|x| *x = 0.0);
            firm_total.iter_mut().for_each(|x| *x = 0.0);
            let (s, w, nest_prob) = crate::demand::shares_views(&scratch);
            for j in 0..n {
                let f = self.firm_of[j];
                let g = self.engine.nest_of[j];
                let sv = s[j] * v[j];
                firm_nest[f * self.engine.n_nests + g] += sv;
                firm_total[f] += sv;
            }
            for k in 0..n {
                let f = self.firm_of[k];
                let g = self.engine.nest_of[k];
                shares[k] += wt * s[k];
                lambda[k] += wt * alpha * a * s[k];
                let same_nest = firm_nest[f * self.engine.n_nests + g];
                let w_term = w[k] * (a - 1.0 + nest_prob[g]) * same_nest;
                let cross_term = s[k] * (firm_total[f] - same_nest);
                gamma_v[k] += wt * alpha * (w_term + cross_term);
            }
        }
        (shares, lambda, gamma_v)
    }
}

/// First-order-condition residual of the pricing system at the given prices
/// and marginal costs, expressed per unit of market size.
pub fn foc_residual(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    ownership: &OwnershipMap,
    prices: &[f64],
    mc: &[f64],
) -> Result<Vec<f64>> {
    let ws = PricingWorkspace::build(snapshot, params, ownership)?;
    let v: Vec<f64> = prices.iter().zip(mc).map(|(p, c)| p - c).collect();
    let (shares, lambda, gamma_v) = ws.pricing_terms(params, prices, &v);
    Ok((0..prices.len())
        .map(|k| lambda[k] * v[k] - gamma_v[k] + shares[k])
        .collect())
}

/// Recovers marginal costs from observed prices via the multiproduct
/// first-order conditions: `mc = p + M^{-1} s` with `M` the ownership-masked
/// transposed share Jacobian.
pub fn recover_marginal_costs(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    ownership: &OwnershipMap,
) -> Result<Vec<f64>> {
    ownership.validate_for(snapshot)?;
    let n = snapshot.products.len();
    let jac = crate::demand::share_jacobian_prices(snapshot, params)?;
    let shares = crate::demand::compute_shares(snapshot, params)?;

    let mut masked = DMatrix::zeros(n, n);
    for k in 0..n {
        let fk = ownership.firm_of(snapshot.products[k].id).unwrap();
        for j in 0..n {
            if ownership.firm_of(snapshot.products[j].id).unwrap() == fk {
                masked[(k, j)] = jac[(j, k)];
            }
        }
    }
    let lu = masked.lu();
    let s = DVector::from_column_slice(&shares.shares);
    let correction = lu
        .solve(&s)
        .ok_or(Error::Singular("ownership-masked price Jacobian"))?;
    Ok(snapshot
        .products
        .iter()
        .zip(correction.iter())
        .map(|(p, c)| p.price + c)
        .collect())
}

/// Solves the Bertrand pricing system by the markup-form fixed point
/// `p <- mc + zeta(p)`, warm-started from the snapshot's current prices.
pub fn equilibrium_prices(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    ownership: &OwnershipMap,
    settings: &PricingSettings,
) -> Result<Vec<f64>> {
    if !(params.beta_price < 0.0) {
        return Err(Error::InvalidParameter("pricing requires beta_price < 0".into()));
    }
    let mc: Vec<f64> = snapshot
        .products
        .iter()
        .map(|p| {
            p.mc.ok_or_else(|| {
                Error::InvalidParameter(format!("product {} has no marginal cost", p.id))
            })
        })
        .collect::<Result<_>>()?;
    if snapshot.products.is_empty() {
        return Ok(Vec::new());
    }

    let ws = PricingWorkspace::build(snapshot, params, ownership)?;
    let mut prices: Vec<f64> = snapshot.products.iter().map(|p| p.price).collect();
    for _iter in 0..settings.max_iterations {
        let v: Vec<f64> = prices.iter().zip(&mc).map(|(p, c)| p - c).collect();
        let (shares, lambda, gamma_v) = ws.pricing_terms(params, &prices, &v);
        let mut step = 0.0_f64;
        for k in 0..prices.len() {
            let zeta = (gamma_v[k] - shares[k]) / lambda[k];
            let next = mc[k] + zeta;
            step = step.max((next - prices[k]).abs());
            prices[k] = next;
        }
        if step < settings.tolerance {
            break;
        }
    }
    // Verify the first-order conditions at the final point.
    let v: Vec<f64> = prices.iter().zip(&mc).map(|(p, c)| p - c).collect();
    let (shares, lambda, gamma_v) = ws.pricing_terms(params, &prices, &v);
    let mut residual = 0.0_f64;
    for k in 0..prices.len() {
        residual = residual.max((lambda[k] * v[k] - gamma_v[k] + shares[k]).abs());
    }
    if residual > settings.foc_tolerance {
        return Err(Error::NoConvergence {
            context: "pricing fixed point",
            iterations: settings.max_iterations,
            residual,
        });
    }
    Ok(prices)
}

/// Variable profit of one firm in one market: share x size x markup summed
/// over the firm's products.
pub fn variable_profit(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    ownership: &OwnershipMap,
    firm: u64,
) -> Result<f64> {
    ownership.validate_for(snapshot)?;
    let shares = crate::demand::compute_shares(snapshot, params)?;
    let mut total = 0.0;
    for (p, &s) in snapshot.products.iter().zip(&shares.shares) {
        if ownership.firm_of(p.id) != Some(firm) {
            continue;
        }
        let mc = p.mc.ok_or_else(|| {
            Error::InvalidParameter(format!("product {} has no marginal cost", p.id))
        })?;
        total += s * snapshot.market_size * (p.price - mc);
    }
    Ok(total)
}

/// Variable profit aggregated over country markets, each weighted by its own
/// market size.
pub fn variable_profit_multi(
    markets: &[MarketSnapshot],
    params: &DemandParams,
    ownership: &OwnershipMap,
    firm: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for m in markets {
        total += variable_profit(m, params, ownership, firm)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{compute_shares, testkit, ConsumerDraws};
    use approx::assert_relative_eq;

    fn logit_params(beta_price: f64) -> DemandParams {
        DemandParams {
            beta_price,
            beta_struct: vec![0.0],
            beta_img_mean: vec![0.0],
            beta_img_sd: vec![0.0],
            rho: 0.0,
        }
    }

    #[test]
    fn monopoly_markup_closed_form() {
        // Single-product logit: mc = p - 1 / (-beta (1 - s)).
        let params = logit_params(-0.5);
        let snap = testkit::snapshot(
            vec![testkit::product(1, 1, 0, 6.0, 1.0, vec![0.0])],
            testkit::degenerate_draws(1),
        );
        let ownership = OwnershipMap::from_snapshot(&snap);
        let s = compute_shares(&snap, &params).unwrap().shares[0];
        let mc = recover_marginal_costs(&snap, &params, &ownership).unwrap();
        let expected = 6.0 - 1.0 / (0.5 * (1.0 - s));
        assert_relative_eq!(mc[0], expected, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_duopoly_recovers_equal_costs() {
        let params = DemandParams {
            beta_price: -0.4,
            beta_struct: vec![0.1],
            beta_img_mean: vec![0.5],
            beta_img_sd: vec![0.6],
            rho: 0.3,
        };
        let snap = testkit::snapshot(
            vec![
                testkit::product(1, 1, 0, 3.0, 0.4, vec![0.2]),
                testkit::product(2, 2, 0, 3.0, 0.4, vec![0.2]),
            ],
            ConsumerDraws::halton_normal(64, 1, 3),
        );
        let ownership = OwnershipMap::from_snapshot(&snap);
        let mc = recover_marginal_costs(&snap, &params, &ownership).unwrap();
        assert_relative_eq!(mc[0], mc[1], epsilon = 1e-10);
    }

    #[test]
    fn monopoly_equilibrium_matches_bisection_oracle() {
        // Outside-dominant market: solve the scalar FOC by bisection and
        // compare with the fixed point.
        let params = logit_params(-0.2);
        let mut product = testkit::product(1, 1, 0, 6.0, -2.0, vec![0.0]);
        product.mc = Some(5.0);
        let snap = testkit::snapshot(vec![product], testkit::degenerate_draws(1));
        let ownership = OwnershipMap::from_snapshot(&snap);

        let share_at = |price: f64| {
            let mut s = snap.clone();
            s.products[0].price = price;
            compute_shares(&s, &params).unwrap().shares[0]
        };
        // FOC: ds/dp (p - mc) + s = 0, with ds/dp = beta s (1 - s).
        let foc = |p: f64| {
            let s = share_at(p);
            params.beta_price * s * (1.0 - s) * (p - 5.0) + s
        };
        let (mut lo, mut hi) = (5.0, 60.0);
        assert!(foc(lo) > 0.0 && foc(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if foc(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);

        let prices =
            equilibrium_prices(&snap, &params, &ownership, &PricingSettings::default()).unwrap();
        assert!(
            (prices[0] - oracle).abs() < 1e-8,
            "fixed point {} vs bisection {oracle}",
            prices[0]
        );
    }

    #[test]
    fn identical_single_product_firms_price_identically() {
        let params = DemandParams {
            beta_price: -0.3,
            beta_struct: vec![0.0],
            beta_img_mean: vec![0.4],
            beta_img_sd: vec![0.5],
            rho: 0.4,
        };
        let mut p1 = testkit::product(1, 1, 0, 4.0, 0.5, vec![0.3]);
        let mut p2 = testkit::product(2, 2, 0, 7.0, 0.5, vec![0.3]);
        p1.mc = Some(2.0);
        p2.mc = Some(2.0);
        let snap = testkit::snapshot(vec![p1, p2], ConsumerDraws::halton_normal(48, 1, 11));
        let ownership = OwnershipMap::from_snapshot(&snap);
        let prices =
            equilibrium_prices(&snap, &params, &ownership, &PricingSettings::default()).unwrap();
        assert_relative_eq!(prices[0], prices[1], epsilon = 1e-8);
    }

    #[test]
    fn merger_weakly_raises_both_prices() {
        let params = DemandParams {
            beta_price: -0.35,
            beta_struct: vec![0.0],
            beta_img_mean: vec![0.3],
            beta_img_sd: vec![0.4],
            rho: 0.2,
        };
        let mut p1 = testkit::product(1, 1, 0, 4.0, 0.6, vec![0.4]);
        let mut p2 = testkit::product(2, 2, 0, 4.0, 0.2, vec![0.5]);
        p1.mc = Some(2.0);
        p2.mc = Some(2.5);
        let snap = testkit::snapshot(vec![p1, p2], ConsumerDraws::halton_normal(48, 1, 13));
        let separate = OwnershipMap::from_snapshot(&snap);
        let mut merged = OwnershipMap::from_snapshot(&snap);
        merged.merge(&[1, 2], 1);

        let p_sep =
            equilibrium_prices(&snap, &params, &separate, &PricingSettings::default()).unwrap();
        let p_mrg =
            equilibrium_prices(&snap, &params, &merged, &PricingSettings::default()).unwrap();
        assert!(p_mrg[0] >= p_sep[0] - 1e-10);
        assert!(p_mrg[1] >= p_sep[1] - 1e-10);
        assert!(p_mrg[0] > p_sep[0] + 1e-4 || p_mrg[1] > p_sep[1] + 1e-4);
    }

    #[test]
    fn recovery_and_equilibrium_are_mutually_inverse() {
        let params = DemandParams {
            beta_price: -0.25,
            beta_struct: vec![0.2],
            beta_img_mean: vec![0.5, -0.3],
            beta_img_sd: vec![0.7, 0.2],
            rho: 0.45,
        };
        let draws = ConsumerDraws::halton_normal(64, 2, 17);
        let mut snap = testkit::snapshot(
            vec![
                testkit::product(1, 1, 0, 5.0, 0.5, vec![0.4, 0.1]),
                testkit::product(2, 1, 0, 6.0, 0.1, vec![0.2, 0.3]),
                testkit::product(3, 2, 1, 4.5, -0.2, vec![-0.1, 0.5]),
                testkit::product(4, 3, 1, 5.5, 0.3, vec![0.3, -0.2]),
            ],
            draws,
        );
        let ownership = OwnershipMap::from_snapshot(&snap);
        let mc = recover_marginal_costs(&snap, &params, &ownership).unwrap();
        let observed: Vec<f64> = snap.products.iter().map(|p| p.price).collect();
        for (p, m) in snap.products.iter_mut().zip(&mc) {
            p.mc = Some(*m);
        }
        // Perturb the starting point so convergence is not trivial.
        for p in snap.products.iter_mut() {
            p.price += 0.8;
        }
        let solved =
            equilibrium_prices(&snap, &params, &ownership, &PricingSettings::default()).unwrap();
        for (s, o) in solved.iter().zip(&observed) {
            assert!((s - o).abs() < 1e-6, "solved {s} vs observed {o}");
        }

        // The first-order conditions hold at the solution.
        let mut at_solution = snap.clone();
        for (p, s) in at_solution.products.iter_mut().zip(&solved) {
            p.price = *s;
        }
        let resid = foc_residual(&at_solution, &params, &ownership, &solved, &mc).unwrap();
        assert!(resid.iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn variable_profit_basics() {
        let params = logit_params(-0.5);
        let mut product = testkit::product(1, 1, 0, 3.0, 0.0, vec![0.0]);
        product.mc = Some(3.0);
        let snap = testkit::snapshot(vec![product], testkit::degenerate_draws(1));
        let ownership = OwnershipMap::from_snapshot(&snap);
        // Zero markup: zero profit.
        assert_relative_eq!(variable_profit(&snap, &params, &ownership, 1).unwrap(), 0.0);

        // share * M * markup arithmetic.
        let mut p2 = testkit::product(2, 2, 0, 2.0, 0.0, vec![0.0]);
        p2.mc = Some(0.0);
        let snap2 = testkit::snapshot(vec![p2], testkit::degenerate_draws(1));
        let ownership2 = OwnershipMap::from_snapshot(&snap2);
        let s = compute_shares(&snap2, &params).unwrap().shares[0];
        let vp = variable_profit(&snap2, &params, &ownership2, 2).unwrap();
        assert_relative_eq!(vp, s * 1000.0 * 2.0, epsilon = 1e-10);
    }

    #[test]
    fn firm_profits_partition_industry_profit() {
        let params = DemandParams {
            beta_price: -0.3,
            beta_struct: vec![0.1],
            beta_img_mean: vec![0.4],
            beta_img_sd: vec![0.3],
            rho: 0.25,
        };
        let mk = |id, firm, price, mc: f64, xi, x| {
            let mut p = testkit::product(id, firm, (id % 2) as u32, price, xi, vec![x]);
            p.mc = Some(mc);
            p
        };
        let snap = testkit::snapshot(
            vec![
                mk(1, 1, 4.0, 2.0, 0.3, 0.4),
                mk(2, 1, 5.0, 2.5, 0.1, 0.2),
                mk(3, 2, 4.5, 2.2, -0.1, -0.3),
            ],
            ConsumerDraws::halton_normal(32, 1, 19),
        );
        let ownership = OwnershipMap::from_snapshot(&snap);
        let by_firm: f64 = [1u64, 2]
            .iter()
            .map(|f| variable_profit(&snap, &params, &ownership, *f).unwrap())
            .sum();
        let shares = compute_shares(&snap, &params).unwrap();
        let by_product: f64 = snap
            .products
            .iter()
            .zip(&shares.shares)
            .map(|(p, s)| s * snap.market_size * (p.price - p.mc.unwrap()))
            .sum();
        assert_relative_eq!(by_firm, by_product, epsilon = 1e-10);
    }
}
