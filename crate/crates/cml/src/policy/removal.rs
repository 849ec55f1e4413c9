//! Infringer-removal and random-removal counterfactuals with the
//! consumer-surplus decomposition into price and variety channels.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::demand::{compute_shares, consumer_surplus, DemandParams, MarketSnapshot};
use crate::error::{Error, Result};
use crate::policy::{
    collect_products, find_infringers, CsDecomposition, PolicyConfig, ResponseMode, WelfareReport,
};
use crate::supply::{equilibrium_prices, OwnershipMap, PricingSettings};

/// Re-solves every market's prices and returns the repriced snapshots.
pub(crate) fn resolve_markets(
    markets: &[MarketSnapshot],
    params: &DemandParams,
    pricing: &PricingSettings,
) -> Result<Vec<MarketSnapshot>> {
    markets
        .par_iter()
        .map(|m| {
            let ownership = OwnershipMap::from_snapshot(m);
            let prices = equilibrium_prices(m, params, &ownership, pricing)?;
            let mut out = m.clone();
            for (p, price) in out.products.iter_mut().zip(&prices) {
                p.price = *price;
            }
            Ok(out)
        })
        .collect()
}

/// Aggregate consumer surplus over markets: per-consumer logsum value scaled
/// by each market's size.
pub(crate) fn aggregate_cs(
    markets: &[MarketSnapshot],
    params: &DemandParams,
    mode: crate::demand::SurplusMode,
) -> Result<f64> {
    let per: Vec<f64> = markets
        .par_iter()
        .map(|m| consumer_surplus(m, params, mode).map(|cs| cs * m.market_size))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum())
}

/// Aggregate producer surplus: share x size x markup summed over all
/// products and markets.
pub(crate) fn aggregate_ps(markets: &[MarketSnapshot], params: &DemandParams) -> Result<f64> {
    let per: Vec<f64> = markets
        .par_iter()
        .map(|m| {
            let shares = compute_shares(m, params)?;
            let mut total = 0.0;
            for (p, s) in m.products.iter().zip(&shares.shares) {
                let mc = p.mc.ok_or_else(|| {
                    Error::InvalidParameter(format!("product {} has no marginal cost", p.id))
                })?;
                total += s * m.market_size * (p.price - mc);
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum())
}

pub(crate) fn count_products_and_firms(markets: &[MarketSnapshot]) -> (usize, usize) {
    let mut products = std::collections::HashSet::new();
    let mut firms = std::collections::HashSet::new();
    for m in markets {
        for p in &m.products {
            products.insert(p.id);
            firms.insert(p.firm_id);
        }
    }
    (products.len(), firms.len())
}

fn drop_products(markets: &[MarketSnapshot], removed: &[u64]) -> Vec<MarketSnapshot> {
    let removed: std::collections::HashSet<u64> = removed.iter().copied().collect();
    markets
        .iter()
        .map(|m| {
            let mut out = m.clone();
            out.products.retain(|p| !removed.contains(&p.id));
            out
        })
        .collect()
}

/// Removal counterfactual: deletes infringers (or an equally sized uniform
/// random set of post-start entrants), re-solves equilibrium prices, and
/// reports welfare against the zero-radius baseline, with the CS loss
/// decomposed into variety and price channels.
pub fn run_removal(
    policy: &PolicyConfig,
    markets: &[MarketSnapshot],
    params: &DemandParams,
    ownership: &OwnershipMap,
    random_seed: u64,
) -> Result<WelfareReport> {
    policy.validate()?;
    for m in markets {
        ownership.validate_for(m)?;
    }
    let pricing = PricingSettings::default();

    let infringers = find_infringers(markets, policy.d_bar, policy.start_period, policy.distance_space);
    let removed: Vec<u64> = match policy.response_mode {
        ResponseMode::Remove => infringers,
        ResponseMode::RemoveRandom => {
            let entrants: Vec<u64> = collect_products(markets, policy.distance_space)
                .into_iter()
                .filter(|p| p.entry_period >= policy.start_period)
                .map(|p| p.id)
                .collect();
            let mut rng = crate::rng::stream(random_seed, "policy.random_removal", 0);
            let mut pool = entrants;
            pool.shuffle(&mut rng);
            pool.truncate(infringers.len());
            pool.sort_unstable();
            pool
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "run_removal expects a removal response mode, got {other:?}"
            )))
        }
    };

    // Baseline and counterfactual run through the identical path, so the
    // zero-radius policy reproduces the baseline bit for bit.
    let baseline = resolve_markets(markets, params, &pricing)?;
    let cs_base = aggregate_cs(&baseline, params, policy.surplus_mode)?;

    let stripped = drop_products(&baseline, &removed);
    // An empty removal set leaves the equilibrium untouched; reuse the
    // baseline verbatim so the zero-radius policy is exactly the identity.
    let counterfactual = if removed.is_empty() {
        baseline.clone()
    } else {
        resolve_markets(&stripped, params, &pricing)?
    };
    let cs_cf = aggregate_cs(&counterfactual, params, policy.surplus_mode)?;
    // Price-fixed surplus isolates the variety channel: the removed set is
    // gone but surviving prices stay at baseline levels.
    let cs_fixed_prices = aggregate_cs(&stripped, params, policy.surplus_mode)?;

    let ps = aggregate_ps(&counterfactual, params)?;
    let (n_products, n_firms) = count_products_and_firms(&counterfactual);

    let decomposition = CsDecomposition {
        variety_channel: cs_base - cs_fixed_prices,
        price_channel: cs_fixed_prices - cs_cf,
    };

    let mut metadata = WelfareReport::base_metadata(policy.surplus_mode);
    metadata.insert("mode".into(), format!("{:?}", policy.response_mode));
    metadata.insert("d_bar".into(), policy.d_bar.to_string());
    metadata.insert("n_removed".into(), removed.len().to_string());

    Ok(WelfareReport {
        cs_aggregate: cs_cf,
        cs_average: if n_products > 0 { cs_cf / n_products as f64 } else { 0.0 },
        ps_aggregate: ps,
        ps_average: if n_firms > 0 { ps / n_firms as f64 } else { 0.0 },
        sw_aggregate: ps + cs_cf,
        sw_average: if n_products > 0 { (ps + cs_cf) / n_products as f64 } else { 0.0 },
        n_entrants: 0,
        fixed_cost_total: 0.0,
        cs_decomposition: Some(decomposition),
        baseline_cs_aggregate: cs_base,
        n_products,
        n_firms,
        removed,
        flagged: Vec::new(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::testkit::small_market;
    use crate::policy::DistanceSpace;

    fn policy(d_bar: f64, mode: ResponseMode) -> PolicyConfig {
        PolicyConfig {
            d_bar,
            response_mode: mode,
            distance_space: DistanceSpace::Full,
            start_period: 1,
            surplus_mode: crate::demand::SurplusMode::Nested,
        }
    }

    #[test]
    fn zero_radius_changes_nothing_exactly() {
        let data = small_market(3);
        let ownership = OwnershipMap::from_snapshot(data.markets.last().unwrap());
        let report = run_removal(
            &policy(0.0, ResponseMode::Remove),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        assert_eq!(report.removed.len(), 0);
        assert_eq!(report.cs_aggregate.to_bits(), report.baseline_cs_aggregate.to_bits());
        let d = report.cs_decomposition.as_ref().unwrap();
        assert_eq!(d.price_channel, 0.0);
        assert_eq!(d.variety_channel, 0.0);
    }

    #[test]
    fn decomposition_channels_sum_to_total_loss() {
        let data = small_market(5);
        let ownership = OwnershipMap::from_snapshot(data.markets.last().unwrap());
        let report = run_removal(
            &policy(0.12, ResponseMode::Remove),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        let d = report.cs_decomposition.as_ref().unwrap();
        let total_loss = report.baseline_cs_aggregate - report.cs_aggregate;
        assert!(
            (d.price_channel + d.variety_channel - total_loss).abs() < 1e-9,
            "channels {} + {} vs loss {total_loss}",
            d.price_channel,
            d.variety_channel
        );
    }

    #[test]
    fn product_count_balance() {
        let data = small_market(7);
        let ownership = OwnershipMap::from_snapshot(data.markets.last().unwrap());
        let base_products = {
            let (p, _) = count_products_and_firms(&data.markets);
            p
        };
        let report = run_removal(
            &policy(0.12, ResponseMode::Remove),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        assert_eq!(report.n_products + report.removed.len(), base_products);
    }

    #[test]
    fn random_removal_removes_equally_many() {
        let data = small_market(9);
        let ownership = OwnershipMap::from_snapshot(data.markets.last().unwrap());
        let targeted = run_removal(
            &policy(0.12, ResponseMode::Remove),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        let random = run_removal(
            &policy(0.12, ResponseMode::RemoveRandom),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        assert_eq!(targeted.removed.len(), random.removed.len());
        // Determinism in the random seed.
        let random2 = run_removal(
            &policy(0.12, ResponseMode::RemoveRandom),
            &data.markets,
            &data.config.demand,
            &ownership,
            1,
        )
        .unwrap();
        assert_eq!(random.removed, random2.removed);
    }
}
