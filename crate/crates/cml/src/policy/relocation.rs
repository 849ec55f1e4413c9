//! Relocation counterfactual: infringers are pushed to the best feasible
//! candidate location outside the protection radius.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::demand::{compute_shares, DemandParams, MarketSnapshot};
use crate::error::{Error, Result};
use crate::geometry::{distance_unchecked, Embedding, PcaReducer};
use crate::policy::removal::{
    aggregate_cs, aggregate_ps, count_products_and_firms, resolve_markets,
};
use crate::policy::{collect_products, find_infringers, DistanceSpace, PolicyConfig, WelfareReport};
use crate::supply::{OwnershipMap, PricingSettings};

/// One infringer's relocation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelocationRecord {
    pub product_id: u64,
    /// Index of the chosen candidate in the supplied candidate set.
    pub candidate_index: usize,
    /// True when no candidate satisfied the constraint and the product was
    /// parked at the candidate with maximal minimum distance.
    pub parked: bool,
}

/// Relocation counterfactual. Each infringer, in entry order, moves to the
/// profit-maximizing candidate location at least `d_bar` away from every
/// rival product's current location; its demand shock, structured
/// attributes, and marginal cost travel with it. Prices re-solve once after
/// all moves.
pub fn run_relocation(
    policy: &PolicyConfig,
    markets: &[MarketSnapshot],
    params: &DemandParams,
    reducer: &PcaReducer,
    candidates: &[Embedding],
    ownership: &OwnershipMap,
) -> Result<(WelfareReport, Vec<RelocationRecord>)> {
    policy.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("empty candidate location set".into()));
    }
    let pricing = PricingSettings::default();
    let baseline = resolve_markets(markets, params, &pricing)?;
    let cs_base = aggregate_cs(&baseline, params, policy.surplus_mode)?;

    let infringers =
        find_infringers(&baseline, policy.d_bar, policy.start_period, policy.distance_space);

    // Current full-space locations of every product, updated as moves apply.
    let all = collect_products(&baseline, DistanceSpace::Full);
    let mut location: HashMap<u64, Vec<f64>> =
        all.iter().map(|p| (p.id, p.coords.clone())).collect();
    let firm_of: HashMap<u64, u64> = all.iter().map(|p| (p.id, p.firm_id)).collect();
    let entry_of: HashMap<u64, u32> = all.iter().map(|p| (p.id, p.entry_period)).collect();

    let candidate_reduced: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| reducer.reduce(c).map(|r| r.values))
        .collect::<Result<_>>()?;
    let policy_coords = |emb: &Embedding, reduced: &[f64]| -> Vec<f64> {
        match policy.distance_space {
            DistanceSpace::Full => emb.values().to_vec(),
            DistanceSpace::Reduced => reduced.to_vec(),
        }
    };
    // Policy-space coordinates of all products, updated with moves.
    let mut policy_location: HashMap<u64, Vec<f64>> = collect_products(&baseline, policy.distance_space)
        .into_iter()
        .map(|p| (p.id, p.coords))
        .collect();

    let mut records = Vec::new();
    let mut ordered = infringers.clone();
    ordered.sort_by_key(|id| (entry_of.get(id).copied().unwrap_or(0), *id));
    for id in &ordered {
        let firm = firm_of[id];
        // Feasibility: distance to every rival product's current location.
        let feasible: Vec<usize> = (0..candidates.len())
            .filter(|&c| {
                let cand = policy_coords(&candidates[c], &candidate_reduced[c]);
                policy_location.iter().all(|(other, loc)| {
                    other == id
                        || firm_of[other] == firm
                        || distance_unchecked(&cand, loc) >= policy.d_bar
                })
            })
            .collect();
        let (chosen, parked) = if feasible.is_empty() {
            // Park at the candidate maximizing the minimum rival distance.
            let best = (0..candidates.len())
                .max_by(|&a, &b| {
                    let da = min_rival_distance(
                        &policy_coords(&candidates[a], &candidate_reduced[a]),
                        id,
                        firm,
                        &policy_location,
                        &firm_of,
                    );
                    let db = min_rival_distance(
                        &policy_coords(&candidates[b], &candidate_reduced[b]),
                        id,
                        firm,
                        &policy_location,
                        &firm_of,
                    );
                    da.total_cmp(&db)
                })
                .expect("candidate set nonempty");
            (best, true)
        } else {
            // Profit-maximizing feasible candidate: the owning firm's
            // variable profit at the entry-period markets, prices held at
            // current equilibrium values.
            let eval_markets: Vec<&MarketSnapshot> = baseline
                .iter()
                .filter(|m| m.market_id.period == entry_of[id].max(policy.start_period))
                .collect();
            let eval_markets: Vec<&MarketSnapshot> = if eval_markets.is_empty() {
                baseline.iter().collect()
            } else {
                eval_markets
            };
            let mut best = (f64::NEG_INFINITY, feasible[0]);
            for &c in &feasible {
                let mut profit = 0.0;
                for m in &eval_markets {
                    let mut trial = (*m).clone();
                    // Apply all moves so far plus the trial move.
                    apply_locations(&mut trial, &location, reducer)?;
                    if let Some(idx) = trial.product_index(*id) {
                        trial.products[idx].x_emb_full = candidates[c].clone();
                        trial.products[idx].x_emb_reduced.values = candidate_reduced[c].clone();
                        let shares = compute_shares(&trial, params)?;
                        for (p, s) in trial.products.iter().zip(&shares.shares) {
                            if p.firm_id == firm {
                                let mc = p.mc.ok_or_else(|| {
                                    Error::InvalidParameter(format!(
                                        "product {} has no marginal cost",
                                        p.id
                                    ))
                                })?;
                                profit += s * trial.market_size * (p.price - mc);
                            }
                        }
                    }
                }
                if profit > best.0 {
                    best = (profit, c);
                }
            }
            (best.1, false)
        };
        location.insert(*id, candidates[chosen].values().to_vec());
        policy_location.insert(
            *id,
            policy_coords(&candidates[chosen], &candidate_reduced[chosen]),
        );
        records.push(RelocationRecord { product_id: *id, candidate_index: chosen, parked });
    }

    // Rebuild every market with the final locations and re-solve once. With
    // no relocations the equilibrium is untouched: reuse the baseline so the
    // zero-radius policy is exactly the identity.
    let counterfactual = if records.is_empty() {
        baseline.clone()
    } else {
        let mut moved = baseline.clone();
        for m in moved.iter_mut() {
            apply_locations(m, &location, reducer)?;
        }
        resolve_markets(&moved, params, &pricing)?
    };
    let cs_cf = aggregate_cs(&counterfactual, params, policy.surplus_mode)?;
    let ps = aggregate_ps(&counterfactual, params)?;
    let (n_products, n_firms) = count_products_and_firms(&counterfactual);
    let (n_base, _) = count_products_and_firms(&baseline);
    debug_assert_eq!(n_products, n_base);

    let mut metadata = WelfareReport::base_metadata(policy.surplus_mode);
    metadata.insert("mode".into(), "Relocate".into());
    metadata.insert("d_bar".into(), policy.d_bar.to_string());
    metadata.insert("n_relocated".into(), records.len().to_string());
    let _ = ownership;

    let report = WelfareReport {
        cs_aggregate: cs_cf,
        cs_average: if n_products > 0 { cs_cf / n_products as f64 } else { 0.0 },
        ps_aggregate: ps,
        ps_average: if n_firms > 0 { ps / n_firms as f64 } else { 0.0 },
        sw_aggregate: ps + cs_cf,
        sw_average: if n_products > 0 { (ps + cs_cf) / n_products as f64 } else { 0.0 },
        n_entrants: 0,
        fixed_cost_total: 0.0,
        cs_decomposition: None,
        baseline_cs_aggregate: cs_base,
        n_products,
        n_firms,
        removed: Vec::new(),
        flagged: records.iter().filter(|r| r.parked).map(|r| r.product_id).collect(),
        metadata,
    };
    Ok((report, records))
}

fn min_rival_distance(
    cand: &[f64],
    id: &u64,
    firm: u64,
    policy_location: &HashMap<u64, Vec<f64>>,
    firm_of: &HashMap<u64, u64>,
) -> f64 {
    policy_location
        .iter()
        .filter(|(other, _)| *other != id && firm_of[*other] != firm)
        .map(|(_, loc)| distance_unchecked(cand, loc))
        .fold(f64::INFINITY, f64::min)
}

fn apply_locations(
    market: &mut MarketSnapshot,
    location: &HashMap<u64, Vec<f64>>,
    reducer: &PcaReducer,
) -> Result<()> {
    for p in market.products.iter_mut() {
        if let Some(coords) = location.get(&p.id) {
            if coords != p.x_emb_full.values() {
                let emb = Embedding::new_unchecked(coords.clone());
                p.x_emb_reduced = reducer.reduce(&emb)?;
                p.x_emb_full = emb;
            }
        }
    }
    Ok(())
}
