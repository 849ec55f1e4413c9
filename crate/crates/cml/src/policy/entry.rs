//! Endogenous entry under counterfactual cost regimes, and the welfare
//! heatmap over protection-radius and cost-level grids.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{compute_shares, DemandParams, MarketSnapshot, Product};
use crate::error::{Error, Result};
use crate::geometry::{distance_unchecked, Embedding, PcaReducer};
use crate::policy::removal::{
    aggregate_cs, aggregate_ps, count_products_and_firms, resolve_markets,
};
use crate::policy::{DistanceSpace, PolicyConfig, WelfareReport};
use crate::supply::{fixed_cost, CostParams, NormalSpec, NuDraw, PricingSettings};

/// Counterfactual production-technology regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// The estimated cost function as is.
    Factual,
    /// Cost-reducing technology that preserves the shape of the cost
    /// function: the intercept distribution shifts down by `shift`.
    Assistant,
    /// Technology that severs the link between cost and location: all slope
    /// terms vanish and costs are i.i.d. draws calibrated to the factual
    /// distribution's mean and variance.
    Substitute,
}

/// Scenario specification for one heatmap cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioCost {
    pub kind: ScenarioKind,
    /// Downward intercept shift (assistant kind).
    #[serde(default)]
    pub shift: f64,
    /// Reporting label for the cost level (low .. high).
    pub level_label: String,
    /// Calibrated intercept distribution (substitute kind); filled by
    /// [`calibrate_substitute`].
    #[serde(default)]
    pub substitute_mean: Option<f64>,
    #[serde(default)]
    pub substitute_sd: Option<f64>,
}

impl ScenarioCost {
    pub fn factual() -> Self {
        Self {
            kind: ScenarioKind::Factual,
            shift: 0.0,
            level_label: "factual".into(),
            substitute_mean: None,
            substitute_sd: None,
        }
    }

    pub fn assistant(shift: f64, label: &str) -> Self {
        Self {
            kind: ScenarioKind::Assistant,
            shift,
            level_label: label.into(),
            substitute_mean: None,
            substitute_sd: None,
        }
    }
}

/// Transforms the factual cost parameters under a scenario: the assistant
/// shifts the intercept distribution down (truncated below zero), the
/// substitute zeroes every slope and replaces the intercept distribution by
/// the calibrated one.
pub fn scenario_cost_fn(base: &CostParams, scenario: &ScenarioCost) -> Result<CostParams> {
    match scenario.kind {
        ScenarioKind::Factual => Ok(base.clone()),
        ScenarioKind::Assistant => {
            if scenario.shift < 0.0 {
                return Err(Error::InvalidConfig("assistant shift must be >= 0".into()));
            }
            let mut out = base.clone();
            out.nu_intercept = NormalSpec {
                mean: base.nu_intercept.mean - scenario.shift,
                sd: base.nu_intercept.sd,
                truncate_at_zero: true,
            };
            Ok(out)
        }
        ScenarioKind::Substitute => {
            let (mean, sd) = match (scenario.substitute_mean, scenario.substitute_sd) {
                (Some(m), Some(s)) => (m, s),
                _ => {
                    return Err(Error::InvalidConfig(
                        "substitute scenario requires calibrated mean and sd; \
                         run calibrate_substitute first"
                            .into(),
                    ))
                }
            };
            let k = base.k();
            let mut out = CostParams::zeros(k);
            out.nu_intercept = NormalSpec { mean, sd, truncate_at_zero: true };
            Ok(out)
        }
    }
}

/// Calibrates the substitute scenario's intercept distribution to match the
/// mean and variance of the factual (level-shifted) cost distribution over
/// the candidate set.
pub fn calibrate_substitute(
    base: &CostParams,
    scenario: &ScenarioCost,
    candidates_reduced: &[Vec<f64>],
    incumbents_reduced: &[Vec<f64>],
) -> Result<ScenarioCost> {
    if candidates_reduced.is_empty() {
        return Err(Error::InvalidConfig("empty candidate set".into()));
    }
    let incs: Vec<&[f64]> = incumbents_reduced.iter().map(|v| v.as_slice()).collect();
    let zero = NuDraw::zero(base.k());
    let fitted: Vec<f64> = candidates_reduced
        .iter()
        .map(|c| fixed_cost(c, &incs, base, &zero))
        .collect::<Result<_>>()?;
    let n = fitted.len() as f64;
    let shifted_mean = base.nu_intercept.mean - scenario.shift;
    let mean_fit = fitted.iter().sum::<f64>() / n;
    let var_fit = fitted.iter().map(|f| (f - mean_fit).powi(2)).sum::<f64>() / n.max(1.0);
    let mean = mean_fit + shifted_mean;
    let sd = (var_fit + base.nu_intercept.sd.powi(2)).sqrt();
    Ok(ScenarioCost {
        kind: ScenarioKind::Substitute,
        shift: scenario.shift,
        level_label: scenario.level_label.clone(),
        substitute_mean: Some(mean),
        substitute_sd: Some(sd),
    })
}

/// Inputs of one entry game: the baseline period markets, demand parameters,
/// the reducer, candidate locations, and the sampled firm order.
#[derive(Debug, Clone)]
pub struct EntryGameInput<'a> {
    pub markets: &'a [MarketSnapshot],
    pub params: &'a DemandParams,
    pub reducer: &'a PcaReducer,
    pub candidates: &'a [Embedding],
    /// Firms acting in order; each may introduce at most one product.
    pub firm_order: &'a [u64],
    /// Demand shock imputed to every potential entrant.
    pub xi_imputed: f64,
}

/// One firm's entry decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryDecision {
    pub firm_id: u64,
    pub product_id: u64,
    pub candidate_index: usize,
    pub fixed_cost: f64,
    pub expected_net_profit: f64,
}

/// Sequential entry game under a protection radius and a scenario cost
/// function. Firms act in the given order; each evaluates every feasible
/// candidate location, enters at the expected-net-profit argmax when
/// positive, and becomes an incumbent for later movers. Prices re-solve once
/// after all decisions.
pub fn run_entry_game(
    policy: &PolicyConfig,
    input: &EntryGameInput<'_>,
    cost: &CostParams,
    scenario: &ScenarioCost,
    seed: u64,
) -> Result<(WelfareReport, Vec<EntryDecision>)> {
    policy.validate()?;
    if input.candidates.is_empty() {
        return Err(Error::InvalidConfig("empty candidate location set".into()));
    }
    let pricing = PricingSettings::default();
    let baseline = resolve_markets(input.markets, input.params, &pricing)?;
    let cs_base = aggregate_cs(&baseline, input.params, policy.surplus_mode)?;
    let params = input.params;

    let candidate_reduced: Vec<Vec<f64>> = input
        .candidates
        .iter()
        .map(|c| input.reducer.reduce(c).map(|r| r.values))
        .collect::<Result<_>>()?;
    let candidate_policy_coords: Vec<Vec<f64>> = input
        .candidates
        .iter()
        .zip(&candidate_reduced)
        .map(|(c, r)| match policy.distance_space {
            DistanceSpace::Full => c.values().to_vec(),
            DistanceSpace::Reduced => r.clone(),
        })
        .collect();

    // Firm attributes: averages over the firm's existing products.
    let mut firm_stats: HashMap<u64, (Vec<f64>, f64, f64, usize)> = HashMap::new();
    for m in &baseline {
        for p in &m.products {
            let mc = p.mc.ok_or_else(|| {
                Error::InvalidParameter(format!("product {} has no marginal cost", p.id))
            })?;
            let e = firm_stats
                .entry(p.firm_id)
                .or_insert((vec![0.0; p.x_struct.len()], 0.0, 0.0, 0));
            for (acc, v) in e.0.iter_mut().zip(&p.x_struct) {
                *acc += v;
            }
            e.1 += mc;
            e.2 += p.price;
            e.3 += 1;
        }
    }
    let market_average = {
        let mut x = vec![0.0; baseline[0].products[0].x_struct.len()];
        let (mut mc, mut price, mut n) = (0.0, 0.0, 0usize);
        for (xs, m, p, c) in firm_stats.values() {
            for (a, v) in x.iter_mut().zip(xs) {
                *a += v;
            }
            mc += m;
            price += p;
            n += c;
        }
        let n = n.max(1) as f64;
        (
            x.into_iter().map(|v| v / n).collect::<Vec<f64>>(),
            mc / n,
            price / n,
        )
    };

    // Substitute costs are a property of the location: one draw per
    // candidate, shared by all firms in this game.
    let mut rng = crate::rng::stream(seed, "policy.entry_game", 0);
    let effective_cost = scenario_cost_fn(cost, scenario)?;
    let location_costs: Option<Vec<f64>> = match scenario.kind {
        ScenarioKind::Substitute => Some(
            (0..input.candidates.len())
                .map(|_| effective_cost.nu_intercept.sample(&mut rng))
                .collect(),
        ),
        _ => None,
    };

    // Current market state: grows as entrants arrive. Policy coordinates
    // for feasibility, reduced coordinates for costs.
    let mut current: Vec<MarketSnapshot> = baseline.clone();
    let mut policy_locs: Vec<(u64, u64, Vec<f64>)> = Vec::new(); // (id, firm, coords)
    {
        let seen: std::collections::HashSet<u64> = Default::default();
        let mut seen = seen;
        for m in &baseline {
            for p in &m.products {
                if seen.insert(p.id) {
                    policy_locs.push((
                        p.id,
                        p.firm_id,
                        match policy.distance_space {
                            DistanceSpace::Full => p.x_emb_full.values().to_vec(),
                            DistanceSpace::Reduced => p.x_emb_reduced.values.clone(),
                        },
                    ));
                }
            }
        }
    }
    let mut incumbent_reduced: Vec<Vec<f64>> = {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for m in &baseline {
            for p in &m.products {
                if seen.insert(p.id) {
                    out.push(p.x_emb_reduced.values.clone());
                }
            }
        }
        out
    };

    let next_id0 = 1 + baseline
        .iter()
        .flat_map(|m| m.products.iter().map(|p| p.id))
        .max()
        .unwrap_or(0);
    let mut next_id = next_id0;
    let mut decisions: Vec<EntryDecision> = Vec::new();
    let mut fixed_cost_total = 0.0;
    let mut decision_time_locs: Vec<(usize, Vec<(u64, u64, Vec<f64>)>)> = Vec::new();

    for &firm in input.firm_order {
        let (x_struct, mc_f, price_f) = match firm_stats.get(&firm) {
            Some((xs, mc, price, n)) => {
                let n = *n as f64;
                (
                    xs.iter().map(|v| v / n).collect::<Vec<f64>>(),
                    mc / n,
                    price / n,
                )
            }
            None => market_average.clone(),
        };
        // Feasible candidates: clear of every rival product now present.
        let feasible: Vec<usize> = (0..input.candidates.len())
            .filter(|&c| {
                policy_locs.iter().all(|(_, f, loc)| {
                    *f == firm
                        || distance_unchecked(&candidate_policy_coords[c], loc) >= policy.d_bar
                })
            })
            .collect();
        if feasible.is_empty() {
            continue;
        }
        let nu = match scenario.kind {
            ScenarioKind::Substitute => NuDraw::zero(cost.k()),
            _ => NuDraw {
                intercept: effective_cost.nu_intercept.sample(&mut rng),
                slopes: vec![0.0; cost.k()],
            },
        };

        // Evaluate candidates: incremental portfolio profit at current
        // prices minus the fixed cost at the location.
        let incs: Vec<&[f64]> = incumbent_reduced.iter().map(|v| v.as_slice()).collect();
        let mut firm_base_profit = 0.0;
        for m in &current {
            let shares = compute_shares(m, params)?;
            for (p, s) in m.products.iter().zip(&shares.shares) {
                if p.firm_id == firm {
                    firm_base_profit += s * m.market_size * (p.price - p.mc.unwrap_or(0.0));
                }
            }
        }
        let evaluated: Vec<(usize, f64, f64)> = feasible
            .par_iter()
            .map(|&c| {
                let f_cost = match &location_costs {
                    Some(costs) => costs[c],
                    None => fixed_cost(&candidate_reduced[c], &incs, &effective_cost, &nu)
                        .unwrap_or(f64::INFINITY),
                };
                let mut gross = 0.0;
                for m in &current {
                    let mut trial = m.clone();
                    let nest_id = nearest_nest_of(m, &input.candidates[c]);
                    trial.products.push(Product {
                        id: u64::MAX,
                        firm_id: firm,
                        nest_id,
                        x_struct: x_struct.clone(),
                        x_emb_reduced: crate::geometry::ReducedEmbedding {
                            values: candidate_reduced[c].clone(),
                            explained_variance_share: 0.0,
                        },
                        x_emb_full: input.candidates[c].clone(),
                        price: price_f,
                        xi: input.xi_imputed,
                        mc: Some(mc_f),
                        entry_period: m.market_id.period,
                    });
                    match compute_shares(&trial, params) {
                        Ok(shares) => {
                            for (p, s) in trial.products.iter().zip(&shares.shares) {
                                if p.firm_id == firm {
                                    gross += s * trial.market_size
                                        * (p.price - p.mc.unwrap_or(0.0));
                                }
                            }
                        }
                        Err(_) => gross = f64::NEG_INFINITY,
                    }
                }
                (c, gross - firm_base_profit - f_cost, f_cost)
            })
            .collect();
        let best = evaluated
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .copied()
            .expect("feasible set nonempty");
        if best.1 <= 0.0 {
            continue;
        }

        // Enter: record the decision-time rival configuration for the
        // post-hoc feasibility audit, then add the product everywhere.
        decision_time_locs.push((decisions.len(), policy_locs.clone()));
        let (c, net, f_cost) = best;
        let id = next_id;
        next_id += 1;
        for m in current.iter_mut() {
            let nest_id = nearest_nest_of(m, &input.candidates[c]);
            m.products.push(Product {
                id,
                firm_id: firm,
                nest_id,
                x_struct: x_struct.clone(),
                x_emb_reduced: crate::geometry::ReducedEmbedding {
                    values: candidate_reduced[c].clone(),
                    explained_variance_share: 0.0,
                },
                x_emb_full: input.candidates[c].clone(),
                price: price_f,
                xi: input.xi_imputed,
                mc: Some(mc_f),
                entry_period: m.market_id.period,
            });
        }
        policy_locs.push((id, firm, candidate_policy_coords[c].clone()));
        incumbent_reduced.push(candidate_reduced[c].clone());
        fixed_cost_total += f_cost;
        decisions.push(EntryDecision {
            firm_id: firm,
            product_id: id,
            candidate_index: c,
            fixed_cost: f_cost,
            expected_net_profit: net,
        });
    }

    // Post-hoc feasibility audit: every entered location clears the radius
    // against every rival present at its decision time.
    for (decision_idx, rivals) in &decision_time_locs {
        let d = &decisions[*decision_idx];
        let coords = &candidate_policy_coords[d.candidate_index];
        for (_, f, loc) in rivals {
            if *f != d.firm_id {
                let dist = distance_unchecked(coords, loc);
                if dist < policy.d_bar {
                    return Err(Error::InvalidConfig(format!(
                        "entry feasibility violated: product {} at distance {dist} < {}",
                        d.product_id, policy.d_bar
                    )));
                }
            }
        }
    }

    // Single full re-solve after all decisions; zero entry leaves the
    // baseline equilibrium untouched bit for bit.
    let counterfactual = if decisions.is_empty() {
        baseline.clone()
    } else {
        resolve_markets(&current, params, &pricing)?
    };
    let cs = aggregate_cs(&counterfactual, params, policy.surplus_mode)?;
    let ps_variable = aggregate_ps(&counterfactual, params)?;
    let ps = ps_variable - fixed_cost_total;
    let (n_products, n_firms) = count_products_and_firms(&counterfactual);

    let mut metadata = WelfareReport::base_metadata(policy.surplus_mode);
    metadata.insert("mode".into(), "EndogenousEntry".into());
    metadata.insert("d_bar".into(), policy.d_bar.to_string());
    metadata.insert("scenario".into(), format!("{:?}", scenario.kind));
    metadata.insert("cost_level".into(), scenario.level_label.clone());
    metadata.insert(
        "ps_definition".into(),
        "variable profit minus entrant fixed costs; incumbent fixed costs excluded".into(),
    );

    let report = WelfareReport {
        cs_aggregate: cs,
        cs_average: if n_products > 0 { cs / n_products as f64 } else { 0.0 },
        ps_aggregate: ps,
        ps_average: if n_firms > 0 { ps / n_firms as f64 } else { 0.0 },
        sw_aggregate: ps + cs,
        sw_average: if n_products > 0 { (ps + cs) / n_products as f64 } else { 0.0 },
        n_entrants: decisions.len(),
        fixed_cost_total,
        cs_decomposition: None,
        baseline_cs_aggregate: cs_base,
        n_products,
        n_firms,
        removed: Vec::new(),
        flagged: Vec::new(),
        metadata,
    };
    Ok((report, decisions))
}

fn nearest_nest_of(market: &MarketSnapshot, location: &Embedding) -> u32 {
    let mut best = market.products.first().map(|p| p.nest_id).unwrap_or(0);
    let mut best_d = f64::INFINITY;
    for p in market.products.iter() {
        let d = distance_unchecked(p.x_emb_full.values(), location.values());
        if d < best_d {
            best_d = d;
            best = p.nest_id;
        }
    }
    best
}

/// One cell of the welfare heatmap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub d_bar: f64,
    pub cost_level: String,
    pub report: WelfareReport,
}

/// Runs the entry game over every (protection radius, cost scenario) cell of
/// the grid, in parallel with independent derived seeds.
pub fn welfare_heatmap(
    base_policy: &PolicyConfig,
    input: &EntryGameInput<'_>,
    cost: &CostParams,
    d_bars: &[f64],
    scenarios: &[ScenarioCost],
    master_seed: u64,
) -> Result<Vec<HeatmapCell>> {
    if d_bars.is_empty() || scenarios.is_empty() {
        return Err(Error::InvalidConfig("empty heatmap grid".into()));
    }
    let cells: Vec<(usize, usize)> = (0..d_bars.len())
        .flat_map(|i| (0..scenarios.len()).map(move |j| (i, j)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, j)| {
            let mut policy = base_policy.clone();
            policy.d_bar = d_bars[i];
            policy.response_mode = crate::policy::ResponseMode::EndogenousEntry;
            let cell_seed =
                crate::rng::derive_seed(master_seed, "policy.heatmap", (i * scenarios.len() + j) as u64);
            run_entry_game(&policy, input, cost, &scenarios[j], cell_seed)
                .map(|(report, _)| HeatmapCell {
                    d_bar: d_bars[i],
                    cost_level: scenarios[j].level_label.clone(),
                    report,
                })
                .map_err(|e| Error::CellFailure { row: i, col: j, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::testkit::small_market;
    use crate::policy::ResponseMode;

    fn policy(d_bar: f64) -> PolicyConfig {
        PolicyConfig {
            d_bar,
            response_mode: ResponseMode::EndogenousEntry,
            distance_space: DistanceSpace::Full,
            start_period: 0,
            surplus_mode: crate::demand::SurplusMode::Nested,
        }
    }

    fn game_fixture(seed: u64) -> (crate::synth::GeneratedData, Vec<Embedding>, Vec<u64>) {
        let data = small_market(seed);
        let seeds: Vec<Embedding> = data.markets[0]
            .products
            .iter()
            .map(|p| p.x_emb_full.clone())
            .collect();
        let candidates = crate::geometry::perturb_locations(
            &seeds,
            &[1.0, 2.0, 5.0, 10.0],
            15,
            seed,
            &Default::default(),
        )
        .unwrap();
        let firms: Vec<u64> = (0..data.config.n_firms as u64).collect();
        (data, candidates, firms)
    }

    #[test]
    fn prohibitive_costs_block_entry() {
        let (data, candidates, firms) = game_fixture(3);
        let period0 = data.period_markets(0);
        let markets: Vec<MarketSnapshot> = period0.into_iter().cloned().collect();
        let mut cost = data.config.cost.clone();
        cost.nu_intercept = NormalSpec { mean: 1e9, sd: 0.0, truncate_at_zero: false };
        let input = EntryGameInput {
            markets: &markets,
            params: &data.config.demand,
            reducer: &data.reducer,
            candidates: &candidates,
            firm_order: &firms,
            xi_imputed: 0.0,
        };
        let (report, decisions) =
            run_entry_game(&policy(0.0), &input, &cost, &ScenarioCost::factual(), 1).unwrap();
        assert_eq!(report.n_entrants, 0);
        assert!(decisions.is_empty());
        assert_eq!(report.fixed_cost_total, 0.0);
        // Welfare equals the incumbent-only baseline.
        assert_eq!(report.cs_aggregate.to_bits(), report.baseline_cs_aggregate.to_bits());
    }

    #[test]
    fn single_profitable_candidate_is_taken() {
        let (data, candidates, _) = game_fixture(5);
        let markets: Vec<MarketSnapshot> =
            data.period_markets(0).into_iter().cloned().collect();
        let cost = CostParams::zeros(data.config.reduced_dim);
        let input = EntryGameInput {
            markets: &markets,
            params: &data.config.demand,
            reducer: &data.reducer,
            candidates: &candidates[..1],
            firm_order: &[0],
            xi_imputed: 0.0,
        };
        let (report, decisions) =
            run_entry_game(&policy(0.0), &input, &cost, &ScenarioCost::factual(), 1).unwrap();
        assert_eq!(report.n_entrants, 1);
        assert_eq!(decisions[0].candidate_index, 0);
        assert!(decisions[0].expected_net_profit > 0.0);
    }

    #[test]
    fn assistant_with_zero_shift_matches_factual() {
        let base = CostParams {
            eta0: vec![10.0],
            eta1: vec![1.0],
            eta2: vec![0.5],
            eta3: vec![-0.2],
            nu_intercept: NormalSpec { mean: 100.0, sd: 5.0, truncate_at_zero: false },
            nu_slope_sd: vec![0.0],
        };
        let out = scenario_cost_fn(&base, &ScenarioCost::assistant(0.0, "same")).unwrap();
        assert_eq!(out.eta0, base.eta0);
        assert_eq!(out.nu_intercept.mean, base.nu_intercept.mean);

        let shifted = scenario_cost_fn(&base, &ScenarioCost::assistant(400.0, "low")).unwrap();
        assert_eq!(shifted.nu_intercept.mean, -300.0);
        assert!(shifted.nu_intercept.truncate_at_zero);
        // F = 1000 at some location under C = 400 becomes 600.
        let f_base = 1000.0_f64;
        assert_eq!(f_base - 400.0, 600.0);
    }

    #[test]
    fn substitute_costs_are_uncorrelated_with_distance() {
        let (data, candidates, _) = game_fixture(7);
        let incumbents: Vec<Vec<f64>> = data.markets[0]
            .products
            .iter()
            .map(|p| p.x_emb_reduced.values.clone())
            .collect();
        let reduced: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| data.reducer.reduce(c).unwrap().values)
            .collect();
        let scenario = calibrate_substitute(
            &data.config.cost,
            &ScenarioCost {
                kind: ScenarioKind::Substitute,
                shift: 0.0,
                level_label: "mid".into(),
                substitute_mean: None,
                substitute_sd: None,
            },
            &reduced,
            &incumbents,
        )
        .unwrap();
        let params = scenario_cost_fn(&data.config.cost, &scenario).unwrap();
        assert!(params.eta0.iter().all(|v| *v == 0.0));
        assert!(params.eta1.iter().all(|v| *v == 0.0));

        // Draw costs per location and correlate with distance to nearest
        // incumbent: should be near zero.
        let mut rng = crate::rng::stream(11, "test.subst", 0);
        let costs: Vec<f64> = (0..400)
            .map(|_| params.nu_intercept.sample(&mut rng))
            .collect();
        let dists: Vec<f64> = (0..400)
            .map(|i| {
                let c = &candidates[i % candidates.len()];
                data.markets[0]
                    .products
                    .iter()
                    .map(|p| distance_unchecked(p.x_emb_full.values(), c.values()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mean_c = costs.iter().sum::<f64>() / 400.0;
        let mean_d = dists.iter().sum::<f64>() / 400.0;
        let cov: f64 = costs
            .iter()
            .zip(&dists)
            .map(|(c, d)| (c - mean_c) * (d - mean_d))
            .sum::<f64>();
        let sd_c: f64 = costs.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>().sqrt();
        let sd_d: f64 = dists.iter().map(|d| (d - mean_d).powi(2)).sum::<f64>().sqrt();
        let corr = cov / (sd_c * sd_d);
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }

    #[test]
    fn heatmap_degenerate_grid_matches_direct_call() {
        let (data, candidates, firms) = game_fixture(9);
        let markets: Vec<MarketSnapshot> =
            data.period_markets(0).into_iter().cloned().collect();
        let input = EntryGameInput {
            markets: &markets,
            params: &data.config.demand,
            reducer: &data.reducer,
            candidates: &candidates,
            firm_order: &firms[..4],
            xi_imputed: 0.0,
        };
        let scenario = ScenarioCost::assistant(0.0, "factual");
        let grid = welfare_heatmap(
            &policy(0.05),
            &input,
            &data.config.cost,
            &[0.05],
            std::slice::from_ref(&scenario),
            77,
        )
        .unwrap();
        assert_eq!(grid.len(), 1);
        let direct_seed = crate::rng::derive_seed(77, "policy.heatmap", 0);
        let (direct, _) =
            run_entry_game(&policy(0.05), &input, &data.config.cost, &scenario, direct_seed)
                .unwrap();
        assert_eq!(grid[0].report.cs_aggregate.to_bits(), direct.cs_aggregate.to_bits());
        assert_eq!(grid[0].report.n_entrants, direct.n_entrants);

        // Same master seed: identical tables.
        let grid2 = welfare_heatmap(
            &policy(0.05),
            &input,
            &data.config.cost,
            &[0.05],
            std::slice::from_ref(&scenario),
            77,
        )
        .unwrap();
        assert_eq!(
            grid[0].report.sw_aggregate.to_bits(),
            grid2[0].report.sw_aggregate.to_bits()
        );
    }
}
