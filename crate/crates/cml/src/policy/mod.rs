//! Counterfactual design-protection experiments: infringer removal, random
//! removal, relocation, endogenous entry under counterfactual cost regimes,
//! and welfare aggregation.

mod entry;
mod relocation;
mod removal;

pub use entry::{
    calibrate_substitute, run_entry_game, scenario_cost_fn, welfare_heatmap, EntryDecision,
    EntryGameInput, HeatmapCell, ScenarioCost, ScenarioKind,
};
pub use relocation::{run_relocation, RelocationRecord};
pub use removal::run_removal;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::demand::{MarketSnapshot, SurplusMode};
use crate::error::{Error, Result};
use crate::geometry::distance_unchecked;

/// How flagged products respond to the protection radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    Remove,
    RemoveRandom,
    Relocate,
    EndogenousEntry,
}

/// Which characteristic space the protection radius lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSpace {
    Full,
    Reduced,
}

impl Default for DistanceSpace {
    fn default() -> Self {
        DistanceSpace::Full
    }
}

/// Counterfactual policy configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Protection radius in embedding units.
    pub d_bar: f64,
    pub response_mode: ResponseMode,
    #[serde(default)]
    pub distance_space: DistanceSpace,
    /// Entrants from this period onward are subject to the policy.
    pub start_period: u32,
    #[serde(default)]
    pub surplus_mode: SurplusMode,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.d_bar) {
            return Err(Error::InvalidConfig(format!(
                "d_bar {} outside [0, 2]",
                self.d_bar
            )));
        }
        Ok(())
    }
}

/// Consumer-surplus loss split into its two channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsDecomposition {
    /// Loss from equilibrium price adjustment.
    pub price_channel: f64,
    /// Loss from the reduced or rearranged choice set at fixed prices.
    pub variety_channel: f64,
}

/// Welfare accounting for one counterfactual run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelfareReport {
    pub cs_aggregate: f64,
    pub cs_average: f64,
    pub ps_aggregate: f64,
    pub ps_average: f64,
    pub sw_aggregate: f64,
    pub sw_average: f64,
    pub n_entrants: usize,
    pub fixed_cost_total: f64,
    pub cs_decomposition: Option<CsDecomposition>,
    pub baseline_cs_aggregate: f64,
    pub n_products: usize,
    pub n_firms: usize,
    /// Products removed by the policy (removal modes).
    pub removed: Vec<u64>,
    /// Relocated products parked at the max-min-distance candidate because
    /// no candidate satisfied the constraint.
    pub flagged: Vec<u64>,
    /// Averaging conventions and other logged choices.
    pub metadata: BTreeMap<String, String>,
}

impl WelfareReport {
    pub(crate) fn base_metadata(surplus: SurplusMode) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert(
            "cs_average_denominator".into(),
            "final product count".into(),
        );
        m.insert("ps_average_denominator".into(), "firm count".into());
        m.insert("sw_average_denominator".into(), "final product count".into());
        m.insert(
            "surplus_mode".into(),
            match surplus {
                SurplusMode::Nested => "nested".into(),
                SurplusMode::PaperLiteral => "paper_literal".into(),
            },
        );
        m
    }
}

/// A product's identity and location for infringement checks.
#[derive(Debug, Clone)]
pub(crate) struct PolicyProduct {
    pub id: u64,
    pub firm_id: u64,
    pub entry_period: u32,
    pub coords: Vec<f64>,
}

/// Unique products across a snapshot sequence with coordinates in the
/// configured distance space, ordered by (entry_period, id).
pub(crate) fn collect_products(
    markets: &[MarketSnapshot],
    space: DistanceSpace,
) -> Vec<PolicyProduct> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for m in markets {
        for p in &m.products {
            if seen.insert(p.id) {
                out.push(PolicyProduct {
                    id: p.id,
                    firm_id: p.firm_id,
                    entry_period: p.entry_period,
                    coords: match space {
                        DistanceSpace::Full => p.x_emb_full.values().to_vec(),
                        DistanceSpace::Reduced => p.x_emb_reduced.values.clone(),
                    },
                });
            }
        }
    }
    out.sort_by_key(|p| (p.entry_period, p.id));
    out
}

/// Entrants (entry at or after `start_period`) that sit strictly inside the
/// protection radius of an earlier surviving rival product, applied
/// sequentially in entry order: a removed infringer protects nobody.
/// Same-firm products are exempt from the constraint.
pub fn find_infringers(
    markets: &[MarketSnapshot],
    d_bar: f64,
    start_period: u32,
    space: DistanceSpace,
) -> Vec<u64> {
    let products = collect_products(markets, space);
    let mut survivors: Vec<&PolicyProduct> = Vec::with_capacity(products.len());
    let mut infringers = Vec::new();
    for p in &products {
        if p.entry_period < start_period {
            survivors.push(p);
            continue;
        }
        let violates = survivors.iter().any(|s| {
            s.firm_id != p.firm_id && distance_unchecked(&s.coords, &p.coords) < d_bar
        });
        if violates {
            infringers.push(p.id);
        } else {
            survivors.push(p);
        }
    }
    infringers
}

#[cfg(test)]
pub(crate) mod testkit {
    //! A small calibrated marketplace reused across policy tests.

    use crate::synth::{generate_market, GeneratedData, SyntheticConfig};

    pub fn small_market(seed: u64) -> GeneratedData {
        let mut config = SyntheticConfig::demo(seed);
        config.n_products = 30;
        config.n_firms = 10;
        config.n_periods = 3;
        config.n_countries = 2;
        config.n_draws = 64;
        generate_market(&config).expect("demo generation succeeds")
    }
}
