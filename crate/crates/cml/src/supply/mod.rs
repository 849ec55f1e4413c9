//! Supply conduct: multiproduct Bertrand pricing, marginal-cost recovery,
//! variable profits, the distance-based fixed-cost function, positioning
//! first-order-condition slope estimation, and entry bounds.

mod cost;
mod pricing;

pub use cost::{
    build_entrant_observation, entry_bound, estimate_cost_slopes, expected_marginal_profit,
    fixed_cost, fixed_cost_gradient_regressors, CostSlopeResult, DimensionSlope,
    EntrantObservation, SlopeMode,
};
pub use pricing::{
    equilibrium_prices, foc_residual, recover_marginal_costs, variable_profit,
    variable_profit_multi, PricingSettings,
};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demand::MarketSnapshot;
use crate::error::{Error, Result};

/// Assignment of products to pricing firms.
///
/// Usually mirrors the snapshot's own `firm_id`s; counterfactual ownership
/// (mergers) is expressed by passing a different map.
#[derive(Debug, Clone, Default)]
pub struct OwnershipMap {
    map: HashMap<u64, u64>,
}

impl OwnershipMap {
    pub fn new(map: HashMap<u64, u64>) -> Self {
        Self { map }
    }

    pub fn from_snapshot(snapshot: &MarketSnapshot) -> Self {
        Self {
            map: snapshot.products.iter().map(|p| (p.id, p.firm_id)).collect(),
        }
    }

    pub fn firm_of(&self, product: u64) -> Option<u64> {
        self.map.get(&product).copied()
    }

    /// Checks the map covers every product in the snapshot.
    pub fn validate_for(&self, snapshot: &MarketSnapshot) -> Result<()> {
        for p in &snapshot.products {
            if !self.map.contains_key(&p.id) {
                return Err(Error::UnknownProduct(p.id));
            }
        }
        Ok(())
    }

    /// Reassigns all listed products to one firm.
    pub fn merge(&mut self, products: &[u64], firm: u64) {
        for id in products {
            self.map.insert(*id, firm);
        }
    }
}

/// Normal distribution spec with optional truncation below zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub truncate_at_zero: bool,
}

impl NormalSpec {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mut value = self.mean + self.sd * crate::geometry::standard_normal(rng);
        if self.truncate_at_zero {
            let mut tries = 0;
            while value < 0.0 && tries < 1000 {
                value = self.mean + self.sd * crate::geometry::standard_normal(rng);
                tries += 1;
            }
            if value < 0.0 {
                value = 0.0;
            }
        }
        value
    }
}

/// Fixed-cost function parameters: per-dimension polynomial slopes in the
/// scalar distances to incumbents, plus the shock distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
    pub eta3: Vec<f64>,
    /// Distribution of the product-level intercept shock.
    pub nu_intercept: NormalSpec,
    /// Standard deviation of the per-dimension slope shocks.
    pub nu_slope_sd: Vec<f64>,
}

impl CostParams {
    pub fn k(&self) -> usize {
        self.eta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        for (name, v) in [
            ("eta1", &self.eta1),
            ("eta2", &self.eta2),
            ("eta3", &self.eta3),
            ("nu_slope_sd", &self.nu_slope_sd),
        ] {
            if v.len() != k {
                return Err(Error::dim(match name {
                    "eta1" => "cost eta1",
                    "eta2" => "cost eta2",
                    "eta3" => "cost eta3",
                    _ => "cost nu_slope_sd",
                }, k, v.len()));
            }
        }
        if self.nu_slope_sd.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidParameter("nu_slope_sd must be nonnegative".into()));
        }
        Ok(())
    }

    /// Zero-parameter cost function of the given dimension.
    pub fn zeros(k: usize) -> Self {
        Self {
            eta0: vec![0.0; k],
            eta1: vec![0.0; k],
            eta2: vec![0.0; k],
            eta3: vec![0.0; k],
            nu_intercept: NormalSpec { mean: 0.0, sd: 0.0, truncate_at_zero: false },
            nu_slope_sd: vec![0.0; k],
        }
    }

    /// Draws one product's cost shocks.
    pub fn draw_nu<R: Rng>(&self, rng: &mut R) -> NuDraw {
        let intercept = self.nu_intercept.sample(rng);
        let slopes = self
            .nu_slope_sd
            .iter()
            .map(|sd| sd * crate::geometry::standard_normal(rng))
            .collect();
        NuDraw { intercept, slopes }
    }
}

/// Realized cost shocks for one candidate product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuDraw {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl NuDraw {
    pub fn zero(k: usize) -> Self {
        Self { intercept: 0.0, slopes: vec![0.0; k] }
    }
}

/// Revealed-profit upper bound on one entrant's fixed cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryBound {
    pub product_id: u64,
    /// Expected variable profit with entry minus profit without.
    pub upper_bound: f64,
    pub n_shock_draws: usize,
}
