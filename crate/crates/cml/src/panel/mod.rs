//! Reduced-form panel evidence: fixed-effects spatial regressions, staggered
//! event studies, and an imputation-based robustness estimator.

mod event;
mod fe;
mod spatial;

pub use event::{
    event_study, imputation_event_study, treatment_periods, EventStudyResult, EventWindow,
    ImputationResult, NEVER_TREATED,
};
pub use fe::{demean_within, fit_additive_effects, AdditiveEffects, FeGroups};
pub use spatial::{spatial_regression, SpatialOutcome, SpatialRegResult};

use serde::{Deserialize, Serialize};

/// One observation of the product panel: identifiers, market outcomes, and
/// precomputed radial competitor counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelRow {
    pub product_id: u64,
    pub firm_id: u64,
    pub license: String,
    pub country: String,
    pub period: u32,
    pub revenue: f64,
    pub quantity: f64,
    pub list_price: f64,
    /// Competitor counts per ring, innermost first.
    pub ring_counts: Vec<f64>,
}

impl PanelRow {
    /// arsinh transform used for revenue and quantity outcomes; defined at
    /// zero, unlike the log.
    pub fn arsinh(v: f64) -> f64 {
        v.asinh()
    }
}
