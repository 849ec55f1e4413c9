//! Consumer surplus from the demand system.

use serde::{Deserialize, Serialize};

use crate::demand::shares::{DrawScratch, ShareEngine};
use crate::demand::{DemandParams, MarketSnapshot};
use crate::error::{Error, Result};

/// Which logsum the surplus computation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurplusMode {
    /// Nest-aware logsum over inclusive values (default).
    Nested,
    /// Plain logsum over product utilities, exactly as the surplus formula
    /// prints; coincides with `Nested` when rho = 0.
    PaperLiteral,
}

impl Default for SurplusMode {
    fn default() -> Self {
        SurplusMode::Nested
    }
}

/// Per-consumer surplus for one market, in currency units.
///
/// Multiply by market size for the market aggregate.
pub fn consumer_surplus(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    mode: SurplusMode,
) -> Result<f64> {
    if !(params.beta_price < 0.0) {
        return Err(Error::InvalidParameter(
            "consumer surplus requires beta_price < 0".into(),
        ));
    }
    if snapshot.products.is_empty() {
        // Empty logsum: ln(1) / (-beta) = 0 in both modes.
        return Ok(0.0);
    }
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let n = engine.n;
    let mut scratch = DrawScratch::new(n, engine.n_nests);
    let mut acc = 0.0;
    for (i, &wt) in engine.draws.weights().to_vec().iter().enumerate() {
        engine.draw_probs(&delta, i, &mut scratch);
        let logsum = match mode {
            SurplusMode::Nested => {
                // ln(1 + sum_g exp I_g), shifted by the top-level max.
                let mut m = 0.0_f64;
                for g in 0..engine.n_nests {
                    if scratch.inclusive[g] > m {
                        m = scratch.inclusive[g];
                    }
                }
                let mut sum = (-m).exp();
                for g in 0..engine.n_nests {
                    if scratch.inclusive[g].is_finite() {
                        sum += (scratch.inclusive[g] - m).exp();
                    }
                }
                m + sum.ln()
            }
            SurplusMode::PaperLiteral => {
                // ln(1 + sum_j exp V_ij) on the unscaled utilities.
                let mu = engine_mu(&engine, i);
                let mut m = 0.0_f64;
                for j in 0..n {
                    let v = delta[j] + mu[j];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = (-m).exp();
                for j in 0..n {
                    sum += (delta[j] + mu[j] - m).exp();
                }
                m + sum.ln()
            }
        };
        acc += wt * logsum;
    }
    Ok(acc / -params.beta_price)
}

fn engine_mu(engine: &ShareEngine, i: usize) -> &[f64] {
    &engine.mu[i * engine.n..(i + 1) * engine.n]
}
