//! Demand-side estimation: instruments, fixed-coefficient 2SLS, and GMM for
//! the random-coefficient nested-logit parameters.

mod gmm;
mod simplex;
mod instruments;
pub mod linear;

pub use gmm::{gmm_rcnl, GmmConfig, GmmResult, GmmStage};
pub use instruments::{build_differentiation_ivs, differentiation_sds, InstrumentSet};
pub use linear::{CovKind, LinearFit, TslsFit, WaldTest};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::MarketSnapshot;
use crate::error::{Error, Result};

/// Stacked estimation sample: one row per product-market observation, with
/// the owning snapshots kept alongside for inversion-based estimators.
#[derive(Debug, Clone)]
pub struct EstimationSample {
    pub markets: Vec<MarketSnapshot>,
    /// Observed shares per market, aligned with each snapshot's products.
    pub shares: Vec<Vec<f64>>,
}

impl EstimationSample {
    pub fn new(markets: Vec<MarketSnapshot>, shares: Vec<Vec<f64>>) -> Result<Self> {
        if markets.len() != shares.len() {
            return Err(Error::dim("share blocks", markets.len(), shares.len()));
        }
        for (m, s) in markets.iter().zip(&shares) {
            if m.products.len() != s.len() {
                return Err(Error::dim("market share rows", m.products.len(), s.len()));
            }
        }
        Ok(Self { markets, shares })
    }

    /// Snapshots where all products carry their observed shares embedded as
    /// model shares (used by generators and round trips).
    pub fn n_rows(&self) -> usize {
        self.markets.iter().map(|m| m.products.len()).sum()
    }

    /// Row-major regressor matrix: constant, price, remaining structured
    /// attributes, and the reduced embedding coordinates. The constant comes
    /// from the product's own `x_struct[0]`.
    pub fn regressor_matrix(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let k_struct = self.markets[0].products[0].x_struct.len();
        let k_emb = self.markets[0].products[0].x_emb_reduced.dim();
        let mut x = DMatrix::zeros(n, 1 + k_struct + k_emb);
        let mut row = 0;
        for m in &self.markets {
            for p in &m.products {
                x[(row, 0)] = p.price;
                for (c, v) in p.x_struct.iter().enumerate() {
                    x[(row, 1 + c)] = *v;
                }
                for (c, v) in p.x_emb_reduced.values.iter().enumerate() {
                    x[(row, 1 + k_struct + c)] = *v;
                }
                row += 1;
            }
        }
        x
    }

    /// log(s_j / s_0) per row.
    pub fn log_share_ratios(&self) -> Result<DVector<f64>> {
        let mut y = Vec::with_capacity(self.n_rows());
        for (m, shares) in self.markets.iter().zip(&self.shares) {
            let total: f64 = shares.iter().sum();
            let outside = 1.0 - total;
            if !(outside > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "market {} has no outside share",
                    m.market_id
                )));
            }
            for (p, &s) in m.products.iter().zip(shares) {
                if !(s > 0.0) {
                    return Err(Error::ZeroShare(p.id));
                }
                y.push((s / outside).ln());
            }
        }
        Ok(DVector::from_vec(y))
    }

    /// Product ids row by row, for clustering.
    pub fn product_ids(&self) -> Vec<u64> {
        self.markets
            .iter()
            .flat_map(|m| m.products.iter().map(|p| p.id))
            .collect()
    }
}

/// Per-row instrument collection for demand estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandInstruments {
    /// Cost-shifter column (exchange-rate style), one entry per row.
    pub cost_shifter: Vec<f64>,
    /// Differentiation instruments: per row, own-firm then rival-firm local
    /// counts per embedding dimension.
    pub differentiation: Vec<Vec<f64>>,
}

/// Result of the fixed-coefficient 2SLS demand regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TslsDemandResult {
    /// Coefficient on price.
    pub beta_price: f64,
    /// Coefficients on the structured attributes (constant first).
    pub beta_struct: Vec<f64>,
    /// Coefficients on the reduced embedding coordinates.
    pub beta_img: Vec<f64>,
    pub se_price: f64,
    pub se_struct: Vec<f64>,
    pub se_img: Vec<f64>,
    pub first_stage_f: f64,
    pub cragg_donald_f: f64,
    pub n: usize,
}

/// Fixed-coefficient logit demand by 2SLS: regresses `ln(s_j/s_0)` on price,
/// structured attributes, and embeddings, instrumenting price with the cost
/// shifter and the differentiation instruments.
pub fn tsls_fixed_coef(
    sample: &EstimationSample,
    instruments: &DemandInstruments,
) -> Result<TslsDemandResult> {
    let y = sample.log_share_ratios()?;
    let x = sample.regressor_matrix();
    let n = x.nrows();
    if instruments.cost_shifter.len() != n {
        return Err(Error::dim("cost shifter rows", n, instruments.cost_shifter.len()));
    }
    if instruments.differentiation.len() != n {
        return Err(Error::dim("differentiation rows", n, instruments.differentiation.len()));
    }

    let endog = x.columns(0, 1).into_owned();
    let exog = x.columns(1, x.ncols() - 1).into_owned();
    let n_diff = instruments.differentiation[0].len();
    let mut excluded = DMatrix::zeros(n, 1 + n_diff);
    for i in 0..n {
        excluded[(i, 0)] = instruments.cost_shifter[i];
        for c in 0..n_diff {
            excluded[(i, 1 + c)] = instruments.differentiation[i][c];
        }
    }

    let names: Vec<String> = std::iter::once("price".to_string())
        .chain((0..exog.ncols()).map(|c| format!("exog_{c}")))
        .collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let ids = sample.product_ids();
    let fit = linear::tsls(&y, &endog, &exog, &excluded, &CovKind::Clustered(ids), &name_refs)?;

    let k_struct = sample.markets[0].products[0].x_struct.len();
    let k_emb = sample.markets[0].products[0].x_emb_reduced.dim();
    Ok(TslsDemandResult {
        beta_price: fit.coefficients[0],
        beta_struct: fit.coefficients[1..1 + k_struct].to_vec(),
        beta_img: fit.coefficients[1 + k_struct..1 + k_struct + k_emb].to_vec(),
        se_price: fit.se[0],
        se_struct: fit.se[1..1 + k_struct].to_vec(),
        se_img: fit.se[1 + k_struct..1 + k_struct + k_emb].to_vec(),
        first_stage_f: fit.first_stage_f[0],
        cragg_donald_f: fit.cragg_donald_f,
        n,
    })
}

/// Plain OLS of the same regression, for instrument-validity comparisons.
pub fn ols_fixed_coef(sample: &EstimationSample) -> Result<TslsDemandResult> {
    let y = sample.log_share_ratios()?;
    let x = sample.regressor_matrix();
    let names: Vec<String> = (0..x.ncols()).map(|c| format!("x_{c}")).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let ids = sample.product_ids();
    let fit = linear::ols(&x, &y, &CovKind::Clustered(ids), &name_refs)?;
    let k_struct = sample.markets[0].products[0].x_struct.len();
    let k_emb = sample.markets[0].products[0].x_emb_reduced.dim();
    Ok(TslsDemandResult {
        beta_price: fit.coefficients[0],
        beta_struct: fit.coefficients[1..1 + k_struct].to_vec(),
        beta_img: fit.coefficients[1 + k_struct..1 + k_struct + k_emb].to_vec(),
        se_price: fit.se[0],
        se_struct: fit.se[1..1 + k_struct].to_vec(),
        se_img: fit.se[1 + k_struct..1 + k_struct + k_emb].to_vec(),
        first_stage_f: f64::NAN,
        cragg_donald_f: f64::NAN,
        n: x.nrows(),
    })
}
