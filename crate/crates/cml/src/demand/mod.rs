//! Random-coefficient nested-logit demand.
//!
//! Utilities are linear in price, structured attributes, and the reduced
//! embedding coordinates; tastes over the embedding dimensions are normally
//! distributed and a nesting parameter `rho` governs within-nest correlation.

mod derivatives;
mod diversion;
mod shares;
mod surplus;

pub use derivatives::{
    own_shape_elasticities, price_elasticities, share_jacobian_delta, share_jacobian_prices,
};
pub use diversion::{
    aggregate_div_by_distance, diversion_ratios, diversion_to_outside, long_run_diversion,
    DivCurvePoint, DiversionSign, OutsideDiversionRow,
};
pub use shares::{compute_shares, invert_shares, InversionOutcome, InversionSettings, ShareOutcome};
pub(crate) use shares::{DrawScratch, ShareEngine};
pub use surplus::{consumer_surplus, SurplusMode};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Embedding, ReducedEmbedding};
use crate::rng;

/// Demand parameters: mean coefficients, random-coefficient scales, nesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandParams {
    /// Utility per currency unit; negative in any sensible calibration.
    pub beta_price: f64,
    /// Coefficients on the structured attributes (the first attribute is the
    /// constant 1 by convention).
    pub beta_struct: Vec<f64>,
    /// Mean taste for each reduced embedding dimension.
    pub beta_img_mean: Vec<f64>,
    /// Taste dispersion per embedding dimension (diagonal of the square root
    /// of the random-coefficient covariance).
    pub beta_img_sd: Vec<f64>,
    /// Within-nest correlation, in [0, 1).
    pub rho: f64,
}

impl DemandParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!(
                "rho {} outside [0, 1)",
                self.rho
            )));
        }
        if self.beta_img_sd.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParameter(
                "beta_img_sd must be nonnegative".into(),
            ));
        }
        if self.beta_img_sd.len() != self.beta_img_mean.len() {
            return Err(Error::dim(
                "beta_img_sd",
                self.beta_img_mean.len(),
                self.beta_img_sd.len(),
            ));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.beta_img_mean.len()
    }
}

/// One product inside a market snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Product {
    pub id: u64,
    pub firm_id: u64,
    pub nest_id: u32,
    /// Structured attributes; first entry is the constant 1.
    pub x_struct: Vec<f64>,
    pub x_emb_reduced: ReducedEmbedding,
    pub x_emb_full: Embedding,
    pub price: f64,
    /// Unobserved demand shock.
    pub xi: f64,
    /// Marginal cost; unset until recovered or assigned by a generator.
    pub mc: Option<f64>,
    /// Period the product entered the marketplace.
    pub entry_period: u32,
}

/// Market identifier: country, period, and license type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarketId {
    pub country: String,
    pub period: u32,
    pub license: String,
}

impl std::fmt::Display for MarketId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.country, self.period, self.license)
    }
}

/// Simulated consumer tastes: an `n_draws x k` matrix of standard-normal
/// (or low-discrepancy transformed) draws with integration weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerDraws {
    n_draws: usize,
    k: usize,
    /// Row-major `n_draws x k`.
    z: Vec<f64>,
    weights: Vec<f64>,
}

impl ConsumerDraws {
    pub fn new(n_draws: usize, k: usize, z: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if z.len() != n_draws * k {
            return Err(Error::dim("draw matrix", n_draws * k, z.len()));
        }
        if weights.len() != n_draws {
            return Err(Error::dim("draw weights", n_draws, weights.len()));
        }
        if z.iter().any(|v| !v.is_finite()) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite("consumer draws"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "draw weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { n_draws, k, z, weights })
    }

    /// Default draw scheme: a randomly shifted Halton sequence mapped through
    /// the standard-normal inverse CDF, with equal weights.
    pub fn halton_normal(n_draws: usize, k: usize, seed: u64) -> Self {
        use statrs::distribution::ContinuousCDF;
        let normal = statrs::distribution::Normal::standard();
        let mut rng = rng::stream(seed, "demand.draws.shift", 0);
        let shifts: Vec<f64> = (0..k).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let mut z = Vec::with_capacity(n_draws * k);
        // Skip the first entries of each Halton dimension; they are the most
        // strongly correlated across bases.
        let burn = 50;
        for i in 0..n_draws {
            for (dim, &shift) in shifts.iter().enumerate().take(k) {
                let u = (halton(i + burn, PRIMES[dim]) + shift).fract();
                let u = u.clamp(1e-12, 1.0 - 1e-12);
                z.push(normal.inverse_cdf(u));
            }
        }
        let weights = vec![1.0 / n_draws as f64; n_draws];
        Self::new(n_draws, k, z, weights).expect("constructed draws are valid")
    }

    /// Plain pseudo-random standard-normal draws with equal weights.
    pub fn standard_normal(n_draws: usize, k: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "demand.draws.normal", 0);
        let z: Vec<f64> = (0..n_draws * k)
            .map(|_| crate::geometry::standard_normal(&mut rng))
            .collect();
        let weights = vec![1.0 / n_draws as f64; n_draws];
        Self::new(n_draws, k, z, weights).expect("constructed draws are valid")
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index + 1;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// A (country, period, license) choice set with market size and consumer draws.
#[derive(Debug, Clone)]
pub struct MarketSnapshot {
    pub market_id: MarketId,
    pub products: Vec<Product>,
    /// Number of potential consumers in the market.
    pub market_size: f64,
    pub draws: Arc<ConsumerDraws>,
}

impl MarketSnapshot {
    pub fn new(
        market_id: MarketId,
        products: Vec<Product>,
        market_size: f64,
        draws: Arc<ConsumerDraws>,
    ) -> Result<Self> {
        if !(market_size > 0.0) {
            return Err(Error::InvalidParameter("market_size must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &products {
            if !seen.insert(p.id) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate product id {} in market {market_id}",
                    p.id
                )));
            }
            if p.price < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "negative price on product {}",
                    p.id
                )));
            }
        }
        Ok(Self { market_id, products, market_size, draws })
    }

    pub fn product_index(&self, id: u64) -> Option<usize> {
        self.products.iter().position(|p| p.id == id)
    }

    /// Number of distinct nests among the products.
    pub fn n_nests(&self) -> usize {
        let mut nests: Vec<u32> = self.products.iter().map(|p| p.nest_id).collect();
        nests.sort_unstable();
        nests.dedup();
        nests.len()
    }

    /// Borrowed (id, coords) views in the chosen characteristic space.
    pub fn points_full(&self) -> Vec<crate::geometry::ProductPoint<'_>> {
        self.products
            .iter()
            .map(|p| crate::geometry::ProductPoint { id: p.id, coords: p.x_emb_full.values() })
            .collect()
    }

    pub fn points_reduced(&self) -> Vec<crate::geometry::ProductPoint<'_>> {
        self.products
            .iter()
            .map(|p| crate::geometry::ProductPoint { id: p.id, coords: &p.x_emb_reduced.values })
            .collect()
    }
}

/// Non-random part of indirect utility for one product.
pub fn mean_utility(p: &Product, params: &DemandParams) -> f64 {
    mean_utility_excluding_xi(p, params) + p.xi
}

pub(crate) fn shares_scratch(engine: &ShareEngine) -> DrawScratch {
    DrawScratch::new(engine.n, engine.n_nests)
}

pub(crate) fn shares_views(scratch: &DrawScratch) -> (&[f64], &[f64], &[f64]) {
    (&scratch.s, &scratch.w, &scratch.nest_prob)
}

pub(crate) fn derivatives_jacobian_delta(
    engine: &ShareEngine,
    delta: &[f64],
) -> nalgebra::DMatrix<f64> {
    derivatives::jacobian_delta_from_engine(engine, delta)
}

pub(crate) fn derivatives_theta2(
    engine: &ShareEngine,
    delta: &[f64],
    rc_dims: &[usize],
) -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) {
    derivatives::theta2_jacobians(engine, delta, rc_dims)
}

pub(crate) fn derivatives_shape_column(
    engine: &ShareEngine,
    delta: &[f64],
    k: usize,
    l: usize,
) -> Vec<f64> {
    derivatives::shape_gradient_wrt_product(engine, delta, k, l)
}

/// Mean utility with the demand shock removed; used when recovering shocks
/// from inverted utilities.
pub fn mean_utility_excluding_xi(p: &Product, params: &DemandParams) -> f64 {
    let struct_part: f64 = params
        .beta_struct
        .iter()
        .zip(&p.x_struct)
        .map(|(b, x)| b * x)
        .sum();
    let img_part: f64 = params
        .beta_img_mean
        .iter()
        .zip(&p.x_emb_reduced.values)
        .map(|(b, x)| b * x)
        .sum();
    params.beta_price * p.price + struct_part + img_part
}

#[cfg(test)]
pub(crate) mod testkit {
    //! Shared constructors for demand tests.

    use super::*;

    pub fn params_zero(k: usize) -> DemandParams {
        DemandParams {
            beta_price: 0.0,
            beta_struct: vec![0.0],
            beta_img_mean: vec![0.0; k],
            beta_img_sd: vec![0.0; k],
            rho: 0.0,
        }
    }

    pub fn product(id: u64, firm: u64, nest: u32, price: f64, xi: f64, emb: Vec<f64>) -> Product {
        let dim = emb.len().max(3);
        let mut full = vec![0.0; dim];
        full[..emb.len()].copy_from_slice(&emb);
        full[0] += 1.0;
        Product {
            id,
            firm_id: firm,
            nest_id: nest,
            x_struct: vec![1.0],
            x_emb_reduced: ReducedEmbedding { values: emb, explained_variance_share: 1.0 },
            x_emb_full: Embedding::normalized(full).unwrap(),
            price,
            xi,
            mc: None,
            entry_period: 0,
        }
    }

    pub fn snapshot(products: Vec<Product>, draws: ConsumerDraws) -> MarketSnapshot {
        MarketSnapshot::new(
            MarketId { country: "US".into(), period: 0, license: "desktop".into() },
            products,
            1000.0,
            Arc::new(draws),
        )
        .unwrap()
    }

    pub fn degenerate_draws(k: usize) -> ConsumerDraws {
        ConsumerDraws::new(1, k, vec![0.0; k], vec![1.0]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_utility_zero_case_and_linearity() {
        let params = testkit::params_zero(2);
        let p = testkit::product(1, 1, 0, 10.0, 0.0, vec![0.3, -0.2]);
        assert_relative_eq!(mean_utility(&p, &params), 0.0);

        let mut priced = params.clone();
        priced.beta_price = -0.156;
        assert_relative_eq!(mean_utility(&p, &priced), -1.56, epsilon = 1e-12);

        let mut shifted = p.clone();
        shifted.xi = 1.0;
        assert_relative_eq!(
            mean_utility(&shifted, &priced) - mean_utility(&p, &priced),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn draws_weights_must_sum_to_one() {
        let bad = ConsumerDraws::new(2, 1, vec![0.0, 0.0], vec![0.4, 0.4]);
        assert!(bad.is_err());
        let good = ConsumerDraws::new(2, 1, vec![0.0, 0.0], vec![0.5, 0.5]);
        assert!(good.is_ok());
    }

    #[test]
    fn halton_draws_are_deterministic_and_standardized() {
        let a = ConsumerDraws::halton_normal(500, 3, 99);
        let b = ConsumerDraws::halton_normal(500, 3, 99);
        assert_eq!(a, b);
        for dim in 0..3 {
            let mean: f64 = (0..500).map(|i| a.row(i)[dim]).sum::<f64>() / 500.0;
            let var: f64 = (0..500).map(|i| a.row(i)[dim].powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 0.05, "dim {dim} mean {mean}");
            assert!((var - 1.0).abs() < 0.08, "dim {dim} var {var}");
        }
    }

    #[test]
    fn snapshot_rejects_duplicate_ids() {
        let draws = testkit::degenerate_draws(1);
        let p1 = testkit::product(1, 1, 0, 1.0, 0.0, vec![0.1]);
        let p2 = testkit::product(1, 2, 0, 1.0, 0.0, vec![0.2]);
        let res = MarketSnapshot::new(
            MarketId { country: "US".into(), period: 0, license: "desktop".into() },
            vec![p1, p2],
            100.0,
            Arc::new(draws),
        );
        assert!(res.is_err());
    }
}
