//! Market shares and the fixed-point inversion from shares to mean utilities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::demand::{mean_utility, mean_utility_excluding_xi, ConsumerDraws, DemandParams, MarketSnapshot};
use crate::error::{Error, Result};

/// Model-implied shares for one market.
#[derive(Debug, Clone)]
pub struct ShareOutcome {
    pub shares: Vec<f64>,
    pub outside: f64,
}

/// Precomputed per-market state for repeated share evaluations at a fixed
/// parameter vector: taste shifts, nest layout, and draw weights.
#[derive(Debug, Clone)]
pub(crate) struct ShareEngine {
    pub(crate) n: usize,
    pub(crate) a: f64,
    pub(crate) rho: f64,
    pub(crate) nest_of: Vec<usize>,
    pub(crate) n_nests: usize,
    /// Row-major `n_draws x n` matrix of draw-specific utility shifts.
    pub(crate) mu: Vec<f64>,
    pub(crate) draws: Arc<ConsumerDraws>,
    /// Reduced embedding rows, `n x k`.
    pub(crate) x_rc: Vec<f64>,
    pub(crate) k: usize,
    pub(crate) params: DemandParams,
}

/// Scratch space for per-draw probability computations.
#[derive(Debug, Clone)]
pub(crate) struct DrawScratch {
    /// Scaled utilities a*(delta + mu).
    pub u: Vec<f64>,
    /// Within-nest choice probabilities.
    pub w: Vec<f64>,
    /// Unconditional choice probabilities.
    pub s: Vec<f64>,
    /// Inclusive value per nest.
    pub inclusive: Vec<f64>,
    /// Nest choice probabilities.
    pub nest_prob: Vec<f64>,
    pub outside: f64,
    nest_max: Vec<f64>,
    nest_sum: Vec<f64>,
    nest_nonempty: Vec<bool>,
}

impl DrawScratch {
    pub(crate) fn new(n: usize, n_nests: usize) -> Self {
        Self {
            u: vec![0.0; n],
            w: vec![0.0; n],
            s: vec![0.0; n],
            inclusive: vec![0.0; n_nests],
            nest_prob: vec![0.0; n_nests],
            outside: 0.0,
            nest_max: vec![0.0; n_nests],
            nest_sum: vec![0.0; n_nests],
            nest_nonempty: vec![false; n_nests],
        }
    }
}

impl ShareEngine {
    pub(crate) fn from_snapshot(snapshot: &MarketSnapshot, params: &DemandParams) -> Result<Self> {
        params.validate()?;
        let k = params.k();
        if snapshot.draws.k() != k {
            return Err(Error::dim("consumer draw dimension", k, snapshot.draws.k()));
        }
        let n = snapshot.products.len();

        // Dense nest slots in order of first appearance.
        let mut nest_ids: Vec<u32> = Vec::new();
        let mut nest_of = Vec::with_capacity(n);
        for p in &snapshot.products {
            let slot = match nest_ids.iter().position(|&g| g == p.nest_id) {
                Some(s) => s,
                None => {
                    nest_ids.push(p.nest_id);
                    nest_ids.len() - 1
                }
            };
            nest_of.push(slot);
        }

        let mut x_rc = Vec::with_capacity(n * k);
        for p in &snapshot.products {
            if p.x_emb_reduced.dim() != k {
                return Err(Error::dim("reduced embedding", k, p.x_emb_reduced.dim()));
            }
            x_rc.extend_from_slice(&p.x_emb_reduced.values);
        }

        let draws = Arc::clone(&snapshot.draws);
        let n_draws = draws.n_draws();
        let mut mu = vec![0.0; n_draws * n];
        for i in 0..n_draws {
            let z = draws.row(i);
            let row = &mut mu[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                let x = &x_rc[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += params.beta_img_sd[l] * z[l] * x[l];
                }
                *slot = acc;
            }
        }

        Ok(Self {
            n,
            a: 1.0 / (1.0 - params.rho),
            rho: params.rho,
            nest_of,
            n_nests: nest_ids.len(),
            mu,
            draws,
            x_rc,
            k,
            params: params.clone(),
        })
    }

    /// Mean utilities implied by the snapshot's own attributes and shocks.
    pub(crate) fn delta_from(snapshot: &MarketSnapshot, params: &DemandParams) -> Vec<f64> {
        snapshot.products.iter().map(|p| mean_utility(p, params)).collect()
    }

    /// Fills `scratch` with the choice probabilities of draw `i` at `delta`.
    pub(crate) fn draw_probs(&self, delta: &[f64], i: usize, scratch: &mut DrawScratch) {
        let n = self.n;
        let mu = &self.mu[i * n..(i + 1) * n];

        for g in 0..self.n_nests {
            scratch.nest_max[g] = f64::NEG_INFINITY;
            scratch.nest_nonempty[g] = false;
            scratch.nest_sum[g] = 0.0;
        }
        for j in 0..n {
            let u = self.a * (delta[j] + mu[j]);
            scratch.u[j] = u;
            let g = self.nest_of[j];
            scratch.nest_nonempty[g] = true;
            if u > scratch.nest_max[g] {
                scratch.nest_max[g] = u;
            }
        }
        for j in 0..n {
            let g = self.nest_of[j];
            scratch.nest_sum[g] += (scratch.u[j] - scratch.nest_max[g]).exp();
        }

        // Inclusive values I_g = (1 - rho) * logsumexp(u within g); the
        // outside option contributes utility 0 at the upper level.
        let mut top_max = 0.0_f64;
        for g in 0..self.n_nests {
            if scratch.nest_nonempty[g] {
                scratch.inclusive[g] =
                    (1.0 - self.rho) * (scratch.nest_max[g] + scratch.nest_sum[g].ln());
                if scratch.inclusive[g] > top_max {
                    top_max = scratch.inclusive[g];
                }
            } else {
                scratch.inclusive[g] = f64::NEG_INFINITY;
            }
        }
        let mut denom = (-top_max).exp();
        for g in 0..self.n_nests {
            if scratch.nest_nonempty[g] {
                scratch.nest_prob[g] = (scratch.inclusive[g] - top_max).exp();
                denom += scratch.nest_prob[g];
            } else {
                scratch.nest_prob[g] = 0.0;
            }
        }
        for g in 0..self.n_nests {
            scratch.nest_prob[g] /= denom;
        }
        scratch.outside = (-top_max).exp() / denom;

        for j in 0..n {
            let g = self.nest_of[j];
            let w = (scratch.u[j] - scratch.nest_max[g]).exp() / scratch.nest_sum[g];
            scratch.w[j] = w;
            scratch.s[j] = w * scratch.nest_prob[g];
        }
    }

    /// Draw-averaged shares at mean utilities `delta`.
    pub(crate) fn shares(&self, delta: &[f64]) -> ShareOutcome {
        let mut scratch = DrawScratch::new(self.n, self.n_nests);
        let mut shares = vec![0.0; self.n];
        let mut outside = 0.0;
        for (i, &wt) in self.draws.weights().iter().enumerate() {
            self.draw_probs(delta, i, &mut scratch);
            for j in 0..self.n {
                shares[j] += wt * scratch.s[j];
            }
            outside += wt * scratch.outside;
        }
        ShareOutcome { shares, outside }
    }
}

/// Computes model shares for every product in the snapshot plus the outside
/// share. Shares are strictly inside (0, 1) and sum to one with the outside.
pub fn compute_shares(snapshot: &MarketSnapshot, params: &DemandParams) -> Result<ShareOutcome> {
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let outcome = engine.shares(&delta);
    if outcome.shares.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("market shares"));
    }
    Ok(outcome)
}

/// Settings for the share inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionSettings {
    /// Sup-norm tolerance on log-share residuals.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Switch to Newton steps once the residual drops below 1e-6.
    pub newton_polish: bool,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self { tolerance: 1e-12, max_iterations: 5000, newton_polish: false }
    }
}

/// Result of inverting observed shares into mean utilities.
#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub delta: Vec<f64>,
    /// Demand shocks: delta minus the non-shock part of mean utility.
    pub xi: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Recovers mean utilities from observed shares via the damped fixed point
/// `delta <- delta + (1 - rho) * (log s_obs - log s(delta))`.
pub fn invert_shares(
    observed: &[f64],
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    settings: &InversionSettings,
) -> Result<InversionOutcome> {
    let n = snapshot.products.len();
    if observed.len() != n {
        return Err(Error::dim("observed shares", n, observed.len()));
    }
    for (p, &s) in snapshot.products.iter().zip(observed) {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ZeroShare(p.id));
        }
    }
    let total: f64 = observed.iter().sum();
    if total >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "observed shares sum to {total}; an outside share is required"
        )));
    }
    let outside = 1.0 - total;

    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let damping = 1.0 - params.rho;

    // Nested-logit closed form as the starting point; exact when all
    // taste dispersion is zero.
    let mut nest_share = vec![0.0; engine.n_nests];
    for (j, &g) in engine.nest_of.iter().enumerate() {
        nest_share[g] += observed[j];
    }
    let mut delta: Vec<f64> = (0..n)
        .map(|j| {
            let g = engine.nest_of[j];
            (observed[j] / outside).ln() - params.rho * (observed[j] / nest_share[g]).ln()
        })
        .collect();

    let log_obs: Vec<f64> = observed.iter().map(|s| s.ln()).collect();
    let mut residual = f64::INFINITY;
    for iter in 0..settings.max_iterations {
        let outcome = engine.shares(&delta);
        residual = 0.0;
        for j in 0..n {
            let r = log_obs[j] - outcome.shares[j].ln();
            if !r.is_finite() {
                return Err(Error::NonFinite("share inversion residual"));
            }
            if r.abs() > residual {
                residual = r.abs();
            }
        }
        if residual < settings.tolerance {
            let xi = recover_xi(&delta, snapshot, params);
            return Ok(InversionOutcome { delta, xi, iterations: iter, residual });
        }
        if settings.newton_polish && residual < 1e-6 {
            newton_step(&engine, &mut delta, &log_obs)?;
        } else {
            for j in 0..n {
                delta[j] += damping * (log_obs[j] - outcome.shares[j].ln());
            }
        }
    }
    Err(Error::NoConvergence {
        context: "share inversion",
        iterations: settings.max_iterations,
        residual,
    })
}

fn recover_xi(delta: &[f64], snapshot: &MarketSnapshot, params: &DemandParams) -> Vec<f64> {
    snapshot
        .products
        .iter()
        .zip(delta)
        .map(|(p, d)| d - mean_utility_excluding_xi(p, params))
        .collect()
}

fn newton_step(engine: &ShareEngine, delta: &mut [f64], log_obs: &[f64]) -> Result<()> {
    use nalgebra::{DMatrix, DVector};
    let outcome = engine.shares(delta);
    let jac = super::derivatives::jacobian_delta_from_engine(engine, delta);
    // d(log s)/d(delta) = diag(1/s) * J.
    let n = engine.n;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in 0..n {
            m[(j, l)] = jac[(j, l)] / outcome.shares[j];
        }
    }
    let rhs = DVector::from_iterator(n, (0..n).map(|j| log_obs[j] - outcome.shares[j].ln()));
    let lu = m.lu();
    let step = lu.solve(&rhs).ok_or(Error::Singular("newton inversion step"))?;
    for j in 0..n {
        delta[j] += step[j];
    }
    Ok(())
}
