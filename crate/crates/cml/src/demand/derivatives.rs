//! Analytic share derivatives: price and shape Jacobians, elasticities, and
//! the nonlinear-parameter gradients used by the GMM estimator.

use nalgebra::{DMatrix, DVector};

use crate::demand::shares::{DrawScratch, ShareEngine};
use crate::demand::{DemandParams, MarketSnapshot};
use crate::error::{Error, Result};

/// Jacobian of shares with respect to mean utilities: entry (j, k) is
/// `ds_j / d delta_k`, aggregated over draws.
pub(crate) fn jacobian_delta_from_engine(engine: &ShareEngine, delta: &[f64]) -> DMatrix<f64> {
    let n = engine.n;
    let a = engine.a;
    let mut jac = DMatrix::zeros(n, n);
    let mut scratch = DrawScratch::new(n, engine.n_nests);
    let mut same = vec![0.0; n];
    let weights = engine.draws.weights().to_vec();
    let data = jac.as_mut_slice();
    for (i, &wt) in weights.iter().enumerate() {
        engine.draw_probs(delta, i, &mut scratch);
        for k in 0..n {
            let g = engine.nest_of[k];
            same[k] = scratch.w[k] * (a - 1.0 + scratch.nest_prob[g]);
        }
        for j in 0..n {
            let sj = scratch.s[j];
            let gj = engine.nest_of[j];
            for k in 0..n {
                let cross = if engine.nest_of[k] == gj { same[k] } else { scratch.s[k] };
                // Column-major storage: (j, k) lives at k * n + j.
                data[k * n + j] += wt * sj * (if j == k { a - cross } else { -cross });
            }
        }
    }
    jac
}

/// Gradient of the outside share with respect to mean utilities.
pub(crate) fn outside_gradient_delta(engine: &ShareEngine, delta: &[f64]) -> Vec<f64> {
    let n = engine.n;
    let mut grad = vec![0.0; n];
    let mut scratch = DrawScratch::new(n, engine.n_nests);
    for (i, &wt) in engine.draws.weights().to_vec().iter().enumerate() {
        engine.draw_probs(delta, i, &mut scratch);
        for k in 0..n {
            grad[k] -= wt * scratch.outside * scratch.s[k];
        }
    }
    grad
}

/// Jacobian of shares with respect to mean utilities for a snapshot.
pub fn share_jacobian_delta(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
) -> Result<DMatrix<f64>> {
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    Ok(jacobian_delta_from_engine(&engine, &delta))
}

/// Jacobian of shares with respect to prices: entry (j, k) is `ds_j / dp_k`.
///
/// The price coefficient carries no random component, so this is the mean
/// utility Jacobian scaled by `beta_price`.
pub fn share_jacobian_prices(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
) -> Result<DMatrix<f64>> {
    Ok(share_jacobian_delta(snapshot, params)? * params.beta_price)
}

/// Own- and cross-price elasticity matrix: entry (j, k) is
/// `(ds_j / dp_k) * p_k / s_j`.
pub fn price_elasticities(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
) -> Result<DMatrix<f64>> {
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let shares = engine.shares(&delta);
    for (p, &s) in snapshot.products.iter().zip(&shares.shares) {
        if !(s > 0.0) {
            return Err(Error::ZeroShare(p.id));
        }
    }
    let mut jac = jacobian_delta_from_engine(&engine, &delta) * params.beta_price;
    let n = engine.n;
    for j in 0..n {
        for k in 0..n {
            jac[(j, k)] *= snapshot.products[k].price / shares.shares[j];
        }
    }
    Ok(jac)
}

/// Derivative of every share with respect to product `k`'s embedding
/// coordinate `l`, aggregated over draws.
pub(crate) fn shape_gradient_wrt_product(
    engine: &ShareEngine,
    delta: &[f64],
    k: usize,
    l: usize,
) -> Vec<f64> {
    let n = engine.n;
    let a = engine.a;
    let mean_l = engine.params.beta_img_mean[l];
    let sd_l = engine.params.beta_img_sd[l];
    let mut grad = vec![0.0; n];
    let mut scratch = DrawScratch::new(n, engine.n_nests);
    let gk = engine.nest_of[k];
    for (i, &wt) in engine.draws.weights().to_vec().iter().enumerate() {
        engine.draw_probs(delta, i, &mut scratch);
        let taste = mean_l + sd_l * engine.draws.row(i)[l];
        let same_k = scratch.w[k] * (a - 1.0 + scratch.nest_prob[gk]);
        for j in 0..n {
            let sj = scratch.s[j];
            let cross = if engine.nest_of[j] == gk { same_k } else { scratch.s[k] };
            let d = if j == k { sj * (a - cross) } else { -sj * cross };
            grad[j] += wt * taste * d;
        }
    }
    grad
}

/// Own shape elasticities for embedding dimension `l`:
/// `(ds_j / dx_jl) * x_jl / s_j` for every product.
pub fn own_shape_elasticities(
    snapshot: &MarketSnapshot,
    params: &DemandParams,
    l: usize,
) -> Result<Vec<f64>> {
    if l >= params.k() {
        return Err(Error::dim("shape dimension", params.k(), l + 1));
    }
    let engine = ShareEngine::from_snapshot(snapshot, params)?;
    let delta = ShareEngine::delta_from(snapshot, params);
    let shares = engine.shares(&delta);
    for (p, &s) in snapshot.products.iter().zip(&shares.shares) {
        if !(s > 0.0) {
            return Err(Error::ZeroShare(p.id));
        }
    }
    let n = engine.n;
    let a = engine.a;
    let mean_l = params.beta_img_mean[l];
    let sd_l = params.beta_img_sd[l];
    let mut own = vec![0.0; n];
    let mut scratch = DrawScratch::new(n, engine.n_nests);
    for (i, &wt) in engine.draws.weights().to_vec().iter().enumerate() {
        engine.draw_probs(&delta, i, &mut scratch);
        let taste = mean_l + sd_l * engine.draws.row(i)[l];
        for j in 0..n {
            let g = engine.nest_of[j];
            let same = scratch.w[j] * (a - 1.0 + scratch.nest_prob[g]);
            own[j] += wt * taste * scratch.s[j] * (a - same);
        }
    }
    for j in 0..n {
        own[j] *= snapshot.products[j].x_emb_reduced.values[l] / shares.shares[j];
    }
    Ok(own)
}

/// Gradients of shares with respect to the nonlinear parameters:
/// one column per random-coefficient scale in `rc_dims`, plus the nesting
/// parameter. Used to build optimal instruments and GMM standard errors.
pub(crate) fn theta2_jacobians(
    engine: &ShareEngine,
    delta: &[f64],
    rc_dims: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = engine.n;
    let a = engine.a;
    let n_nests = engine.n_nests;
    let mut sd_jac = DMatrix::zeros(n, rc_dims.len());
    let mut rho_grad = DVector::zeros(n);
    let mut scratch = DrawScratch::new(n, n_nests);
    let mut t = vec![0.0; n];
    let mut t_nest = vec![0.0; n_nests];
    let mut vbar = vec![0.0; n_nests];
    let mut dincl = vec![0.0; n_nests];

    for (i, &wt) in engine.draws.weights().to_vec().iter().enumerate() {
        engine.draw_probs(delta, i, &mut scratch);
        let z = engine.draws.row(i);
        let mu = &engine.mu[i * n..(i + 1) * n];

        // Sigma directions: directional derivative with t_k = x_kl * z_il.
        for (col, &l) in rc_dims.iter().enumerate() {
            for k in 0..n {
                t[k] = engine.x_rc[k * engine.k + l] * z[l];
            }
            t_nest.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..n {
                t_nest[engine.nest_of[k]] += scratch.w[k] * t[k];
            }
            let mut t_bar = 0.0;
            for g in 0..n_nests {
                t_bar += scratch.nest_prob[g] * t_nest[g];
            }
            for j in 0..n {
                let g = engine.nest_of[j];
                sd_jac[(j, col)] +=
                    wt * scratch.s[j] * (a * t[j] - (a - 1.0) * t_nest[g] - t_bar);
            }
        }

        // Rho direction via the chain rule through a = 1/(1-rho).
        vbar.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            vbar[engine.nest_of[j]] += scratch.w[j] * (delta[j] + mu[j]);
        }
        let mut correction = 0.0;
        for g in 0..n_nests {
            dincl[g] = if scratch.nest_prob[g] > 0.0 {
                (vbar[g] - scratch.inclusive[g]) / a
            } else {
                0.0
            };
            correction += scratch.nest_prob[g] * dincl[g];
        }
        for j in 0..n {
            let g = engine.nest_of[j];
            let v_j = delta[j] + mu[j];
            let ds_da = scratch.s[j] * ((v_j - vbar[g]) + dincl[g] - correction);
            rho_grad[j] += wt * a * a * ds_da;
        }
    }
    (sd_jac, rho_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::shares::compute_shares;
    use crate::demand::{testkit, ConsumerDraws};
    use approx::assert_relative_eq;

    fn rc_params() -> DemandParams {
        DemandParams {
            beta_price: -0.25,
            beta_struct: vec![0.4],
            beta_img_mean: vec![0.7, -0.5],
            beta_img_sd: vec![0.9, 0.3],
            rho: 0.45,
        }
    }

    fn rc_snapshot(draw_seed: u64) -> MarketSnapshot {
        testkit::snapshot(
            vec![
                testkit::product(1, 1, 0, 1.2, 0.3, vec![0.5, 0.1]),
                testkit::product(2, 1, 0, 0.8, -0.2, vec![0.2, 0.6]),
                testkit::product(3, 2, 1, 1.5, 0.1, vec![-0.3, 0.4]),
                testkit::product(4, 3, 1, 0.6, 0.0, vec![0.1, -0.5]),
            ],
            ConsumerDraws::halton_normal(48, 2, draw_seed),
        )
    }

    #[test]
    fn single_product_plain_logit_derivative() {
        let mut params = testkit::params_zero(1);
        params.beta_price = -0.5;
        let snap = testkit::snapshot(
            vec![testkit::product(1, 1, 0, 2.0, 0.4, vec![0.0])],
            testkit::degenerate_draws(1),
        );
        let s = compute_shares(&snap, &params).unwrap().shares[0];
        let jac = share_jacobian_prices(&snap, &params).unwrap();
        assert_relative_eq!(jac[(0, 0)], params.beta_price * s * (1.0 - s), epsilon = 1e-12);
        assert!(jac[(0, 0)] < 0.0);
    }

    #[test]
    fn symmetric_market_gives_symmetric_jacobian() {
        let params = rc_params();
        let snap = testkit::snapshot(
            vec![
                testkit::product(1, 1, 0, 1.0, 0.2, vec![0.3, -0.1]),
                testkit::product(2, 2, 0, 1.0, 0.2, vec![0.3, -0.1]),
            ],
            ConsumerDraws::halton_normal(32, 2, 7),
        );
        let jac = share_jacobian_prices(&snap, &params).unwrap();
        assert_relative_eq!(jac[(0, 0)], jac[(1, 1)], epsilon = 1e-12);
        assert_relative_eq!(jac[(0, 1)], jac[(1, 0)], epsilon = 1e-12);
    }

    #[test]
    fn price_jacobian_matches_central_differences() {
        let params = rc_params();
        let snap = rc_snapshot(13);
        let jac = share_jacobian_prices(&snap, &params).unwrap();
        let h = 1e-6;
        for k in 0..snap.products.len() {
            let mut up = snap.clone();
            up.products[k].price += h;
            let mut dn = snap.clone();
            dn.products[k].price -= h;
            let s_up = compute_shares(&up, &params).unwrap().shares;
            let s_dn = compute_shares(&dn, &params).unwrap().shares;
            for j in 0..snap.products.len() {
                let fd = (s_up[j] - s_dn[j]) / (2.0 * h);
                let an = jac[(j, k)];
                let scale = fd.abs().max(1e-12);
                assert!(
                    (an - fd).abs() / scale < 1e-5,
                    "({j},{k}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn column_sums_balance_outside_share_gradient() {
        let params = rc_params();
        let snap = rc_snapshot(17);
        let engine = crate::demand::ShareEngine::from_snapshot(&snap, &params).unwrap();
        let delta = crate::demand::ShareEngine::delta_from(&snap, &params);
        let jac = jacobian_delta_from_engine(&engine, &delta) * params.beta_price;
        let outside = outside_gradient_delta(&engine, &delta);

        let h = 1e-6;
        for k in 0..snap.products.len() {
            let col_sum: f64 = (0..snap.products.len()).map(|j| jac[(j, k)]).sum();
            // Finite-difference outside-share derivative.
            let mut up = snap.clone();
            up.products[k].price += h;
            let mut dn = snap.clone();
            dn.products[k].price -= h;
            let o_up = compute_shares(&up, &params).unwrap().outside;
            let o_dn = compute_shares(&dn, &params).unwrap().outside;
            let fd = (o_up - o_dn) / (2.0 * h);
            assert!(
                (col_sum + fd).abs() < 1e-5 * fd.abs().max(1e-8),
                "column {k}: sum {col_sum} vs -outside' {}",
                -fd
            );
            // Analytic outside gradient agrees as well.
            assert!((params.beta_price * outside[k] - fd).abs() < 1e-5 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn single_product_elasticity_closed_form() {
        let mut params = testkit::params_zero(1);
        params.beta_price = -0.3;
        let snap = testkit::snapshot(
            vec![testkit::product(1, 1, 0, 4.0, 0.8, vec![0.0])],
            testkit::degenerate_draws(1),
        );
        let s = compute_shares(&snap, &params).unwrap().shares[0];
        let e = price_elasticities(&snap, &params).unwrap();
        assert_relative_eq!(e[(0, 0)], params.beta_price * 4.0 * (1.0 - s), epsilon = 1e-12);
    }

    #[test]
    fn shape_gradient_matches_finite_differences() {
        let params = rc_params();
        let snap = rc_snapshot(19);
        let engine = crate::demand::ShareEngine::from_snapshot(&snap, &params).unwrap();
        let delta = crate::demand::ShareEngine::delta_from(&snap, &params);
        let h = 1e-6;
        for l in 0..2 {
            for k in 0..snap.products.len() {
                let grad = shape_gradient_wrt_product(&engine, &delta, k, l);
                let mut up = snap.clone();
                up.products[k].x_emb_reduced.values[l] += h;
                let mut dn = snap.clone();
                dn.products[k].x_emb_reduced.values[l] -= h;
                let s_up = compute_shares(&up, &params).unwrap().shares;
                let s_dn = compute_shares(&dn, &params).unwrap().shares;
                for j in 0..snap.products.len() {
                    let fd = (s_up[j] - s_dn[j]) / (2.0 * h);
                    assert!(
                        (grad[j] - fd).abs() < 1e-5 * fd.abs().max(1e-8),
                        "l={l} k={k} j={j}: {} vs {fd}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn own_shape_elasticity_sign_matches_taste_for_single_product() {
        // One product, no dispersion: the elasticity sign is the sign of the
        // mean taste times the coordinate.
        let mut params = testkit::params_zero(1);
        params.beta_img_mean = vec![1.4];
        let snap = testkit::snapshot(
            vec![testkit::product(1, 1, 0, 1.0, 0.0, vec![0.3])],
            testkit::degenerate_draws(1),
        );
        let own = own_shape_elasticities(&snap, &params, 0).unwrap();
        assert!(own[0] > 0.0);

        let h = 1e-6;
        let mut up = snap.clone();
        up.products[0].x_emb_reduced.values[0] += h;
        let mut dn = snap.clone();
        dn.products[0].x_emb_reduced.values[0] -= h;
        let s0 = compute_shares(&snap, &params).unwrap().shares[0];
        let fd = (compute_shares(&up, &params).unwrap().shares[0]
            - compute_shares(&dn, &params).unwrap().shares[0])
            / (2.0 * h);
        let expected = fd * 0.3 / s0;
        assert_relative_eq!(own[0], expected, max_relative = 1e-6);
    }

    #[test]
    fn theta2_gradients_match_finite_differences() {
        let params = rc_params();
        let snap = rc_snapshot(29);
        let engine = crate::demand::ShareEngine::from_snapshot(&snap, &params).unwrap();
        let delta = crate::demand::ShareEngine::delta_from(&snap, &params);
        let (sd_jac, rho_grad) = theta2_jacobians(&engine, &delta, &[0, 1]);

        let h = 1e-6;
        for l in 0..2 {
            let mut up = params.clone();
            up.beta_img_sd[l] += h;
            let mut dn = params.clone();
            dn.beta_img_sd[l] -= h;
            // Hold delta fixed: rebuild engines with perturbed sigma but the
            // same mean utilities.
            let e_up = crate::demand::ShareEngine::from_snapshot(&snap, &up).unwrap();
            let e_dn = crate::demand::ShareEngine::from_snapshot(&snap, &dn).unwrap();
            let s_up = e_up.shares(&delta).shares;
            let s_dn = e_dn.shares(&delta).shares;
            for j in 0..snap.products.len() {
                let fd = (s_up[j] - s_dn[j]) / (2.0 * h);
                assert!(
                    (sd_jac[(j, l)] - fd).abs() < 1e-5 * fd.abs().max(1e-8),
                    "sigma {l}, product {j}: {} vs {fd}",
                    sd_jac[(j, l)]
                );
            }
        }

        let mut up = params.clone();
        up.rho += h;
        let mut dn = params.clone();
        dn.rho -= h;
        let e_up = crate::demand::ShareEngine::from_snapshot(&snap, &up).unwrap();
        let e_dn = crate::demand::ShareEngine::from_snapshot(&snap, &dn).unwrap();
        let s_up = e_up.shares(&delta).shares;
        let s_dn = e_dn.shares(&delta).shares;
        for j in 0..snap.products.len() {
            let fd = (s_up[j] - s_dn[j]) / (2.0 * h);
            assert!(
                (rho_grad[j] - fd).abs() < 1e-5 * fd.abs().max(1e-8),
                "rho, product {j}: {} vs {fd}",
                rho_grad[j]
            );
        }
    }

    #[test]
    fn plain_logit_limit_recovers_closed_forms() {
        // rho = 0 and zero dispersion: cross derivative is beta * s_j * s_k.
        let mut params = testkit::params_zero(1);
        params.beta_price = -0.4;
        let snap = testkit::snapshot(
            vec![
                testkit::product(1, 1, 0, 1.0, 0.5, vec![0.0]),
                testkit::product(2, 2, 1, 2.0, -0.3, vec![0.0]),
            ],
            testkit::degenerate_draws(1),
        );
        let s = compute_shares(&snap, &params).unwrap().shares;
        let jac = share_jacobian_prices(&snap, &params).unwrap();
        assert_relative_eq!(jac[(0, 1)], -params.beta_price * s[0] * s[1], epsilon = 1e-12);
        assert_relative_eq!(jac[(0, 0)], params.beta_price * s[0] * (1.0 - s[0]), epsilon = 1e-12);
    }
}
