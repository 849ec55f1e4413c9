//! Least-squares building blocks: OLS and two-stage least squares with
//! heteroscedasticity-robust and cluster-robust covariance, first-stage
//! diagnostics, and Wald tests.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance estimator for regression standard errors.
#[derive(Debug, Clone, PartialEq)]
pub enum CovKind {
    /// HC1 heteroscedasticity-robust sandwich.
    Robust,
    /// Cluster-robust sandwich with the G/(G-1) * (N-1)/(N-k) correction.
    Clustered(Vec<u64>),
}

/// Fitted linear model with a robust covariance.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub r_squared: f64,
    pub n: usize,
}

/// Solves OLS via QR and rejects rank-deficient designs, naming the first
/// collinear column.
pub(crate) fn solve_ols(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    names: &[&str],
) -> Result<DVector<f64>> {
    let n = x.nrows();
    let k = x.ncols();
    if n < k {
        return Err(Error::InvalidParameter(format!(
            "{n} observations cannot identify {k} coefficients"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)].abs() < 1e-10 * (n as f64).sqrt() {
            let name = names.get(j).copied().unwrap_or("<unnamed>");
            return Err(Error::Collinear(name.to_string()));
        }
    }
    let qty = qr.q().transpose() * y;
    let upper = r.rows(0, k).into_owned();
    let rhs = qty.rows(0, k).into_owned();
    upper
        .solve_upper_triangular(&rhs)
        .ok_or(Error::Singular("ols triangular solve"))
}

/// OLS with a robust covariance.
pub fn ols(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cov_kind: &CovKind,
    names: &[&str],
) -> Result<LinearFit> {
    let beta = solve_ols(x, y, names)?;
    let residuals = y - x * &beta;
    let cov = sandwich_cov(x, x, &residuals, cov_kind)?;
    let se = (0..x.ncols()).map(|j| cov[(j, j)].sqrt()).collect();
    let y_mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    Ok(LinearFit {
        coefficients: beta.iter().copied().collect(),
        se,
        cov,
        residuals,
        r_squared,
        n: x.nrows(),
    })
}

/// Sandwich covariance for an estimator of the form
/// `beta = (W'X)^{-1} W'y`: OLS when `w == x`, 2SLS when `w` holds fitted
/// regressors.
fn sandwich_cov(
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    cov_kind: &CovKind,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let k = x.ncols();
    let bread = (w.transpose() * x)
        .try_inverse()
        .ok_or(Error::Singular("regression bread matrix"))?;
    let meat = match cov_kind {
        CovKind::Robust => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let wi = w.row(i).transpose() * residuals[i];
                meat.syger(1.0, &wi, &wi, 1.0);
            }
            symmetrize(&mut meat);
            let dof = (n as f64) / ((n - k) as f64);
            meat * dof
        }
        CovKind::Clustered(ids) => {
            if ids.len() != n {
                return Err(Error::dim("cluster ids", n, ids.len()));
            }
            let mut sums: HashMap<u64, DVector<f64>> = HashMap::new();
            for i in 0..n {
                let wi = w.row(i).transpose() * residuals[i];
                sums.entry(ids[i])
                    .and_modify(|v| *v += &wi)
                    .or_insert(wi);
            }
            let g = sums.len() as f64;
            if g < 2.0 {
                return Err(Error::Degenerate("fewer than two clusters"));
            }
            let mut meat = DMatrix::zeros(k, k);
            for v in sums.values() {
                meat.syger(1.0, v, v, 1.0);
            }
            symmetrize(&mut meat);
            let correction = g / (g - 1.0) * ((n - 1) as f64) / ((n - k) as f64);
            meat * correction
        }
    };
    Ok(&bread * meat * bread.transpose())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Two-stage least squares fit with weak-instrument diagnostics.
#[derive(Debug, Clone)]
pub struct TslsFit {
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub r_squared: f64,
    pub n: usize,
    /// First-stage F statistic of the excluded instruments, one per
    /// endogenous regressor.
    pub first_stage_f: Vec<f64>,
    /// Cragg-Donald statistic (minimum-eigenvalue form).
    pub cragg_donald_f: f64,
}

/// 2SLS of `y` on `[endog, exog]` using `[excluded, exog]` as instruments.
///
/// Coefficients are ordered endogenous first, then exogenous.
pub fn tsls(
    y: &DVector<f64>,
    endog: &DMatrix<f64>,
    exog: &DMatrix<f64>,
    excluded: &DMatrix<f64>,
    cov_kind: &CovKind,
    names: &[&str],
) -> Result<TslsFit> {
    let n = y.len();
    if endog.nrows() != n || exog.nrows() != n || excluded.nrows() != n {
        return Err(Error::dim("tsls rows", n, endog.nrows()));
    }
    let n_endog = endog.ncols();
    if excluded.ncols() < n_endog {
        return Err(Error::InvalidParameter(
            "fewer excluded instruments than endogenous regressors".into(),
        ));
    }

    // Instrument matrix Z = [excluded, exog]; regressor matrix X = [endog, exog].
    let z = hstack(&[excluded, exog]);
    let x = hstack(&[endog, exog]);
    let iv_names: Vec<&str> = (0..z.ncols()).map(|_| "instrument").collect();

    // First stage: fitted endogenous columns.
    let mut x_hat = x.clone();
    for c in 0..n_endog {
        let col = endog.column(c).into_owned();
        let gamma = solve_ols(&z, &col, &iv_names)?;
        x_hat.set_column(c, &(&z * &gamma));
    }

    let beta = solve_ols(&x_hat, &y.clone(), names)?;
    // Residuals use the original regressors.
    let residuals = y - &x * &beta;
    let cov = sandwich_cov(&x_hat, &x_hat, &residuals, cov_kind)?;
    let se = (0..x.ncols()).map(|j| cov[(j, j)].sqrt()).collect();

    let y_mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };

    // Diagnostics on the partialled-out system.
    let first_stage_f = (0..n_endog)
        .map(|c| first_stage_f_stat(&endog.column(c).into_owned(), exog, excluded))
        .collect::<Result<Vec<f64>>>()?;
    let cragg_donald_f = cragg_donald(endog, exog, excluded)?;

    Ok(TslsFit {
        coefficients: beta.iter().copied().collect(),
        se,
        cov,
        r_squared,
        n,
        first_stage_f,
        cragg_donald_f,
    })
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut offset = 0;
    for b in blocks {
        out.view_mut((0, offset), (n, b.ncols())).copy_from(*b);
        offset += b.ncols();
    }
    out
}

/// Residual-maker projection of `m` off the column space of `w`.
fn residualize(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let names: Vec<&str> = (0..w.ncols()).map(|_| "partial").collect();
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let col = m.column(c).into_owned();
        let gamma = solve_ols(w, &col, &names)?;
        out.set_column(c, &(&col - w * &gamma));
    }
    Ok(out)
}

/// Homoskedastic F statistic of the excluded instruments in the first stage.
fn first_stage_f_stat(
    endog: &DVector<f64>,
    exog: &DMatrix<f64>,
    excluded: &DMatrix<f64>,
) -> Result<f64> {
    let y_t = residualize(&DMatrix::from_column_slice(endog.len(), 1, endog.as_slice()), exog)?;
    let z_t = residualize(excluded, exog)?;
    let y_vec = y_t.column(0).into_owned();
    let names: Vec<&str> = (0..z_t.ncols()).map(|_| "excluded").collect();
    let gamma = solve_ols(&z_t, &y_vec, &names)?;
    let fitted = &z_t * &gamma;
    let resid = &y_vec - &fitted;
    let ess: f64 = fitted.iter().map(|v| v * v).sum();
    let rss: f64 = resid.iter().map(|v| v * v).sum();
    let q = z_t.ncols() as f64;
    let dof = (endog.len() - exog.ncols() - z_t.ncols()) as f64;
    if dof <= 0.0 || rss <= 0.0 {
        return Err(Error::Degenerate("first-stage F degrees of freedom"));
    }
    Ok((ess / q) / (rss / dof))
}

/// Cragg-Donald statistic: the smallest eigenvalue of the concentration
/// matrix of the partialled-out first stage.
fn cragg_donald(
    endog: &DMatrix<f64>,
    exog: &DMatrix<f64>,
    excluded: &DMatrix<f64>,
) -> Result<f64> {
    let n = endog.nrows();
    let y_t = residualize(endog, exog)?;
    let z_t = residualize(excluded, exog)?;
    let names: Vec<&str> = (0..z_t.ncols()).map(|_| "excluded").collect();

    // Fitted and residual blocks for every endogenous column.
    let mut fitted = DMatrix::zeros(n, endog.ncols());
    for c in 0..endog.ncols() {
        let col = y_t.column(c).into_owned();
        let gamma = solve_ols(&z_t, &col, &names)?;
        fitted.set_column(c, &(&z_t * &gamma));
    }
    let resid = &y_t - &fitted;
    let q = z_t.ncols() as f64;
    let dof = (n - exog.ncols() - z_t.ncols()) as f64;
    if dof <= 0.0 {
        return Err(Error::Degenerate("cragg-donald degrees of freedom"));
    }
    let sigma_vv = resid.transpose() * &resid / dof;
    let num = fitted.transpose() * &fitted;
    let sigma_inv = sigma_vv
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("first-stage residual covariance"))?;
    // Smallest eigenvalue of Sigma^{-1/2}' (X'PzX / q) Sigma^{-1/2}:
    // eigenvalues of Sigma^{-1} * num / q are identical.
    let m = sigma_inv * num / q;
    let eig = m.complex_eigenvalues();
    let min = eig
        .iter()
        .map(|c| c.re)
        .fold(f64::INFINITY, f64::min);
    Ok(min)
}

/// Wald test of the linear restriction `coefficients[indices] = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    /// F-form statistic (Wald divided by the number of restrictions).
    pub f_statistic: f64,
    pub p_value: f64,
    pub df: usize,
}

pub fn wald_zero_test(
    coefficients: &[f64],
    cov: &DMatrix<f64>,
    indices: &[usize],
    residual_dof: usize,
) -> Result<WaldTest> {
    use statrs::distribution::ContinuousCDF;
    let q = indices.len();
    if q == 0 {
        return Err(Error::InvalidParameter("empty restriction set".into()));
    }
    let r = DVector::from_iterator(q, indices.iter().map(|&i| coefficients[i]));
    let mut v = DMatrix::zeros(q, q);
    for (a, &i) in indices.iter().enumerate() {
        for (b, &j) in indices.iter().enumerate() {
            v[(a, b)] = cov[(i, j)];
        }
    }
    let v_inv = v.try_inverse().ok_or(Error::Singular("wald restriction covariance"))?;
    let statistic = (r.transpose() * v_inv * &r)[(0, 0)];
    let f_statistic = statistic / q as f64;
    let dist = statrs::distribution::FisherSnedecor::new(q as f64, residual_dof as f64)
        .map_err(|_| Error::Degenerate("wald F distribution"))?;
    let p_value = 1.0 - dist.cdf(f_statistic);
    Ok(WaldTest { statistic, f_statistic, p_value, df: q })
}
