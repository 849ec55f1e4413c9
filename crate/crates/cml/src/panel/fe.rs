//! Fixed-effect absorption by alternating projections, and explicit additive
//! effect estimation for imputation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Group labels per observation for each fixed-effect dimension.
#[derive(Debug, Clone)]
pub struct FeGroups {
    /// One vector of group ids per FE dimension, each of length n.
    pub groups: Vec<Vec<u64>>,
}

impl FeGroups {
    pub fn new(groups: Vec<Vec<u64>>) -> Result<Self> {
        let n = groups.first().map(|g| g.len()).unwrap_or(0);
        if n == 0 {
            return Err(Error::Degenerate("empty fixed-effect groups"));
        }
        for g in &groups {
            if g.len() != n {
                return Err(Error::dim("fe group length", n, g.len()));
            }
        }
        Ok(Self { groups })
    }

    pub fn n(&self) -> usize {
        self.groups[0].len()
    }
}

/// Demeans the columns in place by cycling over the fixed-effect dimensions
/// until the largest adjustment falls below `tol` (default 1e-10) or
/// `max_cycles` passes.
pub fn demean_within(
    columns: &mut [Vec<f64>],
    fe: &FeGroups,
    tol: f64,
    max_cycles: usize,
) -> Result<usize> {
    let n = fe.n();
    for col in columns.iter() {
        if col.len() != n {
            return Err(Error::dim("demean column", n, col.len()));
        }
    }
    // Per-dimension index maps.
    let index: Vec<HashMap<u64, Vec<usize>>> = fe
        .groups
        .iter()
        .map(|g| {
            let mut m: HashMap<u64, Vec<usize>> = HashMap::new();
            for (i, id) in g.iter().enumerate() {
                m.entry(*id).or_default().push(i);
            }
            m
        })
        .collect();

    for cycle in 0..max_cycles {
        let mut max_adjust = 0.0_f64;
        for dim_index in &index {
            for rows in dim_index.values() {
                let inv = 1.0 / rows.len() as f64;
                for col in columns.iter_mut() {
                    let mean: f64 = rows.iter().map(|&i| col[i]).sum::<f64>() * inv;
                    if mean.abs() > max_adjust {
                        max_adjust = mean.abs();
                    }
                    for &i in rows {
                        col[i] -= mean;
                    }
                }
            }
        }
        if max_adjust < tol {
            return Ok(cycle + 1);
        }
    }
    Err(Error::NoConvergence {
        context: "alternating-projection demeaning",
        iterations: max_cycles,
        residual: f64::NAN,
    })
}

/// Additive fixed effects fitted by backfitting; used to impute untreated
/// potential outcomes.
#[derive(Debug, Clone)]
pub struct AdditiveEffects {
    /// Per FE dimension: group id -> fitted effect.
    pub effects: Vec<HashMap<u64, f64>>,
    pub grand_mean: f64,
}

impl AdditiveEffects {
    /// Predicted outcome for an observation with the given group labels;
    /// None when some label never appeared in the fitting sample.
    pub fn predict(&self, labels: &[u64]) -> Option<f64> {
        let mut v = self.grand_mean;
        for (dim, id) in labels.iter().enumerate() {
            v += self.effects[dim].get(id)?;
        }
        Some(v)
    }
}

/// Fits `y ~ sum of additive group effects` by Gauss-Seidel backfitting on
/// the provided observations.
pub fn fit_additive_effects(
    y: &[f64],
    fe: &FeGroups,
    tol: f64,
    max_cycles: usize,
) -> Result<AdditiveEffects> {
    let n = fe.n();
    if y.len() != n {
        return Err(Error::dim("fit_additive_effects outcome", n, y.len()));
    }
    let grand_mean = y.iter().sum::<f64>() / n as f64;
    let mut residual: Vec<f64> = y.iter().map(|v| v - grand_mean).collect();

    let index: Vec<HashMap<u64, Vec<usize>>> = fe
        .groups
        .iter()
        .map(|g| {
            let mut m: HashMap<u64, Vec<usize>> = HashMap::new();
            for (i, id) in g.iter().enumerate() {
                m.entry(*id).or_default().push(i);
            }
            m
        })
        .collect();
    let mut effects: Vec<HashMap<u64, f64>> = index
        .iter()
        .map(|m| m.keys().map(|k| (*k, 0.0)).collect())
        .collect();

    for _cycle in 0..max_cycles {
        let mut max_adjust = 0.0_f64;
        for (dim, dim_index) in index.iter().enumerate() {
            for (id, rows) in dim_index {
                let mean: f64 =
                    rows.iter().map(|&i| residual[i]).sum::<f64>() / rows.len() as f64;
                if mean.abs() > max_adjust {
                    max_adjust = mean.abs();
                }
                for &i in rows {
                    residual[i] -= mean;
                }
                *effects[dim].get_mut(id).expect("key present") += mean;
            }
        }
        if max_adjust < tol {
            return Ok(AdditiveEffects { effects, grand_mean });
        }
    }
    Err(Error::NoConvergence {
        context: "additive effects backfitting",
        iterations: max_cycles,
        residual: f64::NAN,
    })
}

/// Within-OLS on demeaned data with cluster-robust standard errors.
pub(crate) fn within_ols(
    y_dm: &[f64],
    x_dm: &[Vec<f64>],
    clusters: &[u64],
    absorbed_dof: usize,
    names: &[&str],
) -> Result<crate::estimation::linear::LinearFit> {
    let n = y_dm.len();
    let k = x_dm.len();
    let mut x = DMatrix::zeros(n, k);
    for (c, col) in x_dm.iter().enumerate() {
        for i in 0..n {
            x[(i, c)] = col[i];
        }
    }
    let y = DVector::from_column_slice(y_dm);
    let fit = crate::estimation::linear::ols(
        &x,
        &y,
        &crate::estimation::linear::CovKind::Clustered(clusters.to_vec()),
        names,
    )?;
    let _ = absorbed_dof;
    Ok(fit)
}
