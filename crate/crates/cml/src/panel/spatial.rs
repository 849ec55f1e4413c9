//! Spatial regressions: market outcomes on radial competitor counts with
//! product, license, and country fixed effects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::fe::{demean_within, within_ols, FeGroups};
use crate::panel::PanelRow;

/// Outcome variable of the spatial regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialOutcome {
    /// arsinh of revenue.
    Revenue,
    /// arsinh of quantity.
    Quantity,
    /// log of the list price.
    ListPrice,
}

/// Coefficients on the (count / 100) ring regressors with clustered SEs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialRegResult {
    pub outcome: SpatialOutcome,
    /// One coefficient per ring: semi-elasticity of the outcome for 100
    /// additional competitors in the ring.
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
    pub demeaning_cycles: usize,
}

/// Within-estimator regression of the chosen outcome on ring counts divided
/// by 100, absorbing product, license, and country effects; standard errors
/// are clustered at the product level.
pub fn spatial_regression(panel: &[PanelRow], outcome: SpatialOutcome) -> Result<SpatialRegResult> {
    if panel.is_empty() {
        return Err(Error::Degenerate("empty panel"));
    }
    let n_rings = panel[0].ring_counts.len();
    if n_rings == 0 {
        return Err(Error::Degenerate("no ring counts on panel rows"));
    }
    let y: Vec<f64> = panel
        .iter()
        .map(|r| match outcome {
            SpatialOutcome::Revenue => PanelRow::arsinh(r.revenue),
            SpatialOutcome::Quantity => PanelRow::arsinh(r.quantity),
            SpatialOutcome::ListPrice => {
                if r.list_price > 0.0 {
                    r.list_price.ln()
                } else {
                    f64::NAN
                }
            }
        })
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spatial regression outcome"));
    }

    let fe = FeGroups::new(vec![
        panel.iter().map(|r| r.product_id).collect(),
        panel.iter().map(|r| hash_label(&r.license)).collect(),
        panel.iter().map(|r| hash_label(&r.country)).collect(),
    ])?;

    let mut columns = Vec::with_capacity(1 + n_rings);
    columns.push(y);
    for ring in 0..n_rings {
        columns.push(panel.iter().map(|r| r.ring_counts[ring] / 100.0).collect());
    }
    let cycles = demean_within(&mut columns, &fe, 1e-10, 500)?;

    let clusters: Vec<u64> = panel.iter().map(|r| r.product_id).collect();
    let names: Vec<String> = (0..n_rings).map(|r| format!("ring_{r}")).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let (y_dm, x_dm) = columns.split_at(1);
    let fit = within_ols(&y_dm[0], x_dm, &clusters, 0, &name_refs)?;

    Ok(SpatialRegResult {
        outcome,
        gamma: fit.coefficients,
        se: fit.se,
        n: panel.len(),
        demeaning_cycles: cycles,
    })
}

pub(crate) fn hash_label(label: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    label.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_panel(gamma: f64, n_products: usize, n_periods: usize, seed: u64) -> Vec<PanelRow> {
        let mut rng = crate::rng::stream(seed, "test.spatial", 0);
        let mut rows = Vec::new();
        for j in 0..n_products {
            let product_fe = rng.gen_range(-1.0..1.0);
            for t in 0..n_periods {
                for country in ["US", "DE"] {
                    let count = rng.gen_range(0.0..400.0);
                    let noise = 0.05 * crate::geometry::standard_normal(&mut rng);
                    let latent = gamma * (count / 100.0) + product_fe + noise;
                    rows.push(PanelRow {
                        product_id: j as u64,
                        firm_id: (j / 5) as u64,
                        license: "desktop".into(),
                        country: country.into(),
                        period: t as u32,
                        revenue: latent.sinh(),
                        quantity: (0.5 * latent).sinh(),
                        list_price: (0.1 * latent).exp() * 10.0,
                        ring_counts: vec![count, rng.gen_range(0.0..400.0)],
                    });
                }
            }
        }
        rows
    }

    #[test]
    fn recovers_ring_semi_elasticity() {
        let panel = synthetic_panel(-0.4, 400, 12, 5);
        let fit = spatial_regression(&panel, SpatialOutcome::Revenue).unwrap();
        assert!(
            (fit.gamma[0] + 0.4).abs() < 0.02,
            "gamma {} should be near -0.4",
            fit.gamma[0]
        );
        assert!(fit.gamma[1].abs() < 0.02, "placebo ring {}", fit.gamma[1]);
        assert!(fit.se.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn no_within_variation_is_reported_collinear() {
        // Ring counts constant within product: absorbed by the product FE.
        let mut panel = synthetic_panel(-0.4, 20, 6, 7);
        for row in &mut panel {
            row.ring_counts = vec![row.product_id as f64 * 10.0];
        }
        let err = spatial_regression(&panel, SpatialOutcome::Revenue).unwrap_err();
        assert!(matches!(err, Error::Collinear(_)), "got {err}");
    }

    #[test]
    fn arsinh_handles_zero_outcomes() {
        let mut panel = synthetic_panel(-0.2, 30, 4, 9);
        for row in panel.iter_mut().take(40) {
            row.revenue = 0.0;
            row.quantity = 0.0;
        }
        assert!(spatial_regression(&panel, SpatialOutcome::Revenue).is_ok());
        assert!(spatial_regression(&panel, SpatialOutcome::Quantity).is_ok());
    }
}
