//! Staggered event studies around visually-close entry, plus the
//! imputation estimator that is robust to heterogeneous treatment timing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::distance_unchecked;
use crate::panel::fe::{demean_within, fit_additive_effects, within_ols, FeGroups};
use crate::panel::spatial::hash_label;
use crate::panel::{PanelRow, SpatialOutcome};

/// Sentinel period for products whose treatment never occurs.
pub const NEVER_TREATED: u32 = u32::MAX;

/// Event-time window with binned endpoints: the first dummy absorbs all
/// periods at or before `-pre`, the last all periods at or after `post`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventWindow {
    pub pre: i64,
    pub post: i64,
}

impl Default for EventWindow {
    fn default() -> Self {
        Self { pre: 5, post: 9 }
    }
}

impl EventWindow {
    /// Event times carrying dummies: the window without the omitted -1.
    pub fn dummy_times(&self) -> Vec<i64> {
        (-self.pre..=self.post).filter(|&s| s != -1).collect()
    }

    pub fn clamp(&self, s: i64) -> i64 {
        s.clamp(-self.pre, self.post)
    }
}

/// First period in which each product's set of `k` nearest rivals changes
/// because of a new entry. Products whose set never changes map to
/// [`NEVER_TREATED`].
///
/// `products` supplies `(id, entry_period, coordinates)`.
pub fn treatment_periods(
    products: &[(u64, u32, Vec<f64>)],
    k: usize,
) -> Result<HashMap<u64, u32>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let mut periods: Vec<u32> = products.iter().map(|(_, t, _)| *t).collect();
    periods.sort_unstable();
    periods.dedup();

    let mut treated: HashMap<u64, u32> = HashMap::new();
    for &t in &periods {
        let entrants: Vec<&(u64, u32, Vec<f64>)> =
            products.iter().filter(|(_, e, _)| *e == t).collect();
        if entrants.is_empty() {
            continue;
        }
        for (id, entry, coords) in products {
            if *entry >= t || treated.contains_key(id) {
                continue;
            }
            // k-th nearest distance among rivals present before t.
            let mut dists: Vec<f64> = products
                .iter()
                .filter(|(oid, oe, _)| oid != id && *oe < t)
                .map(|(_, _, oc)| distance_unchecked(coords, oc))
                .collect();
            dists.sort_by(f64::total_cmp);
            let kth = dists.get(k - 1).copied();
            let hit = entrants.iter().any(|(_, _, ec)| {
                let d = distance_unchecked(coords, ec);
                match kth {
                    Some(kd) => d < kd,
                    // Fewer than k rivals so far: any entrant joins the set.
                    None => true,
                }
            });
            if hit {
                treated.insert(*id, t);
            }
        }
    }
    let mut out: HashMap<u64, u32> = products
        .iter()
        .map(|(id, _, _)| (*id, NEVER_TREATED))
        .collect();
    for (id, t) in treated {
        out.insert(id, t);
    }
    Ok(out)
}

/// Event-study coefficients relative to the omitted period -1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyResult {
    /// `(event_time, coefficient, clustered se)`, sorted by event time; -1
    /// is omitted and normalized to zero.
    pub beta: Vec<(i64, f64, f64)>,
    pub n: usize,
    pub n_treated_products: usize,
}

fn outcome_value(row: &PanelRow, outcome: SpatialOutcome) -> f64 {
    match outcome {
        SpatialOutcome::Revenue => PanelRow::arsinh(row.revenue),
        SpatialOutcome::Quantity => PanelRow::arsinh(row.quantity),
        SpatialOutcome::ListPrice => row.list_price.ln(),
    }
}

/// OLS event study with firm, license, country, and time fixed effects and
/// firm-clustered standard errors.
pub fn event_study(
    panel: &[PanelRow],
    treatment: &HashMap<u64, u32>,
    window: &EventWindow,
    outcome: SpatialOutcome,
) -> Result<EventStudyResult> {
    if panel.is_empty() {
        return Err(Error::Degenerate("empty panel"));
    }
    let times = window.dummy_times();
    let treated_products: std::collections::HashSet<u64> = treatment
        .iter()
        .filter(|(_, &t)| t != NEVER_TREATED)
        .map(|(id, _)| *id)
        .collect();
    if panel.iter().all(|r| !treated_products.contains(&r.product_id)) {
        return Err(Error::Degenerate("no treated units in the panel"));
    }

    let y: Vec<f64> = panel.iter().map(|r| outcome_value(r, outcome)).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("event study outcome"));
    }
    // Event times that never occur in the panel carry no dummy; short panels
    // simply estimate a narrower curve.
    let mut columns = Vec::with_capacity(1 + times.len());
    columns.push(y);
    let mut active_times = Vec::with_capacity(times.len());
    for &s in &times {
        let col: Vec<f64> = panel
            .iter()
            .map(|r| {
                match treatment.get(&r.product_id) {
                    Some(&t0) if t0 != NEVER_TREATED => {
                        let s_obs = window.clamp(r.period as i64 - t0 as i64);
                        if s_obs == s {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                }
            })
            .collect();
        if col.iter().any(|v| *v != 0.0) {
            columns.push(col);
            active_times.push(s);
        }
    }
    let times = active_times;
    if times.is_empty() {
        return Err(Error::Degenerate("no event-time variation in the panel"));
    }

    let fe = FeGroups::new(vec![
        panel.iter().map(|r| r.firm_id).collect(),
        panel.iter().map(|r| hash_label(&r.license)).collect(),
        panel.iter().map(|r| hash_label(&r.country)).collect(),
        panel.iter().map(|r| r.period as u64).collect(),
    ])?;
    demean_within(&mut columns, &fe, 1e-10, 500)?;

    let clusters: Vec<u64> = panel.iter().map(|r| r.firm_id).collect();
    let names: Vec<String> = times.iter().map(|s| format!("event_{s}")).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let (y_dm, x_dm) = columns.split_at(1);
    let fit = within_ols(&y_dm[0], x_dm, &clusters, 0, &name_refs)?;

    let beta = times
        .iter()
        .zip(fit.coefficients.iter().zip(&fit.se))
        .map(|(&s, (&b, &se))| (s, b, se))
        .collect();
    Ok(EventStudyResult {
        beta,
        n: panel.len(),
        n_treated_products: treated_products.len(),
    })
}

/// Imputation estimator output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationResult {
    /// `(event_time, mean actual-minus-imputed, n rows)`.
    pub curve: Vec<(i64, f64, usize)>,
    /// Treated rows dropped because some fixed-effect cell never appeared in
    /// the untreated fitting sample.
    pub dropped: usize,
}

/// Imputation event study: fits the additive fixed-effect model on untreated
/// observations only, imputes counterfactual outcomes for treated rows, and
/// averages actual minus imputed by event time.
pub fn imputation_event_study(
    panel: &[PanelRow],
    treatment: &HashMap<u64, u32>,
    window: &EventWindow,
    outcome: SpatialOutcome,
) -> Result<ImputationResult> {
    let labels = |r: &PanelRow| {
        vec![
            r.firm_id,
            hash_label(&r.license),
            hash_label(&r.country),
            r.period as u64,
        ]
    };
    let is_treated_row = |r: &PanelRow| -> bool {
        match treatment.get(&r.product_id) {
            Some(&t0) if t0 != NEVER_TREATED => r.period >= t0,
            _ => false,
        }
    };

    let untreated: Vec<&PanelRow> = panel.iter().filter(|r| !is_treated_row(r)).collect();
    if untreated.is_empty() {
        return Err(Error::Degenerate("no untreated observations to fit on"));
    }
    let y_untreated: Vec<f64> = untreated.iter().map(|r| outcome_value(r, outcome)).collect();
    let fe = FeGroups::new(vec![
        untreated.iter().map(|r| r.firm_id).collect(),
        untreated.iter().map(|r| hash_label(&r.license)).collect(),
        untreated.iter().map(|r| hash_label(&r.country)).collect(),
        untreated.iter().map(|r| r.period as u64).collect(),
    ])?;
    let effects = fit_additive_effects(&y_untreated, &fe, 1e-12, 5000)?;

    let mut sums: HashMap<i64, (f64, usize)> = HashMap::new();
    let mut dropped = 0usize;
    for r in panel {
        let Some(&t0) = treatment.get(&r.product_id) else { continue };
        if t0 == NEVER_TREATED {
            continue;
        }
        let s = window.clamp(r.period as i64 - t0 as i64);
        match effects.predict(&labels(r)) {
            Some(imputed) => {
                let entry = sums.entry(s).or_insert((0.0, 0));
                entry.0 += outcome_value(r, outcome) - imputed;
                entry.1 += 1;
            }
            None => dropped += 1,
        }
    }
    let mut curve: Vec<(i64, f64, usize)> = sums
        .into_iter()
        .map(|(s, (total, n))| (s, total / n as f64, n))
        .collect();
    curve.sort_by_key(|(s, _, _)| *s);
    Ok(ImputationResult { curve, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Panel DGP with a constant post-treatment effect on arsinh revenue.
    fn event_panel(
        effect: impl Fn(u64, i64) -> f64,
        n_firms: usize,
        products_per_firm: usize,
        n_periods: u32,
        treat_share: f64,
        seed: u64,
    ) -> (Vec<PanelRow>, HashMap<u64, u32>) {
        let mut rng = crate::rng::stream(seed, "test.event", 0);
        let mut rows = Vec::new();
        let mut treatment = HashMap::new();
        let mut pid = 0u64;
        for f in 0..n_firms {
            let firm_fe = rng.gen_range(-0.5..0.5);
            for _ in 0..products_per_firm {
                let treated = rng.gen::<f64>() < treat_share;
                let t0 = if treated {
                    rng.gen_range(6..(n_periods - 10)) as u32
                } else {
                    NEVER_TREATED
                };
                treatment.insert(pid, t0);
                for t in 0..n_periods {
                    let time_fe = 0.02 * t as f64;
                    let tau = if t0 != NEVER_TREATED && t >= t0 {
                        effect(pid, t as i64 - t0 as i64)
                    } else {
                        0.0
                    };
                    let noise = 0.02 * crate::geometry::standard_normal(&mut rng);
                    let latent = 1.0 + firm_fe + time_fe + tau + noise;
                    rows.push(PanelRow {
                        product_id: pid,
                        firm_id: f as u64,
                        license: "desktop".into(),
                        country: "US".into(),
                        period: t,
                        revenue: latent.sinh(),
                        quantity: latent.sinh(),
                        list_price: 10.0,
                        ring_counts: vec![0.0],
                    });
                }
                pid += 1;
            }
        }
        (rows, treatment)
    }

    #[test]
    fn recovers_constant_post_effect_with_flat_pretrends() {
        let (panel, treatment) =
            event_panel(|_, _| -0.05, 60, 5, 24, 0.5, 3);
        let window = EventWindow::default();
        let res = event_study(&panel, &treatment, &window, SpatialOutcome::Revenue).unwrap();
        for (s, b, _) in &res.beta {
            if *s >= 0 {
                assert!((b + 0.05).abs() < 0.02, "post s={s}: {b}");
            } else {
                assert!(b.abs() < 0.02, "pre s={s}: {b}");
            }
        }
    }

    #[test]
    fn never_treated_only_panel_errors() {
        let (panel, mut treatment) = event_panel(|_, _| -0.05, 10, 3, 20, 0.5, 5);
        for t in treatment.values_mut() {
            *t = NEVER_TREATED;
        }
        let window = EventWindow::default();
        let err = event_study(&panel, &treatment, &window, SpatialOutcome::Revenue);
        assert!(err.is_err());
    }

    #[test]
    fn firm_level_shift_is_absorbed() {
        let (panel, treatment) = event_panel(|_, _| -0.05, 40, 4, 22, 0.5, 7);
        let window = EventWindow::default();
        let base = event_study(&panel, &treatment, &window, SpatialOutcome::Revenue).unwrap();

        let mut shifted = panel.clone();
        for row in &mut shifted {
            // Shift the latent outcome by a firm-specific constant: applied
            // on the arsinh scale to remain a pure location shift.
            let add = row.firm_id as f64 * 0.1;
            row.revenue = (PanelRow::arsinh(row.revenue) + add).sinh();
        }
        let moved = event_study(&shifted, &treatment, &window, SpatialOutcome::Revenue).unwrap();
        for ((_, a, _), (_, b, _)) in base.beta.iter().zip(&moved.beta) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn treatment_periods_flip_on_closer_entry() {
        // Focal at the pole with five rivals; a later entrant closer than the
        // fifth flips treatment at its entry period.
        let mut products: Vec<(u64, u32, Vec<f64>)> = vec![(0, 0, vec![1.0, 0.0, 0.0])];
        for i in 0..5 {
            let theta = 0.2 + 0.02 * i as f64;
            products.push((i + 1, 0, vec![theta.cos(), theta.sin(), 0.0]));
        }
        // Entrant at period 3, closer than every incumbent rival.
        products.push((9, 3, vec![(0.05f64).cos(), (0.05f64).sin(), 0.0]));
        let treated = treatment_periods(&products, 5).unwrap();
        assert_eq!(treated[&0], 3);
        // The farthest original rival also sees its 5-set change.
        assert!(treated.values().filter(|&&t| t == 3).count() >= 1);

        // Without the entrant nothing happens.
        let silent = treatment_periods(&products[..6], 5).unwrap();
        assert!(silent.values().all(|&t| t == NEVER_TREATED));
    }

    #[test]
    fn imputation_matches_ols_under_homogeneous_effects() {
        let (panel, treatment) = event_panel(|_, _| -0.05, 60, 5, 24, 0.5, 11);
        let window = EventWindow::default();
        let ols = event_study(&panel, &treatment, &window, SpatialOutcome::Revenue).unwrap();
        let imp =
            imputation_event_study(&panel, &treatment, &window, SpatialOutcome::Revenue).unwrap();
        for (s, eff, _) in &imp.curve {
            if *s >= 0 {
                let ols_b = ols
                    .beta
                    .iter()
                    .find(|(t, _, _)| t == s)
                    .map(|(_, b, _)| *b)
                    .unwrap();
                assert!((eff - ols_b).abs() < 0.02, "s={s}: imputation {eff} vs ols {ols_b}");
                assert!((eff + 0.05).abs() < 0.02);
            }
        }
    }

    #[test]
    fn zero_effect_dgp_gives_flat_curve() {
        let (panel, treatment) = event_panel(|_, _| 0.0, 50, 4, 24, 0.5, 13);
        let window = EventWindow::default();
        let imp =
            imputation_event_study(&panel, &treatment, &window, SpatialOutcome::Revenue).unwrap();
        for (s, eff, _) in &imp.curve {
            assert!(eff.abs() < 0.02, "s={s}: {eff}");
        }
    }

    #[test]
    fn imputation_beats_ols_under_heterogeneous_staggered_effects() {
        // Cohort-and-duration heterogeneity with universal eventual treatment:
        // the late-treated serve as controls for the early-treated under OLS,
        // which contaminates the binned endpoint estimates.
        let mut rng = crate::rng::stream(17, "test.staggered", 0);
        let n_periods = 30u32;
        let mut rows = Vec::new();
        let mut treatment = HashMap::new();
        let mut pid = 0u64;
        for f in 0..80u64 {
            let firm_fe = rng.gen_range(-0.5..0.5);
            for _ in 0..4 {
                // A never-treated slice keeps every period cell identified
                // for the imputation fit.
                let cohort = [6u32, 12, 18, NEVER_TREATED][(pid % 4) as usize];
                treatment.insert(pid, cohort);
                // Effect grows with time since treatment, three times faster
                // for early cohorts.
                let slope = match cohort {
                    6 => -0.03,
                    12 => -0.015,
                    _ => -0.005,
                };
                for t in 0..n_periods {
                    let tau = if t >= cohort {
                        slope * (1.0 + (t - cohort) as f64)
                    } else {
                        0.0
                    };
                    let noise = 0.01 * crate::geometry::standard_normal(&mut rng);
                    let latent = 1.0 + firm_fe + 0.01 * t as f64 + tau + noise;
                    rows.push(PanelRow {
                        product_id: pid,
                        firm_id: f,
                        license: "desktop".into(),
                        country: "US".into(),
                        period: t,
                        revenue: latent.sinh(),
                        quantity: latent.sinh(),
                        list_price: 10.0,
                        ring_counts: vec![0.0],
                    });
                }
                pid += 1;
            }
        }
        let window = EventWindow::default();

        // True average effect by clamped event time over treated rows.
        let mut truth: HashMap<i64, (f64, usize)> = HashMap::new();
        for r in &rows {
            let t0 = treatment[&r.product_id];
            if r.period < t0 {
                continue;
            }
            let slope = match t0 {
                6 => -0.03,
                12 => -0.015,
                _ => -0.005,
            };
            let tau = slope * (1.0 + (r.period - t0) as f64);
            let s = window.clamp(r.period as i64 - t0 as i64);
            let e = truth.entry(s).or_insert((0.0, 0));
            e.0 += tau;
            e.1 += 1;
        }

        let imp = imputation_event_study(&rows, &treatment, &window, SpatialOutcome::Revenue)
            .unwrap();
        let ols = event_study(&rows, &treatment, &window, SpatialOutcome::Revenue).unwrap();

        let mut ols_max_err = 0.0_f64;
        for (s, eff, _) in &imp.curve {
            if *s < 0 {
                continue;
            }
            let (sum, n) = truth[s];
            let target = sum / n as f64;
            assert!(
                (eff - target).abs() < 0.02,
                "imputation s={s}: {eff} vs truth {target}"
            );
            let ols_b = ols.beta.iter().find(|(t, _, _)| t == s).map(|(_, b, _)| *b).unwrap();
            ols_max_err = ols_max_err.max((ols_b - target).abs());
        }
        assert!(
            ols_max_err > 0.03,
            "constructed DGP should contaminate OLS (max error {ols_max_err})"
        );
    }
}
