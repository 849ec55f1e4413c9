//! Synthetic marketplace generator.
//!
//! Builds an internally consistent dataset from true parameters: embeddings
//! by cluster-and-perturb on the sphere, demand shocks, exchange-rate-style
//! cost shifters, Bertrand equilibrium prices, shares from true demand, and
//! profit-seeking entrant placement under the true cost function. Estimating
//! on this output is the main acceptance harness.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{
    compute_shares, ConsumerDraws, DemandParams, MarketId, MarketSnapshot, Product,
};
use crate::error::{Error, Result};
use crate::estimation::DemandInstruments;
use crate::geometry::{
    fit_pca, pairwise_distance_range, perturb_locations, Embedding, PcaReducer, PerturbOptions,
    ProductPoint,
};
use crate::panel::PanelRow;
use crate::rng;
use crate::supply::{
    equilibrium_prices, fixed_cost, CostParams, OwnershipMap, PricingSettings,
};

/// Full configuration of the synthetic marketplace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub schema_version: u32,
    /// Master seed; every stream derives from it. Mandatory, no wall-clock
    /// fallback.
    pub seed: u64,
    pub n_firms: usize,
    pub n_products: usize,
    pub n_periods: u32,
    pub n_countries: usize,
    pub embedding_dim: usize,
    pub reduced_dim: usize,
    pub n_nests: usize,
    pub n_draws: usize,
    /// Market size per country (recycled when shorter than `n_countries`).
    pub market_size: Vec<f64>,
    pub demand: DemandParams,
    pub cost: CostParams,
    /// Total-norm spread of nest cluster centers around the base direction
    /// (split evenly across dimensions).
    pub cluster_spread: f64,
    /// Total-norm spread of products around their cluster center.
    pub within_cluster_spread: f64,
    pub sigma_xi: f64,
    pub mc_base_mean: f64,
    pub mc_base_sd: f64,
    /// AR(1) parameters of the log exchange rate per non-numeraire country.
    pub exrate_rho: f64,
    pub exrate_sd: f64,
    pub glyph_mean: f64,
    pub glyph_sd: f64,
    /// Fraction of products present from period 0.
    pub incumbent_share: f64,
    /// Candidate locations evaluated per entrant.
    pub n_entry_candidates: usize,
    /// Rings for the reduced-form panel counts.
    pub rings: Vec<(f64, f64)>,
    /// Corpus pairwise-distance bounds checked after generation.
    pub distance_floor: f64,
    pub distance_ceiling: f64,
    #[serde(default = "default_true")]
    pub enforce_distance_bounds: bool,
}

fn default_true() -> bool {
    true
}

impl SyntheticConfig {
    /// A small, fast default marketplace; fixtures override fields.
    pub fn demo(seed: u64) -> Self {
        Self {
            schema_version: 1,
            seed,
            n_firms: 12,
            n_products: 40,
            n_periods: 4,
            n_countries: 2,
            embedding_dim: 32,
            reduced_dim: 4,
            n_nests: 3,
            n_draws: 100,
            market_size: vec![20_000.0, 12_000.0],
            demand: DemandParams {
                beta_price: -0.156,
                beta_struct: vec![-4.5, 0.4],
                beta_img_mean: vec![2.0, -1.5, 1.0, 0.5],
                beta_img_sd: vec![1.5, 0.8, 0.0, 0.0],
                rho: 0.317,
            },
            cost: CostParams {
                eta0: vec![800.0, -400.0, 300.0, 150.0],
                eta1: vec![40.0, 25.0, -15.0, 10.0],
                eta2: vec![18.0, -9.0, 6.0, 4.0],
                eta3: vec![-6.0, 3.0, -2.0, 1.0],
                nu_intercept: crate::supply::NormalSpec {
                    mean: 300.0,
                    sd: 80.0,
                    truncate_at_zero: true,
                },
                nu_slope_sd: vec![5.0; 4],
            },
            cluster_spread: 0.28,
            within_cluster_spread: 0.12,
            sigma_xi: 0.8,
            mc_base_mean: 6.0,
            mc_base_sd: 1.0,
            exrate_rho: 0.85,
            exrate_sd: 0.08,
            glyph_mean: 4.0,
            glyph_sd: 1.2,
            incumbent_share: 0.6,
            n_entry_candidates: 48,
            rings: vec![(0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4)],
            distance_floor: 0.0002,
            distance_ceiling: 0.9563,
            enforce_distance_bounds: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        for (name, v) in [
            ("n_firms", self.n_firms),
            ("n_products", self.n_products),
            ("n_countries", self.n_countries),
            ("embedding_dim", self.embedding_dim),
            ("reduced_dim", self.reduced_dim),
            ("n_nests", self.n_nests),
            ("n_draws", self.n_draws),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.n_periods == 0 {
            return Err(Error::InvalidConfig("n_periods must be >= 1".into()));
        }
        if self.reduced_dim > self.embedding_dim {
            return Err(Error::InvalidConfig(
                "reduced_dim cannot exceed embedding_dim".into(),
            ));
        }
        if self.demand.k() != self.reduced_dim {
            return Err(Error::InvalidConfig(
                "demand image coefficients must match reduced_dim".into(),
            ));
        }
        if self.cost.k() != self.reduced_dim {
            return Err(Error::InvalidConfig(
                "cost dimensions must match reduced_dim".into(),
            ));
        }
        if self.market_size.is_empty() || self.market_size.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidConfig("market sizes must be positive".into()));
        }
        if !(self.incumbent_share > 0.0 && self.incumbent_share <= 1.0) {
            return Err(Error::InvalidConfig("incumbent_share must be in (0, 1]".into()));
        }
        self.demand.validate()?;
        self.cost.validate()?;
        Ok(())
    }

    pub fn market_size_of(&self, country: usize) -> f64 {
        self.market_size[country % self.market_size.len()]
    }
}

/// One entrant's identity and entry period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntrantRecord {
    pub product_id: u64,
    pub firm_id: u64,
    pub entry_period: u32,
}

/// Generated marketplace: markets with equilibrium prices and true shocks,
/// observed shares, instruments, panel rows, and the fitted reducer.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub config: SyntheticConfig,
    pub reducer: PcaReducer,
    /// Markets ordered by (period, country).
    pub markets: Vec<MarketSnapshot>,
    /// Observed (equilibrium) shares aligned with each market's products.
    pub observed_shares: Vec<Vec<f64>>,
    /// Instruments aligned with the stacked rows of `markets`.
    pub instruments: DemandInstruments,
    pub panel: Vec<PanelRow>,
    pub entrants: Vec<EntrantRecord>,
    pub draws: Arc<ConsumerDraws>,
}

impl GeneratedData {
    /// Country markets of one period (the natural policy-experiment unit).
    pub fn period_markets(&self, period: u32) -> Vec<&MarketSnapshot> {
        self.markets
            .iter()
            .filter(|m| m.market_id.period == period)
            .collect()
    }

    /// Estimation sample view over all markets.
    pub fn estimation_sample(&self) -> crate::estimation::EstimationSample {
        crate::estimation::EstimationSample::new(self.markets.clone(), self.observed_shares.clone())
            .expect("aligned by construction")
    }

    /// Pool of true demand shocks of entrants at their entry period.
    pub fn entrant_xi_pool(&self) -> Vec<f64> {
        let mut pool = Vec::new();
        for e in &self.entrants {
            for m in self.markets.iter().filter(|m| m.market_id.period == e.entry_period) {
                if let Some(idx) = m.product_index(e.product_id) {
                    pool.push(m.products[idx].xi);
                }
            }
        }
        pool
    }
}

struct ProductSeed {
    id: u64,
    firm_id: u64,
    nest_id: u32,
    entry_period: u32,
    glyphs: f64,
    mc_base: f64,
    embedding: Option<Embedding>,
}

/// Generates the complete synthetic dataset for a configuration.
pub fn generate_market(config: &SyntheticConfig) -> Result<GeneratedData> {
    config.validate()?;
    let seed = config.seed;
    let dim = config.embedding_dim;
    let k = config.reduced_dim;

    // Product identities, firms, entry schedule.
    let mut rng_firms = rng::stream(seed, "synth.firms", 0);
    let n_incumbents = ((config.n_products as f64) * config.incumbent_share).round() as usize;
    let n_incumbents = n_incumbents.clamp(1, config.n_products).max(
        // A proper PCA needs more points than components; smaller corpora
        // use the axis fallback.
        (k + 2).min(config.n_products),
    );
    let mut seeds: Vec<ProductSeed> = Vec::with_capacity(config.n_products);
    {
        let mut rng_glyphs = rng::stream(seed, "synth.glyphs", 0);
        let mut rng_mc = rng::stream(seed, "synth.mc", 0);
        // Entrants pick distinct (firm, period) slots: one product per firm
        // per period.
        let mut slots: Vec<(u64, u32)> = Vec::new();
        if config.n_periods > 1 {
            for t in 1..config.n_periods {
                for f in 0..config.n_firms {
                    slots.push((f as u64, t));
                }
            }
        }
        for id in 0..config.n_products as u64 {
            let is_incumbent = (id as usize) < n_incumbents;
            let (firm_id, entry_period) = if is_incumbent || slots.is_empty() {
                (rng_firms.gen_range(0..config.n_firms) as u64, 0)
            } else {
                let pick = rng_firms.gen_range(0..slots.len());
                slots.swap_remove(pick)
            };
            let glyphs = (config.glyph_mean
                + config.glyph_sd * crate::geometry::standard_normal(&mut rng_glyphs))
            .max(0.5);
            let mc_base = (config.mc_base_mean
                + config.mc_base_sd * crate::geometry::standard_normal(&mut rng_mc))
            .max(0.5);
            seeds.push(ProductSeed {
                id,
                firm_id,
                nest_id: 0,
                entry_period,
                glyphs,
                mc_base,
                embedding: None,
            });
        }
        seeds.sort_by_key(|s| (s.entry_period, s.id));
    }

    // Cluster centers and incumbent embeddings. Configured spreads are total
    // norms; the per-dimension scale divides by sqrt(dim).
    let mut rng_geo = rng::stream(seed, "synth.embeddings", 0);
    let cluster_sd = config.cluster_spread / (dim as f64).sqrt();
    let within_sd = config.within_cluster_spread / (dim as f64).sqrt();
    let centers: Vec<Embedding> = (0..config.n_nests)
        .map(|_| {
            let mut v = vec![0.0; dim];
            v[0] = 1.0;
            for x in v.iter_mut() {
                *x += cluster_sd * crate::geometry::standard_normal(&mut rng_geo);
            }
            Embedding::normalized(v)
        })
        .collect::<Result<_>>()?;
    for s in seeds.iter_mut() {
        let nest = rng_geo.gen_range(0..config.n_nests) as u32;
        s.nest_id = nest;
        if s.entry_period == 0 {
            let center = &centers[nest as usize];
            let v: Vec<f64> = center
                .values()
                .iter()
                .map(|c| c + within_sd * crate::geometry::standard_normal(&mut rng_geo))
                .collect();
            s.embedding = Some(Embedding::normalized(v)?);
        }
    }

    // Reducer fitted on incumbents and frozen for the whole run. Corpora too
    // small for a PCA fall back to coordinate-axis projections so degenerate
    // configurations (single-product markets) stay usable.
    let incumbent_corpus: Vec<Embedding> = seeds
        .iter()
        .filter_map(|s| s.embedding.clone())
        .collect();
    let reducer = if incumbent_corpus.len() > k {
        fit_pca(&incumbent_corpus, k)?
    } else {
        fallback_axis_reducer(&incumbent_corpus, k)
    };

    // Exchange-rate paths; country 0 is the numeraire.
    let mut exrate = vec![vec![1.0_f64; config.n_periods as usize]; config.n_countries];
    {
        let mut rng_fx = rng::stream(seed, "synth.exrate", 0);
        for path in exrate.iter_mut().skip(1) {
            let mut log_e = 0.0;
            for t in 0..config.n_periods as usize {
                log_e = config.exrate_rho * log_e
                    + config.exrate_sd * crate::geometry::standard_normal(&mut rng_fx);
                path[t] = log_e.exp();
            }
        }
    }

    // Demand shocks per (product, country, period), drawn in product order.
    let mut xi = vec![0.0_f64; config.n_products * config.n_countries * config.n_periods as usize];
    {
        let mut rng_xi = rng::stream(seed, "synth.xi", 0);
        for v in xi.iter_mut() {
            *v = config.sigma_xi * crate::geometry::standard_normal(&mut rng_xi);
        }
    }
    let xi_at = |product: u64, country: usize, period: u32| -> f64 {
        xi[(product as usize * config.n_countries + country) * config.n_periods as usize
            + period as usize]
    };

    // Shared consumer draws.
    let draws = Arc::new(ConsumerDraws::halton_normal(
        config.n_draws,
        k,
        rng::derive_seed(seed, "synth.draws", 0),
    ));
    let placement_draws = Arc::new(ConsumerDraws::halton_normal(
        32,
        k,
        rng::derive_seed(seed, "synth.placement_draws", 0),
    ));

    // Sequential profit-seeking placement of entrants.
    let markup_guess = 1.0 / -config.demand.beta_price;
    let mut rng_entry = rng::stream(seed, "synth.entry", 0);
    let mut rng_nu = rng::stream(seed, "synth.nu", 0);
    let order: Vec<usize> = (0..seeds.len()).collect();
    for idx in order {
        if seeds[idx].embedding.is_some() {
            continue;
        }
        let placed: Vec<Embedding> = seeds
            .iter()
            .filter_map(|s| s.embedding.clone())
            .collect();
        let candidate_seed = rng_entry.gen::<u64>();
        let per_level = (config.n_entry_candidates / 8).max(1);
        let raw_candidates = perturb_locations(
            &placed,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 30.0],
            per_level,
            candidate_seed,
            &PerturbOptions::default(),
        )?;
        // Keep candidates inside the corpus distance ceiling so entry cannot
        // break the configured geometry bounds.
        let candidates: Vec<Embedding> = {
            let inside: Vec<Embedding> = raw_candidates
                .iter()
                .filter(|c| {
                    placed.iter().all(|p| {
                        crate::geometry::distance_unchecked(c.values(), p.values())
                            <= config.distance_ceiling
                    })
                })
                .cloned()
                .collect();
            if inside.is_empty() {
                // Fall back to the candidate closest to the corpus.
                let best = raw_candidates
                    .iter()
                    .min_by(|a, b| {
                        let da = placed
                            .iter()
                            .map(|p| crate::geometry::distance_unchecked(a.values(), p.values()))
                            .fold(f64::INFINITY, f64::min);
                        let db = placed
                            .iter()
                            .map(|p| crate::geometry::distance_unchecked(b.values(), p.values()))
                            .fold(f64::INFINITY, f64::min);
                        da.total_cmp(&db)
                    })
                    .expect("raw candidate set nonempty");
                vec![best.clone()]
            } else {
                inside
            }
        };
        let nu = config.cost.draw_nu(&mut rng_nu);

        // Representative market: country 0 at the entry period, incumbents
        // priced at cost plus a logit markup guess.
        let entry_period = seeds[idx].entry_period;
        let incumbent_products: Vec<Product> = seeds
            .iter()
            .filter(|s| s.embedding.is_some())
            .map(|s| {
                let emb = s.embedding.clone().expect("filtered");
                let reduced = reducer.reduce(&emb)?;
                Ok(Product {
                    id: s.id,
                    firm_id: s.firm_id,
                    nest_id: s.nest_id,
                    x_struct: vec![1.0, s.glyphs],
                    x_emb_reduced: reduced,
                    x_emb_full: emb,
                    price: s.mc_base + markup_guess,
                    xi: 0.0,
                    mc: Some(s.mc_base),
                    entry_period: s.entry_period,
                })
            })
            .collect::<Result<_>>()?;
        let incumbent_reduced: Vec<Vec<f64>> = incumbent_products
            .iter()
            .map(|p| p.x_emb_reduced.values.clone())
            .collect();

        let mut best: Option<(f64, Embedding)> = None;
        for cand in &candidates {
            let reduced = reducer.reduce(cand)?;
            // Net value = own variable profit at the guess prices minus the
            // fixed cost at the candidate.
            let mut products = incumbent_products.clone();
            let entrant_id = seeds[idx].id;
            let nest_id = nearest_nest(&incumbent_products, cand, seeds[idx].nest_id);
            products.push(Product {
                id: entrant_id,
                firm_id: seeds[idx].firm_id,
                nest_id,
                x_struct: vec![1.0, seeds[idx].glyphs],
                x_emb_reduced: reduced.clone(),
                x_emb_full: cand.clone(),
                price: seeds[idx].mc_base + markup_guess,
                xi: 0.0,
                mc: Some(seeds[idx].mc_base),
                entry_period,
            });
            let snapshot = MarketSnapshot::new(
                MarketId { country: country_name(0), period: entry_period, license: "desktop".into() },
                products,
                config.market_size_of(0),
                Arc::clone(&placement_draws),
            )?;
            let shares = compute_shares(&snapshot, &config.demand)?;
            let own = shares.shares.last().copied().unwrap_or(0.0);
            let gross = own * snapshot.market_size * markup_guess;
            let incumbents_ref: Vec<&[f64]> =
                incumbent_reduced.iter().map(|v| v.as_slice()).collect();
            let f = fixed_cost(&reduced.values, &incumbents_ref, &config.cost, &nu)?;
            let net = gross - f;
            if best.as_ref().map(|(b, _)| net > *b).unwrap_or(true) {
                best = Some((net, cand.clone()));
            }
        }
        let (_, location) = best.ok_or(Error::Degenerate("no entry candidates generated"))?;
        seeds[idx].nest_id = nearest_nest(&incumbent_products, &location, seeds[idx].nest_id);
        seeds[idx].embedding = Some(location);
    }

    // Distance-range validation on the final corpus.
    let corpus: Vec<Embedding> = seeds.iter().filter_map(|s| s.embedding.clone()).collect();
    if config.enforce_distance_bounds && corpus.len() >= 2 {
        let (dmin, dmax) = pairwise_distance_range(&corpus)?;
        if dmin < config.distance_floor || dmax > config.distance_ceiling {
            return Err(Error::InvalidConfig(format!(
                "corpus distance range [{dmin:.4}, {dmax:.4}] violates configured bounds \
                 [{}, {}]; adjust spreads",
                config.distance_floor, config.distance_ceiling
            )));
        }
    }

    // Assemble per-market snapshots and solve equilibrium prices.
    let pricing = PricingSettings::default();
    let market_specs: Vec<(usize, u32)> = (0..config.n_periods)
        .flat_map(|t| (0..config.n_countries).map(move |c| (c, t)))
        .collect();
    let solved: Vec<Result<(MarketSnapshot, Vec<f64>)>> = market_specs
        .par_iter()
        .map(|&(country, period)| {
            let mut products = Vec::new();
            for s in &seeds {
                if s.entry_period > period {
                    continue;
                }
                let emb = s.embedding.clone().expect("all products placed");
                let reduced = reducer.reduce(&emb)?;
                let mc = s.mc_base * exrate[s.firm_id as usize % config.n_countries]
                    [period as usize]
                    .max(0.05);
                products.push(Product {
                    id: s.id,
                    firm_id: s.firm_id,
                    nest_id: s.nest_id,
                    x_struct: vec![1.0, s.glyphs],
                    x_emb_reduced: reduced,
                    x_emb_full: emb,
                    price: mc + markup_guess,
                    xi: xi_at(s.id, country, period),
                    mc: Some(mc),
                    entry_period: s.entry_period,
                });
            }
            let snapshot = MarketSnapshot::new(
                MarketId {
                    country: country_name(country),
                    period,
                    license: "desktop".into(),
                },
                products,
                config.market_size_of(country),
                Arc::clone(&draws),
            )?;
            let ownership = OwnershipMap::from_snapshot(&snapshot);
            let prices = equilibrium_prices(&snapshot, &config.demand, &ownership, &pricing)?;
            let mut priced = snapshot;
            for (p, price) in priced.products.iter_mut().zip(&prices) {
                p.price = *price;
            }
            let shares = compute_shares(&priced, &config.demand)?;
            Ok((priced, shares.shares))
        })
        .collect();

    let mut markets = Vec::with_capacity(solved.len());
    let mut observed_shares = Vec::with_capacity(solved.len());
    for r in solved {
        let (m, s) = r?;
        markets.push(m);
        observed_shares.push(s);
    }

    // Instruments: cost shifter (home exchange rate) + differentiation IVs.
    let mut cost_shifter = Vec::new();
    for m in &markets {
        for p in &m.products {
            cost_shifter
                .push(exrate[p.firm_id as usize % config.n_countries][m.market_id.period as usize]);
        }
    }
    let n_rows: usize = markets.iter().map(|m| m.products.len()).sum();
    let differentiation = if n_rows >= 2 {
        crate::estimation::build_differentiation_ivs(&markets)?.rows
    } else {
        vec![vec![]; n_rows]
    };
    let instruments = DemandInstruments { cost_shifter, differentiation };

    // Reduced-form panel with radial counts per period.
    let mut panel = Vec::new();
    for (m, shares) in markets.iter().zip(&observed_shares) {
        let points: Vec<ProductPoint> = m.points_full();
        for (j, p) in m.products.iter().enumerate() {
            let counts = crate::geometry::radial_counts(p.id, &points, &config.rings)?;
            panel.push(PanelRow {
                product_id: p.id,
                firm_id: p.firm_id,
                license: m.market_id.license.clone(),
                country: m.market_id.country.clone(),
                period: m.market_id.period,
                revenue: shares[j] * m.market_size * p.price,
                quantity: shares[j] * m.market_size,
                list_price: p.price,
                ring_counts: counts.iter().map(|c| c.count as f64).collect(),
            });
        }
    }

    let entrants = seeds
        .iter()
        .filter(|s| s.entry_period > 0)
        .map(|s| EntrantRecord {
            product_id: s.id,
            firm_id: s.firm_id,
            entry_period: s.entry_period,
        })
        .collect();

    Ok(GeneratedData {
        config: config.clone(),
        reducer,
        markets,
        observed_shares,
        instruments,
        panel,
        entrants,
        draws,
    })
}

/// Coordinate-axis reducer for corpora too small to support a PCA: the mean
/// is the corpus mean and the components are the first K coordinate axes.
fn fallback_axis_reducer(corpus: &[Embedding], k: usize) -> PcaReducer {
    let dim = corpus.first().map(|e| e.dim()).unwrap_or(k);
    let n = corpus.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for e in corpus {
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v / n;
        }
    }
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = vec![0.0; dim];
    for (c, eig) in eigenvalues.iter_mut().enumerate().take(k) {
        let mut axis = vec![0.0; dim];
        axis[c] = 1.0;
        let var: f64 = corpus
            .iter()
            .map(|e| (e.values()[c] - mean[c]).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        *eig = var;
        components.push(axis);
    }
    PcaReducer { mean, components, eigenvalues }
}

fn nearest_nest(products: &[Product], location: &Embedding, fallback: u32) -> u32 {
    let mut best = fallback;
    let mut best_d = f64::INFINITY;
    for p in products {
        let d = crate::geometry::distance_unchecked(p.x_emb_full.values(), location.values());
        if d < best_d {
            best_d = d;
            best = p.nest_id;
        }
    }
    best
}

pub(crate) fn country_name(index: usize) -> String {
    const NAMES: [&str; 12] = [
        "US", "DE", "GB", "FR", "CA", "AU", "IT", "NL", "SE", "CH", "AT", "FI",
    ];
    NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("C{index}"))
}
