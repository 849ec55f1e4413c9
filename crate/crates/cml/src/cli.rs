//! Subcommand CLI over the library: data generation, estimation,
//! counterfactuals, and the reduced-form evidence pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 I/O failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{DemandParams, InversionSettings, MarketSnapshot, SurplusMode};
use crate::error::{Error, Result};
use crate::estimation::{gmm_rcnl, tsls_fixed_coef, GmmConfig};
use crate::io::{self, LoadedData};
use crate::manifest::RunManifest;
use crate::policy::{
    calibrate_substitute, run_entry_game, run_relocation, run_removal, welfare_heatmap,
    DistanceSpace, EntryGameInput, PolicyConfig, ResponseMode, ScenarioCost, ScenarioKind,
};
use crate::supply::{
    build_entrant_observation, entry_bound, estimate_cost_slopes, recover_marginal_costs,
    OwnershipMap, SlopeMode,
};
use crate::synth::{generate_market, SyntheticConfig};

#[derive(Parser)]
#[command(name = "cml", version, about = "Characteristics-market lab", disable_help_subcommand = true)]
struct Cli {
    /// Worker threads for market-parallel kernels (or CML_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic marketplace dataset.
    GenData(GenDataArgs),
    /// Fixed-coefficient 2SLS and random-coefficient GMM demand estimation.
    EstimateDemand(EstimateDemandArgs),
    /// Marginal-cost recovery, cost-slope estimation, and entry bounds.
    EstimateSupply(EstimateSupplyArgs),
    /// Counterfactual policy experiments.
    Counterfactual(CounterfactualArgs),
    /// Fixed-effects spatial regressions on the panel.
    SpatialReg(PanelArgs),
    /// Event study around visually close entry, OLS and imputation.
    EventStudy(EventStudyArgs),
    /// Diversion ratios aggregated along embedding distance.
    DiversionCurve(DiversionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateDemandArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip the GMM stage (2SLS only).
    #[arg(long)]
    skip_gmm: bool,
    /// Embedding dimensions with estimated taste dispersion, e.g. "0,1".
    #[arg(long, default_value = "0,1")]
    rc_dims: String,
    #[arg(long, default_value_t = 400)]
    max_evals: usize,
}

#[derive(Args)]
struct EstimateSupplyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Demand parameters JSON; defaults to the dataset's true parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Cap on entrants used for slope estimation and bounds.
    #[arg(long, default_value_t = 200)]
    max_entrants: usize,
    #[arg(long, default_value_t = 30)]
    n_shocks: usize,
    /// Slope estimation mode: ols or iv.
    #[arg(long, default_value = "ols")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CounterfactualArgs {
    /// removal | random-removal | relocate | entry-game | heatmap
    #[arg(long)]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Counterfactual specification JSON (policy, grids, scenario).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Demand parameters JSON; defaults to the dataset's true parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PanelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EventStudyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-set size defining the treatment.
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct DiversionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    bin_width: f64,
}

/// Counterfactual specification document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    pub policy: PolicyConfig,
    /// Protection radii for heatmap mode.
    #[serde(default)]
    pub d_bars: Vec<f64>,
    /// Cost scenarios for entry-game and heatmap modes.
    #[serde(default)]
    pub scenarios: Vec<ScenarioCost>,
    #[serde(default = "default_firm_sample")]
    pub n_firms_sample: usize,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
}

fn default_firm_sample() -> usize {
    100
}
fn default_candidates() -> usize {
    400
}

impl Default for CounterfactualSpec {
    fn default() -> Self {
        Self {
            policy: PolicyConfig {
                d_bar: 0.05,
                response_mode: ResponseMode::Remove,
                distance_space: DistanceSpace::Full,
                start_period: 1,
                surplus_mode: SurplusMode::Nested,
            },
            d_bars: vec![0.0, 0.025, 0.05, 0.1, 0.15],
            scenarios: vec![ScenarioCost::factual()],
            n_firms_sample: default_firm_sample(),
            n_candidates: default_candidates(),
        }
    }
}

/// Runs the CLI on the given arguments (without the program name); returns
/// the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let argv: Vec<String> = std::iter::once("cml".to_string()).chain(args).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    configure_threads(cli.threads);
    let command_line = argv.join(" ");
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args, &command_line),
        Command::EstimateDemand(args) => cmd_estimate_demand(&args, &command_line),
        Command::EstimateSupply(args) => cmd_estimate_supply(&args, &command_line),
        Command::Counterfactual(args) => cmd_counterfactual(&args, &command_line),
        Command::SpatialReg(args) => cmd_spatial(&args, &command_line),
        Command::EventStudy(args) => cmd_event_study(&args, &command_line),
        Command::DiversionCurve(args) => cmd_diversion(&args, &command_line),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => 3,
        Error::InvalidConfig(_) => 1,
        Error::CellFailure { source, .. } | Error::ShockDraw { source, .. } => {
            exit_code_for(source)
        }
        _ => 2,
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("CML_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn cmd_gen_data(args: &GenDataArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&args.config)?;
    let mut config: SyntheticConfig = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let data = generate_market(&config)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_generated_data(&args.out, &data)?;
    finish_manifest(command, &serde_json::to_vec(&config)?, config.seed, &args.out, start)
}

fn finish_manifest(
    command: &str,
    config_bytes: &[u8],
    seed: u64,
    out: &Path,
    start: Instant,
) -> Result<()> {
    let mut manifest = RunManifest::new(command, config_bytes, seed);
    manifest.elapsed_seconds = start.elapsed().as_secs_f64();
    manifest.record_directory(out)?;
    manifest.write(out)?;
    Ok(())
}

fn parse_rc_dims(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad rc dimension `{s}`")))
        })
        .collect()
}

fn cmd_estimate_demand(args: &EstimateDemandArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    let sample = crate::estimation::EstimationSample::new(
        loaded.markets.clone(),
        loaded.observed_shares.clone(),
    )?;
    let ols = crate::estimation::ols_fixed_coef(&sample)?;
    let tsls = tsls_fixed_coef(&sample, &loaded.instruments)?;

    std::fs::create_dir_all(&args.out)?;
    let mut results = serde_json::json!({
        "ols": ols,
        "tsls": tsls,
    });
    let mut table = String::new();
    table.push_str("Fixed-coefficient demand estimates\n");
    table.push_str("==================================\n");
    table.push_str(&format!(
        "{:<14}{:>14}{:>16}\n",
        "Variable", "OLS", "IV (2nd stage)"
    ));
    table.push_str(&format!(
        "{:<14}{:>14.4}{:>16.4}\n",
        "Price", ols.beta_price, tsls.beta_price
    ));
    for (i, (o, t)) in ols.beta_struct.iter().zip(&tsls.beta_struct).enumerate() {
        let name = if i == 0 { "Constant".to_string() } else { format!("Struct {i}") };
        table.push_str(&format!("{name:<14}{o:>14.4}{t:>16.4}\n"));
    }
    for (i, (o, t)) in ols.beta_img.iter().zip(&tsls.beta_img).enumerate() {
        table.push_str(&format!("{:<14}{:>14.4}{:>16.4}\n", format!("Embedding {}", i + 1), o, t));
    }
    table.push_str(&format!(
        "\nFirst-stage F: {:.1}   Cragg-Donald F: {:.1}   N: {}\n",
        tsls.first_stage_f, tsls.cragg_donald_f, tsls.n
    ));

    if !args.skip_gmm {
        let config = GmmConfig {
            rc_dims: parse_rc_dims(&args.rc_dims)?,
            max_evals: args.max_evals,
            ..Default::default()
        };
        let gmm = gmm_rcnl(&sample, &loaded.instruments, &config)?;
        table.push_str("\nRandom-coefficient GMM estimates\n");
        table.push_str("================================\n");
        table.push_str(&format!(
            "{:<14}{:>14}{:>14}\n",
            "Parameter", "Estimate", "Std. error"
        ));
        table.push_str(&format!(
            "{:<14}{:>14.4}{:>14.4}\n",
            "Price", gmm.params.beta_price, gmm.se.beta_price
        ));
        for (i, (b, s)) in gmm.params.beta_struct.iter().zip(&gmm.se.beta_struct).enumerate() {
            let name = if i == 0 { "Constant".to_string() } else { format!("Struct {i}") };
            table.push_str(&format!("{name:<14}{b:>14.4}{s:>14.4}\n"));
        }
        for (i, (b, s)) in gmm.params.beta_img_mean.iter().zip(&gmm.se.beta_img_mean).enumerate() {
            table.push_str(&format!(
                "{:<14}{:>14.4}{:>14.4}\n",
                format!("Emb {} mean", i + 1),
                b,
                s
            ));
        }
        for (col, &l) in config.rc_dims.iter().enumerate() {
            table.push_str(&format!(
                "{:<14}{:>14.4}{:>14.4}\n",
                format!("Emb {} sd", l + 1),
                gmm.params.beta_img_sd[l],
                gmm.se.beta_img_sd[col]
            ));
        }
        table.push_str(&format!(
            "{:<14}{:>14.4}{:>14.4}\n",
            "Nesting rho", gmm.params.rho, gmm.se.rho
        ));
        io::write_params_json(&args.out.join("params.json"), &gmm.params)?;
        results["gmm"] = serde_json::to_value(&gmm)?;
    } else {
        // 2SLS-only runs still emit a usable parameter file.
        let params = DemandParams {
            beta_price: tsls.beta_price,
            beta_struct: tsls.beta_struct.clone(),
            beta_img_mean: tsls.beta_img.clone(),
            beta_img_sd: vec![0.0; tsls.beta_img.len()],
            rho: 0.0,
        };
        io::write_params_json(&args.out.join("params.json"), &params)?;
    }

    std::fs::write(args.out.join("demand_results.json"), serde_json::to_string_pretty(&results)?)?;
    std::fs::write(args.out.join("demand_table.txt"), table)?;
    finish_manifest(command, &std::fs::read(&args.data.join("truth.json"))?, loaded.config.seed, &args.out, start)
}

/// Inverts observed shares at the given parameters to recover demand shocks,
/// then recovers marginal costs from the pricing first-order conditions.
fn prepare_markets(
    loaded: &LoadedData,
    params: &DemandParams,
) -> Result<Vec<MarketSnapshot>> {
    let settings = InversionSettings::default();
    loaded
        .markets
        .par_iter()
        .zip(loaded.observed_shares.par_iter())
        .map(|(m, shares)| {
            let inv = crate::demand::invert_shares(shares, m, params, &settings)?;
            let mut out = m.clone();
            for (p, xi) in out.products.iter_mut().zip(&inv.xi) {
                p.xi = *xi;
            }
            let ownership = OwnershipMap::from_snapshot(&out);
            let mc = recover_marginal_costs(&out, params, &ownership)?;
            for (p, c) in out.products.iter_mut().zip(&mc) {
                p.mc = Some(*c);
            }
            Ok(out)
        })
        .collect()
}

fn load_params(loaded: &LoadedData, path: &Option<PathBuf>) -> Result<DemandParams> {
    match path {
        Some(p) => io::read_params_json(p),
        None => Ok(loaded.config.demand.clone()),
    }
}

fn cmd_estimate_supply(args: &EstimateSupplyArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    let params = load_params(&loaded, &args.params)?;
    let markets = prepare_markets(&loaded, &params)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = args.seed.unwrap_or(loaded.config.seed);

    // Recovered marginal costs.
    {
        let mut w = csv::Writer::from_path(args.out.join("marginal_costs.csv"))?;
        w.write_record(["country", "period", "license", "product_id", "mc"])?;
        for m in &markets {
            for p in &m.products {
                w.write_record([
                    m.market_id.country.clone(),
                    m.market_id.period.to_string(),
                    m.market_id.license.clone(),
                    p.id.to_string(),
                    format!("{}", p.mc.unwrap_or(f64::NAN)),
                ])?;
            }
        }
        w.flush()?;
    }

    // Entrant shock pool from the recovered residuals at entry.
    let mut xi_pool = Vec::new();
    for e in &loaded.entrants {
        for m in markets.iter().filter(|m| m.market_id.period == e.entry_period) {
            if let Some(idx) = m.product_index(e.product_id) {
                xi_pool.push(m.products[idx].xi);
            }
        }
    }
    if xi_pool.is_empty() {
        xi_pool.push(0.0);
    }

    let sds = crate::estimation::differentiation_sds(&markets)?;
    let mode = match args.mode.as_str() {
        "ols" => SlopeMode::Ols,
        "iv" => SlopeMode::Iv,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown slope mode `{other}`; use ols or iv"
            )))
        }
    };

    let mut entrants = loaded.entrants.clone();
    entrants.truncate(args.max_entrants);
    let observations: Vec<_> = entrants
        .par_iter()
        .map(|e| {
            let period_markets: Vec<MarketSnapshot> = markets
                .iter()
                .filter(|m| m.market_id.period == e.entry_period)
                .cloned()
                .collect();
            let mut rng = crate::rng::stream(seed, "cli.supply.shocks", e.product_id);
            let shock_draws: Vec<Vec<f64>> = (0..args.n_shocks)
                .map(|_| {
                    (0..period_markets.len())
                        .map(|_| xi_pool[rand::Rng::gen_range(&mut rng, 0..xi_pool.len())])
                        .collect()
                })
                .collect();
            build_entrant_observation(
                e.product_id,
                &period_markets,
                &params,
                &shock_draws,
                1e-4,
                &sds,
            )
        })
        .collect::<Result<_>>()?;
    let slopes = estimate_cost_slopes(&observations, mode)?;
    std::fs::write(args.out.join("cost_slopes.json"), serde_json::to_string_pretty(&slopes)?)?;

    // Entry bounds.
    let bounds: Vec<_> = entrants
        .par_iter()
        .map(|e| {
            let period_markets: Vec<MarketSnapshot> = markets
                .iter()
                .filter(|m| m.market_id.period == e.entry_period)
                .cloned()
                .collect();
            let ownership = OwnershipMap::from_snapshot(&period_markets[0]);
            entry_bound(
                e.product_id,
                &period_markets,
                &params,
                &ownership,
                &xi_pool,
                args.n_shocks,
                crate::rng::derive_seed(seed, "cli.supply.bounds", e.product_id),
                &Default::default(),
            )
        })
        .collect::<Result<_>>()?;
    {
        let mut w = csv::Writer::from_path(args.out.join("entry_bounds.csv"))?;
        w.write_record(["product_id", "bound", "n_shock_draws"])?;
        for b in &bounds {
            w.write_record([
                b.product_id.to_string(),
                format!("{}", b.upper_bound),
                b.n_shock_draws.to_string(),
            ])?;
        }
        w.flush()?;
    }

    finish_manifest(command, &serde_json::to_vec(&params)?, seed, &args.out, start)
}

fn read_spec(path: &Option<PathBuf>) -> Result<CounterfactualSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(CounterfactualSpec::default()),
    }
}

fn candidate_locations(
    markets: &[MarketSnapshot],
    n_candidates: usize,
    seed: u64,
) -> Result<Vec<crate::geometry::Embedding>> {
    let mut seen = std::collections::HashSet::new();
    let mut seeds = Vec::new();
    for m in markets {
        for p in &m.products {
            if seen.insert(p.id) {
                seeds.push(p.x_emb_full.clone());
            }
        }
    }
    crate::geometry::perturb_locations(
        &seeds,
        &[1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 30.0],
        (n_candidates / 8).max(1),
        seed,
        &Default::default(),
    )
}

fn cmd_counterfactual(args: &CounterfactualArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    let params = load_params(&loaded, &args.params)?;
    let mut spec = read_spec(&args.config)?;
    let seed = args.seed.unwrap_or(loaded.config.seed);
    let markets = prepare_markets(&loaded, &params)?;
    let ownership = OwnershipMap::from_snapshot(
        markets
            .iter()
            .max_by_key(|m| m.products.len())
            .ok_or(Error::Degenerate("no markets"))?,
    );
    std::fs::create_dir_all(&args.out)?;

    match args.mode.as_str() {
        "removal" | "random-removal" => {
            spec.policy.response_mode = if args.mode == "removal" {
                ResponseMode::Remove
            } else {
                ResponseMode::RemoveRandom
            };
            let report = run_removal(&spec.policy, &markets, &params, &ownership, seed)?;
            std::fs::write(args.out.join("welfare.json"), serde_json::to_string_pretty(&report)?)?;
        }
        "relocate" => {
            spec.policy.response_mode = ResponseMode::Relocate;
            let candidates = candidate_locations(&markets, spec.n_candidates, seed)?;
            let (report, records) = run_relocation(
                &spec.policy,
                &markets,
                &params,
                &loaded.reducer,
                &candidates,
                &ownership,
            )?;
            std::fs::write(args.out.join("welfare.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(
                args.out.join("relocations.json"),
                serde_json::to_string_pretty(&records)?,
            )?;
        }
        "entry-game" | "heatmap" => {
            spec.policy.response_mode = ResponseMode::EndogenousEntry;
            let period = spec.policy.start_period;
            let period_markets: Vec<MarketSnapshot> = markets
                .iter()
                .filter(|m| m.market_id.period == period)
                .cloned()
                .collect();
            if period_markets.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "no markets at start_period {period}"
                )));
            }
            let candidates = candidate_locations(&period_markets, spec.n_candidates, seed)?;
            let mut firms: Vec<u64> = {
                let mut f: Vec<u64> = period_markets
                    .iter()
                    .flat_map(|m| m.products.iter().map(|p| p.firm_id))
                    .collect();
                f.sort_unstable();
                f.dedup();
                f
            };
            {
                use rand::seq::SliceRandom;
                let mut rng = crate::rng::stream(seed, "cli.cf.firms", 0);
                firms.shuffle(&mut rng);
                firms.truncate(spec.n_firms_sample);
            }
            let xi_imputed = {
                let mut pool = Vec::new();
                for e in &loaded.entrants {
                    for m in markets.iter().filter(|m| m.market_id.period == e.entry_period) {
                        if let Some(i) = m.product_index(e.product_id) {
                            pool.push(m.products[i].xi);
                        }
                    }
                }
                if pool.is_empty() {
                    0.0
                } else {
                    pool.iter().sum::<f64>() / pool.len() as f64
                }
            };
            let input = EntryGameInput {
                markets: &period_markets,
                params: &params,
                reducer: &loaded.reducer,
                candidates: &candidates,
                firm_order: &firms,
                xi_imputed,
            };
            // Calibrate any substitute scenarios against the candidate set.
            let incumbents_reduced: Vec<Vec<f64>> = period_markets
                .iter()
                .flat_map(|m| m.products.iter().map(|p| p.x_emb_reduced.values.clone()))
                .collect();
            let candidates_reduced: Vec<Vec<f64>> = candidates
                .iter()
                .map(|c| loaded.reducer.reduce(c).map(|r| r.values))
                .collect::<Result<_>>()?;
            let scenarios: Vec<ScenarioCost> = spec
                .scenarios
                .iter()
                .map(|s| {
                    if s.kind == ScenarioKind::Substitute && s.substitute_mean.is_none() {
                        calibrate_substitute(
                            &loaded.config.cost,
                            s,
                            &candidates_reduced,
                            &incumbents_reduced,
                        )
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;

            if args.mode == "entry-game" {
                let scenario = scenarios
                    .first()
                    .cloned()
                    .unwrap_or_else(ScenarioCost::factual);
                let (report, decisions) =
                    run_entry_game(&spec.policy, &input, &loaded.config.cost, &scenario, seed)?;
                std::fs::write(
                    args.out.join("welfare.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                std::fs::write(
                    args.out.join("entries.json"),
                    serde_json::to_string_pretty(&decisions)?,
                )?;
            } else {
                let d_bars = if spec.d_bars.is_empty() {
                    vec![spec.policy.d_bar]
                } else {
                    spec.d_bars.clone()
                };
                let cells = welfare_heatmap(
                    &spec.policy,
                    &input,
                    &loaded.config.cost,
                    &d_bars,
                    &scenarios,
                    seed,
                )?;
                io::write_heatmap_csv(&args.out.join("heatmap.csv"), &cells)?;
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown counterfactual mode `{other}`"
            )))
        }
    }
    finish_manifest(command, &serde_json::to_vec(&spec)?, seed, &args.out, start)
}

fn cmd_spatial(args: &PanelArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("spatial_reg.csv"))?;
    w.write_record(["outcome", "ring", "gamma", "se"])?;
    for outcome in [
        crate::panel::SpatialOutcome::Revenue,
        crate::panel::SpatialOutcome::Quantity,
        crate::panel::SpatialOutcome::ListPrice,
    ] {
        let fit = crate::panel::spatial_regression(&loaded.panel, outcome)?;
        for (r, (g, s)) in fit.gamma.iter().zip(&fit.se).enumerate() {
            w.write_record([
                format!("{outcome:?}"),
                (r + 1).to_string(),
                format!("{g}"),
                format!("{s}"),
            ])?;
        }
    }
    w.flush()?;
    finish_manifest(command, b"spatial", loaded.config.seed, &args.out, start)
}

fn cmd_event_study(args: &EventStudyArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    // Treatment from nearest-set changes caused by entry.
    let mut seen = std::collections::HashSet::new();
    let mut products: Vec<(u64, u32, Vec<f64>)> = Vec::new();
    for m in &loaded.markets {
        for p in &m.products {
            if seen.insert(p.id) {
                products.push((p.id, p.entry_period, p.x_emb_full.values().to_vec()));
            }
        }
    }
    let treatment = crate::panel::treatment_periods(&products, args.k)?;
    let window = crate::panel::EventWindow::default();

    let mut w = csv::Writer::from_path(args.out.join("event_study.csv"))?;
    w.write_record(["outcome", "estimator", "event_time", "estimate", "se"])?;
    for outcome in [
        crate::panel::SpatialOutcome::Revenue,
        crate::panel::SpatialOutcome::Quantity,
    ] {
        let ols = crate::panel::event_study(&loaded.panel, &treatment, &window, outcome)?;
        for (s, b, se) in &ols.beta {
            w.write_record([
                format!("{outcome:?}"),
                "ols".to_string(),
                s.to_string(),
                format!("{b}"),
                format!("{se}"),
            ])?;
        }
        let imp =
            crate::panel::imputation_event_study(&loaded.panel, &treatment, &window, outcome)?;
        for (s, eff, _) in &imp.curve {
            w.write_record([
                format!("{outcome:?}"),
                "imputation".to_string(),
                s.to_string(),
                format!("{eff}"),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    finish_manifest(command, b"event-study", loaded.config.seed, &args.out, start)
}

fn cmd_diversion(args: &DiversionArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let loaded = io::read_generated_data(&args.data)?;
    let params = load_params(&loaded, &args.params)?;
    let markets = prepare_markets(&loaded, &params)?;
    std::fs::create_dir_all(&args.out)?;
    let curve = crate::demand::aggregate_div_by_distance(&markets, &params, args.bin_width)?;
    let mut w = csv::Writer::from_path(args.out.join("diversion_curve.csv"))?;
    w.write_record(["d", "mean_diversion", "n_focals"])?;
    for p in &curve {
        w.write_record([format!("{}", p.d), format!("{}", p.mean_div), p.n_focals.to_string()])?;
    }
    w.flush()?;
    finish_manifest(command, &serde_json::to_vec(&params)?, loaded.config.seed, &args.out, start)
}

/// Re-exported for integration tests.
pub fn run_str(args: &[&str]) -> i32 {
    run(args.iter().map(|s| s.to_string()))
}

