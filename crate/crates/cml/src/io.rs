//! File formats: CSV interchange, the binary embedding container, and JSON
//! parameter round-trips. Schemas are documented in `docs/formats.md`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::demand::{ConsumerDraws, DemandParams, MarketId, MarketSnapshot, Product};
use crate::error::{Error, Result};
use crate::geometry::{Embedding, PcaReducer};
use crate::panel::PanelRow;
use crate::policy::HeatmapCell;
use crate::synth::{EntrantRecord, GeneratedData, SyntheticConfig};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Writes embeddings as CSV: `product_id, v1..v{dim}`.
pub fn write_embeddings_csv(path: &Path, rows: &[(u64, &Embedding)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map(|(_, e)| e.dim()).unwrap_or(0);
    let mut header = vec!["product_id".to_string()];
    header.extend((1..=dim).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for (id, e) in rows {
        let mut record = vec![id.to_string()];
        record.extend(e.values().iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the embeddings CSV back into (product_id, embedding) pairs.
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<(u64, Embedding)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: u64 = parse_field(path, rec.get(0), "product_id")?;
        let values: Vec<f64> = (1..rec.len())
            .map(|i| parse_field(path, rec.get(i), "embedding value"))
            .collect::<Result<_>>()?;
        out.push((id, Embedding::new_unchecked(values)));
    }
    Ok(out)
}

/// Writes the binary columnar embedding container: magic `EMB1`, dim (u32
/// LE), count (u64 LE), product ids (count x u64 LE), then one column per
/// dimension of count little-endian f64 values.
pub fn write_embeddings_binary(path: &Path, rows: &[(u64, &Embedding)]) -> Result<()> {
    let dim = rows.first().map(|(_, e)| e.dim()).unwrap_or(0);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(EMB_MAGIC)?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    f.write_all(&(rows.len() as u64).to_le_bytes())?;
    for (id, _) in rows {
        f.write_all(&id.to_le_bytes())?;
    }
    for l in 0..dim {
        for (_, e) in rows {
            f.write_all(&e.values()[l].to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads the binary embedding container.
pub fn read_embeddings_binary(path: &Path) -> Result<Vec<(u64, Embedding)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "bad magic; expected EMB1".into(),
        });
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let dim = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut buf8)?;
        ids.push(u64::from_le_bytes(buf8));
    }
    let mut values = vec![vec![0.0f64; dim]; count];
    for l in 0..dim {
        for row in values.iter_mut() {
            f.read_exact(&mut buf8)?;
            row[l] = f64::from_le_bytes(buf8);
        }
    }
    Ok(ids
        .into_iter()
        .zip(values)
        .map(|(id, v)| (id, Embedding::new_unchecked(v)))
        .collect())
}

fn parse_field<T: std::str::FromStr>(path: &Path, field: Option<&str>, name: &str) -> Result<T> {
    field
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("missing field {name}"),
        })?
        .parse()
        .map_err(|_| Error::Format {
            path: path.display().to_string(),
            detail: format!("unparsable field {name}"),
        })
}

/// Writes the market CSV: one row per product-market observation.
pub fn write_market_csv(
    path: &Path,
    markets: &[MarketSnapshot],
    shares: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "country",
        "period",
        "license",
        "market_size",
        "product_id",
        "firm_id",
        "nest_id",
        "entry_period",
        "price",
        "glyphs",
        "share",
    ])?;
    for (m, s) in markets.iter().zip(shares) {
        for (p, share) in m.products.iter().zip(s) {
            let glyphs = p.x_struct.get(1).copied().unwrap_or(0.0);
            w.write_record([
                m.market_id.country.clone(),
                m.market_id.period.to_string(),
                m.market_id.license.clone(),
                format!("{}", m.market_size),
                p.id.to_string(),
                p.firm_id.to_string(),
                p.nest_id.to_string(),
                p.entry_period.to_string(),
                format!("{}", p.price),
                format!("{glyphs}"),
                format!("{share}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the market CSV back into snapshots plus observed shares, attaching
/// embeddings (full and reduced) and the shared consumer draws.
pub fn read_market_csv(
    path: &Path,
    embeddings: &HashMap<u64, Embedding>,
    reducer: &PcaReducer,
    draws: Arc<ConsumerDraws>,
) -> Result<(Vec<MarketSnapshot>, Vec<Vec<f64>>)> {
    #[derive(serde::Deserialize)]
    struct Row {
        country: String,
        period: u32,
        license: String,
        market_size: f64,
        product_id: u64,
        firm_id: u64,
        nest_id: u32,
        entry_period: u32,
        price: f64,
        glyphs: f64,
        share: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut grouped: Vec<(MarketId, f64, Vec<(Row, Embedding)>)> = Vec::new();
    for rec in r.deserialize() {
        let row: Row = rec?;
        let emb = embeddings
            .get(&row.product_id)
            .ok_or(Error::UnknownProduct(row.product_id))?
            .clone();
        let id = MarketId {
            country: row.country.clone(),
            period: row.period,
            license: row.license.clone(),
        };
        match grouped.iter_mut().find(|(mid, _, _)| *mid == id) {
            Some((_, _, rows)) => rows.push((row, emb)),
            None => grouped.push((id, row.market_size, vec![(row, emb)])),
        }
    }
    let mut markets = Vec::with_capacity(grouped.len());
    let mut shares = Vec::with_capacity(grouped.len());
    for (market_id, market_size, rows) in grouped {
        let mut products = Vec::with_capacity(rows.len());
        let mut s = Vec::with_capacity(rows.len());
        for (row, emb) in rows {
            let reduced = reducer.reduce(&emb)?;
            products.push(Product {
                id: row.product_id,
                firm_id: row.firm_id,
                nest_id: row.nest_id,
                x_struct: vec![1.0, row.glyphs],
                x_emb_reduced: reduced,
                x_emb_full: emb,
                price: row.price,
                xi: 0.0,
                mc: None,
                entry_period: row.entry_period,
            });
            s.push(row.share);
        }
        markets.push(MarketSnapshot::new(
            market_id,
            products,
            market_size,
            Arc::clone(&draws),
        )?);
        shares.push(s);
    }
    Ok((markets, shares))
}

/// Writes instrument rows aligned with the market CSV.
pub fn write_instruments_csv(
    path: &Path,
    markets: &[MarketSnapshot],
    instruments: &crate::estimation::DemandInstruments,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_diff = instruments.differentiation.first().map(|r| r.len()).unwrap_or(0);
    let mut header = vec![
        "country".to_string(),
        "period".to_string(),
        "license".to_string(),
        "product_id".to_string(),
        "cost_shifter".to_string(),
    ];
    let k = n_diff / 2;
    header.extend((1..=k).map(|l| format!("diff_own_{l}")));
    header.extend((1..=k).map(|l| format!("diff_rival_{l}")));
    w.write_record(&header)?;
    let mut row_idx = 0;
    for m in markets {
        for p in &m.products {
            let mut rec = vec![
                m.market_id.country.clone(),
                m.market_id.period.to_string(),
                m.market_id.license.clone(),
                p.id.to_string(),
                format!("{}", instruments.cost_shifter[row_idx]),
            ];
            rec.extend(
                instruments.differentiation[row_idx]
                    .iter()
                    .map(|v| format!("{v}")),
            );
            w.write_record(&rec)?;
            row_idx += 1;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the instruments CSV (row order must match the market CSV).
pub fn read_instruments_csv(path: &Path) -> Result<crate::estimation::DemandInstruments> {
    let mut r = csv::Reader::from_path(path)?;
    let mut cost_shifter = Vec::new();
    let mut differentiation = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        cost_shifter.push(parse_field(path, rec.get(4), "cost_shifter")?);
        let diff: Vec<f64> = (5..rec.len())
            .map(|i| parse_field(path, rec.get(i), "differentiation iv"))
            .collect::<Result<_>>()?;
        differentiation.push(diff);
    }
    Ok(crate::estimation::DemandInstruments { cost_shifter, differentiation })
}

/// Writes the entrant panel CSV.
pub fn write_entrants_csv(path: &Path, entrants: &[EntrantRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["product_id", "firm_id", "entry_period"])?;
    for e in entrants {
        w.write_record([
            e.product_id.to_string(),
            e.firm_id.to_string(),
            e.entry_period.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_entrants_csv(path: &Path) -> Result<Vec<EntrantRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(EntrantRecord {
            product_id: parse_field(path, rec.get(0), "product_id")?,
            firm_id: parse_field(path, rec.get(1), "firm_id")?,
            entry_period: parse_field(path, rec.get(2), "entry_period")?,
        });
    }
    Ok(out)
}

/// Writes the reduced-form panel CSV with ring counts.
pub fn write_panel_csv(path: &Path, panel: &[PanelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_rings = panel.first().map(|r| r.ring_counts.len()).unwrap_or(0);
    let mut header = vec![
        "product_id".to_string(),
        "firm_id".to_string(),
        "license".to_string(),
        "country".to_string(),
        "period".to_string(),
        "revenue".to_string(),
        "quantity".to_string(),
        "list_price".to_string(),
    ];
    header.extend((1..=n_rings).map(|i| format!("ring_{i}")));
    w.write_record(&header)?;
    for r in panel {
        let mut rec = vec![
            r.product_id.to_string(),
            r.firm_id.to_string(),
            r.license.clone(),
            r.country.clone(),
            r.period.to_string(),
            format!("{}", r.revenue),
            format!("{}", r.quantity),
            format!("{}", r.list_price),
        ];
        rec.extend(r.ring_counts.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel_csv(path: &Path) -> Result<Vec<PanelRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(PanelRow {
            product_id: parse_field(path, rec.get(0), "product_id")?,
            firm_id: parse_field(path, rec.get(1), "firm_id")?,
            license: rec.get(2).unwrap_or_default().to_string(),
            country: rec.get(3).unwrap_or_default().to_string(),
            period: parse_field(path, rec.get(4), "period")?,
            revenue: parse_field(path, rec.get(5), "revenue")?,
            quantity: parse_field(path, rec.get(6), "quantity")?,
            list_price: parse_field(path, rec.get(7), "list_price")?,
            ring_counts: (8..rec.len())
                .map(|i| parse_field(path, rec.get(i), "ring count"))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Writes the long-form heatmap CSV: `d_bar, cost_level, metric, value`.
pub fn write_heatmap_csv(path: &Path, cells: &[HeatmapCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["d_bar", "cost_level", "metric", "value"])?;
    for c in cells {
        let metrics: [(&str, f64); 8] = [
            ("cs_aggregate", c.report.cs_aggregate),
            ("cs_average", c.report.cs_average),
            ("ps_aggregate", c.report.ps_aggregate),
            ("ps_average", c.report.ps_average),
            ("sw_aggregate", c.report.sw_aggregate),
            ("sw_average", c.report.sw_average),
            ("n_entrants", c.report.n_entrants as f64),
            ("fixed_cost_total", c.report.fixed_cost_total),
        ];
        for (name, value) in metrics {
            w.write_record([
                format!("{}", c.d_bar),
                c.cost_level.clone(),
                name.to_string(),
                format!("{value}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serializes demand parameters to JSON.
pub fn write_params_json(path: &Path, params: &DemandParams) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(params)?)?;
    Ok(())
}

pub fn read_params_json(path: &Path) -> Result<DemandParams> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the full generated dataset into a directory.
pub fn write_generated_data(dir: &Path, data: &GeneratedData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // Unique products across all markets, by id.
    let mut embeddings: Vec<(u64, &Embedding)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for m in &data.markets {
        for p in &m.products {
            if seen.insert(p.id) {
                embeddings.push((p.id, &p.x_emb_full));
            }
        }
    }
    embeddings.sort_by_key(|(id, _)| *id);
    write_embeddings_csv(&dir.join("embeddings.csv"), &embeddings)?;
    write_embeddings_binary(&dir.join("embeddings.emb"), &embeddings)?;
    std::fs::write(dir.join("reducer.json"), data.reducer.to_json()?)?;
    write_market_csv(&dir.join("market.csv"), &data.markets, &data.observed_shares)?;
    write_instruments_csv(&dir.join("instruments.csv"), &data.markets, &data.instruments)?;
    write_entrants_csv(&dir.join("entrants.csv"), &data.entrants)?;
    write_panel_csv(&dir.join("panel.csv"), &data.panel)?;
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&data.config)?)?;
    Ok(())
}

/// Loaded dataset: markets with shares, instruments, panel, entrants, the
/// reducer, and the generating configuration.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub config: SyntheticConfig,
    pub reducer: PcaReducer,
    pub markets: Vec<MarketSnapshot>,
    pub observed_shares: Vec<Vec<f64>>,
    pub instruments: crate::estimation::DemandInstruments,
    pub panel: Vec<PanelRow>,
    pub entrants: Vec<EntrantRecord>,
}

/// Reads a dataset directory written by [`write_generated_data`].
pub fn read_generated_data(dir: &Path) -> Result<LoadedData> {
    let config: SyntheticConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("truth.json"))?)?;
    let reducer = PcaReducer::from_json(&std::fs::read_to_string(dir.join("reducer.json"))?)?;
    let embeddings: HashMap<u64, Embedding> = read_embeddings_csv(&dir.join("embeddings.csv"))?
        .into_iter()
        .collect();
    let draws = Arc::new(ConsumerDraws::halton_normal(
        config.n_draws,
        config.reduced_dim,
        crate::rng::derive_seed(config.seed, "synth.draws", 0),
    ));
    let (markets, observed_shares) =
        read_market_csv(&dir.join("market.csv"), &embeddings, &reducer, draws)?;
    let instruments = read_instruments_csv(&dir.join("instruments.csv"))?;
    let panel = read_panel_csv(&dir.join("panel.csv"))?;
    let entrants = read_entrants_csv(&dir.join("entrants.csv"))?;
    Ok(LoadedData {
        config,
        reducer,
        markets,
        observed_shares,
        instruments,
        panel,
        entrants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_market;

    #[test]
    fn embeddings_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let embs: Vec<Embedding> = (0..5)
            .map(|i| {
                let mut v = vec![0.1 * i as f64; 4];
                v[0] = 1.0;
                Embedding::normalized(v).unwrap()
            })
            .collect();
        let rows: Vec<(u64, &Embedding)> = embs.iter().enumerate().map(|(i, e)| (i as u64, e)).collect();

        let csv_path = dir.path().join("e.csv");
        write_embeddings_csv(&csv_path, &rows).unwrap();
        let back = read_embeddings_csv(&csv_path).unwrap();
        for ((id, e), (bid, be)) in rows.iter().zip(&back) {
            assert_eq!(id, bid);
            for (a, b) in e.values().iter().zip(be.values()) {
                assert_eq!(a.to_bits(), b.to_bits(), "CSV float round trip must be exact");
            }
        }

        let bin_path = dir.path().join("e.emb");
        write_embeddings_binary(&bin_path, &rows).unwrap();
        let back = read_embeddings_binary(&bin_path).unwrap();
        for ((id, e), (bid, be)) in rows.iter().zip(&back) {
            assert_eq!(id, bid);
            for (a, b) in e.values().iter().zip(be.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.emb");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_embeddings_binary(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = crate::synth::SyntheticConfig::demo(21);
        let data = generate_market(&config).unwrap();
        write_generated_data(dir.path(), &data).unwrap();
        let loaded = read_generated_data(dir.path()).unwrap();

        assert_eq!(loaded.markets.len(), data.markets.len());
        for (a, b) in loaded.markets.iter().zip(&data.markets) {
            assert_eq!(a.market_id, b.market_id);
            assert_eq!(a.products.len(), b.products.len());
            for (pa, pb) in a.products.iter().zip(&b.products) {
                assert_eq!(pa.id, pb.id);
                assert_eq!(pa.price.to_bits(), pb.price.to_bits());
                for (x, y) in pa.x_emb_full.values().iter().zip(pb.x_emb_full.values()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        for (a, b) in loaded.observed_shares.iter().zip(&data.observed_shares) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "share round trip must be exact");
            }
        }
        assert_eq!(loaded.panel.len(), data.panel.len());
        assert_eq!(loaded.entrants.len(), data.entrants.len());
        assert_eq!(loaded.instruments.cost_shifter.len(), data.instruments.cost_shifter.len());
    }
}
