//! Differentiation instruments: counts of local competitors per embedding
//! dimension, split by own-firm and rival-firm.

use serde::{Deserialize, Serialize};

use crate::demand::MarketSnapshot;
use crate::error::{Error, Result};

/// Instrument rows aligned with a stacked estimation sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstrumentSet {
    /// Per row: own-firm local counts for each dimension, then rival-firm
    /// local counts for each dimension.
    pub rows: Vec<Vec<f64>>,
    /// The per-dimension standard deviations that defined "local".
    pub sds: Vec<f64>,
}

impl InstrumentSet {
    pub fn width(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// Per-dimension sample standard deviations of the reduced embeddings over
/// the whole estimation sample.
pub fn differentiation_sds(markets: &[MarketSnapshot]) -> Result<Vec<f64>> {
    let k = markets
        .first()
        .and_then(|m| m.products.first())
        .map(|p| p.x_emb_reduced.dim())
        .ok_or(Error::Degenerate("empty estimation sample"))?;
    let mut n = 0usize;
    let mut mean = vec![0.0; k];
    for m in markets {
        for p in &m.products {
            for (s, v) in mean.iter_mut().zip(&p.x_emb_reduced.values) {
                *s += v;
            }
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::Degenerate("estimation sample too small"));
    }
    for s in &mut mean {
        *s /= n as f64;
    }
    let mut var = vec![0.0; k];
    for m in markets {
        for p in &m.products {
            for ((s, v), mu) in var.iter_mut().zip(&p.x_emb_reduced.values).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
    }
    Ok(var.into_iter().map(|v| (v / (n - 1) as f64).sqrt()).collect())
}

/// Counts, for every product-market row, the same-firm and rival-firm
/// competitors whose coordinate lies strictly within one standard deviation
/// in each embedding dimension.
pub fn build_differentiation_ivs(markets: &[MarketSnapshot]) -> Result<InstrumentSet> {
    let sds = differentiation_sds(markets)?;
    let k = sds.len();
    let mut rows = Vec::new();
    for m in markets {
        let n = m.products.len();
        for j in 0..n {
            let pj = &m.products[j];
            let mut row = vec![0.0; 2 * k];
            for (jp, other) in m.products.iter().enumerate() {
                if jp == j {
                    continue;
                }
                let same_firm = other.firm_id == pj.firm_id;
                for l in 0..k {
                    let d = (other.x_emb_reduced.values[l] - pj.x_emb_reduced.values[l]).abs();
                    if d < sds[l] {
                        if same_firm {
                            row[l] += 1.0;
                        } else {
                            row[k + l] += 1.0;
                        }
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(InstrumentSet { rows, sds })
}
