//! Report formatting shared by the commands.

use anyhow::Result;
use compmech_core::stats::Rate;
use serde::Serialize;

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// A rate for reports: four decimals plus raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateOut {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl From<Rate> for RateOut {
    fn from(r: Rate) -> Self {
        Self {
            successes: r.successes,
            trials: r.trials,
            rate: round4(r.rate),
            ci95_low: round4(r.ci_low),
            ci95_high: round4(r.ci_high),
        }
    }
}

pub fn describe(r: &Rate) -> String {
    format!("{:.4} ({}/{}, 95% CI [{:.4}, {:.4}])", r.rate, r.successes, r.trials, r.ci_low, r.ci_high)
}

/// Serialises rows to CSV bytes with a header from the row type.
pub fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("flushing CSV: {e}"))
}
