use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScoreTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    Minmax,
    Zscore,
    None,
}

impl std::str::FromStr for NormalizationMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "minmax" => Ok(Self::Minmax),
            "zscore" => Ok(Self::Zscore),
            "none" => Ok(Self::None),
            _ => Err(crate::Error::InvalidInput(format!("unknown normalization `{s}`"))),
        }
    }
}

/// Per-query normalization. Min-max maps constant rows to 0.5; z-score maps
/// them to 0.
pub fn normalize_scores(table: &ScoreTable, mode: NormalizationMode) -> ScoreTable {
    let scores = table
        .scores
        .iter()
        .map(|(q, row)| (q.clone(), normalize_row(row, mode)))
        .collect();
    ScoreTable {
        scorer_name: table.scorer_name.clone(),
        scores,
    }
}

fn normalize_row(row: &BTreeMap<String, f64>, mode: NormalizationMode) -> BTreeMap<String, f64> {
    if row.is_empty() {
        return BTreeMap::new();
    }
    match mode {
        NormalizationMode::None => row.clone(),
        NormalizationMode::Minmax => {
            let lo = row.values().copied().fold(f64::INFINITY, f64::min);
            let hi = row.values().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            row.iter()
                .map(|(c, s)| {
                    let v = if span > 0.0 { (s - lo) / span } else { 0.5 };
                    (c.clone(), v)
                })
                .collect()
        }
        NormalizationMode::Zscore => {
            let n = row.len() as f64;
            let mean = row.values().sum::<f64>() / n;
            let var = row.values().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            row.iter()
                .map(|(c, s)| {
                    let v = if sd > 0.0 { (s - mean) / sd } else { 0.0 };
                    (c.clone(), v)
                })
                .collect()
        }
    }
}
