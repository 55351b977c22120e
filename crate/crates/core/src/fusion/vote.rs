use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::RankedList;
use crate::corpus::Qrels;
use crate::eval::MetricSpec;
use crate::{Error, Exec, Result};

/// How a ranked list is cut into a predicted set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionRule {
    TopK { k: usize },
    Threshold { theta: f64, fallback_top1: bool },
}

impl SelectionRule {
    /// The selected prefix, in rank order.
    pub fn apply(&self, list: &RankedList) -> RankedList {
        match *self {
            SelectionRule::TopK { k } => list.top(k),
            SelectionRule::Threshold { theta, fallback_top1 } => {
                let mut entries: Vec<(String, f64)> =
                    list.entries.iter().filter(|(_, s)| *s > theta).cloned().collect();
                if entries.is_empty() && fallback_top1 {
                    entries.extend(list.entries.first().cloned());
                }
                RankedList {
                    query_id: list.query_id.clone(),
                    entries,
                }
            }
        }
    }
}

/// Candidates scoring strictly above `theta`; the top candidate alone when
/// that is empty and `fallback_top1` is set.
pub fn threshold_select(list: &RankedList, theta: f64, fallback_top1: bool) -> BTreeSet<String> {
    SelectionRule::Threshold { theta, fallback_top1 }
        .apply(list)
        .ids()
        .map(str::to_string)
        .collect()
}

/// Quorum voting over the top-`m` prefixes of several ranked lists.
///
/// Output order: votes descending, then mean 1-based rank over the lists that
/// contain the candidate, then id. `quorum` defaults to a strict majority
/// rounded up (`ceil(L / 2)`).
pub fn majority_vote_topm(
    lists: &[RankedList],
    m: usize,
    quorum: Option<usize>,
    max_out: Option<usize>,
) -> Result<Vec<String>> {
    if m < 1 {
        return Err(Error::InvalidInput("m must be >= 1".into()));
    }
    if lists.len() < 2 {
        return Err(Error::InvalidInput(format!("voting needs >= 2 lists, got {}", lists.len())));
    }
    let quorum = quorum.unwrap_or(lists.len().div_ceil(2));
    if quorum < 1 || quorum > lists.len() {
        return Err(Error::InvalidInput(format!(
            "quorum {quorum} outside 1..={}",
            lists.len()
        )));
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for l in lists {
        for (rank, c) in l.ids().take(m).enumerate() {
            let e = tally.entry(c).or_default();
            e.0 += 1;
            e.1 += rank + 1;
        }
    }
    let mut picked: Vec<(&str, usize, f64)> = tally
        .into_iter()
        .filter(|(_, (v, _))| *v >= quorum)
        .map(|(c, (v, rank_sum))| (c, v, rank_sum as f64 / v as f64))
        .collect();
    picked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| a.2.total_cmp(&b.2))
            .then_with(|| a.0.cmp(b.0))
    });
    let cap = max_out.unwrap_or(usize::MAX);
    Ok(picked.into_iter().take(cap).map(|(c, _, _)| c.to_string()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub theta: f64,
    pub objective: f64,
}

/// Sweeps `grid` in ascending order and returns the first threshold reaching
/// the best objective over the queries in `qrels`.
pub fn tune_threshold(
    lists: &[RankedList],
    qrels: &Qrels,
    objective: MetricSpec,
    grid: &[f64],
    fallback_top1: bool,
    exec: Exec,
) -> Result<ThresholdResult> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty threshold grid".into()));
    }
    if qrels.is_empty() {
        return Err(Error::InvalidInput("empty qrels".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let by_query: BTreeMap<&str, &RankedList> = lists.iter().map(|l| (l.query_id.as_str(), l)).collect();

    let values = exec.map(&grid, |&theta| {
        let per_query: Vec<(Vec<String>, BTreeSet<String>)> = qrels
            .iter()
            .map(|(q, rel)| {
                let picked = by_query
                    .get(q)
                    .map(|l| threshold_select(l, theta, fallback_top1).into_iter().collect())
                    .unwrap_or_default();
                (picked, rel.clone())
            })
            .collect();
        objective.evaluate(&per_query)
    });

    let mut best: Option<ThresholdResult> = None;
    for (theta, v) in grid.iter().zip(values) {
        let v = v?;
        if best.as_ref().is_none_or(|b| v > b.objective) {
            best = Some(ThresholdResult { theta: *theta, objective: v });
        }
    }
    Ok(best.expect("grid is non-empty"))
}
