//! Score tables and the operations that combine them: normalization,
//! weighted ensembles, grid-searched weights, quorum voting and thresholds.

mod combine;
mod io;
mod normalize;
mod vote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use combine::{
    grid_search_weights, lattice_points, similarity_informed_combine,
    similarity_informed_weights, weighted_combine, GridSearchResult,
};
pub use io::{read_score_table, read_trec_run, write_score_table, write_trec_run};
pub use normalize::{normalize_scores, NormalizationMode};
pub use vote::{majority_vote_topm, threshold_select, tune_threshold, SelectionRule, ThresholdResult};

/// Candidates for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    /// Sorts by descending score, ties by ascending candidate id.
    pub fn from_scores<I, S>(query_id: impl Into<String>, scores: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut entries: Vec<(String, f64)> = scores.into_iter().map(|(c, s)| (c.into(), s)).collect();
        entries.sort_by(rank_order);
        entries.dedup_by(|a, b| a.0 == b.0);
        RankedList {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn empty(query_id: impl Into<String>) -> Self {
        RankedList {
            query_id: query_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    pub fn top(&self, k: usize) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }

    pub fn score(&self, candidate: &str) -> Option<f64> {
        self.entries.iter().find(|(c, _)| c == candidate).map(|(_, s)| *s)
    }
}

/// Per-(query, candidate) scores emitted by one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scorer_name: String,
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ScoreTable {
    pub fn new(scorer_name: impl Into<String>) -> Self {
        ScoreTable {
            scorer_name: scorer_name.into(),
            scores: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query: impl Into<String>, candidate: impl Into<String>, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite score in table `{}`",
                self.scorer_name
            )));
        }
        self.scores
            .entry(query.into())
            .or_default()
            .insert(candidate.into(), score);
        Ok(())
    }

    pub fn from_ranked_lists(scorer_name: impl Into<String>, lists: &[RankedList]) -> Result<Self> {
        let mut t = ScoreTable::new(scorer_name);
        for l in lists {
            t.scores.entry(l.query_id.clone()).or_default();
            for (c, s) in &l.entries {
                t.insert(l.query_id.clone(), c.clone(), *s)?;
            }
        }
        Ok(t)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn get(&self, query: &str, candidate: &str) -> Option<f64> {
        self.scores.get(query).and_then(|m| m.get(candidate)).copied()
    }

    pub fn ranked(&self, query: &str) -> RankedList {
        match self.scores.get(query) {
            Some(m) => RankedList::from_scores(query, m.iter().map(|(c, s)| (c.clone(), *s))),
            None => RankedList::empty(query),
        }
    }

    /// Ranked lists for every query, in query-id order.
    pub fn ranked_lists(&self) -> Vec<RankedList> {
        self.scores.keys().map(|q| self.ranked(q)).collect()
    }

    /// Keeps only the candidates present in `lists` for the matching query.
    pub fn restrict_to(&self, lists: &[RankedList]) -> ScoreTable {
        let mut out = ScoreTable::new(self.scorer_name.clone());
        for l in lists {
            let row = out.scores.entry(l.query_id.clone()).or_default();
            if let Some(src) = self.scores.get(&l.query_id) {
                for c in l.ids() {
                    if let Some(s) = src.get(c) {
                        row.insert(c.to_string(), *s);
                    }
                }
            }
        }
        out
    }
}

/// Non-negative weights per scorer, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: BTreeMap<String, f64>,
}

impl WeightVector {
    pub fn new<I, S>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let weights: BTreeMap<String, f64> = weights.into_iter().map(|(k, v)| (k.into(), v)).collect();
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if let Some((k, v)) = weights.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("weight for `{k}` is {v}")));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, expected 1")));
        }
        Ok(WeightVector { weights })
    }

    pub fn uniform<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let w = 1.0 / names.len().max(1) as f64;
        Self::new(names.into_iter().map(|n| (n, w)))
    }

    pub fn get(&self, scorer: &str) -> Option<f64> {
        self.weights.get(scorer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranked_list_orders_by_score_then_id() {
        let l = RankedList::from_scores("q", [("b", 1.0), ("a", 1.0), ("c", 2.0)]);
        assert_eq!(l.ids().collect::<Vec<_>>(), ["c", "a", "b"]);
    }

    #[test]
    fn weight_vector_validates() {
        assert!(WeightVector::new([("a", 0.5), ("b", 0.5)]).is_ok());
        assert!(WeightVector::new([("a", 0.5), ("b", 0.4)]).is_err());
        assert!(WeightVector::new([("a", -0.5), ("b", 1.5)]).is_err());
        let u = WeightVector::uniform(["a", "b", "c", "d", "e", "f", "g"]).unwrap();
        assert_eq!(u.len(), 7);
    }

    #[test]
    fn score_table_rejects_nan() {
        let mut t = ScoreTable::new("x");
        assert!(t.insert("q", "c", f64::NAN).is_err());
    }

    #[test]
    fn restrict_keeps_listed_candidates() {
        let mut t = ScoreTable::new("x");
        for (c, s) in [("a", 1.0), ("b", 2.0), ("c", 3.0)] {
            t.insert("q", c, s).unwrap();
        }
        let l = RankedList::from_scores("q", [("a", 0.0), ("c", 0.0), ("z", 0.0)]);
        let r = t.restrict_to(&[l]);
        assert_eq!(r.scores["q"].len(), 2);
        assert_eq!(r.get("q", "c"), Some(3.0));
    }
}
