//! Retrieval and classification metrics.
//!
//! Division by zero yields 0 everywhere: precision with nothing retrieved,
//! recall with nothing relevant, and F with `P + R = 0`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::fusion::RankedList;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCounts {
    pub retrieved: usize,
    pub relevant: usize,
    pub hits: usize,
}

impl RetrievalCounts {
    pub fn from_sets<S: AsRef<str>>(retrieved: &[S], relevant: &BTreeSet<String>) -> Self {
        let uniq: BTreeSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
        RetrievalCounts {
            retrieved: uniq.len(),
            relevant: relevant.len(),
            hits: uniq.iter().filter(|c| relevant.contains(**c)).count(),
        }
    }
}

impl Add for RetrievalCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        RetrievalCounts {
            retrieved: self.retrieved + o.retrieved,
            relevant: self.relevant + o.relevant,
            hits: self.hits + o.hits,
        }
    }
}

impl AddAssign for RetrievalCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn micro_prf(counts: RetrievalCounts) -> Prf {
    let precision = ratio(counts.hits, counts.retrieved);
    let recall = ratio(counts.hits, counts.relevant);
    Prf {
        precision,
        recall,
        f1: f_from_pr(precision, recall, 1.0),
    }
}

/// F-beta from precision and recall.
pub fn f_from_pr(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

/// Mean of per-query F2.
pub fn macro_f2<S: AsRef<str>>(per_query: &[(Vec<S>, BTreeSet<String>)]) -> Result<f64> {
    macro_f(per_query, 2.0)
}

pub fn macro_f<S: AsRef<str>>(per_query: &[(Vec<S>, BTreeSet<String>)], beta: f64) -> Result<f64> {
    if per_query.is_empty() {
        return Err(Error::InvalidInput("macro F over zero queries".into()));
    }
    let total: f64 = per_query
        .iter()
        .map(|(ret, rel)| {
            let c = RetrievalCounts::from_sets(ret, rel);
            f_from_pr(ratio(c.hits, c.retrieved), ratio(c.hits, c.relevant), beta)
        })
        .sum();
    Ok(total / per_query.len() as f64)
}

pub fn recall_at_k(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.ids().take(k).filter(|c| relevant.contains(*c)).count();
    hits as f64 / relevant.len() as f64
}

pub fn accuracy(correct: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidInput("accuracy over zero items".into()));
    }
    if correct > total {
        return Err(Error::InvalidInput(format!("{correct} correct out of {total}")));
    }
    Ok(correct as f64 / total as f64)
}

/// Micro-F1 of the positive class over aligned label sequences.
pub fn micro_f1_labels(pred: &[bool], gold: &[bool]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "label length mismatch: {} predicted, {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let counts = pred.iter().zip(gold).fold(RetrievalCounts::default(), |mut c, (p, g)| {
        c.retrieved += *p as usize;
        c.relevant += *g as usize;
        c.hits += (*p && *g) as usize;
        c
    });
    Ok(micro_prf(counts).f1)
}

/// Objective used by tuning and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricSpec {
    MicroF1,
    MacroF2,
    /// Fraction of queries whose retrieved set equals the relevant set.
    Accuracy,
    RecallAtK(usize),
    MicroF1Labels,
}

impl MetricSpec {
    /// Scores per-query (retrieved in rank order, relevant) pairs.
    pub fn evaluate<S: AsRef<str>>(&self, per_query: &[(Vec<S>, BTreeSet<String>)]) -> Result<f64> {
        if per_query.is_empty() {
            return Err(Error::InvalidInput("no queries to evaluate".into()));
        }
        match self {
            MetricSpec::MicroF1 => {
                let c = per_query
                    .iter()
                    .map(|(r, g)| RetrievalCounts::from_sets(r, g))
                    .fold(RetrievalCounts::default(), Add::add);
                Ok(micro_prf(c).f1)
            }
            MetricSpec::MacroF2 => macro_f2(per_query),
            MetricSpec::Accuracy => {
                let correct = per_query
                    .iter()
                    .filter(|(r, g)| {
                        let s: BTreeSet<&str> = r.iter().map(AsRef::as_ref).collect();
                        s.len() == g.len() && s.iter().all(|c| g.contains(*c))
                    })
                    .count();
                accuracy(correct, per_query.len())
            }
            MetricSpec::RecallAtK(k) => {
                let total: f64 = per_query
                    .iter()
                    .map(|(r, g)| {
                        let l = RankedList::from_scores(
                            "",
                            r.iter().enumerate().map(|(i, c)| (c.as_ref().to_string(), -(i as f64))),
                        );
                        recall_at_k(&l, g, *k)
                    })
                    .sum();
                Ok(total / per_query.len() as f64)
            }
            MetricSpec::MicroF1Labels => Err(Error::InvalidInput(
                "micro_f1_labels applies to label sequences, not retrieval sets".into(),
            )),
        }
    }
}

impl std::str::FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(k) = s.strip_prefix("recall@").or_else(|| s.strip_prefix("recall_at_")) {
            let k: usize = k
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad k in metric `{s}`")))?;
            if k == 0 {
                return Err(Error::InvalidInput("recall@k needs k >= 1".into()));
            }
            return Ok(MetricSpec::RecallAtK(k));
        }
        match s.as_str() {
            "micro_f1" | "f1" => Ok(MetricSpec::MicroF1),
            "macro_f2" | "f2" => Ok(MetricSpec::MacroF2),
            "accuracy" => Ok(MetricSpec::Accuracy),
            "micro_f1_labels" => Ok(MetricSpec::MicroF1Labels),
            _ => Err(Error::InvalidInput(format!("unknown metric `{s}`"))),
        }
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.to_string()
    }
}

impl std::fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricSpec::MicroF1 => f.write_str("micro_f1"),
            MetricSpec::MacroF2 => f.write_str("macro_f2"),
            MetricSpec::Accuracy => f.write_str("accuracy"),
            MetricSpec::RecallAtK(k) => write!(f, "recall@{k}"),
            MetricSpec::MicroF1Labels => f.write_str("micro_f1_labels"),
        }
    }
}

/// Four decimal places, ties to even.
pub fn format_metric(x: f64) -> String {
    format!("{x:.4}")
}

/// Named metric values rendered as aligned text or JSON.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn new(title: impl Into<String>) -> Self {
        EvalReport {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.rows.push((name.into(), value));
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        for (name, v) in &self.rows {
            let _ = writeln!(out, "{name:<width$}  {}", format_metric(*v));
        }
        out
    }

    /// JSON object with metric values printed at four decimals.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        let _ = write!(out, "\"title\":{}", serde_json::Value::String(self.title.clone()));
        out.push_str(",\"metrics\":{");
        for (i, (name, v)) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}:{}", serde_json::Value::String(name.clone()), format_metric(*v));
        }
        out.push_str("}}");
        out
    }
}
