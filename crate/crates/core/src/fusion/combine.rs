use std::collections::{BTreeMap, BTreeSet};

use super::{RankedList, ScoreTable, SelectionRule, WeightVector};
use crate::corpus::Qrels;
use crate::embedding::{cosine, EmbeddingStore, Vector};
use crate::eval::MetricSpec;
use crate::{Error, Exec, Result};

/// Pointwise weighted sum over the union of candidates per query. A candidate
/// missing from a table contributes 0 for that scorer.
pub fn weighted_combine(tables: &[ScoreTable], w: &WeightVector, name: &str) -> Result<ScoreTable> {
    for (scorer, _) in w.iter() {
        if !tables.iter().any(|t| t.scorer_name == scorer) {
            return Err(Error::UnknownId(format!("weight for scorer `{scorer}` has no table")));
        }
    }
    let used: Vec<(&ScoreTable, f64)> = tables
        .iter()
        .filter_map(|t| w.get(&t.scorer_name).map(|wt| (t, wt)))
        .collect();
    let queries: BTreeSet<&str> = used.iter().flat_map(|(t, _)| t.queries()).collect();
    let mut out = ScoreTable::new(name);
    for q in queries {
        let row = out.scores.entry(q.to_string()).or_default();
        let candidates: BTreeSet<&str> = used
            .iter()
            .filter_map(|(t, _)| t.scores.get(q))
            .flat_map(|m| m.keys().map(String::as_str))
            .collect();
        for c in candidates {
            let mut s = 0.0;
            for (t, wt) in &used {
                s += wt * t.get(q, c).unwrap_or(0.0);
            }
            row.insert(c.to_string(), s);
        }
    }
    Ok(out)
}

/// Integer compositions of `n` into `parts` parts, in descending
/// lexicographic order of the leading `parts - 1` counts: `(n,0,..,0)` first.
pub fn lattice_points(n: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in (0..=left).rev() {
            prefix.push(c);
            rec(left - c, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(n, parts, &mut Vec::with_capacity(parts), &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub weights: WeightVector,
    pub objective: f64,
    pub evaluated: usize,
}

/// Dense per-query score matrix shared by every lattice point.
struct QueryMatrix {
    relevant: BTreeSet<String>,
    candidates: Vec<String>,
    /// `scores[c][i]`: scorer i's score for candidate c (0 when missing).
    scores: Vec<Vec<f64>>,
}

fn steps_for(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidInput(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("grid step {step} does not divide 1")));
    }
    Ok(n as usize)
}

/// Exhaustive search over non-negative weight vectors on the `step` lattice.
///
/// Lattice points are visited from `(1, 0, ..)` downward in lexicographic
/// order; the first point reaching the best objective wins, so ties favour
/// the earliest tables. Only queries present in `qrels` are scored.
pub fn grid_search_weights(
    tables: &[ScoreTable],
    qrels: &Qrels,
    objective: MetricSpec,
    step: f64,
    selector: SelectionRule,
    exec: Exec,
) -> Result<GridSearchResult> {
    if !(2..=5).contains(&tables.len()) {
        return Err(Error::InvalidInput(format!(
            "grid search takes 2 to 5 scorers, got {}",
            tables.len()
        )));
    }
    if qrels.is_empty() {
        return Err(Error::InvalidInput("empty qrels".into()));
    }
    let n = steps_for(step)?;

    let matrices: Vec<QueryMatrix> = qrels
        .iter()
        .map(|(q, rel)| {
            let candidates: Vec<String> = tables
                .iter()
                .filter_map(|t| t.scores.get(q))
                .flat_map(|m| m.keys().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let scores = candidates
                .iter()
                .map(|c| tables.iter().map(|t| t.get(q, c).unwrap_or(0.0)).collect())
                .collect();
            QueryMatrix {
                relevant: rel.clone(),
                candidates,
                scores,
            }
        })
        .collect();

    let points = lattice_points(n, tables.len());
    let values: Vec<Result<f64>> = exec.map(&points, |counts| {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let per_query: Vec<(Vec<String>, BTreeSet<String>)> = matrices
            .iter()
            .map(|m| {
                let combined = m.candidates.iter().zip(&m.scores).map(|(c, row)| {
                    let mut s = 0.0;
                    for (wi, si) in w.iter().zip(row) {
                        s += wi * si;
                    }
                    (c.clone(), s)
                });
                let ranked = RankedList::from_scores("", combined);
                let picked = selector.apply(&ranked);
                (picked.ids().map(str::to_string).collect(), m.relevant.clone())
            })
            .collect();
        objective.evaluate(&per_query)
    });

    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let v = v?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (idx, objective) = best.expect("lattice is never empty");
    let weights = WeightVector::new(
        tables
            .iter()
            .zip(&points[idx])
            .map(|(t, &c)| (t.scorer_name.clone(), c as f64 / n as f64)),
    )?;
    Ok(GridSearchResult {
        weights,
        objective,
        evaluated: points.len(),
    })
}

/// Weights proportional to each scorer's mean dev metric over the `k` dev
/// queries most similar (cosine) to `test_query`. All-zero means give
/// uniform weights. Missing metric values count as 0.
pub fn similarity_informed_weights(
    test_query: &Vector,
    dev_queries: &EmbeddingStore,
    per_model_dev_metric: &BTreeMap<String, BTreeMap<String, f64>>,
    k: usize,
) -> Result<WeightVector> {
    if dev_queries.is_empty() {
        return Err(Error::InvalidInput("empty dev query store".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if per_model_dev_metric.is_empty() {
        return Err(Error::InvalidInput("no scorers in dev metrics".into()));
    }
    let mut sims = Vec::with_capacity(dev_queries.len());
    for (id, v) in dev_queries.iter() {
        sims.push((id.to_string(), cosine(test_query, v)?));
    }
    let nearest = RankedList::from_scores("", sims).top(k);

    let means: Vec<(String, f64)> = per_model_dev_metric
        .iter()
        .map(|(scorer, per_query)| {
            let total: f64 = nearest.ids().map(|q| per_query.get(q).copied().unwrap_or(0.0)).sum();
            (scorer.clone(), total / nearest.len() as f64)
        })
        .collect();
    let sum: f64 = means.iter().map(|(_, m)| m).sum();
    if sum <= 0.0 {
        return WeightVector::uniform(means.into_iter().map(|(s, _)| s));
    }
    WeightVector::new(means.into_iter().map(|(s, m)| (s, m / sum)))
}

/// Per-query weighted combination using [`similarity_informed_weights`].
pub fn similarity_informed_combine(
    tables: &[ScoreTable],
    query_vectors: &EmbeddingStore,
    dev_queries: &EmbeddingStore,
    per_model_dev_metric: &BTreeMap<String, BTreeMap<String, f64>>,
    k: usize,
    name: &str,
) -> Result<ScoreTable> {
    let queries: BTreeSet<&str> = tables.iter().flat_map(|t| t.queries()).collect();
    let mut out = ScoreTable::new(name);
    for q in queries {
        let v = query_vectors
            .get(q)
            .ok_or_else(|| Error::UnknownId(format!("no embedding for query `{q}`")))?;
        let w = similarity_informed_weights(v, dev_queries, per_model_dev_metric, k)?;
        let slices: Vec<ScoreTable> = tables
            .iter()
            .filter(|t| w.get(&t.scorer_name).is_some())
            .map(|t| {
                let mut s = ScoreTable::new(t.scorer_name.clone());
                if let Some(row) = t.scores.get(q) {
                    s.scores.insert(q.to_string(), row.clone());
                }
                s
            })
            .collect();
        let combined = weighted_combine(&slices, &w, name)?;
        out.scores.extend(combined.scores);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RetrievalCounts;
    use proptest::prelude::*;

    fn table(name: &str, rows: &[(&str, &str, f64)]) -> ScoreTable {
        let mut t = ScoreTable::new(name);
        for (q, c, s) in rows {
            t.insert(*q, *c, *s).unwrap();
        }
        t
    }

    #[test]
    fn combine_examples() {
        let a = table("A", &[("q", "x", 0.2)]);
        let b = table("B", &[("q", "x", 0.6), ("q", "y", 0.8)]);
        let half = WeightVector::new([("A", 0.5), ("B", 0.5)]).unwrap();
        let c = weighted_combine(&[a.clone(), b.clone()], &half, "c").unwrap();
        assert!((c.get("q", "x").unwrap() - 0.4).abs() < 1e-12);
        assert!((c.get("q", "y").unwrap() - 0.4).abs() < 1e-12);

        let one_hot = WeightVector::new([("A", 1.0), ("B", 0.0)]).unwrap();
        let c = weighted_combine(&[a.clone(), b.clone()], &one_hot, "c").unwrap();
        assert_eq!(c.get("q", "x"), a.get("q", "x"));

        let bad = WeightVector::new([("A", 0.5), ("Z", 0.5)]).unwrap();
        assert!(matches!(weighted_combine(&[a, b], &bad, "c"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn lattice_sizes_and_order() {
        assert_eq!(lattice_points(2, 2), vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(lattice_points(10, 3).len(), 66);
        assert_eq!(lattice_points(10, 5).len(), 1001);
        assert!(lattice_points(10, 3).iter().all(|p| p.iter().sum::<usize>() == 10));
    }

    #[test]
    fn step_must_divide_one() {
        assert_eq!(steps_for(0.1).unwrap(), 10);
        assert_eq!(steps_for(0.5).unwrap(), 2);
        assert!(steps_for(0.3).is_err());
        assert!(steps_for(0.0).is_err());
    }

    fn indicator_and_reversed() -> (ScoreTable, ScoreTable, Qrels) {
        let mut a = ScoreTable::new("A");
        let mut b = ScoreTable::new("B");
        let mut qrels = Qrels::new();
        for q in 0..6 {
            let qid = format!("q{q}");
            let rel = q % 5;
            qrels.insert(qid.clone(), format!("c{rel}"));
            for c in 0..5 {
                let is_rel = c == rel;
                a.insert(qid.clone(), format!("c{c}"), if is_rel { 1.0 } else { 0.0 }).unwrap();
                // reversed: relevant scores lowest
                b.insert(qid.clone(), format!("c{c}"), if is_rel { 0.0 } else { 1.0 - c as f64 * 0.1 }).unwrap();
            }
        }
        (a, b, qrels)
    }

    #[test]
    fn recovers_indicator_scorer() {
        let (a, b, qrels) = indicator_and_reversed();
        let r = grid_search_weights(&[a, b], &qrels, MetricSpec::MicroF1, 0.1, SelectionRule::TopK { k: 1 }, Exec::default()).unwrap();
        assert_eq!(r.objective, 1.0);
        assert!(r.weights.get("A").unwrap() >= 0.9);
        assert_eq!(r.evaluated, 11);
    }

    #[test]
    fn identical_tables_tie_on_first_point() {
        let (a, _, qrels) = indicator_and_reversed();
        let mut b = a.clone();
        b.scorer_name = "B".into();
        let r = grid_search_weights(&[a, b], &qrels, MetricSpec::MicroF1, 0.1, SelectionRule::TopK { k: 1 }, Exec::Sequential).unwrap();
        assert_eq!(r.weights.get("A"), Some(1.0));
        assert_eq!(r.weights.get("B"), Some(0.0));
    }

    #[test]
    fn step_half_evaluates_three_points() {
        let (a, b, qrels) = indicator_and_reversed();
        let r = grid_search_weights(&[a, b], &qrels, MetricSpec::MicroF1, 0.5, SelectionRule::TopK { k: 1 }, Exec::Sequential).unwrap();
        assert_eq!(r.evaluated, 3);
    }

    #[test]
    fn grid_search_errors() {
        let (a, b, qrels) = indicator_and_reversed();
        let sel = SelectionRule::TopK { k: 1 };
        assert!(grid_search_weights(std::slice::from_ref(&a), &qrels, MetricSpec::MicroF1, 0.1, sel, Exec::Sequential).is_err());
        assert!(grid_search_weights(&[a.clone(), b.clone()], &Qrels::new(), MetricSpec::MicroF1, 0.1, sel, Exec::Sequential).is_err());
        assert!(grid_search_weights(&[a, b], &qrels, MetricSpec::MicroF1, 0.3, sel, Exec::Sequential).is_err());
    }

    /// Independent path: build each lattice combination through
    /// `weighted_combine` and score it with the counting metric.
    fn oracle_best(tables: &[ScoreTable], qrels: &Qrels, n: usize, k: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for p in lattice_points(n, tables.len()) {
            let w = WeightVector::new(tables.iter().zip(&p).map(|(t, c)| (t.scorer_name.clone(), *c as f64 / n as f64))).unwrap();
            let comb = weighted_combine(tables, &w, "o").unwrap();
            let mut counts = RetrievalCounts::default();
            for (q, rel) in qrels.iter() {
                let top: Vec<String> = comb.ranked(q).top(k).ids().map(String::from).collect();
                counts += RetrievalCounts::from_sets(&top, rel);
            }
            best = best.max(crate::eval::micro_prf(counts).f1);
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn grid_search_matches_oracle_and_dominates_corners(
            raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 24),
            rel in prop::collection::vec(0usize..8, 3),
        ) {
            let names = ["A", "B", "C"];
            let mut tables: Vec<ScoreTable> = names.iter().map(|n| ScoreTable::new(*n)).collect();
            let mut qrels = Qrels::new();
            for q in 0..3 {
                qrels.insert(format!("q{q}"), format!("c{}", rel[q]));
                for c in 0..8 {
                    for (i, t) in tables.iter_mut().enumerate() {
                        t.insert(format!("q{q}"), format!("c{c}"), raw[q * 8 + c][i]).unwrap();
                    }
                }
            }
            let r = grid_search_weights(&tables, &qrels, MetricSpec::MicroF1, 0.25, SelectionRule::TopK { k: 2 }, Exec::default()).unwrap();
            prop_assert_eq!(r.objective, oracle_best(&tables, &qrels, 4, 2));
            for t in &tables {
                let w = WeightVector::new(tables.iter().map(|u| (u.scorer_name.clone(), if u.scorer_name == t.scorer_name { 1.0 } else { 0.0 }))).unwrap();
                let comb = weighted_combine(&tables, &w, "x").unwrap();
                let mut counts = RetrievalCounts::default();
                for (q, rels) in qrels.iter() {
                    let top: Vec<String> = comb.ranked(q).top(2).ids().map(String::from).collect();
                    counts += RetrievalCounts::from_sets(&top, rels);
                }
                prop_assert!(r.objective >= crate::eval::micro_prf(counts).f1);
            }
        }

        #[test]
        fn one_hot_reproduces_ranking(
            a in prop::collection::vec(0.0f64..1.0, 1..15),
            b in prop::collection::vec(0.0f64..1.0, 15),
        ) {
            let mut ta = ScoreTable::new("A");
            let mut tb = ScoreTable::new("B");
            for (i, s) in a.iter().enumerate() {
                ta.insert("q", format!("c{i:02}"), *s).unwrap();
            }
            for (i, s) in b.iter().enumerate() {
                tb.insert("q", format!("c{i:02}"), *s).unwrap();
            }
            let w = WeightVector::new([("A", 1.0), ("B", 0.0)]).unwrap();
            let c = weighted_combine(&[ta.clone(), tb], &w, "c").unwrap();
            let support: BTreeSet<&str> = ta.scores["q"].keys().map(String::as_str).collect();
            let restricted: Vec<String> = c
                .ranked("q")
                .ids()
                .filter(|x| support.contains(x))
                .map(str::to_string)
                .collect();
            let expected: Vec<String> = ta.ranked("q").ids().map(str::to_string).collect();
            prop_assert_eq!(restricted, expected);
        }
    }

    fn dev_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2, "dev");
        s.insert("d1", Vector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        s.insert("d2", Vector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        s
    }

    fn metrics(rows: &[(&str, &[(&str, f64)])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        rows.iter()
            .map(|(s, qs)| (s.to_string(), qs.iter().map(|(q, v)| (q.to_string(), *v)).collect()))
            .collect()
    }

    #[test]
    fn similarity_weights_examples() {
        let q = Vector::new(vec![0.9, 0.1]).unwrap();
        let m = metrics(&[("A", &[("d1", 0.8), ("d2", 0.1)]), ("B", &[("d1", 0.2), ("d2", 0.9)])]);
        let w = similarity_informed_weights(&q, &dev_store(), &m, 1).unwrap();
        assert!((w.get("A").unwrap() - 0.8).abs() < 1e-12);
        assert!((w.get("B").unwrap() - 0.2).abs() < 1e-12);

        let same = metrics(&[("A", &[("d1", 0.5), ("d2", 0.5)]), ("B", &[("d1", 0.5), ("d2", 0.5)])]);
        let w = similarity_informed_weights(&q, &dev_store(), &same, 2).unwrap();
        assert_eq!(w.get("A"), Some(0.5));

        let one = metrics(&[("A", &[("d1", 1.0), ("d2", 1.0)]), ("B", &[("d1", 0.0), ("d2", 0.0)]), ("C", &[])]);
        let w = similarity_informed_weights(&q, &dev_store(), &one, 2).unwrap();
        assert_eq!(w.get("A"), Some(1.0));

        let zero = metrics(&[("A", &[]), ("B", &[])]);
        let w = similarity_informed_weights(&q, &dev_store(), &zero, 2).unwrap();
        assert_eq!(w.get("B"), Some(0.5));

        assert!(similarity_informed_weights(&q, &EmbeddingStore::new(2, "x"), &m, 1).is_err());
    }

    #[test]
    fn similarity_weights_permutation_equivariant() {
        let q = Vector::new(vec![0.6, 0.4]).unwrap();
        let m = metrics(&[("A", &[("d1", 0.3), ("d2", 0.6)]), ("B", &[("d1", 0.9), ("d2", 0.2)])]);
        let swapped = metrics(&[("B", &[("d1", 0.3), ("d2", 0.6)]), ("A", &[("d1", 0.9), ("d2", 0.2)])]);
        let w1 = similarity_informed_weights(&q, &dev_store(), &m, 2).unwrap();
        let w2 = similarity_informed_weights(&q, &dev_store(), &swapped, 2).unwrap();
        assert_eq!(w1.get("A"), w2.get("B"));
        assert_eq!(w1.get("B"), w2.get("A"));
        assert!((w1.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_combine_per_query() {
        let mut qv = EmbeddingStore::new(2, "q");
        qv.insert("q1", Vector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let m = metrics(&[("A", &[("d1", 1.0), ("d2", 0.0)]), ("B", &[("d1", 0.0), ("d2", 1.0)])]);
        let a = table("A", &[("q1", "x", 1.0), ("q1", "y", 0.0)]);
        let b = table("B", &[("q1", "x", 0.0), ("q1", "y", 1.0)]);
        let c = similarity_informed_combine(&[a, b], &qv, &dev_store(), &m, 1, "sim").unwrap();
        assert_eq!(c.get("q1", "x"), Some(1.0));
        assert_eq!(c.get("q1", "y"), Some(0.0));
    }
}
