use serde::{Deserialize, Serialize};

use super::TortCase;

fn missing_groups(case: &TortCase) -> usize {
    case.undisputed_facts.is_empty() as usize
        + case.plaintiff_claims.is_empty() as usize
        + case.defendant_claims.is_empty() as usize
}

/// Removes cases missing two or more of facts, plaintiff claims and
/// defendant claims.
pub fn filter_tort_cases(cases: Vec<TortCase>) -> Vec<TortCase> {
    cases.into_iter().filter(|c| missing_groups(c) < 2).collect()
}

/// Corpus statistics for tort cases.
///
/// Sums are kept alongside the averages so reports over disjoint collections
/// can be merged exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub samples: usize,
    pub total_facts: usize,
    pub max_facts: usize,
    pub total_plaintiff_claims: usize,
    pub max_plaintiff_claims: usize,
    pub total_defendant_claims: usize,
    pub max_defendant_claims: usize,
    pub without_facts: usize,
    pub without_plaintiff_claims: usize,
    pub without_defendant_claims: usize,
    pub without_both_claims: usize,
    pub without_facts_and_both_claims: usize,
    pub with_facts_and_both_claims: usize,
}

fn mean(total: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total as f64 / n as f64
    }
}

impl StatsReport {
    pub fn avg_facts(&self) -> f64 {
        mean(self.total_facts, self.samples)
    }

    pub fn avg_plaintiff_claims(&self) -> f64 {
        mean(self.total_plaintiff_claims, self.samples)
    }

    pub fn avg_defendant_claims(&self) -> f64 {
        mean(self.total_defendant_claims, self.samples)
    }

    pub fn merge(&self, other: &StatsReport) -> StatsReport {
        StatsReport {
            samples: self.samples + other.samples,
            total_facts: self.total_facts + other.total_facts,
            max_facts: self.max_facts.max(other.max_facts),
            total_plaintiff_claims: self.total_plaintiff_claims + other.total_plaintiff_claims,
            max_plaintiff_claims: self.max_plaintiff_claims.max(other.max_plaintiff_claims),
            total_defendant_claims: self.total_defendant_claims + other.total_defendant_claims,
            max_defendant_claims: self.max_defendant_claims.max(other.max_defendant_claims),
            without_facts: self.without_facts + other.without_facts,
            without_plaintiff_claims: self.without_plaintiff_claims + other.without_plaintiff_claims,
            without_defendant_claims: self.without_defendant_claims + other.without_defendant_claims,
            without_both_claims: self.without_both_claims + other.without_both_claims,
            without_facts_and_both_claims: self.without_facts_and_both_claims
                + other.without_facts_and_both_claims,
            with_facts_and_both_claims: self.with_facts_and_both_claims
                + other.with_facts_and_both_claims,
        }
    }

    /// Table rendering with two-decimal averages.
    pub fn to_table(&self) -> String {
        let rows: [(&str, String); 13] = [
            ("No. samples", self.samples.to_string()),
            ("Average facts / Case", format!("{:.2}", self.avg_facts())),
            ("Max facts / Case", self.max_facts.to_string()),
            ("Average plaintiff claims / Case", format!("{:.2}", self.avg_plaintiff_claims())),
            ("Max plaintiff claims / Case", self.max_plaintiff_claims.to_string()),
            ("Average defendant claims / Case", format!("{:.2}", self.avg_defendant_claims())),
            ("Max defendant claims / Case", self.max_defendant_claims.to_string()),
            ("No. samples without facts", self.without_facts.to_string()),
            ("No. samples without plaintiff claims", self.without_plaintiff_claims.to_string()),
            ("No. samples without defendant claims", self.without_defendant_claims.to_string()),
            ("No. samples without both claims", self.without_both_claims.to_string()),
            ("No. samples without facts and both claims", self.without_facts_and_both_claims.to_string()),
            ("No. samples with facts and both claims", self.with_facts_and_both_claims.to_string()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>8}\n"))
            .collect()
    }
}

pub fn corpus_stats(cases: &[TortCase]) -> StatsReport {
    let mut r = StatsReport::default();
    for c in cases {
        let (f, p, d) = (
            c.undisputed_facts.len(),
            c.plaintiff_claims.len(),
            c.defendant_claims.len(),
        );
        r.samples += 1;
        r.total_facts += f;
        r.max_facts = r.max_facts.max(f);
        r.total_plaintiff_claims += p;
        r.max_plaintiff_claims = r.max_plaintiff_claims.max(p);
        r.total_defendant_claims += d;
        r.max_defendant_claims = r.max_defendant_claims.max(d);
        r.without_facts += (f == 0) as usize;
        r.without_plaintiff_claims += (p == 0) as usize;
        r.without_defendant_claims += (d == 0) as usize;
        r.without_both_claims += (p == 0 && d == 0) as usize;
        r.without_facts_and_both_claims += (f == 0 && p == 0 && d == 0) as usize;
        r.with_facts_and_both_claims += (f > 0 && p > 0 && d > 0) as usize;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Claim;
    use proptest::prelude::*;

    fn case(facts: usize, p: usize, d: usize) -> TortCase {
        TortCase {
            id: format!("{facts}-{p}-{d}"),
            undisputed_facts: (0..facts).map(|i| format!("fact {i}")).collect(),
            plaintiff_claims: (0..p).map(|i| Claim::new(format!("p{i}"))).collect(),
            defendant_claims: (0..d).map(|i| Claim::new(format!("d{i}"))).collect(),
            tort_label: None,
        }
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_tort_cases(vec![case(1, 1, 0)]).len(), 1);
        assert!(filter_tort_cases(vec![case(1, 0, 0)]).is_empty());
        assert_eq!(filter_tort_cases(vec![case(2, 1, 3)]).len(), 1);
    }

    #[test]
    fn filter_exhaustive_presence_combinations() {
        for mask in 0..8u8 {
            let c = case((mask & 1) as usize, ((mask >> 1) & 1) as usize, ((mask >> 2) & 1) as usize);
            let present = mask.count_ones();
            let kept = !filter_tort_cases(vec![c]).is_empty();
            assert_eq!(kept, present >= 2, "mask {mask:03b}");
        }
    }

    #[test]
    fn filter_preserves_order() {
        let out = filter_tort_cases(vec![case(1, 1, 1), case(0, 0, 1), case(0, 1, 1), case(1, 0, 1)]);
        let ids: Vec<_> = out.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["1-1-1", "0-1-1", "1-0-1"]);
    }

    #[test]
    fn stats_examples() {
        let r = corpus_stats(&[case(1, 0, 0), case(3, 2, 0)]);
        assert_eq!(r.avg_facts(), 2.0);
        assert_eq!(r.max_facts, 3);
        let empty = corpus_stats(&[]);
        assert_eq!(empty, StatsReport::default());
        assert_eq!(empty.avg_facts(), 0.0);
        assert_eq!(corpus_stats(&[case(0, 1, 1)]).without_facts, 1);
    }

    proptest! {
        #[test]
        fn stats_merge_matches_concatenation(
            a in prop::collection::vec((0usize..4, 0usize..4, 0usize..4), 0..12),
            b in prop::collection::vec((0usize..4, 0usize..4, 0usize..4), 0..12),
        ) {
            let xs: Vec<_> = a.iter().map(|&(f, p, d)| case(f, p, d)).collect();
            let ys: Vec<_> = b.iter().map(|&(f, p, d)| case(f, p, d)).collect();
            let all: Vec<_> = xs.iter().chain(ys.iter()).cloned().collect();
            let merged = corpus_stats(&xs).merge(&corpus_stats(&ys));
            prop_assert_eq!(&merged, &corpus_stats(&all));
            let (sa, sb) = (xs.len() as f64, ys.len() as f64);
            if sa + sb > 0.0 {
                let weighted = (corpus_stats(&xs).avg_facts() * sa + corpus_stats(&ys).avg_facts() * sb) / (sa + sb);
                prop_assert!((merged.avg_facts() - weighted).abs() < 1e-12);
            }
        }
    }
}
