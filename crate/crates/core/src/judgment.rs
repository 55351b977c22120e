//! Tort prediction (TP) and rationale extraction (RE) post-processing, and
//! the cluster-and-vote judgment scheme.
//!
//! Claims of a case are indexed 0.. with plaintiff claims first, then
//! defendant claims.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::TortCase;
use crate::embedding::{cosine, Vector};
use crate::llm::{ChatMessage, ChatModel, PromptTemplate};
use crate::{Error, Result};

/// Ratio used by [`re_refine`] in the submitted runs.
pub const DEFAULT_RE_RATIO: f64 = 2.0;

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Plaintiff,
    Defendant,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Plaintiff => "plaintiff",
            Side::Defendant => "defendant",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartyTally {
    pub accepted: usize,
    pub unaccepted: usize,
}

impl PartyTally {
    pub fn new(accepted: usize, unaccepted: usize) -> Self {
        PartyTally { accepted, unaccepted }
    }

    pub fn from_labels(labels: &[bool]) -> Self {
        let accepted = labels.iter().filter(|l| **l).count();
        PartyTally::new(accepted, labels.len() - accepted)
    }

    fn dominates(&self, other: &PartyTally) -> bool {
        self.accepted > other.accepted && self.unaccepted < other.unaccepted
    }
}

/// Reverses the tort prediction toward a party with strictly more accepted
/// and strictly fewer unaccepted claims than the other.
pub fn tp_reversal(pred: bool, plaintiff: PartyTally, defendant: PartyTally) -> bool {
    if plaintiff.dominates(&defendant) {
        true
    } else if defendant.dominates(&plaintiff) {
        false
    } else {
        pred
    }
}

/// Makes one party's labels uniform when one outcome outnumbers the other
/// by at least `x` times.
pub fn re_refine(labels: &[bool], x: f64) -> Result<Vec<bool>> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::InvalidInput(format!("refinement ratio must be > 0, got {x}")));
    }
    let t = PartyTally::from_labels(labels);
    let (a, u) = (t.accepted as f64, t.unaccepted as f64);
    Ok(if t.unaccepted > 0 && a >= x * u {
        vec![true; labels.len()]
    } else if t.accepted > 0 && u >= x * a {
        vec![false; labels.len()]
    } else {
        labels.to_vec()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterLabel {
    Cluster(usize),
    Outlier,
}

impl std::fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusterLabel::Cluster(c) => write!(f, "{c}"),
            ClusterLabel::Outlier => f.write_str("OUTLIER"),
        }
    }
}

/// Claim index to cluster.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: BTreeMap<usize, ClusterLabel>,
}

impl ClusterAssignment {
    /// Members of each cluster, by cluster id.
    pub fn clusters(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&claim, label) in &self.labels {
            if let ClusterLabel::Cluster(c) = label {
                out.entry(*c).or_default().push(claim);
            }
        }
        out
    }

    pub fn outliers(&self) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|(_, l)| **l == ClusterLabel::Outlier)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters().len()
    }

    /// Cluster ids must run 0.. without gaps, and clusters need two members
    /// unless the whole case forms one cluster.
    pub fn validate(&self) -> Result<()> {
        let clusters = self.clusters();
        for (expected, (&id, members)) in clusters.iter().enumerate() {
            if id != expected {
                return Err(Error::InvalidInput(format!("cluster ids are not contiguous: missing {expected}")));
            }
            let whole_case = clusters.len() == 1 && self.outliers().is_empty();
            if members.len() < 2 && !whole_case {
                return Err(Error::InvalidInput(format!("cluster {id} has a single member")));
            }
        }
        Ok(())
    }
}

/// Scans claims in index order, attaching each to the first cluster whose
/// centroid has cosine >= `theta`, else opening a new one; singleton
/// clusters become outliers and ids are renumbered in order of appearance.
pub fn greedy_cluster(vectors: &[Vector], theta: f64) -> Result<ClusterAssignment> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidInput(format!("cluster threshold must lie in (0, 1), got {theta}")));
    }
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        let mut home = None;
        for (c, sum) in sums.iter().enumerate() {
            let centroid = Vector::new(sum.clone())?;
            if cosine(&centroid, v)? >= theta {
                home = Some(c);
                break;
            }
        }
        match home {
            Some(c) => {
                if sums[c].len() != v.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: sums[c].len(),
                        actual: v.dim(),
                    });
                }
                for (s, x) in sums[c].iter_mut().zip(v.as_slice()) {
                    *s += x;
                }
                members[c].push(i);
            }
            None => {
                if v.norm() == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                sums.push(v.as_slice().to_vec());
                members.push(vec![i]);
            }
        }
    }
    let mut labels = BTreeMap::new();
    let mut next = 0;
    for group in members {
        if group.len() < 2 {
            labels.insert(group[0], ClusterLabel::Outlier);
        } else {
            for m in group {
                labels.insert(m, ClusterLabel::Cluster(next));
            }
            next += 1;
        }
    }
    Ok(ClusterAssignment { labels })
}

/// Every claim of the case in cluster 0.
pub fn single_cluster_fallback(case: &TortCase) -> ClusterAssignment {
    ClusterAssignment {
        labels: (0..case.claim_count()).map(|i| (i, ClusterLabel::Cluster(0))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubargumentVerdict {
    pub cluster: usize,
    pub winning_side: Side,
    pub claim_acceptance: BTreeMap<usize, bool>,
}

/// True iff the plaintiff wins strictly more subarguments.
pub fn cluster_vote(verdicts: &[SubargumentVerdict]) -> Result<bool> {
    if verdicts.is_empty() {
        return Err(Error::InvalidInput("no subargument verdicts to vote on".into()));
    }
    let p = verdicts.iter().filter(|v| v.winning_side == Side::Plaintiff).count();
    Ok(2 * p > verdicts.len())
}

/// Labels for outlier claims: the majority of their own party's clustered
/// labels, or the side's stance under `final_t` when there is no majority.
pub fn inherit_unclustered(
    assignment: &ClusterAssignment,
    clustered_labels: &BTreeMap<usize, bool>,
    side_of: &[Side],
    final_t: bool,
) -> Result<BTreeMap<usize, bool>> {
    let side = |i: usize| {
        side_of
            .get(i)
            .copied()
            .ok_or_else(|| Error::UnknownId(format!("claim index {i}")))
    };
    let mut votes: BTreeMap<Side, (usize, usize)> = BTreeMap::new();
    for (&i, &label) in clustered_labels {
        if assignment.labels.get(&i) == Some(&ClusterLabel::Outlier) {
            continue;
        }
        let e = votes.entry(side(i)?).or_default();
        if label {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let mut out = BTreeMap::new();
    for i in assignment.outliers() {
        let s = side(i)?;
        let (yes, no) = votes.get(&s).copied().unwrap_or_default();
        let label = match yes.cmp(&no) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => (s == Side::Plaintiff) == final_t,
        };
        out.insert(i, label);
    }
    Ok(out)
}

/// Side of each claim index of `case`.
pub fn claim_sides(case: &TortCase) -> Vec<Side> {
    let mut sides = vec![Side::Plaintiff; case.plaintiff_claims.len()];
    sides.extend(std::iter::repeat_n(Side::Defendant, case.defendant_claims.len()));
    sides
}

/// `P1`, `D2`, ...: 1-based label within the claim's party.
pub fn claim_label(index: usize, num_plaintiff: usize) -> String {
    if index < num_plaintiff {
        format!("P{}", index + 1)
    } else {
        format!("D{}", index - num_plaintiff + 1)
    }
}

static ACCEPTED_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\W*accepted\s+claims?\W*:(.*)$").expect("valid regex"));
static CLAIM_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b([PD])\s*(\d+)\b").expect("valid regex"));
static SIDE_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)plaintiff|defendant").expect("valid regex"));

/// Parses a subargument reply. The last mention of "plaintiff" or
/// "defendant" decides the winner. Per-claim acceptance comes from an
/// `ACCEPTED CLAIMS:` line when present; otherwise members take the winning
/// side's stance.
pub fn parse_verdict(
    response: &str,
    cluster: usize,
    members: &[usize],
    num_plaintiff: usize,
) -> (SubargumentVerdict, Vec<String>) {
    let mut warnings = Vec::new();
    let winning_side = match SIDE_WORD.find_iter(response).last() {
        Some(m) if m.as_str().eq_ignore_ascii_case("plaintiff") => Side::Plaintiff,
        Some(_) => Side::Defendant,
        None => {
            warnings.push(format!("cluster {cluster}: no winning side in reply; assuming defendant"));
            Side::Defendant
        }
    };
    let claim_acceptance = match ACCEPTED_LINE.captures_iter(response).last() {
        Some(line) => {
            let mut acc: BTreeMap<usize, bool> = members.iter().map(|m| (*m, false)).collect();
            for r in CLAIM_REF.captures_iter(&line[1]) {
                let n: usize = r[2].parse().unwrap_or(0);
                let idx = match (r[1].to_ascii_uppercase().as_str(), n) {
                    (_, 0) => None,
                    ("P", n) if n <= num_plaintiff => Some(n - 1),
                    ("D", n) => Some(num_plaintiff + n - 1),
                    _ => None,
                };
                match idx.filter(|i| acc.contains_key(i)) {
                    Some(i) => {
                        acc.insert(i, true);
                    }
                    None => warnings.push(format!(
                        "cluster {cluster}: accepted claim {}{} is not a member",
                        &r[1], &r[2]
                    )),
                }
            }
            acc
        }
        None => members
            .iter()
            .map(|&m| {
                let side = if m < num_plaintiff { Side::Plaintiff } else { Side::Defendant };
                (m, side == winning_side)
            })
            .collect(),
    };
    (
        SubargumentVerdict {
            cluster,
            winning_side,
            claim_acceptance,
        },
        warnings,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub tort: bool,
    pub plaintiff_labels: Vec<bool>,
    pub defendant_labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicsConfig {
    pub tp_reversal: bool,
    pub re_refine: bool,
    pub ratio: f64,
}

impl Default for HeuristicsConfig {
    fn default() -> Self {
        HeuristicsConfig {
            tp_reversal: true,
            re_refine: true,
            ratio: DEFAULT_RE_RATIO,
        }
    }
}

/// TP reversal from the predicted claim labels, then per-party RE refinement.
pub fn apply_heuristics(pred: &Prediction, cfg: &HeuristicsConfig) -> Result<Prediction> {
    let mut out = pred.clone();
    if cfg.tp_reversal {
        out.tort = tp_reversal(
            pred.tort,
            PartyTally::from_labels(&pred.plaintiff_labels),
            PartyTally::from_labels(&pred.defendant_labels),
        );
    }
    if cfg.re_refine {
        out.plaintiff_labels = re_refine(&pred.plaintiff_labels, cfg.ratio)?;
        out.defendant_labels = re_refine(&pred.defendant_labels, cfg.ratio)?;
    }
    Ok(out)
}

fn bullet_list(items: impl Iterator<Item = String>) -> String {
    let lines: Vec<String> = items.map(|s| format!("- {s}")).collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Prompt asking for the verdict on one cluster of claims.
pub fn subargument_prompt(case: &TortCase, members: &[usize]) -> Result<String> {
    let np = case.plaintiff_claims.len();
    let claim_text = |i: usize| {
        if i < np {
            &case.plaintiff_claims[i].text
        } else {
            &case.defendant_claims[i - np].text
        }
    };
    let sides = claim_sides(case);
    let claims = members
        .iter()
        .map(|&i| format!("{} ({}): {}", claim_label(i, np), sides[i], claim_text(i)));
    PromptTemplate::builtin("subargument_verdict")?.render(&[
        ("facts", bullet_list(case.undisputed_facts.iter().cloned())),
        ("claims", bullet_list(claims)),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterJudgment {
    pub prediction: Prediction,
    pub assignment: ClusterAssignment,
    pub verdicts: Vec<SubargumentVerdict>,
    pub warnings: Vec<String>,
}

/// Clusters the claims (or uses `external`), asks `model` for a verdict per
/// cluster, votes the tort decision and labels outliers by inheritance.
/// `vectors` holds one claim embedding per claim index.
pub fn cluster_judge(
    case: &TortCase,
    vectors: &[Vector],
    model: &dyn ChatModel,
    theta: f64,
    external: Option<&ClusterAssignment>,
) -> Result<ClusterJudgment> {
    let n = case.claim_count();
    let np = case.plaintiff_claims.len();
    let mut warnings = Vec::new();
    let mut assignment = match external {
        Some(a) => {
            a.validate()?;
            a.clone()
        }
        None => {
            if vectors.len() != n {
                return Err(Error::InvalidInput(format!(
                    "case `{}`: {} claim vectors for {n} claims",
                    case.id,
                    vectors.len()
                )));
            }
            greedy_cluster(vectors, theta)?
        }
    };
    if assignment.num_clusters() == 0 {
        assignment = single_cluster_fallback(case);
    }
    if n == 0 {
        warnings.push(format!("case `{}` has no claims; predicting no tort", case.id));
        return Ok(ClusterJudgment {
            prediction: Prediction {
                id: case.id.clone(),
                tort: false,
                plaintiff_labels: vec![],
                defendant_labels: vec![],
            },
            assignment,
            verdicts: vec![],
            warnings,
        });
    }

    let clusters: Vec<(usize, Vec<usize>)> = assignment.clusters().into_iter().collect();
    let conversations = clusters
        .iter()
        .map(|(_, m)| subargument_prompt(case, m).map(|p| vec![ChatMessage::user(p)]))
        .collect::<Result<Vec<_>>>()?;
    let replies = model.complete_many(&conversations);
    let mut verdicts = Vec::with_capacity(clusters.len());
    for ((cid, members), reply) in clusters.iter().zip(replies) {
        let (v, w) = parse_verdict(&reply?, *cid, members, np);
        warnings.extend(w);
        verdicts.push(v);
    }
    let tort = cluster_vote(&verdicts)?;
    let mut labels: BTreeMap<usize, bool> = verdicts
        .iter()
        .flat_map(|v| v.claim_acceptance.iter().map(|(k, b)| (*k, *b)))
        .collect();
    labels.extend(inherit_unclustered(&assignment, &labels, &claim_sides(case), tort)?);
    let all: Vec<bool> = (0..n).map(|i| labels.get(&i).copied().unwrap_or(false)).collect();
    Ok(ClusterJudgment {
        prediction: Prediction {
            id: case.id.clone(),
            tort,
            plaintiff_labels: all[..np].to_vec(),
            defendant_labels: all[np..].to_vec(),
        },
        assignment,
        verdicts,
        warnings,
    })
}

/// Reads `case_id<TAB>claim_index<TAB>cluster_id|OUTLIER` lines.
pub fn read_cluster_assignments(path: &Path) -> Result<BTreeMap<String, ClusterAssignment>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, ClusterAssignment> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [case_id, claim, cluster] = fields[..] else {
            return Err(Error::format(&shown, i + 1, "expected 3 tab-separated fields"));
        };
        let claim: usize = claim
            .parse()
            .map_err(|_| Error::format(&shown, i + 1, format!("bad claim index `{claim}`")))?;
        let label = if cluster.eq_ignore_ascii_case("OUTLIER") {
            ClusterLabel::Outlier
        } else {
            ClusterLabel::Cluster(
                cluster
                    .parse()
                    .map_err(|_| Error::format(&shown, i + 1, format!("bad cluster id `{cluster}`")))?,
            )
        };
        let entry = out.entry(case_id.to_string()).or_default();
        if entry.labels.insert(claim, label).is_some() {
            return Err(Error::format(&shown, i + 1, format!("claim {claim} assigned twice")));
        }
    }
    for (case_id, a) in &out {
        a.validate()
            .map_err(|e| Error::format(&shown, 0, format!("case `{case_id}`: {e}")))?;
    }
    Ok(out)
}

pub fn write_cluster_assignments(assignments: &BTreeMap<String, ClusterAssignment>) -> String {
    let mut out = String::new();
    for (case_id, a) in assignments {
        for (claim, label) in &a.labels {
            let _ = writeln!(out, "{case_id}\t{claim}\t{label}");
        }
    }
    out
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(&shown, i + 1, e.to_string())))
        .collect()
}

/// One JSON object per line, in input order.
pub fn predictions_to_jsonl(preds: &[Prediction]) -> Result<String> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}
