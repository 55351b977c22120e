use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{RankedList, ScoreTable};
use crate::{Error, Result};

/// Reads `query_id<TAB>candidate_id<TAB>score`. The scorer name comes from a
/// leading `# scorer: NAME` comment, else the file stem.
pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let mut table = ScoreTable::new(stem);
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(name) = comment.trim().strip_prefix("scorer:") {
                table.scorer_name = name.trim().to_string();
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, c, s] = fields.as_slice() else {
            return Err(Error::format(&shown, n, "expected query<TAB>candidate<TAB>score"));
        };
        let score: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::format(&shown, n, format!("bad score `{s}`")))?;
        table
            .insert(*q, *c, score)
            .map_err(|e| Error::format(&shown, n, e.to_string()))?;
    }
    if table.scorer_name.is_empty() {
        return Err(Error::format(&shown, 0, "empty scorer name"));
    }
    Ok(table)
}

/// Scores are written in shortest round-trip form.
pub fn write_score_table(table: &ScoreTable, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# scorer: {}", table.scorer_name)?;
    for (q, row) in &table.scores {
        for (c, s) in row {
            writeln!(out, "{q}\t{c}\t{s}")?;
        }
    }
    Ok(())
}

/// TREC run lines: `query_id Q0 candidate_id rank score run_tag`.
pub fn write_trec_run(lists: &[RankedList], run_tag: &str, mut out: impl Write) -> std::io::Result<()> {
    for l in lists {
        for (rank, (c, s)) in l.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {:.6} {}", l.query_id, c, rank + 1, s, run_tag)?;
        }
    }
    Ok(())
}

/// Parses a TREC run into ranked lists keyed by query id, ordered by the
/// rank column.
pub fn read_trec_run(path: &Path) -> Result<BTreeMap<String, RankedList>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [q, _, c, rank, score, ..] => {
                let rank: usize = rank
                    .parse()
                    .map_err(|_| Error::format(&shown, i + 1, format!("bad rank `{rank}`")))?;
                let score: f64 = score
                    .parse()
                    .map_err(|_| Error::format(&shown, i + 1, format!("bad score `{score}`")))?;
                rows.entry(q.to_string()).or_default().push((rank, c.to_string(), score));
            }
            _ => return Err(Error::format(&shown, i + 1, "expected 6 fields")),
        }
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut rs)| {
            rs.sort_by_key(|r| r.0);
            let entries = rs.into_iter().map(|(_, c, s)| (c, s)).collect();
            (q.clone(), RankedList { query_id: q, entries })
        })
        .collect())
}
