use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Qrels, RawDocument, TortCase};
use crate::{Error, Exec, Result};

#[derive(Deserialize)]
struct CaseRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    paragraphs: Option<Vec<String>>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Reads a JSON Lines case corpus. Records carry `id` and either `text` or
/// `paragraphs`; paragraph arrays are joined with blank lines.
pub fn read_case_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(&shown, n, e.to_string()))?;
        let text = match (rec.text, rec.paragraphs) {
            (Some(t), _) => t,
            (None, Some(ps)) => ps.join("\n\n"),
            (None, None) => return Err(Error::format(&shown, n, "record has neither `text` nor `paragraphs`")),
        };
        if rec.id.is_empty() {
            return Err(Error::format(&shown, n, "empty id"));
        }
        out.push(RawDocument {
            id: rec.id,
            text,
            source_path: shown.clone(),
        });
    }
    Ok(out)
}

/// Reads every `*.txt` file in a directory; ids are file stems, sorted.
pub fn read_text_dir(dir: &Path, exec: Exec) -> Result<Vec<RawDocument>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    exec.map(&paths, |p| {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        Ok(RawDocument {
            id,
            text,
            source_path: p.display().to_string(),
        })
    })
    .into_iter()
    .collect()
}

/// JSON Lines file or directory of text files.
pub fn load_case_corpus(path: &Path, exec: Exec) -> Result<Vec<RawDocument>> {
    if path.is_dir() {
        read_text_dir(path, exec)
    } else {
        read_case_jsonl(path)
    }
}

pub fn read_tort_jsonl(path: &Path) -> Result<Vec<TortCase>> {
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(&shown, n, e.to_string()))?);
    }
    Ok(out)
}

/// Reads `query_id 0 doc_id relevance` lines (tab or space separated).
/// Lines with relevance <= 0 are skipped.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let shown = path.display().to_string();
    let mut qrels = Qrels::new();
    for (n, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [q, _, d, rel] => {
                let rel: i64 = rel
                    .parse()
                    .map_err(|_| Error::format(&shown, n, format!("bad relevance `{rel}`")))?;
                if rel > 0 {
                    qrels.insert(*q, *d);
                }
            }
            _ => return Err(Error::format(&shown, n, "expected 4 fields")),
        }
    }
    Ok(qrels)
}

pub fn write_qrels(qrels: &Qrels, mut out: impl Write) -> std::io::Result<()> {
    for (q, docs) in qrels.iter() {
        for d in docs {
            writeln!(out, "{q}\t0\t{d}\t1")?;
        }
    }
    Ok(())
}
