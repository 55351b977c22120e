//! Tokenization, inverted index and BM25 ranking.
//!
//! Scoring uses the Lucene-style idf `ln(1 + (N - df + 0.5) / (df + 0.5))`,
//! which keeps every matched score positive:
//!
//! ```text
//! score(d, q) = sum over query tokens t of
//!     idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * |d| / avgdl))
//! ```
//!
//! Repeated query tokens contribute once per occurrence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::RankedList;
use crate::{Error, Exec, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub stopwords: Option<HashSet<String>>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            lowercase: true,
            stopwords: None,
        }
    }
}

impl Tokenizer {
    /// Maximal runs of letters and digits.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| if self.lowercase { t.to_lowercase() } else { t.to_string() })
            .filter(|t| self.stopwords.as_ref().is_none_or(|s| !s.contains(t)))
            .collect()
    }
}

pub fn tokenize(text: &str, t: &Tokenizer) -> Vec<String> {
    t.tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidInput(format!("k1 = {} must be >= 0", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidInput(format!("b = {} must lie in [0, 1]", self.b)));
        }
        Ok(())
    }
}

/// Postings keyed by term; documents are referenced by insertion position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexFile", into = "IndexFile")]
pub struct InvertedIndex {
    tokenizer: Tokenizer,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avgdl: f64,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        let sorted = |s: &Option<HashSet<String>>| {
            s.as_ref().map(|s| {
                let mut v: Vec<_> = s.iter().cloned().collect();
                v.sort();
                v
            })
        };
        self.lowercase == other.lowercase && sorted(&self.stopwords) == sorted(&other.stopwords)
    }
}

/// On-disk form: no derived floats, so reloading is exact.
#[derive(Serialize, Deserialize)]
struct IndexFile {
    lowercase: bool,
    stopwords: Option<Vec<String>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl From<InvertedIndex> for IndexFile {
    fn from(ix: InvertedIndex) -> Self {
        let stopwords = ix.tokenizer.stopwords.map(|s| {
            let mut v: Vec<_> = s.into_iter().collect();
            v.sort();
            v
        });
        IndexFile {
            lowercase: ix.tokenizer.lowercase,
            stopwords,
            doc_ids: ix.doc_ids,
            doc_lengths: ix.doc_lengths,
            postings: ix.postings,
        }
    }
}

impl TryFrom<IndexFile> for InvertedIndex {
    type Error = Error;

    fn try_from(f: IndexFile) -> Result<Self> {
        if f.doc_ids.len() != f.doc_lengths.len() {
            return Err(Error::InvalidInput("doc_ids and doc_lengths differ in length".into()));
        }
        let n = f.doc_ids.len() as u32;
        for plist in f.postings.values() {
            if plist.iter().any(|&(d, tf)| d >= n || tf == 0) {
                return Err(Error::InvalidInput("posting references unknown doc or zero tf".into()));
            }
        }
        Ok(InvertedIndex {
            avgdl: mean_length(&f.doc_lengths),
            tokenizer: Tokenizer {
                lowercase: f.lowercase,
                stopwords: f.stopwords.map(|v| v.into_iter().collect()),
            },
            doc_ids: f.doc_ids,
            doc_lengths: f.doc_lengths,
            postings: f.postings,
        })
    }
}

fn mean_length(lengths: &[u32]) -> f64 {
    if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64
    }
}

impl InvertedIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, id: &str) -> Option<u32> {
        self.doc_ids.iter().position(|d| d == id).map(|i| self.doc_lengths[i])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `(doc id, term frequency)` pairs for `term`, in insertion order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|p| p.iter().map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf)).collect())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))
    }

    /// BM25 score for every document matching at least one query token.
    pub fn score_all(&self, query: &str, p: &Bm25Params) -> Vec<(&str, f64)> {
        let n = self.len() as f64;
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in self.tokenizer.tokenize(query) {
            let Some(plist) = self.postings.get(&term) else {
                continue;
            };
            let df = plist.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(d, tf) in plist {
                let tf = tf as f64;
                let dl = self.doc_lengths[d as usize] as f64;
                let norm = if self.avgdl > 0.0 { dl / self.avgdl } else { 0.0 };
                *acc.entry(d).or_insert(0.0) += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
            }
        }
        acc.into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, s)| (self.doc_ids[d as usize].as_str(), s))
            .collect()
    }
}

pub fn build_index<I, S, T>(docs: I, tokenizer: &Tokenizer) -> Result<InvertedIndex>
where
    I: IntoIterator<Item = (S, T)>,
    S: Into<String>,
    T: AsRef<str>,
{
    let mut seen = HashSet::new();
    let mut doc_ids = Vec::new();
    let mut doc_lengths = Vec::new();
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    for (id, text) in docs {
        let id: String = id.into();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let d = doc_ids.len() as u32;
        let tokens = tokenizer.tokenize(text.as_ref());
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (t, f) in tf {
            postings.entry(t).or_default().push((d, f));
        }
        doc_ids.push(id);
        doc_lengths.push(tokens.len() as u32);
    }
    Ok(InvertedIndex {
        avgdl: mean_length(&doc_lengths),
        tokenizer: tokenizer.clone(),
        doc_ids,
        doc_lengths,
        postings,
    })
}

/// Top-`k` documents by BM25, ties broken by ascending id. Documents with
/// zero score are omitted.
pub fn bm25_topk(query: &str, index: &InvertedIndex, p: &Bm25Params, k: usize) -> Result<RankedList> {
    bm25_topk_for(query, "", index, p, k)
}

fn bm25_topk_for(query: &str, query_id: &str, index: &InvertedIndex, p: &Bm25Params, k: usize) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    p.validate()?;
    let scores = index.score_all(query, p);
    Ok(RankedList::from_scores(query_id, scores.into_iter().map(|(d, s)| (d.to_string(), s))).top(k))
}

/// Scores a batch of `(query id, query text)` against one index.
pub fn bm25_batch(
    queries: &[(String, String)],
    index: &InvertedIndex,
    p: &Bm25Params,
    k: usize,
    exec: Exec,
) -> Result<Vec<RankedList>> {
    exec.map(queries, |(qid, text)| bm25_topk_for(text, qid, index, p, k))
        .into_iter()
        .collect()
}
