//! Case-law, statute and tort corpora: ingestion, cleaning and statistics.

mod clean;
mod io;
mod language;
mod tort;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use clean::{
    dedupe_collection, normalize_whitespace, preprocess_case, ParagraphDelimiter,
    PreprocessConfig, Preprocessed, DEFAULT_METADATA_PATTERNS, DEFAULT_PLACEHOLDER_TOKENS,
};
pub use io::{load_case_corpus, read_case_jsonl, read_qrels, read_text_dir, read_tort_jsonl, write_qrels};
pub use language::{detect_non_english, LanguageHeuristicConfig, DEFAULT_ENGLISH_STOPWORDS};
pub use tort::{corpus_stats, filter_tort_cases, StatsReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    /// 1-based position in the cleaned document.
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub id: String,
    pub paragraphs: Vec<Paragraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// `(paragraph index, placeholder token)` for every stripped placeholder.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placeholder_positions: Vec<(usize, String)>,
}

impl CaseDocument {
    /// Builds a document from already-segmented paragraph texts, numbered from 1.
    pub fn from_paragraphs<I, S>(id: impl Into<String>, paragraphs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CaseDocument {
            id: id.into(),
            paragraphs: paragraphs
                .into_iter()
                .enumerate()
                .map(|(i, t)| Paragraph {
                    index: i + 1,
                    text: t.into(),
                })
                .collect(),
            summary: None,
            placeholder_positions: Vec::new(),
        }
    }

    /// Cleaned paragraphs joined by blank lines.
    pub fn text(&self) -> String {
        self.paragraphs
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.iter().all(|p| p.text.trim().is_empty())
    }
}

/// Gold relevance judgments: query id to the set of relevant document ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>) {
        self.entries.entry(query.into()).or_default().insert(doc.into());
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(query)
    }

    pub fn is_relevant(&self, query: &str, doc: &str) -> bool {
        self.entries.get(query).is_some_and(|s| s.contains(doc))
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.entries.iter().map(|(q, s)| (q.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<Q: Into<String>, D: Into<String>> FromIterator<(Q, D)> for Qrels {
    fn from_iter<T: IntoIterator<Item = (Q, D)>>(iter: T) -> Self {
        let mut q = Qrels::new();
        for (query, doc) in iter {
            q.insert(query, doc);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

impl Claim {
    pub fn new(text: impl Into<String>) -> Self {
        Claim {
            text: text.into(),
            accepted: None,
        }
    }

    pub fn labeled(text: impl Into<String>, accepted: bool) -> Self {
        Claim {
            text: text.into(),
            accepted: Some(accepted),
        }
    }
}

/// A tort case: undisputed facts plus both parties' claims.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TortCase {
    pub id: String,
    #[serde(default, rename = "facts")]
    pub undisputed_facts: Vec<String>,
    #[serde(default)]
    pub plaintiff_claims: Vec<Claim>,
    #[serde(default)]
    pub defendant_claims: Vec<Claim>,
    #[serde(default, rename = "tort", skip_serializing_if = "Option::is_none")]
    pub tort_label: Option<bool>,
}

impl TortCase {
    /// Total claim count, plaintiff claims first.
    pub fn claim_count(&self) -> usize {
        self.plaintiff_claims.len() + self.defendant_claims.len()
    }
}
