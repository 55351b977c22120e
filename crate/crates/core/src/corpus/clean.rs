use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{detect_non_english, CaseDocument, LanguageHeuristicConfig, Paragraph, RawDocument};
use crate::{Error, Result};

pub const DEFAULT_PLACEHOLDER_TOKENS: &[&str] = &[
    "FRAGMENT_SUPPRESSED",
    "REFERENCE_SUPPRESSED",
    "CITATION_SUPPRESSED",
    "DATE_SUPPRESSED",
];

/// Header lines naming parties, counsel and hearing locations.
pub const DEFAULT_METADATA_PATTERNS: &[&str] = &[
    r"(?i)^(counsel|solicitors?( of record)?|appearances?)\s*:",
    r"(?i)^(applicants?|respondents?|appellants?|plaintiffs?|defendants?|intervener|interveners)\s*:",
    r"(?i)^(place|date) of hearing\s*:",
    r"(?i)^(heard at|location|venue|docket|file no\.?|style of cause)\s*:",
    r"(?i)^(before|judgment and reasons|reasons for judgment|present)\s*:",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParagraphDelimiter {
    BlankLine,
    BracketedNumber,
    /// Bracketed numbers when any line opens with `[N]`, blank lines otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Anchored regular expressions matched against each trimmed line.
    pub metadata_patterns: Vec<String>,
    pub placeholder_tokens: Vec<String>,
    pub delimiter: ParagraphDelimiter,
    /// Remove paragraphs that contained a placeholder instead of keeping the
    /// stripped text.
    pub drop_placeholder_paragraphs: bool,
    /// Drop paragraphs the language heuristic classifies as non-English.
    pub language_filter: Option<LanguageHeuristicConfig>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            metadata_patterns: DEFAULT_METADATA_PATTERNS.iter().map(|s| s.to_string()).collect(),
            placeholder_tokens: DEFAULT_PLACEHOLDER_TOKENS.iter().map(|s| s.to_string()).collect(),
            delimiter: ParagraphDelimiter::Auto,
            drop_placeholder_paragraphs: false,
            language_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub case: CaseDocument,
    /// Every piece of text was removed by cleaning.
    pub degenerate: bool,
    pub removed_metadata_lines: usize,
    pub removed_non_english: usize,
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops documents whose whitespace-normalized text repeats an earlier one.
pub fn dedupe_collection(docs: Vec<RawDocument>) -> Vec<RawDocument> {
    let mut seen = HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(normalize_whitespace(&d.text)))
        .collect()
}

fn bracket_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\[(\d+)\]\s*").unwrap())
}

pub fn preprocess_case(id: &str, text: &str, rules: &PreprocessConfig) -> Result<Preprocessed> {
    let patterns = rules
        .metadata_patterns
        .iter()
        .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("metadata pattern `{p}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut removed_metadata_lines = 0;
    let lines: Vec<&str> = text
        .lines()
        .filter(|line| {
            let hit = patterns.iter().any(|re| re.is_match(line.trim()));
            removed_metadata_lines += hit as usize;
            !hit
        })
        .collect();

    let delimiter = match rules.delimiter {
        ParagraphDelimiter::Auto if lines.iter().any(|l| bracket_marker().is_match(l)) => {
            ParagraphDelimiter::BracketedNumber
        }
        ParagraphDelimiter::Auto => ParagraphDelimiter::BlankLine,
        d => d,
    };
    let blocks = segment(&lines, delimiter);

    let mut paragraphs = Vec::new();
    let mut placeholder_positions = Vec::new();
    let mut removed_non_english = 0;
    for block in blocks {
        let (stripped, found) = strip_placeholders(&block, &rules.placeholder_tokens);
        if found.is_empty() && stripped.is_empty() {
            continue;
        }
        if !found.is_empty() && rules.drop_placeholder_paragraphs {
            continue;
        }
        if let Some(lang) = &rules.language_filter {
            if !stripped.is_empty() && detect_non_english(&stripped, lang) {
                removed_non_english += 1;
                continue;
            }
        }
        let index = paragraphs.len() + 1;
        placeholder_positions.extend(found.into_iter().map(|tok| (index, tok)));
        paragraphs.push(Paragraph {
            index,
            text: stripped,
        });
    }

    let case = CaseDocument {
        id: id.to_string(),
        paragraphs,
        summary: None,
        placeholder_positions,
    };
    Ok(Preprocessed {
        degenerate: case.is_empty(),
        case,
        removed_metadata_lines,
        removed_non_english,
    })
}

fn segment(lines: &[&str], delimiter: ParagraphDelimiter) -> Vec<String> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    match delimiter {
        ParagraphDelimiter::BracketedNumber => {
            for line in lines {
                if let Some(m) = bracket_marker().find(line) {
                    if !current.is_empty() {
                        blocks.push(std::mem::take(&mut current));
                    }
                    current.push(&line[m.end()..]);
                } else {
                    current.push(line);
                }
            }
        }
        _ => {
            for line in lines {
                if line.trim().is_empty() {
                    if !current.is_empty() {
                        blocks.push(std::mem::take(&mut current));
                    }
                } else {
                    current.push(line);
                }
            }
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks.into_iter().map(|b| normalize_whitespace(&b.join(" "))).collect()
}

/// Removes placeholder tokens, returning the cleaned text and the tokens in
/// order of appearance.
fn strip_placeholders(text: &str, tokens: &[String]) -> (String, Vec<String>) {
    let mut found = Vec::new();
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|word| {
            let bare = word.trim_matches(|c: char| !c.is_alphanumeric() && c != '_');
            match tokens.iter().find(|t| t.as_str() == bare) {
                Some(t) => {
                    found.push(t.clone());
                    false
                }
                None => true,
            }
        })
        .collect();
    (kept.join(" "), found)
}
