use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Answer {
    Y,
    N,
}

impl Answer {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Answer::Y
        } else {
            Answer::N
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Y => "Y",
            Answer::N => "N",
        })
    }
}

impl std::str::FromStr for Answer {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "Y" | "y" | "true" | "TRUE" | "yes" | "YES" => Ok(Answer::Y),
            "N" | "n" | "false" | "FALSE" | "no" | "NO" => Ok(Answer::N),
            other => Err(crate::Error::InvalidInput(format!("not a yes/no label: `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    ConclusionSection,
    WholeText,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryAnswer {
    pub value: Answer,
    pub raw_response: String,
    pub rule: ExtractionRule,
}

/// One answer token; matched against whole alphanumeric tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub token: String,
    #[serde(default)]
    pub case_sensitive: bool,
}

impl Pattern {
    pub fn new(token: &str, case_sensitive: bool) -> Self {
        Pattern {
            token: token.to_string(),
            case_sensitive,
        }
    }

    fn matches(&self, word: &str) -> bool {
        if self.case_sensitive {
            word == self.token
        } else {
            word.eq_ignore_ascii_case(&self.token)
        }
    }
}

/// Positive and negative answer tokens. Words match in any case; the
/// single letters `Y`/`N` only in upper case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPatterns {
    pub positive: Vec<Pattern>,
    pub negative: Vec<Pattern>,
}

impl Default for AnswerPatterns {
    fn default() -> Self {
        AnswerPatterns {
            positive: vec![Pattern::new("TRUE", false), Pattern::new("YES", false), Pattern::new("Y", true)],
            negative: vec![Pattern::new("FALSE", false), Pattern::new("NO", false), Pattern::new("N", true)],
        }
    }
}

impl AnswerPatterns {
    /// Answer of the last matching token in `text`, if any.
    fn scan(&self, text: &str) -> Option<Answer> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .filter_map(|w| {
                if self.positive.iter().any(|p| p.matches(w)) {
                    Some(Answer::Y)
                } else if self.negative.iter().any(|p| p.matches(w)) {
                    Some(Answer::N)
                } else {
                    None
                }
            })
            .next_back()
    }
}

pub fn extract_binary_answer(response: &str) -> BinaryAnswer {
    extract_binary_answer_with(response, &AnswerPatterns::default())
}

/// Scans the section after the last `CONCLUSION` marker, then the whole
/// text, and answers N if neither contains an answer token.
pub fn extract_binary_answer_with(response: &str, patterns: &AnswerPatterns) -> BinaryAnswer {
    let section = response
        .to_ascii_lowercase()
        .rfind("conclusion")
        .map(|at| &response[at + "conclusion".len()..]);
    let (value, rule) = match section.and_then(|s| patterns.scan(s)) {
        Some(v) => (v, ExtractionRule::ConclusionSection),
        None => match patterns.scan(response) {
            Some(v) => (v, ExtractionRule::WholeText),
            None => (Answer::N, ExtractionRule::Fallback),
        },
    };
    BinaryAnswer {
        value,
        raw_response: response.to_string(),
        rule,
    }
}

/// Majority label; ties and empty input give N.
pub fn majority_vote_answers(answers: &[Answer]) -> Answer {
    let yes = answers.iter().filter(|a| **a == Answer::Y).count();
    Answer::from_bool(2 * yes > answers.len())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedIds {
    pub ids: BTreeSet<usize>,
    pub warnings: Vec<String>,
}

static AFTER_KEYWORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\bparagraphs?\s*(?:no\.?\s*|#\s*)?\[?\d+\]?(?:\s*(?:,|;|&|\band\b|\bor\b)\s*(?:paragraph\s*)?\[?\d+\]?)*",
    )
    .expect("valid regex")
});

static BARE_LIST_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^\s*(?:answer\s*:\s*)?\[?\d+\]?(?:\s*(?:,|;|&|and|or)\s*\[?\d+\]?)*\s*\.?\s*$")
        .expect("valid regex")
});

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// Paragraph numbers named in a reply: lists following "paragraph(s)" and
/// lines consisting only of a number list. Ids outside `valid` are dropped
/// with a warning.
pub fn extract_paragraph_ids(text: &str, valid: &BTreeSet<usize>) -> ExtractedIds {
    let mut out = ExtractedIds::default();
    let spans = AFTER_KEYWORD.find_iter(text).chain(BARE_LIST_LINE.find_iter(text));
    for span in spans {
        for num in NUMBER.find_iter(span.as_str()) {
            match num.as_str().parse::<usize>() {
                Ok(id) if valid.contains(&id) => {
                    out.ids.insert(id);
                }
                _ => {
                    let w = format!("reply names paragraph {} which is not a candidate", num.as_str());
                    if !out.warnings.contains(&w) {
                        out.warnings.push(w);
                    }
                }
            }
        }
    }
    out
}

/// Intersection when non-empty, otherwise union.
pub fn agreement_vote(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> BTreeSet<usize> {
    let both: BTreeSet<usize> = a.intersection(b).copied().collect();
    if both.is_empty() {
        a.union(b).copied().collect()
    } else {
        both
    }
}
