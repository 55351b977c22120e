use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// 100 high-frequency English function words.
pub const DEFAULT_ENGLISH_STOPWORDS: [&str; 100] = [
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as",
    "at", "be", "because", "been", "before", "being", "between", "both", "but", "by",
    "can", "could", "did", "do", "does", "each", "for", "from", "had", "has",
    "have", "he", "her", "his", "how", "i", "if", "in", "into", "is",
    "it", "its", "may", "more", "most", "must", "my", "no", "not", "of",
    "on", "only", "or", "other", "our", "out", "over", "same", "shall", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "those", "through", "to", "under", "up", "upon",
    "very", "was", "we", "were", "what", "when", "where", "whether", "which", "while",
    "who", "whom", "why", "will", "with", "within", "without", "would", "you", "your",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageHeuristicConfig {
    pub stopwords: Vec<String>,
    /// Minimum stopword ratio for text to count as English.
    pub threshold: f64,
}

impl Default for LanguageHeuristicConfig {
    fn default() -> Self {
        LanguageHeuristicConfig {
            stopwords: DEFAULT_ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            threshold: 0.15,
        }
    }
}

/// Stopword-ratio test: true when fewer than `threshold` of the lowercased
/// alphanumeric tokens are English stopwords. Empty text counts as non-English.
pub fn detect_non_english(text: &str, cfg: &LanguageHeuristicConfig) -> bool {
    let stop: HashSet<&str> = cfg.stopwords.iter().map(String::as_str).collect();
    let mut total = 0usize;
    let mut hits = 0usize;
    for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        total += 1;
        if stop.contains(tok.to_lowercase().as_str()) {
            hits += 1;
        }
    }
    if total == 0 {
        return true;
    }
    (hits as f64) / (total as f64) < cfg.threshold
}
