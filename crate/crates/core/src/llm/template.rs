use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::{Error, Result};

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"));

const BUILTINS: &[(&str, &str)] = &[
    ("case_summary", include_str!("../../templates/case_summary.txt")),
    ("paragraph_entailment", include_str!("../../templates/paragraph_entailment.txt")),
    ("yesno_zero_shot", include_str!("../../templates/yesno_zero_shot.txt")),
    ("yesno_few_shot", include_str!("../../templates/yesno_few_shot.txt")),
    ("subargument_verdict", include_str!("../../templates/subargument_verdict.txt")),
];

/// Step-by-step guidance used when a run does not override the instruction.
pub const DEFAULT_YESNO_INSTRUCTION: &str = include_str!("../../templates/yesno_instruction.txt");

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "You are an overthinking legal assistant who always gives the best advice.";

/// Text with `{name}` placeholders. Braces around anything that is not an
/// identifier are left alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        PromptTemplate {
            name: name.into(),
            body: body.into(),
        }
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, b)| PromptTemplate::new(*n, *b))
            .ok_or_else(|| Error::Template(format!("no built-in template named `{name}`")))
    }

    /// Loads a template file; the name is the file stem.
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        Ok(PromptTemplate::new(name, body))
    }

    /// A built-in name, or otherwise a path to a template file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Ok(t) => Ok(t),
            Err(_) if Path::new(name_or_path).is_file() => Self::from_file(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        PLACEHOLDER
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Single-pass substitution; bound values are inserted literally.
    pub fn render<K, V>(&self, bindings: &[(K, V)]) -> Result<String>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let map: BTreeMap<&str, &str> = bindings.iter().map(|(k, v)| (k.as_ref(), v.as_ref())).collect();
        let wanted = self.placeholders();
        if let Some(missing) = wanted.iter().find(|p| !map.contains_key(p.as_str())) {
            return Err(Error::Template(format!(
                "template `{}`: missing binding for placeholder `{missing}`",
                self.name
            )));
        }
        if let Some(unknown) = map.keys().find(|k| !wanted.contains(**k)) {
            return Err(Error::Template(format!(
                "template `{}`: no placeholder named `{unknown}`",
                self.name
            )));
        }
        Ok(PLACEHOLDER
            .replace_all(&self.body, |c: &regex::Captures| map[&c[1]].to_string())
            .into_owned())
    }
}
