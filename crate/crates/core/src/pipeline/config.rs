use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingServiceConfig, Similarity};
use crate::eval::MetricSpec;
use crate::fusion::{NormalizationMode, SelectionRule};
use crate::judgment::{HeuristicsConfig, DEFAULT_CLUSTER_THRESHOLD};
use crate::llm::LlmClientConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CaseRetrieval,
    CaseEntailment,
    StatuteRetrieval,
    YesnoEntailment,
    Judgment,
}

impl Task {
    fn is_retrieval(self) -> bool {
        matches!(self, Task::CaseRetrieval | Task::CaseEntailment | Task::StatuteRetrieval)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    /// One pool shared by every query.
    #[default]
    Global,
    /// Each query has its own candidates (`{query, id, text}` JSONL).
    PerQuery,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub queries: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    #[serde(default)]
    pub candidate_scope: CandidateScope,
    /// Gold judgments for tuning stages.
    pub qrels: Option<PathBuf>,
    /// Labeled pool for few-shot example selection.
    pub train: Option<PathBuf>,
    /// Model predictions to post-process.
    pub predictions: Option<PathBuf>,
    /// Externally computed claim clusters.
    pub clusters: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    pub path: PathBuf,
    /// Run tag written in the last column; defaults to the run id.
    pub tag: Option<String>,
}

fn default_k1() -> f64 {
    1.2
}
fn default_b() -> f64 {
    0.75
}
fn default_true() -> bool {
    true
}
fn default_step() -> f64 {
    0.1
}
fn default_char_limit() -> usize {
    100_000
}
fn default_theta_c() -> f64 {
    DEFAULT_CLUSTER_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizeStage {
    pub llm: String,
    #[serde(default = "default_char_limit")]
    pub char_limit: usize,
    #[serde(default = "default_true")]
    pub queries: bool,
    #[serde(default = "default_true")]
    pub candidates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Stage {
    pub k: usize,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(rename = "as")]
    pub name: Option<String>,
    /// Score only the candidates of this earlier table.
    pub candidates_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseStage {
    pub embedder: String,
    /// Keep this many per query; all when unset.
    pub k: Option<usize>,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(rename = "as")]
    pub name: Option<String>,
    pub candidates_from: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFormat {
    /// `query<TAB>candidate<TAB>score`
    #[default]
    Table,
    Trec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadScoresStage {
    pub path: PathBuf,
    #[serde(default)]
    pub format: ScoreFormat,
    #[serde(rename = "as")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeStage {
    #[serde(default)]
    pub mode: NormalizationMode,
    /// Tables to normalize in place; the current ranking when empty.
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTune {
    pub metric: MetricSpec,
    #[serde(default = "default_step")]
    pub step: f64,
    pub selection: SelectionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombineStage {
    pub inputs: Vec<String>,
    pub weights: Option<BTreeMap<String, f64>>,
    pub tune: Option<GridTune>,
    #[serde(rename = "as")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityWeightedStage {
    pub inputs: Vec<String>,
    /// Vector file holding every query, dev queries included.
    pub query_vectors: Option<PathBuf>,
    /// Embeds query texts when no vector file is given.
    pub embedder: Option<String>,
    pub k: usize,
    pub metric: MetricSpec,
    /// How dev rankings are cut before scoring them.
    pub selection: SelectionRule,
    #[serde(rename = "as")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteStage {
    pub inputs: Vec<String>,
    pub m: usize,
    pub quorum: Option<usize>,
    pub max_out: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKStage {
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTune {
    pub metric: MetricSpec,
    /// Candidate thresholds; 0.00, 0.01, ..., 1.00 when empty.
    #[serde(default)]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdStage {
    pub theta: Option<f64>,
    pub tune: Option<ThresholdTune>,
    #[serde(default = "default_true")]
    pub fallback_top1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEntailStage {
    /// One or two model names.
    pub llms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YesnoStage {
    pub llms: Vec<String>,
    /// Number of examples; zero-shot when 0.
    #[serde(default)]
    pub few_shot: usize,
    /// Needed to rank pool items by similarity when `few_shot > 0`.
    pub embedder: Option<String>,
    pub system: Option<String>,
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterJudgeStage {
    pub llm: String,
    /// Claim embedder; not needed with external cluster assignments.
    pub embedder: Option<String>,
    #[serde(default = "default_theta_c")]
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Stage {
    Summarize(SummarizeStage),
    Bm25(Bm25Stage),
    Dense(DenseStage),
    LoadScores(LoadScoresStage),
    Normalize(NormalizeStage),
    Combine(CombineStage),
    SimilarityWeighted(SimilarityWeightedStage),
    Vote(VoteStage),
    TopK(TopKStage),
    Threshold(ThresholdStage),
    LlmEntail(LlmEntailStage),
    Yesno(YesnoStage),
    Heuristics(HeuristicsConfig),
    ClusterJudge(ClusterJudgeStage),
}

impl Stage {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Summarize(_) => "summarize",
            Stage::Bm25(_) => "bm25",
            Stage::Dense(_) => "dense",
            Stage::LoadScores(_) => "load_scores",
            Stage::Normalize(_) => "normalize",
            Stage::Combine(_) => "combine",
            Stage::SimilarityWeighted(_) => "similarity_weighted",
            Stage::Vote(_) => "vote",
            Stage::TopK(_) => "top_k",
            Stage::Threshold(_) => "threshold",
            Stage::LlmEntail(_) => "llm_entail",
            Stage::Yesno(_) => "yesno",
            Stage::Heuristics(_) => "heuristics",
            Stage::ClusterJudge(_) => "cluster_judge",
        }
    }

    /// Name of the score table this stage defines, if any.
    pub fn table_name(&self) -> Option<String> {
        let explicit = match self {
            Stage::Bm25(s) => &s.name,
            Stage::Dense(s) => &s.name,
            Stage::LoadScores(s) => &s.name,
            Stage::Combine(s) => &s.name,
            Stage::SimilarityWeighted(s) => &s.name,
            _ => return None,
        };
        Some(match (explicit, self) {
            (Some(n), _) => n.clone(),
            (None, Stage::LoadScores(s)) => s.path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            (None, s) => s.kind().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub task: Task,
    pub seed: Option<u64>,
    /// Directory for cached service replies; caching is off when unset.
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub inputs: Inputs,
    pub output: Output,
    #[serde(default)]
    pub embedders: BTreeMap<String, EmbeddingServiceConfig>,
    #[serde(default)]
    pub llms: BTreeMap<String, LlmClientConfig>,
    pub stages: Vec<Stage>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tag(&self) -> &str {
        self.output.tag.as_deref().unwrap_or(&self.run_id)
    }
}

/// Sets `dotted.path=value`. The value is read as a TOML literal when it
/// parses as one, otherwise as a string. Numeric segments index arrays.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let segments: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), value);
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("override `{path}`: `{seg}` is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override `{path}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override `{path}`: `{seg}` is not a table"))),
        };
    }
    Err(Error::Config(format!("override `{assignment}` has an empty key")))
}

const PRESETS: &[(&str, &str)] = &[
    ("task1-run1", include_str!("../../presets/task1-run1.toml")),
    ("task1-run2", include_str!("../../presets/task1-run2.toml")),
    ("task1-run3", include_str!("../../presets/task1-run3.toml")),
    ("task2-run1", include_str!("../../presets/task2-run1.toml")),
    ("task2-run2", include_str!("../../presets/task2-run2.toml")),
    ("task2-run3", include_str!("../../presets/task2-run3.toml")),
    ("task3-run2", include_str!("../../presets/task3-run2.toml")),
    ("task3-run3", include_str!("../../presets/task3-run3.toml")),
    ("task4-run1", include_str!("../../presets/task4-run1.toml")),
    ("task4-run2", include_str!("../../presets/task4-run2.toml")),
    ("task4-run3", include_str!("../../presets/task4-run3.toml")),
    ("task5-run2", include_str!("../../presets/task5-run2.toml")),
    ("task5-run3", include_str!("../../presets/task5-run3.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Config(format!("no preset named `{name}`")))
}

pub fn preset(name: &str, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::from_toml_str(preset_text(name)?, overrides)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// What the stage chain carries between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flow {
    Empty,
    /// Scored rankings; can be cut, re-ranked or sent to a model.
    Ranked,
    /// Final candidate sets.
    Selected,
    Answers,
    Judgments,
}

struct Checker {
    errors: Vec<ConfigError>,
}

impl Checker {
    fn err(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.errors.push(ConfigError {
            field: field.into(),
            reason: reason.into(),
        });
    }

    fn file(&mut self, field: &str, path: &Option<PathBuf>, required: bool) {
        match path {
            Some(p) if !p.exists() => self.err(field, format!("`{}` does not exist", p.display())),
            None if required => self.err(field, "required for this task"),
            _ => {}
        }
    }

    fn positive(&mut self, field: String, k: usize) {
        if k == 0 {
            self.err(field, "must be >= 1");
        }
    }
}

fn valid_step(step: f64) -> bool {
    if !(step > 0.0 && step <= 1.0) {
        return false;
    }
    let n = (1.0 / step).round();
    (n * step - 1.0).abs() < 1e-9
}

/// Every problem that would stop the run, each naming its field. Empty iff
/// the config is executable.
pub fn validate_config(cfg: &RunConfig) -> Vec<ConfigError> {
    let mut c = Checker { errors: Vec::new() };
    if cfg.schema_version != SCHEMA_VERSION {
        c.err("schema_version", format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version));
    }
    if cfg.run_id.trim().is_empty() {
        c.err("run_id", "must not be empty");
    }
    if cfg.output.path.as_os_str().is_empty() {
        c.err("output.path", "must not be empty");
    }
    if cfg.stages.is_empty() {
        c.err("stages", "at least one stage is required");
    }
    for (name, e) in &cfg.embedders {
        if e.model.trim().is_empty() {
            c.err(format!("embedders.{name}.model"), "must not be empty");
        }
        if e.batch_size == 0 {
            c.err(format!("embedders.{name}.batch_size"), "must be >= 1");
        }
    }
    for (name, l) in &cfg.llms {
        if let Err(e) = l.validate() {
            c.err(format!("llms.{name}"), e.to_string().trim_start_matches("config error: ").to_string());
        }
    }

    let inputs = &cfg.inputs;
    c.file("inputs.queries", &inputs.queries, cfg.task != Task::Judgment || inputs.predictions.is_none());
    c.file("inputs.candidates", &inputs.candidates, cfg.task.is_retrieval() && needs_candidates(cfg));
    c.file("inputs.qrels", &inputs.qrels, false);
    c.file("inputs.train", &inputs.train, false);
    c.file("inputs.predictions", &inputs.predictions, false);
    c.file("inputs.clusters", &inputs.clusters, false);

    let mut tables: BTreeSet<String> = BTreeSet::new();
    let mut flow = Flow::Empty;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let f = |key: &str| format!("stages[{i}].{key}");
        let here = format!("stages[{i}]");
        let need_table = |c: &mut Checker, field: String, name: &str, tables: &BTreeSet<String>| {
            if !tables.contains(name) {
                c.err(field, format!("unknown score table `{name}`"));
            }
        };
        let allowed = match stage {
            Stage::Yesno(_) => cfg.task == Task::YesnoEntailment,
            Stage::Heuristics(_) | Stage::ClusterJudge(_) => cfg.task == Task::Judgment,
            _ => cfg.task.is_retrieval(),
        };
        if !allowed {
            c.err(here.clone(), format!("stage `{}` does not apply to task {:?}", stage.kind(), cfg.task));
        }
        let ranked_input = |c: &mut Checker, flow: Flow| {
            if flow != Flow::Ranked {
                c.err(here.clone(), format!("stage `{}` needs a scored ranking as input", stage.kind()));
            }
        };
        match stage {
            Stage::Summarize(s) => {
                if !cfg.llms.contains_key(&s.llm) {
                    c.err(f("llm"), format!("unknown llm `{}`", s.llm));
                }
                c.positive(f("char_limit"), s.char_limit);
                if flow != Flow::Empty {
                    c.err(here.clone(), "summarize must come before any scoring stage");
                }
            }
            Stage::Bm25(s) => {
                c.positive(f("k"), s.k);
                if !(s.k1 >= 0.0 && s.k1.is_finite()) {
                    c.err(f("k1"), "must be >= 0");
                }
                if !(0.0..=1.0).contains(&s.b) {
                    c.err(f("b"), "must lie in [0, 1]");
                }
                if let Some(from) = &s.candidates_from {
                    need_table(&mut c, f("candidates_from"), from, &tables);
                }
                flow = Flow::Ranked;
            }
            Stage::Dense(s) => {
                if !cfg.embedders.contains_key(&s.embedder) {
                    c.err(f("embedder"), format!("unknown embedder `{}`", s.embedder));
                }
                if let Some(k) = s.k {
                    c.positive(f("k"), k);
                }
                if let Some(from) = &s.candidates_from {
                    need_table(&mut c, f("candidates_from"), from, &tables);
                }
                flow = Flow::Ranked;
            }
            Stage::LoadScores(s) => {
                if !s.path.exists() {
                    c.err(f("path"), format!("`{}` does not exist", s.path.display()));
                }
                flow = Flow::Ranked;
            }
            Stage::Normalize(s) => {
                if s.inputs.is_empty() {
                    ranked_input(&mut c, flow);
                }
                for (j, name) in s.inputs.iter().enumerate() {
                    need_table(&mut c, f(&format!("inputs[{j}]")), name, &tables);
                }
            }
            Stage::Combine(s) => {
                for (j, name) in s.inputs.iter().enumerate() {
                    need_table(&mut c, f(&format!("inputs[{j}]")), name, &tables);
                }
                if s.inputs.is_empty() {
                    c.err(f("inputs"), "at least one table is required");
                }
                match (&s.weights, &s.tune) {
                    (Some(_), Some(_)) => c.err(here.clone(), "give either `weights` or `tune`, not both"),
                    (None, None) => c.err(here.clone(), "one of `weights` or `tune` is required"),
                    (Some(w), None) => {
                        for (name, x) in w {
                            if !s.inputs.contains(name) {
                                c.err(f(&format!("weights.{name}")), "not among the inputs");
                            }
                            if !(x.is_finite() && *x >= 0.0) {
                                c.err(f(&format!("weights.{name}")), "must be >= 0");
                            }
                        }
                        let sum: f64 = w.values().sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            c.err(f("weights"), format!("must sum to 1, got {sum}"));
                        }
                    }
                    (None, Some(t)) => {
                        if !(2..=5).contains(&s.inputs.len()) {
                            c.err(f("inputs"), "grid search takes 2 to 5 tables");
                        }
                        if !valid_step(t.step) {
                            c.err(f("tune.step"), format!("{} does not divide 1", t.step));
                        }
                        if inputs.qrels.is_none() {
                            c.err("inputs.qrels", "required by a tuned combine stage");
                        }
                    }
                }
                flow = Flow::Ranked;
            }
            Stage::SimilarityWeighted(s) => {
                for (j, name) in s.inputs.iter().enumerate() {
                    need_table(&mut c, f(&format!("inputs[{j}]")), name, &tables);
                }
                if s.inputs.is_empty() {
                    c.err(f("inputs"), "at least one table is required");
                }
                c.positive(f("k"), s.k);
                match (&s.query_vectors, &s.embedder) {
                    (Some(p), _) if !p.exists() => c.err(f("query_vectors"), format!("`{}` does not exist", p.display())),
                    (None, Some(e)) if !cfg.embedders.contains_key(e) => c.err(f("embedder"), format!("unknown embedder `{e}`")),
                    (None, None) => c.err(here.clone(), "one of `query_vectors` or `embedder` is required"),
                    _ => {}
                }
                if inputs.qrels.is_none() {
                    c.err("inputs.qrels", "required by a similarity_weighted stage");
                }
                flow = Flow::Ranked;
            }
            Stage::Vote(s) => {
                c.positive(f("m"), s.m);
                if s.inputs.len() < 2 {
                    c.err(f("inputs"), "voting needs at least 2 tables");
                }
                for (j, name) in s.inputs.iter().enumerate() {
                    need_table(&mut c, f(&format!("inputs[{j}]")), name, &tables);
                }
                if let Some(q) = s.quorum {
                    if q == 0 || q > s.inputs.len() {
                        c.err(f("quorum"), format!("must lie in 1..={} (number of voting lists)", s.inputs.len()));
                    }
                }
                if s.max_out == Some(0) {
                    c.err(f("max_out"), "must be >= 1");
                }
                flow = Flow::Selected;
            }
            Stage::TopK(s) => {
                c.positive(f("k"), s.k);
                ranked_input(&mut c, flow);
            }
            Stage::Threshold(s) => {
                ranked_input(&mut c, flow);
                match (&s.theta, &s.tune) {
                    (Some(_), Some(_)) => c.err(here.clone(), "give either `theta` or `tune`, not both"),
                    (None, None) => c.err(here.clone(), "one of `theta` or `tune` is required"),
                    (Some(t), None) if !t.is_finite() => c.err(f("theta"), "must be finite"),
                    (None, Some(_)) if inputs.qrels.is_none() => c.err("inputs.qrels", "required by a tuned threshold"),
                    _ => {}
                }
                flow = Flow::Selected;
            }
            Stage::LlmEntail(s) => {
                ranked_input(&mut c, flow);
                if !(1..=2).contains(&s.llms.len()) {
                    c.err(f("llms"), "takes 1 or 2 models");
                }
                for (j, name) in s.llms.iter().enumerate() {
                    if !cfg.llms.contains_key(name) {
                        c.err(f(&format!("llms[{j}]")), format!("unknown llm `{name}`"));
                    }
                }
                flow = Flow::Selected;
            }
            Stage::Yesno(s) => {
                if s.llms.is_empty() {
                    c.err(f("llms"), "at least one model is required");
                }
                for (j, name) in s.llms.iter().enumerate() {
                    if !cfg.llms.contains_key(name) {
                        c.err(f(&format!("llms[{j}]")), format!("unknown llm `{name}`"));
                    }
                }
                if s.few_shot > 0 {
                    if inputs.train.is_none() {
                        c.err("inputs.train", "required for few-shot prompting");
                    }
                    match &s.embedder {
                        Some(e) if !cfg.embedders.contains_key(e) => c.err(f("embedder"), format!("unknown embedder `{e}`")),
                        None => c.err(f("embedder"), "required for few-shot prompting"),
                        _ => {}
                    }
                }
                flow = Flow::Answers;
            }
            Stage::Heuristics(h) => {
                if !(h.ratio.is_finite() && h.ratio > 0.0) {
                    c.err(f("ratio"), "must be > 0");
                }
                if flow != Flow::Judgments && inputs.predictions.is_none() {
                    c.err("inputs.predictions", "required when heuristics is the first judgment stage");
                }
                flow = Flow::Judgments;
            }
            Stage::ClusterJudge(s) => {
                if !cfg.llms.contains_key(&s.llm) {
                    c.err(f("llm"), format!("unknown llm `{}`", s.llm));
                }
                if !(s.theta > 0.0 && s.theta < 1.0) {
                    c.err(f("theta"), "must lie in (0, 1)");
                }
                match &s.embedder {
                    Some(e) if !cfg.embedders.contains_key(e) => c.err(f("embedder"), format!("unknown embedder `{e}`")),
                    None if inputs.clusters.is_none() => c.err(f("embedder"), "required without inputs.clusters"),
                    _ => {}
                }
                if flow != Flow::Empty {
                    c.err(here.clone(), "cluster_judge must be the first judgment stage");
                }
                flow = Flow::Judgments;
            }
        }
        if let Some(name) = stage.table_name() {
            tables.insert(name);
        }
    }
    c.errors
}

fn needs_candidates(cfg: &RunConfig) -> bool {
    cfg.stages
        .iter()
        .any(|s| matches!(s, Stage::Bm25(_) | Stage::Dense(_) | Stage::LlmEntail(_) | Stage::Summarize(_)))
}
