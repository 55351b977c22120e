//! Declarative runs: a TOML config names the inputs, the services and an
//! ordered list of stages. Validation reports every problem up front; the
//! executor then threads rankings, answers or judgments through the stages.
//!
//! Relative paths in a config resolve against the working directory.

mod config;
mod run;

pub use config::{
    apply_override, preset, preset_names, preset_text, validate_config, Bm25Stage, CandidateScope,
    ClusterJudgeStage, CombineStage, ConfigError, DenseStage, GridTune, Inputs, LlmEntailStage,
    LoadScoresStage, NormalizeStage, Output, RunConfig, ScoreFormat, SimilarityWeightedStage, Stage,
    SummarizeStage, Task, ThresholdStage, ThresholdTune, TopKStage, VoteStage, YesnoStage, SCHEMA_VERSION,
};
pub use run::{execute_run, paragraph_numbers, read_yesno_jsonl, write_atomic, RunOptions, RunResult, StageTiming, YesnoItem};
