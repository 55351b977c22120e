use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::config::*;
use crate::cache::ResponseCache;
use crate::corpus::{load_case_corpus, read_qrels, read_tort_jsonl, CaseDocument, TortCase};
use crate::embedding::{topk_similar_batch, EmbeddingClient, EmbeddingStore, Vector};
use crate::fusion::{
    grid_search_weights, majority_vote_topm, normalize_scores, read_score_table, read_trec_run,
    similarity_informed_combine, threshold_select, tune_threshold, weighted_combine, write_trec_run,
};
use crate::http::bounded_map;
use crate::judgment::{apply_heuristics, cluster_judge, predictions_to_jsonl, read_cluster_assignments, read_predictions, Prediction};
use crate::lexical::{build_index, bm25_batch, Bm25Params, Tokenizer};
use crate::llm::{
    compose_messages, entail_select, extract_binary_answer, majority_vote_answers, select_fewshot_examples,
    summarize_case, Answer, ChatModel, FewShotExample, HttpChatClient, PoolItem, PromptInput,
    DEFAULT_SYSTEM_PROMPT, DEFAULT_YESNO_INSTRUCTION,
};
use crate::{Error, Exec, Qrels, RankedList, Result, ScoreTable, WeightVector};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Overrides the config's cache directory.
    pub cache_dir: Option<PathBuf>,
    /// Leave the output file untouched; the bytes are still returned.
    pub skip_write: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: Vec<u8>,
    pub output_path: PathBuf,
    pub timings: Vec<StageTiming>,
    /// Tuned weights and thresholds, one line per tuning stage.
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub cache_hits: usize,
    pub cache_misses: usize,
    /// HTTP requests actually sent.
    pub requests: usize,
}

/// A yes/no question; `label` and `articles` are optional at test time.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct YesnoItem {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    #[serde(default)]
    pub articles: BTreeSet<String>,
    #[serde(default)]
    pub label: Option<Answer>,
}

pub fn read_yesno_jsonl(path: &Path) -> Result<Vec<YesnoItem>> {
    read_jsonl(path)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(&shown, i + 1, e.to_string())))
        .collect()
}

#[derive(Deserialize)]
struct PerQueryRecord {
    query: String,
    id: String,
    text: String,
}

#[derive(Debug, Clone)]
struct Doc {
    id: String,
    text: String,
    summary: Option<String>,
}

impl Doc {
    fn new(id: String, text: String) -> Self {
        Doc { id, text, summary: None }
    }

    /// What lexical and dense scorers see.
    fn scoring_text(&self) -> &str {
        self.summary.as_deref().unwrap_or(&self.text)
    }
}

enum Pool {
    Global(Vec<Doc>),
    PerQuery(BTreeMap<String, Vec<Doc>>),
}

impl Pool {
    fn for_query(&self, q: &str) -> &[Doc] {
        match self {
            Pool::Global(d) => d,
            Pool::PerQuery(m) => m.get(q).map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    fn docs_mut(&mut self) -> Vec<&mut Doc> {
        match self {
            Pool::Global(d) => d.iter_mut().collect(),
            Pool::PerQuery(m) => m.values_mut().flatten().collect(),
        }
    }
}

struct Services {
    embedders: BTreeMap<String, EmbeddingClient>,
    llms: BTreeMap<String, HttpChatClient>,
}

impl Services {
    fn new(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let cache = || cache_dir.map(ResponseCache::new).unwrap_or_else(ResponseCache::disabled);
        let mut embedders = BTreeMap::new();
        for (name, c) in &cfg.embedders {
            embedders.insert(name.clone(), EmbeddingClient::new(c.clone(), cache())?);
        }
        let mut llms = BTreeMap::new();
        for (name, c) in &cfg.llms {
            let mut c = c.clone();
            if c.seed.is_none() {
                c.seed = cfg.seed;
            }
            llms.insert(name.clone(), HttpChatClient::new(c, cache())?);
        }
        Ok(Services { embedders, llms })
    }

    fn embedder(&self, name: &str) -> Result<&EmbeddingClient> {
        self.embedders
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown embedder `{name}`")))
    }

    fn llm(&self, name: &str) -> Result<&HttpChatClient> {
        self.llms.get(name).ok_or_else(|| Error::Config(format!("unknown llm `{name}`")))
    }

    fn counters(&self) -> (usize, usize, usize) {
        let mut t = (0, 0, 0);
        for e in self.embedders.values() {
            t.0 += e.cache().hits();
            t.1 += e.cache().misses();
            t.2 += e.request_count();
        }
        for l in self.llms.values() {
            t.0 += l.cache().hits();
            t.1 += l.cache().misses();
            t.2 += l.request_count();
        }
        t
    }
}

enum Current {
    Nothing,
    Lists(Vec<RankedList>),
    Answers(BTreeMap<String, Answer>),
    Judgments(Vec<Prediction>),
}

struct State<'a> {
    cfg: &'a RunConfig,
    exec: Exec,
    services: Services,
    queries: Vec<Doc>,
    pool: Pool,
    yesno: Vec<YesnoItem>,
    cases: Vec<TortCase>,
    qrels: Option<Qrels>,
    tables: BTreeMap<String, ScoreTable>,
    current: Current,
    notes: Vec<String>,
    warnings: Vec<String>,
}

/// Validates, loads inputs, executes every stage in order and writes the
/// output file atomically.
pub fn execute_run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    let errors = validate_config(cfg);
    if !errors.is_empty() {
        let lines: Vec<String> = errors.iter().map(ToString::to_string).collect();
        return Err(Error::Config(lines.join("; ")));
    }
    let cache_dir = opts.cache_dir.as_deref().or(cfg.cache_dir.as_deref());
    let mut st = State {
        cfg,
        exec: opts.exec,
        services: Services::new(cfg, cache_dir)?,
        queries: Vec::new(),
        pool: Pool::Global(Vec::new()),
        yesno: Vec::new(),
        cases: Vec::new(),
        qrels: cfg.inputs.qrels.as_deref().map(read_qrels).transpose()?,
        tables: BTreeMap::new(),
        current: Current::Nothing,
        notes: Vec::new(),
        warnings: Vec::new(),
    };
    st.load_inputs()?;

    let mut timings = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let start = Instant::now();
        st.run_stage(i, stage)?;
        timings.push(StageTiming {
            stage: format!("{i}:{}", stage.kind()),
            elapsed: start.elapsed(),
        });
    }

    let output = st.render_output()?;
    if !opts.skip_write {
        write_atomic(&cfg.output.path, &output)?;
    }
    let (cache_hits, cache_misses, requests) = st.services.counters();
    Ok(RunResult {
        output,
        output_path: cfg.output.path.clone(),
        timings,
        notes: st.notes,
        warnings: st.warnings,
        cache_hits,
        cache_misses,
        requests,
    })
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn sorted_unique(mut docs: Vec<Doc>, what: &str) -> Result<Vec<Doc>> {
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateId(format!("{what} `{}`", w[0].id)));
    }
    Ok(docs)
}

/// Paragraph numbers shown to the model: numeric id stems when they are
/// unique, otherwise 1-based rank positions.
pub fn paragraph_numbers(ids: &[&str]) -> Vec<usize> {
    let stems: Vec<Option<usize>> = ids
        .iter()
        .map(|id| {
            let stem = id.split('.').next().unwrap_or(id);
            stem.parse().ok()
        })
        .collect();
    let distinct: BTreeSet<usize> = stems.iter().flatten().copied().collect();
    if stems.iter().all(Option::is_some) && distinct.len() == ids.len() {
        stems.into_iter().flatten().collect()
    } else {
        (1..=ids.len()).collect()
    }
}

impl State<'_> {
    fn load_inputs(&mut self) -> Result<()> {
        let inputs = &self.cfg.inputs;
        match self.cfg.task {
            Task::YesnoEntailment => {
                if let Some(p) = &inputs.queries {
                    self.yesno = read_yesno_jsonl(p)?;
                    self.yesno.sort_by(|a, b| a.id.cmp(&b.id));
                }
            }
            Task::Judgment => {
                if let Some(p) = &inputs.queries {
                    self.cases = read_tort_jsonl(p)?;
                    self.cases.sort_by(|a, b| a.id.cmp(&b.id));
                }
            }
            _ => {
                if let Some(p) = &inputs.queries {
                    let docs = load_case_corpus(p, self.exec)?
                        .into_iter()
                        .map(|d| Doc::new(d.id, d.text))
                        .collect();
                    self.queries = sorted_unique(docs, "query")?;
                }
                if let Some(p) = &inputs.candidates {
                    self.pool = match inputs.candidate_scope {
                        CandidateScope::Global => {
                            let docs = load_case_corpus(p, self.exec)?
                                .into_iter()
                                .map(|d| Doc::new(d.id, d.text))
                                .collect();
                            Pool::Global(sorted_unique(docs, "candidate")?)
                        }
                        CandidateScope::PerQuery => {
                            let mut by_query: BTreeMap<String, Vec<Doc>> = BTreeMap::new();
                            for r in read_jsonl::<PerQueryRecord>(p)? {
                                by_query.entry(r.query).or_default().push(Doc::new(r.id, r.text));
                            }
                            let mut out = BTreeMap::new();
                            for (q, docs) in by_query {
                                let docs = sorted_unique(docs, &format!("candidate of query `{q}`"))?;
                                out.insert(q, docs);
                            }
                            Pool::PerQuery(out)
                        }
                    };
                }
            }
        }
        Ok(())
    }

    fn query_ids(&self) -> Vec<String> {
        self.queries.iter().map(|d| d.id.clone()).collect()
    }

    fn qrels(&self) -> Result<&Qrels> {
        self.qrels
            .as_ref()
            .ok_or_else(|| Error::Config("this stage needs inputs.qrels".into()))
    }

    /// One list per query, in query order, from a table.
    fn lists_of(&self, table: &ScoreTable) -> Vec<RankedList> {
        self.queries.iter().map(|q| table.ranked(&q.id)).collect()
    }

    fn table(&self, name: &str) -> Result<&ScoreTable> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown score table `{name}`")))
    }

    fn tables_named(&self, names: &[String]) -> Result<Vec<ScoreTable>> {
        names.iter().map(|n| self.table(n).cloned()).collect()
    }

    fn current_lists(&self) -> Result<&[RankedList]> {
        match &self.current {
            Current::Lists(l) => Ok(l),
            _ => Err(Error::Config("stage needs a ranking as input".into())),
        }
    }

    fn set_table(&mut self, name: String, table: ScoreTable) {
        self.current = Current::Lists(self.lists_of(&table));
        self.tables.insert(name, table);
    }

    /// Allowed candidates per query from an earlier table, if restricted.
    fn restriction(&self, from: &Option<String>) -> Result<Option<BTreeMap<String, BTreeSet<String>>>> {
        let Some(name) = from else { return Ok(None) };
        let t = self.table(name)?;
        Ok(Some(
            self.queries
                .iter()
                .map(|q| (q.id.clone(), t.ranked(&q.id).ids().map(str::to_string).collect()))
                .collect(),
        ))
    }

    fn run_stage(&mut self, i: usize, stage: &Stage) -> Result<()> {
        let ctx = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("stages[{i}] ({}): {m}", stage.kind())),
            Error::InvalidInput(m) => Error::InvalidInput(format!("stages[{i}] ({}): {m}", stage.kind())),
            other => other,
        };
        let name = stage.table_name();
        match stage {
            Stage::Summarize(s) => self.summarize(s),
            Stage::Bm25(s) => self.bm25(s, name.unwrap_or_default()),
            Stage::Dense(s) => self.dense(s, name.unwrap_or_default()),
            Stage::LoadScores(s) => self.load_scores(s, name.unwrap_or_default()),
            Stage::Normalize(s) => self.normalize(s),
            Stage::Combine(s) => self.combine(i, s, name.unwrap_or_default()),
            Stage::SimilarityWeighted(s) => self.similarity_weighted(s, name.unwrap_or_default()),
            Stage::Vote(s) => self.vote(s),
            Stage::TopK(s) => {
                let lists = self.current_lists()?.iter().map(|l| l.top(s.k)).collect();
                self.current = Current::Lists(lists);
                Ok(())
            }
            Stage::Threshold(s) => self.threshold(i, s),
            Stage::LlmEntail(s) => self.llm_entail(s),
            Stage::Yesno(s) => self.yesno(s),
            Stage::Heuristics(h) => self.heuristics(h),
            Stage::ClusterJudge(s) => self.cluster_judge(s),
        }
        .map_err(ctx)
    }

    fn summarize(&mut self, s: &SummarizeStage) -> Result<()> {
        let llm = self.services.llm(&s.llm)?;
        let mut targets: Vec<&mut Doc> = Vec::new();
        if s.queries {
            targets.extend(self.queries.iter_mut());
        }
        if s.candidates {
            targets.extend(self.pool.docs_mut());
        }
        let cases: Vec<CaseDocument> = targets
            .iter()
            .map(|d| CaseDocument::from_paragraphs(d.id.clone(), [d.text.clone()]))
            .collect();
        let summaries = bounded_map(&cases, llm.max_in_flight(), |c| summarize_case(c, llm, s.char_limit));
        for (d, summary) in targets.into_iter().zip(summaries) {
            d.summary = Some(summary?);
        }
        Ok(())
    }

    fn bm25(&mut self, s: &Bm25Stage, name: String) -> Result<()> {
        let p = Bm25Params { k1: s.k1, b: s.b };
        p.validate()?;
        let tok = Tokenizer::default();
        let allowed = self.restriction(&s.candidates_from)?;
        let qs: Vec<(String, String)> = self
            .queries
            .iter()
            .map(|q| (q.id.clone(), q.scoring_text().to_string()))
            .collect();
        let lists = match (&self.pool, &allowed) {
            (Pool::Global(docs), None) => {
                let index = build_index(docs.iter().map(|d| (d.id.as_str(), d.scoring_text())), &tok)?;
                bm25_batch(&qs, &index, &p, s.k, self.exec)?
            }
            _ => {
                // Statistics come from the query's whole pool; the restriction
                // only filters which candidates are returned.
                let pool = &self.pool;
                let results = self.exec.map(&qs, |(qid, text)| -> Result<RankedList> {
                    let docs = pool.for_query(qid);
                    if docs.is_empty() {
                        return Ok(RankedList::empty(qid.clone()));
                    }
                    let index = build_index(docs.iter().map(|d| (d.id.as_str(), d.scoring_text())), &tok)?;
                    let keep = allowed.as_ref().and_then(|a| a.get(qid));
                    let scored = index
                        .score_all(text, &p)
                        .into_iter()
                        .filter(|(d, _)| keep.is_none_or(|k| k.contains(*d)))
                        .map(|(d, sc)| (d.to_string(), sc));
                    Ok(RankedList::from_scores(qid.clone(), scored).top(s.k))
                });
                results.into_iter().collect::<Result<Vec<_>>>()?
            }
        };
        let table = ScoreTable::from_ranked_lists(name.clone(), &lists)?;
        self.set_table(name, table);
        Ok(())
    }

    fn dense(&mut self, s: &DenseStage, name: String) -> Result<()> {
        let client = self.services.embedder(&s.embedder)?;
        let allowed = self.restriction(&s.candidates_from)?;
        let k = s.k.unwrap_or(usize::MAX);

        let lists = match (&self.pool, &allowed) {
            (Pool::Global(docs), None) => {
                let qstore = client.embed_store(
                    &self.queries.iter().map(|d| (d.id.clone(), d.scoring_text().to_string())).collect::<Vec<_>>(),
                )?;
                let cstore = client.embed_store(
                    &docs.iter().map(|d| (d.id.clone(), d.scoring_text().to_string())).collect::<Vec<_>>(),
                )?;
                topk_similar_batch(&self.query_ids(), &qstore, &cstore, k, s.similarity, self.exec)?
            }
            _ => {
                // Candidate ids may repeat across per-query pools with
                // different texts, so vectors are looked up by text.
                let mut texts: BTreeSet<&str> = self.queries.iter().map(Doc::scoring_text).collect();
                for q in &self.queries {
                    texts.extend(self.pool.for_query(&q.id).iter().map(Doc::scoring_text));
                }
                let texts: Vec<String> = texts.into_iter().map(str::to_string).collect();
                let vectors = client.embed_texts(&texts)?;
                let by_text: HashMap<&str, &Vector> =
                    texts.iter().map(String::as_str).zip(vectors.iter()).collect();
                let pool = &self.pool;
                let results = self.exec.map(&self.queries, |q| -> Result<RankedList> {
                    let qv = by_text[q.scoring_text()];
                    let keep = allowed.as_ref().and_then(|a| a.get(&q.id));
                    let mut scored = Vec::new();
                    for d in pool.for_query(&q.id) {
                        if keep.is_none_or(|k| k.contains(&d.id)) {
                            scored.push((d.id.clone(), s.similarity.score(qv, by_text[d.scoring_text()])?));
                        }
                    }
                    Ok(RankedList::from_scores(q.id.clone(), scored).top(k))
                });
                results.into_iter().collect::<Result<Vec<_>>>()?
            }
        };
        let table = ScoreTable::from_ranked_lists(name.clone(), &lists)?;
        self.set_table(name, table);
        Ok(())
    }

    fn load_scores(&mut self, s: &LoadScoresStage, name: String) -> Result<()> {
        let mut table = match s.format {
            ScoreFormat::Table => read_score_table(&s.path)?,
            ScoreFormat::Trec => {
                let lists: Vec<RankedList> = read_trec_run(&s.path)?.into_values().collect();
                ScoreTable::from_ranked_lists(name.clone(), &lists)?
            }
        };
        table.scorer_name = name.clone();
        self.set_table(name, table);
        Ok(())
    }

    fn normalize(&mut self, s: &NormalizeStage) -> Result<()> {
        if s.inputs.is_empty() {
            let t = ScoreTable::from_ranked_lists("current", self.current_lists()?)?;
            self.current = Current::Lists(self.lists_of(&normalize_scores(&t, s.mode)));
            return Ok(());
        }
        for n in &s.inputs {
            let t = normalize_scores(self.table(n)?, s.mode);
            self.set_table(n.clone(), t);
        }
        Ok(())
    }

    fn combine(&mut self, i: usize, s: &CombineStage, name: String) -> Result<()> {
        let tables = self.tables_named(&s.inputs)?;
        let weights = match (&s.weights, &s.tune) {
            (Some(w), _) => WeightVector::new(w.iter().map(|(k, v)| (k.clone(), *v)))?,
            (None, Some(t)) => {
                let r = grid_search_weights(&tables, self.qrels()?, t.metric, t.step, t.selection, self.exec)?;
                let shown: Vec<String> = r.weights.iter().map(|(n, w)| format!("{n}={w:.4}")).collect();
                self.notes.push(format!(
                    "stages[{i}] combine weights {} ({} {:.4} over {} lattice points)",
                    shown.join(" "),
                    String::from(t.metric),
                    r.objective,
                    r.evaluated
                ));
                r.weights
            }
            (None, None) => return Err(Error::Config("one of `weights` or `tune` is required".into())),
        };
        let table = weighted_combine(&tables, &weights, &name)?;
        self.set_table(name, table);
        Ok(())
    }

    fn similarity_weighted(&mut self, s: &SimilarityWeightedStage, name: String) -> Result<()> {
        let tables = self.tables_named(&s.inputs)?;
        let qrels = self.qrels()?;
        let query_vectors = match (&s.query_vectors, &s.embedder) {
            (Some(p), _) => EmbeddingStore::read(p)?,
            (None, Some(e)) => self.services.embedder(e)?.embed_store(
                &self.queries.iter().map(|d| (d.id.clone(), d.scoring_text().to_string())).collect::<Vec<_>>(),
            )?,
            (None, None) => return Err(Error::Config("one of `query_vectors` or `embedder` is required".into())),
        };
        let mut dev = EmbeddingStore::new(query_vectors.dim(), "dev");
        for (q, v) in query_vectors.iter().filter(|(q, _)| qrels.relevant(q).is_some()) {
            dev.insert(q, v.clone())?;
        }
        if dev.is_empty() {
            return Err(Error::InvalidInput("no query vector belongs to a judged dev query".into()));
        }
        let mut per_model: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for t in &tables {
            let row = per_model.entry(t.scorer_name.clone()).or_default();
            for (q, rel) in qrels.iter() {
                let picked: Vec<String> = s.selection.apply(&t.ranked(q)).ids().map(str::to_string).collect();
                row.insert(q.to_string(), s.metric.evaluate(&[(picked, rel.clone())])?);
            }
        }
        let table = similarity_informed_combine(&tables, &query_vectors, &dev, &per_model, s.k, &name)?;
        self.set_table(name, table);
        Ok(())
    }

    fn vote(&mut self, s: &VoteStage) -> Result<()> {
        let tables = self.tables_named(&s.inputs)?;
        let mut out = Vec::with_capacity(self.queries.len());
        for q in &self.queries {
            let lists: Vec<RankedList> = tables.iter().map(|t| t.ranked(&q.id)).collect();
            let picked = majority_vote_topm(&lists, s.m, s.quorum, s.max_out)?;
            let entries = picked
                .into_iter()
                .map(|c| {
                    let votes = lists.iter().filter(|l| l.ids().take(s.m).any(|x| x == c)).count();
                    (c, votes as f64)
                })
                .collect();
            out.push(RankedList {
                query_id: q.id.clone(),
                entries,
            });
        }
        self.current = Current::Lists(out);
        Ok(())
    }

    fn threshold(&mut self, i: usize, s: &ThresholdStage) -> Result<()> {
        let lists = self.current_lists()?.to_vec();
        let theta = match (s.theta, &s.tune) {
            (Some(t), _) => t,
            (None, Some(t)) => {
                let grid: Vec<f64> = if t.grid.is_empty() {
                    (0..=100).map(|x| x as f64 / 100.0).collect()
                } else {
                    t.grid.clone()
                };
                let r = tune_threshold(&lists, self.qrels()?, t.metric, &grid, s.fallback_top1, self.exec)?;
                self.notes.push(format!(
                    "stages[{i}] threshold {:.4} ({} {:.4})",
                    r.theta,
                    String::from(t.metric),
                    r.objective
                ));
                r.theta
            }
            (None, None) => return Err(Error::Config("one of `theta` or `tune` is required".into())),
        };
        let cut = lists
            .into_iter()
            .map(|l| {
                let keep = threshold_select(&l, theta, s.fallback_top1);
                RankedList {
                    entries: l.entries.into_iter().filter(|(c, _)| keep.contains(c)).collect(),
                    query_id: l.query_id,
                }
            })
            .collect();
        self.current = Current::Lists(cut);
        Ok(())
    }

    fn llm_entail(&mut self, s: &LlmEntailStage) -> Result<()> {
        let models: Vec<&dyn ChatModel> = s
            .llms
            .iter()
            .map(|n| self.services.llm(n).map(|c| c as &dyn ChatModel))
            .collect::<Result<_>>()?;
        let limit = models.iter().map(|m| m.max_in_flight()).min().unwrap_or(1);
        let lists = self.current_lists()?;
        let jobs: Vec<(&Doc, &RankedList)> = self.queries.iter().zip(lists).collect();
        let pool = &self.pool;
        let results = bounded_map(&jobs, limit, |(q, list)| -> Result<(RankedList, Vec<String>)> {
            let texts: HashMap<&str, &str> = pool.for_query(&q.id).iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
            let ids: Vec<&str> = list.ids().collect();
            if ids.is_empty() {
                return Ok(((*list).clone(), vec![format!("query `{}`: no candidates to judge", q.id)]));
            }
            let numbers = paragraph_numbers(&ids);
            let mut paragraphs = Vec::with_capacity(ids.len());
            for (n, id) in numbers.iter().zip(&ids) {
                let text = texts
                    .get(id)
                    .ok_or_else(|| Error::UnknownId(format!("candidate `{id}` of query `{}`", q.id)))?;
                paragraphs.push((*n, text.to_string()));
            }
            let sel = entail_select(&q.text, &paragraphs, &models)?;
            let entries = list
                .entries
                .iter()
                .zip(&numbers)
                .filter(|(_, n)| sel.ids.contains(n))
                .map(|(e, _)| e.clone())
                .collect();
            let warnings = sel.warnings.into_iter().map(|w| format!("query `{}`: {w}", q.id)).collect();
            Ok((RankedList { query_id: q.id.clone(), entries }, warnings))
        });
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            let (l, w) = r?;
            self.warnings.extend(w);
            out.push(l);
        }
        self.current = Current::Lists(out);
        Ok(())
    }

    fn yesno(&mut self, s: &YesnoStage) -> Result<()> {
        let pool: Vec<PoolItem> = match &self.cfg.inputs.train {
            Some(p) if s.few_shot > 0 => read_yesno_jsonl(p)?
                .into_iter()
                .map(|it| {
                    let label = it
                        .label
                        .ok_or_else(|| Error::InvalidInput(format!("training item `{}` has no label", it.id)))?;
                    Ok(PoolItem {
                        id: it.id,
                        premise: it.premise,
                        hypothesis: it.hypothesis,
                        label,
                        articles: it.articles,
                    })
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let vectors = match (&s.embedder, s.few_shot) {
            (Some(e), k) if k > 0 => {
                let mut rows: BTreeMap<String, String> =
                    pool.iter().map(|p| (p.id.clone(), p.hypothesis.clone())).collect();
                for q in &self.yesno {
                    rows.entry(q.id.clone()).or_insert_with(|| q.hypothesis.clone());
                }
                Some(self.services.embedder(e)?.embed_store(&rows.into_iter().collect::<Vec<_>>())?)
            }
            _ => None,
        };
        let system = s.system.clone().unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string());
        let instruction = s.instruction.clone().unwrap_or_else(|| DEFAULT_YESNO_INSTRUCTION.to_string());
        let mut conversations = Vec::with_capacity(self.yesno.len());
        for q in &self.yesno {
            let examples: Vec<FewShotExample> = match &vectors {
                Some(v) => select_fewshot_examples(&q.id, &q.articles, &pool, v, s.few_shot)?
                    .into_iter()
                    .map(FewShotExample::from)
                    .collect(),
                None => Vec::new(),
            };
            conversations.push(compose_messages(&PromptInput {
                system: system.clone(),
                instruction: instruction.clone(),
                premise: q.premise.clone(),
                hypothesis: q.hypothesis.clone(),
                examples,
            })?);
        }
        let mut votes: Vec<Vec<Answer>> = vec![Vec::new(); self.yesno.len()];
        for name in &s.llms {
            let replies = self.services.llm(name)?.complete_many(&conversations);
            for (slot, reply) in votes.iter_mut().zip(replies) {
                slot.push(extract_binary_answer(&reply?).value);
            }
        }
        let answers = self
            .yesno
            .iter()
            .zip(votes)
            .map(|(q, v)| (q.id.clone(), majority_vote_answers(&v)))
            .collect();
        self.current = Current::Answers(answers);
        Ok(())
    }

    fn heuristics(&mut self, h: &crate::judgment::HeuristicsConfig) -> Result<()> {
        let preds = match std::mem::replace(&mut self.current, Current::Nothing) {
            Current::Judgments(p) => p,
            _ => {
                let path = self.cfg.inputs.predictions.as_ref().ok_or_else(|| {
                    Error::Config("heuristics needs inputs.predictions or an earlier cluster_judge".into())
                })?;
                read_predictions(path)?
            }
        };
        let out = preds.iter().map(|p| apply_heuristics(p, h)).collect::<Result<_>>()?;
        self.current = Current::Judgments(out);
        Ok(())
    }

    fn cluster_judge(&mut self, s: &ClusterJudgeStage) -> Result<()> {
        let llm = self.services.llm(&s.llm)?;
        let external = self.cfg.inputs.clusters.as_deref().map(read_cluster_assignments).transpose()?;
        let claim_texts = |c: &TortCase| -> Vec<String> {
            c.plaintiff_claims.iter().chain(&c.defendant_claims).map(|x| x.text.clone()).collect()
        };
        let mut by_text: HashMap<String, Vector> = HashMap::new();
        if let (Some(e), None) = (&s.embedder, &external) {
            let texts: Vec<String> = self
                .cases
                .iter()
                .flat_map(claim_texts)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let vs = self.services.embedder(e)?.embed_texts(&texts)?;
            by_text = texts.into_iter().zip(vs).collect();
        }
        let mut preds = Vec::with_capacity(self.cases.len());
        for case in &self.cases {
            let vectors: Vec<Vector> = claim_texts(case).iter().filter_map(|t| by_text.get(t).cloned()).collect();
            let ext = match &external {
                Some(m) => Some(m.get(&case.id).ok_or_else(|| {
                    Error::UnknownId(format!("no cluster assignment for case `{}`", case.id))
                })?),
                None => None,
            };
            let j = cluster_judge(case, &vectors, llm, s.theta, ext)?;
            self.warnings.extend(j.warnings);
            preds.push(j.prediction);
        }
        self.current = Current::Judgments(preds);
        Ok(())
    }

    fn render_output(&self) -> Result<Vec<u8>> {
        let tag = self.cfg.tag();
        match &self.current {
            Current::Nothing => Err(Error::Config("the stages produced no output".into())),
            Current::Lists(lists) => {
                let mut buf = Vec::new();
                write_trec_run(lists, tag, &mut buf).map_err(|e| Error::io(&self.cfg.output.path, e))?;
                Ok(buf)
            }
            Current::Answers(a) => Ok(a.iter().map(|(q, v)| format!("{q} {v} {tag}\n")).collect::<String>().into_bytes()),
            Current::Judgments(p) => Ok(predictions_to_jsonl(p)?.into_bytes()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraph_numbering() {
        assert_eq!(paragraph_numbers(&["004.txt", "012.txt", "1"]), vec![4, 12, 1]);
        assert_eq!(paragraph_numbers(&["004.txt", "4"]), vec![1, 2]);
        assert_eq!(paragraph_numbers(&["a", "003"]), vec![1, 2]);
    }

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
