use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use lexcourt::cache::ResponseCache;
use lexcourt::corpus::{
    corpus_stats, dedupe_collection, filter_tort_cases, load_case_corpus, preprocess_case, read_qrels,
    read_tort_jsonl, PreprocessConfig, StatsReport,
};
use lexcourt::embedding::{topk_similar_batch, EmbeddingClient, EmbeddingServiceConfig, EmbeddingStore, Similarity};
use lexcourt::eval::{accuracy, micro_f1_labels, micro_prf, EvalReport, MetricSpec, RetrievalCounts};
use lexcourt::fusion::{
    grid_search_weights, majority_vote_topm, normalize_scores, read_score_table, read_trec_run, threshold_select,
    tune_threshold, weighted_combine, write_score_table, write_trec_run, NormalizationMode, SelectionRule,
};
use lexcourt::judgment::{read_predictions, HeuristicsConfig};
use lexcourt::lexical::{bm25_batch, build_index, Bm25Params, InvertedIndex, Tokenizer};
use lexcourt::llm::{Answer, LlmClientConfig};
use lexcourt::mock::{MockOptions, MockServer};
use lexcourt::pipeline::{
    execute_run, preset, preset_names, read_yesno_jsonl, validate_config, write_atomic, Bm25Stage, CandidateScope,
    ClusterJudgeStage, Inputs, LlmEntailStage, LoadScoresStage, Output, RunConfig, RunOptions, ScoreFormat, Stage,
    Task, TopKStage, SCHEMA_VERSION,
};
use lexcourt::{Error, Exec, RankedList, Result, ScoreTable, WeightVector};

use crate::*;

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest(a) => ingest(g, a),
        Command::Index(a) => index(g, a),
        Command::Embed(a) => embed(g, a),
        Command::Score(a) => score(g, a),
        Command::Fuse(a) => fuse(g, a),
        Command::Tune(a) => tune(g, a),
        Command::Entail(a) => entail(g, a),
        Command::Judge(a) => judge(g, a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(g, a),
        Command::Stats(a) => stats(a),
        Command::MockServe(a) => mock_serve(a),
    }
}

fn exec(g: &Global) -> Exec {
    if g.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn cache(g: &Global) -> ResponseCache {
    g.cache_dir.as_ref().map(ResponseCache::new).unwrap_or_else(ResponseCache::disabled)
}

/// Writes `bytes` unless this is a dry run.
fn emit(g: &Global, path: &Path, bytes: &[u8], what: &str) -> Result<()> {
    if g.dry_run {
        eprintln!("dry run: would write {what} to {}", path.display());
        Ok(())
    } else {
        write_atomic(path, bytes)?;
        eprintln!("wrote {what} to {}", path.display());
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// `endpoint=model`; the model is the text after the last `=`.
fn endpoint_model(arg: &str) -> Result<(String, String)> {
    match arg.rsplit_once('=') {
        Some((e, m)) if !e.is_empty() && !m.is_empty() => Ok((e.to_string(), m.to_string())),
        _ => Err(invalid(format!("`{arg}` is not endpoint=model"))),
    }
}

fn norm(n: Norm) -> NormalizationMode {
    match n {
        Norm::Minmax => NormalizationMode::Minmax,
        Norm::Zscore => NormalizationMode::Zscore,
        Norm::None => NormalizationMode::None,
    }
}

fn ingest(g: &Global, a: &IngestArgs) -> Result<()> {
    let mut out = String::new();
    if a.tort {
        let cases = read_tort_jsonl(&a.input)?;
        let total = cases.len();
        let kept = filter_tort_cases(cases);
        for c in &kept {
            out += &serde_json::to_string(c)?;
            out.push('\n');
        }
        eprintln!("kept {} of {total} tort cases", kept.len());
        return emit(g, &a.out, out.as_bytes(), "tort corpus");
    }
    let rules: PreprocessConfig = match &a.rules {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => PreprocessConfig::default(),
    };
    let mut docs = load_case_corpus(&a.input, exec(g))?;
    let total = docs.len();
    if !a.keep_duplicates {
        docs = dedupe_collection(docs);
    }
    let cleaned = exec(g).map(&docs, |d| preprocess_case(&d.id, &d.text, &rules));
    let (mut written, mut degenerate, mut metadata) = (0, 0, 0);
    for p in cleaned {
        let p = p?;
        metadata += p.removed_metadata_lines;
        if p.degenerate {
            degenerate += 1;
            eprintln!("warning: `{}` is empty after cleaning; skipped", p.case.id);
            continue;
        }
        let paragraphs: Vec<&str> = p.case.paragraphs.iter().map(|x| x.text.as_str()).collect();
        out += &json!({"id": p.case.id, "paragraphs": paragraphs}).to_string();
        out.push('\n');
        written += 1;
    }
    eprintln!(
        "{written} documents written ({} duplicates, {degenerate} empty, {metadata} metadata lines removed)",
        total - docs.len()
    );
    emit(g, &a.out, out.as_bytes(), "cleaned corpus")
}

fn index(g: &Global, a: &IndexArgs) -> Result<()> {
    let docs = load_case_corpus(&a.corpus, exec(g))?;
    let idx = build_index(docs.iter().map(|d| (d.id.as_str(), d.text.as_str())), &Tokenizer::default())?;
    eprintln!("{} documents, average length {:.2} tokens", idx.len(), idx.avgdl());
    if g.dry_run {
        eprintln!("dry run: would write index to {}", a.out.display());
        return Ok(());
    }
    idx.save(&a.out)?;
    eprintln!("wrote index to {}", a.out.display());
    Ok(())
}

fn embed(g: &Global, a: &EmbedArgs) -> Result<()> {
    let docs = load_case_corpus(&a.corpus, exec(g))?;
    if g.dry_run {
        eprintln!("dry run: would embed {} documents with `{}`", docs.len(), a.service.model);
        return Ok(());
    }
    let cfg = EmbeddingServiceConfig {
        endpoint: a.service.endpoint.clone(),
        model: a.service.model.clone(),
        batch_size: a.batch_size,
        ..EmbeddingServiceConfig::default()
    };
    let client = EmbeddingClient::new(cfg, cache(g))?;
    let items: Vec<(String, String)> = docs.into_iter().map(|d| (d.id, d.text)).collect();
    let store = client.embed_store(&items)?;
    eprintln!("{} requests, {} cache hits", client.request_count(), client.cache().hits());
    emit(g, &a.out, store.to_file_string().as_bytes(), "vectors")
}

fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    if a.k == 0 {
        return Err(invalid("-k must be >= 1"));
    }
    let (lists, default_name) = match (&a.index, &a.vectors) {
        (Some(idx), None) => {
            let index = InvertedIndex::load(idx)?;
            let queries: Vec<(String, String)> =
                load_case_corpus(&a.queries, exec(g))?.into_iter().map(|d| (d.id, d.text)).collect();
            let p = Bm25Params { k1: a.k1, b: a.b };
            p.validate()?;
            (bm25_batch(&queries, &index, &p, a.k, exec(g))?, "bm25".to_string())
        }
        (None, Some(vectors)) => {
            let sim: Similarity = a.similarity.parse()?;
            let queries = EmbeddingStore::read(&a.queries)?;
            let cands = EmbeddingStore::read(vectors)?;
            let ids: Vec<String> = queries.iter().map(|(id, _)| id.to_string()).collect();
            let name = vectors.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            (topk_similar_batch(&ids, &queries, &cands, a.k, sim, exec(g))?, name)
        }
        _ => return Err(invalid("give exactly one of --index or --vectors")),
    };
    let table = ScoreTable::from_ranked_lists(a.name.clone().unwrap_or(default_name), &lists)?;
    let mut buf = Vec::new();
    write_score_table(&table, &mut buf).map_err(|e| Error::io(&a.out, e))?;
    emit(g, &a.out, &buf, "score table")
}

fn read_tables(paths: &[PathBuf], mode: Norm) -> Result<Vec<ScoreTable>> {
    paths.iter().map(|p| Ok(normalize_scores(&read_score_table(p)?, norm(mode)))).collect()
}

fn all_queries(tables: &[ScoreTable]) -> Vec<String> {
    tables
        .iter()
        .flat_map(|t| t.queries().map(str::to_string))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn fuse(g: &Global, a: &FuseArgs) -> Result<()> {
    let tables = read_tables(&a.tables, a.normalize)?;
    let queries = all_queries(&tables);
    let mut lists: Vec<RankedList> = if let Some(m) = a.vote_m {
        let mut out = Vec::with_capacity(queries.len());
        for q in &queries {
            let per: Vec<RankedList> = tables.iter().map(|t| t.ranked(q)).collect();
            let entries = majority_vote_topm(&per, m, a.quorum, a.max_out)?
                .into_iter()
                .map(|c| {
                    let votes = per.iter().filter(|l| l.ids().take(m).any(|x| x == c)).count();
                    (c, votes as f64)
                })
                .collect();
            out.push(RankedList { query_id: q.clone(), entries });
        }
        out
    } else {
        let weights = if a.weights.is_empty() {
            WeightVector::uniform(tables.iter().map(|t| t.scorer_name.clone()))?
        } else {
            let mut pairs = Vec::new();
            for w in &a.weights {
                let (name, v) = w.split_once('=').ok_or_else(|| invalid(format!("weight `{w}` is not name=value")))?;
                let v: f64 = v.parse().map_err(|_| invalid(format!("weight `{w}` is not a number")))?;
                pairs.push((name.to_string(), v));
            }
            WeightVector::new(pairs)?
        };
        let combined = weighted_combine(&tables, &weights, "fused")?;
        queries.iter().map(|q| combined.ranked(q)).collect()
    };
    if let Some(k) = a.top_k {
        lists = lists.into_iter().map(|l| l.top(k)).collect();
    }
    if let Some(theta) = a.threshold {
        lists = lists
            .into_iter()
            .map(|l| {
                let keep = threshold_select(&l, theta, a.fallback_top1);
                RankedList { entries: l.entries.into_iter().filter(|(c, _)| keep.contains(c)).collect(), query_id: l.query_id }
            })
            .collect();
    }
    let mut buf = Vec::new();
    write_trec_run(&lists, &a.tag, &mut buf).map_err(|e| Error::io(&a.out, e))?;
    emit(g, &a.out, &buf, "run")
}

fn parse_selection(s: &str, fallback_top1: bool) -> Result<SelectionRule> {
    let bad = || invalid(format!("selection `{s}` is not top:K or threshold:T"));
    match s.split_once(':') {
        Some(("top", k)) => Ok(SelectionRule::TopK { k: k.parse().map_err(|_| bad())? }),
        Some(("threshold", t)) => Ok(SelectionRule::Threshold { theta: t.parse().map_err(|_| bad())?, fallback_top1 }),
        _ => Err(bad()),
    }
}

fn tune(g: &Global, a: &TuneArgs) -> Result<()> {
    let tables = read_tables(&a.tables, a.normalize)?;
    let qrels = read_qrels(&a.qrels)?;
    let metric: MetricSpec = a.metric.parse()?;
    let mut report = EvalReport::new(format!("tuned on {} dev queries ({})", qrels.len(), a.metric));
    match a.target {
        TuneTarget::Weights => {
            let sel = parse_selection(&a.selection, a.fallback_top1)?;
            let r = grid_search_weights(&tables, &qrels, metric, a.step, sel, exec(g))?;
            for (name, w) in r.weights.iter() {
                report.push(format!("weight {name}"), w);
            }
            report.push("objective", r.objective);
            eprintln!("{} lattice points evaluated", r.evaluated);
        }
        TuneTarget::Threshold => {
            let [table] = tables.as_slice() else {
                return Err(invalid("threshold tuning takes exactly one --table"));
            };
            let n = (1.0 / a.step).round() as usize;
            let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
            let lists = table.ranked_lists();
            let r = tune_threshold(&lists, &qrels, metric, &grid, a.fallback_top1, exec(g))?;
            report.push("threshold", r.theta);
            report.push("objective", r.objective);
        }
    }
    print!("{}", if a.json { report.to_json() + "\n" } else { report.to_text() });
    Ok(())
}

fn base_config(task: Task, out: &Path, tag: &str) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        run_id: tag.to_string(),
        task,
        seed: None,
        cache_dir: None,
        inputs: Inputs::default(),
        output: Output { path: out.to_path_buf(), tag: None },
        embedders: BTreeMap::new(),
        llms: BTreeMap::new(),
        stages: Vec::new(),
    }
}

fn llm_config(arg: &str) -> Result<LlmClientConfig> {
    let (endpoint, model) = endpoint_model(arg)?;
    Ok(LlmClientConfig { endpoint, model, ..LlmClientConfig::default() })
}

fn entail(g: &Global, a: &EntailArgs) -> Result<()> {
    if !(1..=2).contains(&a.llms.len()) {
        return Err(invalid("--llm is given once or twice"));
    }
    let mut cfg = base_config(Task::CaseEntailment, &a.out, &a.tag);
    cfg.inputs.queries = Some(a.queries.clone());
    cfg.inputs.candidates = Some(a.paragraphs.clone());
    cfg.inputs.candidate_scope = CandidateScope::PerQuery;
    let names: Vec<String> = (0..a.llms.len()).map(|i| format!("llm{i}")).collect();
    for (n, arg) in names.iter().zip(&a.llms) {
        cfg.llms.insert(n.clone(), llm_config(arg)?);
    }
    match &a.run {
        Some(run) => {
            cfg.stages.push(Stage::LoadScores(LoadScoresStage { path: run.clone(), format: ScoreFormat::Trec, name: Some("ranking".into()) }));
            if let Some(k) = a.k {
                cfg.stages.push(Stage::TopK(TopKStage { k }));
            }
        }
        None => cfg.stages.push(Stage::Bm25(Bm25Stage {
            k: a.k.unwrap_or(20),
            k1: 1.2,
            b: 0.75,
            name: None,
            candidates_from: None,
        })),
    }
    cfg.stages.push(Stage::LlmEntail(LlmEntailStage { llms: names }));
    run_config(g, cfg)
}

fn judge(g: &Global, a: &JudgeArgs) -> Result<()> {
    let mut cfg = base_config(Task::Judgment, &a.out, "judge");
    let heuristics = HeuristicsConfig { tp_reversal: !a.no_tp_reversal, re_refine: !a.no_re_refine, ratio: a.ratio };
    match (&a.cases, &a.predictions) {
        (Some(cases), None) => {
            let llm = a.llm.as_deref().ok_or_else(|| invalid("--cases needs --llm"))?;
            cfg.inputs.queries = Some(cases.clone());
            cfg.inputs.clusters = a.clusters.clone();
            cfg.llms.insert("judge".into(), llm_config(llm)?);
            let embedder = match &a.embedder {
                Some(arg) => {
                    let (endpoint, model) = endpoint_model(arg)?;
                    cfg.embedders.insert("claims".into(), EmbeddingServiceConfig { endpoint, model, ..Default::default() });
                    Some("claims".to_string())
                }
                None => None,
            };
            cfg.stages.push(Stage::ClusterJudge(ClusterJudgeStage { llm: "judge".into(), embedder, theta: a.theta }));
        }
        (None, Some(preds)) => {
            cfg.inputs.predictions = Some(preds.clone());
            cfg.stages.push(Stage::Heuristics(heuristics));
        }
        _ => return Err(invalid("give exactly one of --cases or --predictions")),
    }
    run_config(g, cfg)
}

fn load_run_config(g: &Global, a: &RunArgs) -> Result<RunConfig> {
    let target = match (&a.target, &g.config) {
        (Some(t), None) => t.clone(),
        (None, Some(c)) => c.display().to_string(),
        (Some(_), Some(_)) => return Err(invalid("give the config either positionally or with --config")),
        (None, None) => return Err(invalid("no config: pass a file, a preset name or --config")),
    };
    let path = Path::new(&target);
    if path.exists() {
        RunConfig::load(path, &a.overrides)
    } else if target.ends_with(".toml") {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found")))
    } else {
        preset(&target, &a.overrides)
    }
}

fn run(g: &Global, a: &RunArgs) -> Result<()> {
    if a.list_presets {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let cfg = load_run_config(g, a)?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    run_config(g, cfg)
}

/// Validates, then executes unless this is a dry run.
fn run_config(g: &Global, mut cfg: RunConfig) -> Result<()> {
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    let errors = validate_config(&cfg);
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("invalid config: {e}");
        }
        return Err(invalid(format!("{} validation error(s)", errors.len())));
    }
    if g.dry_run {
        eprintln!("config `{}` is valid; stages:", cfg.run_id);
        for (i, s) in cfg.stages.iter().enumerate() {
            eprintln!("  {i}: {}", s.kind());
        }
        eprintln!("output: {}", cfg.output.path.display());
        return Ok(());
    }
    let r = execute_run(&cfg, &RunOptions { exec: exec(g), cache_dir: g.cache_dir.clone(), skip_write: false })?;
    for t in &r.timings {
        eprintln!("stage {:<24} {:>10.3?}", t.stage, t.elapsed);
    }
    for n in &r.notes {
        eprintln!("{n}");
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "{} requests, {} cache hits, {} cache misses; wrote {}",
        r.requests,
        r.cache_hits,
        r.cache_misses,
        r.output_path.display()
    );
    Ok(())
}

fn read_answers(path: &Path) -> Result<BTreeMap<String, Answer>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => continue,
            [id, ans, ..] => {
                let a: Answer = ans.parse().map_err(|_| Error::format(&shown, i + 1, format!("bad answer `{ans}`")))?;
                out.insert(id.to_string(), a);
            }
            _ => return Err(Error::format(&shown, i + 1, "expected `id Y|N [tag]`")),
        }
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut report = EvalReport::new("");
    match (&a.run, &a.answers, &a.predictions) {
        (Some(run), None, None) => {
            let qrels_path = a.qrels.as_ref().ok_or_else(|| invalid("--run needs --qrels"))?;
            let run = read_trec_run(run)?;
            let qrels = read_qrels(qrels_path)?;
            let per_query: Vec<(Vec<String>, BTreeSet<String>)> = qrels
                .iter()
                .map(|(q, rel)| (run.get(q).map(|l| l.ids().map(str::to_string).collect()).unwrap_or_default(), rel.clone()))
                .collect();
            let counts = per_query.iter().fold(RetrievalCounts::default(), |c, (r, g)| c + RetrievalCounts::from_sets(r, g));
            let prf = micro_prf(counts);
            report.title = format!("{} queries", per_query.len());
            report.push("precision", prf.precision);
            report.push("recall", prf.recall);
            report.push("micro_f1", prf.f1);
            report.push("macro_f2", MetricSpec::MacroF2.evaluate(&per_query)?);
            for k in &a.recall_at {
                report.push(format!("R@{k}"), MetricSpec::RecallAtK(*k).evaluate(&per_query)?);
            }
        }
        (None, Some(answers), None) => {
            let gold_path = a.gold.as_ref().ok_or_else(|| invalid("--answers needs --gold"))?;
            let answers = read_answers(answers)?;
            let gold = read_yesno_jsonl(gold_path)?;
            let mut correct = 0;
            let mut total = 0;
            for item in &gold {
                let Some(label) = item.label else { continue };
                total += 1;
                match answers.get(&item.id) {
                    Some(a) if *a == label => correct += 1,
                    Some(_) => {}
                    None => eprintln!("warning: no answer for `{}`", item.id),
                }
            }
            report.title = format!("{total} questions");
            report.push("accuracy", accuracy(correct, total)?);
        }
        (None, None, Some(preds)) => {
            let gold_path = a.gold.as_ref().ok_or_else(|| invalid("--predictions needs --gold"))?;
            let preds: BTreeMap<String, _> = read_predictions(preds)?.into_iter().map(|p| (p.id.clone(), p)).collect();
            let gold = read_tort_jsonl(gold_path)?;
            let (mut tp_correct, mut tp_total) = (0, 0);
            let (mut pred_labels, mut gold_labels) = (Vec::new(), Vec::new());
            for case in &gold {
                let Some(p) = preds.get(&case.id) else {
                    eprintln!("warning: no prediction for `{}`", case.id);
                    continue;
                };
                if let Some(t) = case.tort_label {
                    tp_total += 1;
                    tp_correct += usize::from(p.tort == t);
                }
                let sides = [(&case.plaintiff_claims, &p.plaintiff_labels), (&case.defendant_claims, &p.defendant_labels)];
                for (claims, labels) in sides {
                    for (i, c) in claims.iter().enumerate() {
                        if let (Some(g), Some(l)) = (c.accepted, labels.get(i)) {
                            gold_labels.push(g);
                            pred_labels.push(*l);
                        }
                    }
                }
            }
            report.title = format!("{} cases", gold.len());
            if tp_total > 0 {
                report.push("tort_accuracy", accuracy(tp_correct, tp_total)?);
            }
            if !gold_labels.is_empty() {
                report.push("rationale_micro_f1", micro_f1_labels(&pred_labels, &gold_labels)?);
            }
        }
        _ => return Err(invalid("give exactly one of --run, --answers or --predictions")),
    }
    print!("{}", if a.json { report.to_json() + "\n" } else { report.to_text() });
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let mut reports: Vec<(String, StatsReport)> = Vec::new();
    for p in &a.corpora {
        reports.push((p.display().to_string(), corpus_stats(&read_tort_jsonl(p)?)));
    }
    if reports.len() > 1 {
        let all = reports.iter().skip(1).fold(reports[0].1.clone(), |acc, (_, r)| acc.merge(r));
        reports.push(("all".into(), all));
    }
    if a.json {
        let obj: BTreeMap<&str, &StatsReport> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        println!("{}", serde_json::to_string_pretty(&obj)?);
    } else {
        for (name, r) in &reports {
            println!("{name}\n{}", r.to_table());
        }
    }
    Ok(())
}

fn mock_serve(a: &MockServeArgs) -> Result<()> {
    let server = MockServer::bind(&a.addr, MockOptions { dim: a.dim, ..MockOptions::default() })?;
    eprintln!("mock embedding and chat service on {}", server.url());
    server.wait();
    Ok(())
}
