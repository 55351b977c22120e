//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use lexcourt::embedding::{cosine, Vector};
use lexcourt::eval::{accuracy, f_from_pr, recall_at_k, MetricSpec};
use lexcourt::fusion::{
    grid_search_weights, majority_vote_topm, normalize_scores, threshold_select, tune_threshold,
    weighted_combine, write_trec_run, NormalizationMode, SelectionRule,
};
use lexcourt::judgment::{re_refine, tp_reversal, PartyTally};
use lexcourt::lexical::{bm25_topk, build_index, Bm25Params, Tokenizer};
use lexcourt::llm::{agreement_vote, entail_select, extract_binary_answer, Answer, ChatMessage, ChatModel};
use lexcourt::mock::{mock_chat_reply, mock_embedding, MockOptions, MockServer, DEFAULT_MOCK_DIM};
use lexcourt::pipeline::{execute_run, preset, RunOptions};
use lexcourt::{Exec, Qrels, RankedList, ScoreTable};

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Outcome {
    ensure((got - want).abs() <= tol, || format!("{what} = {got:.6}, expected {want} ± {tol}"))
}

// 1 ------------------------------------------------------------------------

fn metric_fixtures() -> Outcome {
    close(f_from_pr(0.3788, 0.2762, 1.0), 0.3195, 1e-4, "F1(0.3788, 0.2762)")?;
    close(f_from_pr(0.2153, 0.3316, 1.0), 0.2611, 1e-4, "F1(0.2153, 0.3316)")?;
    close(accuracy(54, 73).map_err(|e| e.to_string())?, 0.7397, 1e-4, "accuracy(54, 73)")?;
    close(accuracy(66, 73).map_err(|e| e.to_string())?, 0.9041, 1e-4, "accuracy(66, 73)")
}

// 2 ------------------------------------------------------------------------

/// Scores every document straight from its token list; document
/// frequencies are counted per query term from per-document token sets.
fn bm25_oracle(docs: &[(String, Vec<String>)], query: &[String], p: &Bm25Params) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let sets: Vec<BTreeSet<&String>> = docs.iter().map(|(_, t)| t.iter().collect()).collect();
    let mut df: HashMap<&String, f64> = HashMap::new();
    for term in query {
        df.entry(term).or_insert_with(|| sets.iter().filter(|s| s.contains(term)).count() as f64);
    }
    let mut out = Vec::new();
    for (id, toks) in docs {
        let dl = toks.len() as f64;
        let mut s = 0.0;
        for term in query {
            let tf = toks.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let d = df[term];
            let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
            s += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * dl / avgdl));
        }
        if s > 0.0 {
            out.push((id.clone(), s));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn bm25_oracle_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let p = Bm25Params::default();
    for corpus in 0..50 {
        let vocab_size = rng.gen_range(2..=30);
        let vocab: Vec<String> = (0..vocab_size).map(|i| format!("t{i}")).collect();
        let n_docs = rng.gen_range(1..=200);
        let docs: Vec<(String, Vec<String>)> = (0..n_docs)
            .map(|d| {
                let len = rng.gen_range(1..=25);
                (format!("d{d:03}"), (0..len).map(|_| vocab[rng.gen_range(0..vocab_size)].clone()).collect())
            })
            .collect();
        let index = build_index(docs.iter().map(|(id, t)| (id.clone(), t.join(" "))), &Tokenizer::default())
            .map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let qlen = rng.gen_range(1..=6);
            let query: Vec<String> = (0..qlen).map(|_| vocab[rng.gen_range(0..vocab_size)].clone()).collect();
            let got = bm25_topk(&query.join(" "), &index, &p, n_docs).map_err(|e| e.to_string())?;
            let want = bm25_oracle(&docs, &query, &p);
            ensure(got.len() == want.len(), || {
                format!("corpus {corpus}: {} results, oracle {}", got.len(), want.len())
            })?;
            for ((gi, gs), (wi, ws)) in got.entries.iter().zip(&want) {
                ensure(gi == wi, || format!("corpus {corpus}: order differs at {gi} vs {wi}"))?;
                ensure((gs - ws).abs() <= 1e-9, || format!("corpus {corpus}: {gi} scored {gs}, oracle {ws}"))?;
            }
        }
    }
    Ok(())
}

// 3 ------------------------------------------------------------------------

/// Micro-F1 of top-1 picks under weights `w`, computed directly.
fn top1_micro_f1(tables: &[ScoreTable], qrels: &Qrels, w: &[f64]) -> f64 {
    let (mut hits, mut retrieved, mut relevant) = (0usize, 0usize, 0usize);
    for (q, rel) in qrels.iter() {
        let mut cands: BTreeSet<&String> = BTreeSet::new();
        for t in tables {
            if let Some(row) = t.scores.get(q) {
                cands.extend(row.keys());
            }
        }
        let mut best: Option<(&String, f64)> = None;
        for c in cands {
            let s: f64 = tables.iter().zip(w).map(|(t, wi)| wi * t.get(q, c).unwrap_or(0.0)).sum();
            if best.is_none_or(|(bc, bs)| s > bs || (s == bs && c < bc)) {
                best = Some((c, s));
            }
        }
        if let Some((c, _)) = best {
            retrieved += 1;
            hits += usize::from(rel.contains(c));
        }
        relevant += rel.len();
    }
    let (p, r) = (hits as f64 / retrieved as f64, hits as f64 / relevant as f64);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn fusion_recovery() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut qrels = Qrels::new();
    let mut tables = vec![ScoreTable::new("a"), ScoreTable::new("b"), ScoreTable::new("c")];
    for q in 0..40 {
        let qid = format!("q{q:02}");
        let rel = rng.gen_range(0..12);
        qrels.insert(qid.clone(), format!("c{rel:02}"));
        for c in 0..12 {
            let cid = format!("c{c:02}");
            tables[0].insert(qid.clone(), cid.clone(), if c == rel { 1.0 } else { 0.0 }).unwrap();
            tables[1].insert(qid.clone(), cid.clone(), rng.gen::<f64>()).unwrap();
            tables[2].insert(qid.clone(), cid, rng.gen::<f64>()).unwrap();
        }
    }
    let r = grid_search_weights(&tables, &qrels, MetricSpec::MicroF1, 0.1, SelectionRule::TopK { k: 1 }, Exec::default())
        .map_err(|e| e.to_string())?;
    close(r.objective, 1.0, 1e-12, "objective")?;
    let wa = r.weights.get("a").unwrap_or(0.0);
    ensure(wa >= 0.9, || format!("w_A = {wa}"))?;

    let mut best = f64::NEG_INFINITY;
    for i in 0..=10 {
        for j in 0..=10 - i {
            let w = [i as f64 / 10.0, j as f64 / 10.0, (10 - i - j) as f64 / 10.0];
            best = best.max(top1_micro_f1(&tables, &qrels, &w));
        }
    }
    close(r.objective, best, 1e-12, "objective vs exhaustive lattice")?;
    let at_returned = [wa, r.weights.get("b").unwrap_or(0.0), r.weights.get("c").unwrap_or(0.0)];
    close(top1_micro_f1(&tables, &qrels, &at_returned), r.objective, 1e-12, "objective at returned weights")
}

// 4 ------------------------------------------------------------------------

fn voting_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let universe: Vec<String> = (0..15).map(|i| format!("c{i:02}")).collect();
    for trial in 0..1000 {
        let lists: Vec<RankedList> = (0..3)
            .map(|_| {
                let mut ids = universe.clone();
                ids.shuffle(&mut rng);
                let len = rng.gen_range(0..=universe.len());
                RankedList::from_scores("q", ids.into_iter().take(len).enumerate().map(|(r, c)| (c, -(r as f64))))
            })
            .collect();
        let m = rng.gen_range(1..=10);
        let tops: Vec<BTreeSet<&str>> = lists.iter().map(|l| l.ids().take(m).collect()).collect();
        let picked: BTreeSet<String> = majority_vote_topm(&lists, m, None, None)
            .map_err(|e| e.to_string())?
            .into_iter()
            .collect();
        for c in tops[0].iter().filter(|c| tops[1].contains(*c) && tops[2].contains(*c)) {
            ensure(picked.contains(*c), || format!("trial {trial}: {c} in all three top-{m} but not selected"))?;
        }
        let mut prev: Option<BTreeSet<String>> = None;
        for quorum in 1..=3 {
            let s: BTreeSet<String> = majority_vote_topm(&lists, m, Some(quorum), None)
                .map_err(|e| e.to_string())?
                .into_iter()
                .collect();
            if let Some(p) = &prev {
                ensure(s.is_subset(p), || format!("trial {trial}: quorum {quorum} added candidates"))?;
            }
            prev = Some(s);
        }
    }
    Ok(())
}

// 5 ------------------------------------------------------------------------

fn agreement_voting() -> Outcome {
    let subset = |mask: u32| -> BTreeSet<usize> { (0..6).filter(|i| mask & (1 << i) != 0).collect() };
    for a in 0..64u32 {
        for b in 0..64u32 {
            let (sa, sb) = (subset(a), subset(b));
            let inter: BTreeSet<usize> = sa.intersection(&sb).copied().collect();
            let want = if inter.is_empty() { sa.union(&sb).copied().collect() } else { inter };
            let got = agreement_vote(&sa, &sb);
            ensure(got == want, || format!("{sa:?} vs {sb:?}: got {got:?}, want {want:?}"))?;
        }
    }
    Ok(())
}

// 6 ------------------------------------------------------------------------

fn judgment_heuristics() -> Outcome {
    for pa in 0..=5 {
        for pu in 0..=5 {
            for da in 0..=5 {
                for du in 0..=5 {
                    let (p, d) = (PartyTally::new(pa, pu), PartyTally::new(da, du));
                    let dominance = (pa > da && pu < du) || (da > pa && du < pu);
                    for pred in [false, true] {
                        let once = tp_reversal(pred, p, d);
                        ensure(tp_reversal(once, p, d) == once, || format!("not idempotent at {p:?} {d:?}"))?;
                        if !dominance {
                            ensure(once == pred, || format!("changed without dominance at {p:?} {d:?}"))?;
                        }
                    }
                }
            }
        }
    }
    for len in 0..=8u32 {
        for mask in 0..(1u32 << len) {
            let labels: Vec<bool> = (0..len).map(|i| mask & (1 << i) != 0).collect();
            let a = labels.iter().filter(|x| **x).count() as f64;
            let u = labels.len() as f64 - a;
            let out = re_refine(&labels, 2.0).map_err(|e| e.to_string())?;
            let want = if u > 0.0 && a >= 2.0 * u {
                vec![true; labels.len()]
            } else if a > 0.0 && u >= 2.0 * a {
                vec![false; labels.len()]
            } else {
                labels.clone()
            };
            ensure(out == want, || format!("re_refine({labels:?}) = {out:?}, want {want:?}"))?;
            let again = re_refine(&out, 2.0).map_err(|e| e.to_string())?;
            ensure(again == out, || format!("re_refine not idempotent on {labels:?}"))?;
        }
    }
    Ok(())
}

// 7 ------------------------------------------------------------------------

const ANSWER_FIXTURES: &[(&str, Answer)] = &[
    ("CONCLUSION: TRUE", Answer::Y),
    ("CONCLUSION: FALSE", Answer::N),
    ("conclusion: true", Answer::Y),
    ("Conclusion - false.", Answer::N),
    ("Analysis shows the article applies.\nCONCLUSION: YES", Answer::Y),
    ("CONCLUSION: NO", Answer::N),
    ("CONCLUSION: Y", Answer::Y),
    ("CONCLUSION: N", Answer::N),
    ("CONCLUSION: y", Answer::N),
    ("The answer is TRUE.", Answer::Y),
    ("The hypothesis is FALSE.", Answer::N),
    ("", Answer::N),
    ("I cannot determine the answer from the premise.", Answer::N),
    ("Step 1: TRUE\nStep 2: FALSE\nCONCLUSION: TRUE", Answer::Y),
    ("CONCLUSION: TRUE\nWait, reconsidering: FALSE", Answer::N),
    ("It might be FALSE. CONCLUSION: the premise entails the hypothesis, so TRUE", Answer::Y),
    ("結論: TRUE", Answer::Y),
    ("前提は仮説を含意しない。CONCLUSION: FALSE", Answer::N),
    ("CONCLUSION：TRUE", Answer::Y),
    ("Réponse : VRAI. CONCLUSION: TRUE", Answer::Y),
    ("TRUEly a FALSEhood", Answer::N),
    ("CONCLUSION: **TRUE**", Answer::Y),
    ("CONCLUSION: \"FALSE\"", Answer::N),
    ("conclusion: yes, the article applies", Answer::Y),
    ("conclusion: no, the article does not apply", Answer::N),
    ("Conclusion: it is not the case; FALSE", Answer::N),
    ("The answer: Y", Answer::Y),
    ("The answer: y", Answer::N),
    ("CONCLUSION: TRUE TRUE FALSE", Answer::N),
    ("CONCLUSION:\n\nTRUE\n", Answer::Y),
    ("Nothing conclusive here, TRUE", Answer::Y),
    ("In conclusion, the hypothesis holds: TRUE. Final CONCLUSION: FALSE", Answer::N),
    ("CONCLUSION: Das ist RICHTIG (TRUE)", Answer::Y),
    ("<think>maybe FALSE</think>\nCONCLUSION: TRUE", Answer::Y),
    ("CONCLUSION: N/A", Answer::N),
    ("ANSWER: NO\n", Answer::N),
    ("The premise says YES but the CONCLUSION is missing", Answer::Y),
];

fn answer_extraction() -> Outcome {
    ensure(ANSWER_FIXTURES.len() >= 30, || "fewer than 30 fixtures".into())?;
    let first: Vec<Answer> = ANSWER_FIXTURES.iter().map(|(r, _)| extract_binary_answer(r).value).collect();
    let second: Vec<Answer> = ANSWER_FIXTURES.iter().map(|(r, _)| extract_binary_answer(r).value).collect();
    ensure(first == second, || "re-run disagrees".into())?;
    for ((resp, want), got) in ANSWER_FIXTURES.iter().zip(&first) {
        ensure(got == want, || format!("{resp:?} -> {got}, expected {want}"))?;
    }
    Ok(())
}

// 8 ------------------------------------------------------------------------

struct MockModel(&'static str);

impl ChatModel for MockModel {
    fn model_name(&self) -> &str {
        self.0
    }
    fn complete(&self, messages: &[ChatMessage]) -> lexcourt::Result<String> {
        Ok(mock_chat_reply(self.0, messages))
    }
}

fn mock_vector(text: &str) -> Vector {
    Vector::new(mock_embedding(text, DEFAULT_MOCK_DIM)).unwrap()
}

/// The task2 chain composed from module calls: BM25 top-`k` per query, two
/// dense re-scorers over those candidates, min-max normalization, tuned
/// weights, then either a tuned threshold or LLM selection.
fn task2_oracle(fx: &common::Fixture, k: usize, tag: &str, models: Option<&[&dyn ChatModel]>) -> Vec<u8> {
    let qrels: Qrels = fx.data.iter().flat_map(|q| q.relevant.iter().map(|r| (q.id.clone(), r.clone()))).collect();
    let mut bm25 = ScoreTable::new("bm25");
    let mut dense = ScoreTable::new("dense");
    for q in &fx.data {
        let index = build_index(q.paragraphs.iter().cloned(), &Tokenizer::default()).unwrap();
        let list = bm25_topk(&q.text, &index, &Bm25Params::default(), k).unwrap();
        bm25.scores.entry(q.id.clone()).or_default();
        dense.scores.entry(q.id.clone()).or_default();
        let qv = mock_vector(&q.text);
        for (c, s) in &list.entries {
            bm25.insert(q.id.clone(), c.clone(), *s).unwrap();
            let text = &q.paragraphs.iter().find(|(id, _)| id == c).unwrap().1;
            dense.insert(q.id.clone(), c.clone(), cosine(&qv, &mock_vector(text)).unwrap()).unwrap();
        }
    }
    let mut mbert = normalize_scores(&dense, NormalizationMode::Minmax);
    mbert.scorer_name = "mbert".into();
    let mut monot5 = mbert.clone();
    monot5.scorer_name = "monot5".into();
    let tables = vec![normalize_scores(&bm25, NormalizationMode::Minmax), mbert, monot5];
    let g = grid_search_weights(&tables, &qrels, MetricSpec::MicroF1, 0.1, SelectionRule::TopK { k: 1 }, Exec::Sequential)
        .unwrap();
    let combined = weighted_combine(&tables, &g.weights, "combined").unwrap();
    let lists: Vec<RankedList> = fx.data.iter().map(|q| combined.ranked(&q.id)).collect();

    let selected: Vec<RankedList> = match models {
        None => {
            let grid: Vec<f64> = (0..=100).map(|x| x as f64 / 100.0).collect();
            let t = tune_threshold(&lists, &qrels, MetricSpec::MicroF1, &grid, true, Exec::Sequential).unwrap();
            lists
                .into_iter()
                .map(|l| {
                    let keep = threshold_select(&l, t.theta, true);
                    RankedList { entries: l.entries.into_iter().filter(|(c, _)| keep.contains(c)).collect(), query_id: l.query_id }
                })
                .collect()
        }
        Some(models) => fx
            .data
            .iter()
            .zip(lists)
            .map(|(q, l)| {
                let paragraphs: Vec<(usize, String)> = l
                    .ids()
                    .map(|c| (c.parse().unwrap(), q.paragraphs.iter().find(|(id, _)| id == c).unwrap().1.clone()))
                    .collect();
                let sel = entail_select(&q.text, &paragraphs, models).unwrap();
                RankedList {
                    entries: l.entries.into_iter().filter(|(c, _)| sel.ids.contains(&c.parse().unwrap())).collect(),
                    query_id: l.query_id,
                }
            })
            .collect(),
    };
    let mut out = Vec::new();
    write_trec_run(&selected, tag, &mut out).unwrap();
    out
}

fn end_to_end_determinism() -> Outcome {
    let fx = common::entailment_fixture(8, 10, 40);
    let server = MockServer::start(MockOptions::default()).map_err(|e| e.to_string())?;
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;

    let cases: [(&str, &[&str], usize); 2] = [("task2-run1", &[], 20), ("task2-run3", &["deepseek", "qwq"], 35)];
    for (name, llms, k) in cases {
        let out = work.path().join(format!("{name}.txt"));
        let cache = work.path().join(format!("cache-{name}"));
        let overrides = fx.task2_overrides(llms, server.url(), &out.display().to_string(), &cache.display().to_string());
        let cfg = preset(name, &overrides).map_err(|e| e.to_string())?;
        let cold = execute_run(&cfg, &RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        let cold_bytes = fs::read(&out).map_err(|e| e.to_string())?;
        let warm = execute_run(&cfg, &RunOptions { exec: Exec::Sequential, ..RunOptions::default() })
            .map_err(|e| format!("{name}: {e}"))?;
        let warm_bytes = fs::read(&out).map_err(|e| e.to_string())?;
        ensure(cold.requests > 0 && warm.requests == 0 && warm.cache_hits > 0, || {
            format!("{name}: cache not used (cold {} requests, warm {} requests)", cold.requests, warm.requests)
        })?;
        ensure(cold_bytes == warm_bytes && cold_bytes == cold.output, || format!("{name}: outputs differ between runs"))?;
        ensure(!cold_bytes.is_empty(), || format!("{name}: empty run file"))?;

        let deepseek = MockModel("deepseek-ai/DeepSeek-V3");
        let qwq = MockModel("Qwen/QwQ-32B");
        let models: Vec<&dyn ChatModel> = vec![&deepseek, &qwq];
        let oracle = task2_oracle(&fx, k, name, (!llms.is_empty()).then_some(models.as_slice()));
        ensure(oracle == cold_bytes, || {
            format!(
                "{name}: differs from hand-composed oracle\n--- pipeline\n{}--- oracle\n{}",
                String::from_utf8_lossy(&cold_bytes),
                String::from_utf8_lossy(&oracle)
            )
        })?;
    }
    Ok(())
}

// 9 ------------------------------------------------------------------------

fn recall_curve() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    for _ in 0..20 {
        let list = RankedList::from_scores("q", (0..100).map(|d| (format!("d{d:03}"), rng.gen::<f64>())));
        let n_rel = rng.gen_range(1..=10);
        let mut ids: Vec<String> = list.ids().map(str::to_string).collect();
        ids.shuffle(&mut rng);
        let relevant: BTreeSet<String> = ids.into_iter().take(n_rel).collect();
        let last_rank = list.ids().enumerate().filter(|(_, c)| relevant.contains(*c)).map(|(i, _)| i + 1).max().unwrap();
        let mut prev = 0.0;
        for k in 0..=100 {
            let r = recall_at_k(&list, &relevant, k);
            ensure(r >= prev, || format!("R@{k} = {r} < R@{} = {prev}", k - 1))?;
            if k < last_rank {
                ensure(r < 1.0, || format!("R@{k} = 1 before the last relevant rank {last_rank}"))?;
            } else {
                ensure(r == 1.0, || format!("R@{k} = {r} at or after rank {last_rank}"))?;
            }
            prev = r;
        }
    }
    Ok(())
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("metric fixtures", Duration::from_secs(1), metric_fixtures),
        ("BM25 oracle equivalence", Duration::from_secs(30), bm25_oracle_equivalence),
        ("fusion recovery", Duration::from_secs(10), fusion_recovery),
        ("voting properties", Duration::from_secs(10), voting_properties),
        ("agreement voting", Duration::from_secs(5), agreement_voting),
        ("judgment heuristics", Duration::from_secs(10), judgment_heuristics),
        ("answer extraction determinism", Duration::from_secs(1), answer_extraction),
        ("end-to-end determinism", Duration::from_secs(60), end_to_end_determinism),
        ("recall curve", Duration::from_secs(5), recall_curve),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|()| {
            ensure(elapsed <= *budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
        });
        match result {
            Ok(()) => println!("PASS {} {name} ({elapsed:.2?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({elapsed:.2?}): {e}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
