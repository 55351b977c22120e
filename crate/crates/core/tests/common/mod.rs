//! Synthetic per-query paragraph corpus shared by the end-to-end tests.
#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;

const LEGAL_WORDS: &[&str] = &[
    "court", "claim", "contract", "damages", "appeal", "tribunal", "statute", "breach", "liability",
    "evidence", "witness", "negligence", "duty", "remedy", "injunction", "tenant", "landlord", "employer",
    "employee", "immigration", "refugee", "minister", "decision", "review", "procedural", "fairness",
    "discretion", "jurisdiction", "hearing", "officer", "applicant", "respondent", "plaintiff", "defendant",
    "trademark", "patent", "copyright", "licence", "insurance", "policy", "coverage", "fraud",
    "misrepresentation", "estoppel", "limitation", "period", "custody", "support", "arbitration", "award",
];

pub struct FixtureQuery {
    pub id: String,
    pub text: String,
    /// `(paragraph id, text)`, ids are zero-padded numbers.
    pub paragraphs: Vec<(String, String)>,
    pub relevant: Vec<String>,
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub queries: PathBuf,
    pub paragraphs: PathBuf,
    pub qrels: PathBuf,
    pub data: Vec<FixtureQuery>,
}

fn words(rng: &mut StdRng, vocab: &[String], n: usize) -> Vec<String> {
    (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect()
}

/// `n_queries` queries with `n_paragraphs` candidate paragraphs each. One or
/// two paragraphs per query share most of the query's words; a few more share
/// a couple as distractors.
pub fn entailment_fixture(seed: u64, n_queries: usize, n_paragraphs: usize) -> Fixture {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut vocab: Vec<String> = LEGAL_WORDS.iter().map(|w| w.to_string()).collect();
    vocab.extend((0..150).map(|i| format!("term{i}")));

    let mut data = Vec::new();
    for qi in 0..n_queries {
        let qwords = words(&mut rng, &vocab, 10);
        let n_rel = rng.gen_range(1..=2);
        let mut slots: Vec<usize> = (0..n_paragraphs).collect();
        slots.shuffle(&mut rng);
        let rel_slots = &slots[..n_rel];
        let distractors = &slots[n_rel..n_rel + 4];
        let mut paragraphs = Vec::new();
        let mut relevant = Vec::new();
        for p in 0..n_paragraphs {
            let id = format!("{:03}", p + 1);
            let len = rng.gen_range(12..24);
            let mut w = words(&mut rng, &vocab, len);
            if rel_slots.contains(&p) {
                w.extend(qwords.choose_multiple(&mut rng, 7).cloned());
                relevant.push(id.clone());
            } else if distractors.contains(&p) {
                w.extend(qwords.choose_multiple(&mut rng, 2).cloned());
            }
            w.shuffle(&mut rng);
            paragraphs.push((id, w.join(" ")));
        }
        data.push(FixtureQuery {
            id: format!("q{:02}", qi + 1),
            text: qwords.join(" "),
            paragraphs,
            relevant,
        });
    }

    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("queries.jsonl");
    let paragraphs = dir.path().join("paragraphs.jsonl");
    let qrels = dir.path().join("qrels.txt");
    let mut q_out = String::new();
    let mut p_out = String::new();
    let mut r_out = String::new();
    for q in &data {
        q_out += &format!("{}\n", json!({"id": q.id, "text": q.text}));
        for (id, text) in &q.paragraphs {
            p_out += &format!("{}\n", json!({"query": q.id, "id": id, "text": text}));
        }
        for r in &q.relevant {
            r_out += &format!("{} 0 {} 1\n", q.id, r);
        }
    }
    fs::write(&queries, q_out).unwrap();
    fs::write(&paragraphs, p_out).unwrap();
    fs::write(&qrels, r_out).unwrap();
    Fixture { dir, queries, paragraphs, qrels, data }
}

impl Fixture {
    /// Overrides pointing a task2 preset at this fixture and a mock server.
    pub fn task2_overrides(&self, preset_llms: &[&str], url: &str, out: &str, cache: &str) -> Vec<String> {
        let mut o = vec![
            format!("inputs.queries={}", self.queries.display()),
            format!("inputs.candidates={}", self.paragraphs.display()),
            format!("inputs.qrels={}", self.qrels.display()),
            format!("output.path={out}"),
            format!("cache_dir={cache}"),
            format!("embedders.mbert.endpoint={url}"),
            format!("embedders.monot5.endpoint={url}"),
        ];
        o.extend(preset_llms.iter().map(|l| format!("llms.{l}.endpoint={url}")));
        o
    }
}
