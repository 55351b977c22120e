use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::extract::{agreement_vote, extract_paragraph_ids, Answer};
use super::{ChatMessage, ChatModel, PromptTemplate};
use crate::corpus::CaseDocument;
use crate::embedding::{cosine, EmbeddingStore};
use crate::{Error, Result};

/// Summarizes a case with the zero-shot summary prompt, truncating the case
/// text to `char_limit` characters.
pub fn summarize_case(case: &CaseDocument, model: &dyn ChatModel, char_limit: usize) -> Result<String> {
    let text = case.text();
    if text.trim().is_empty() {
        return Err(Error::InvalidInput(format!("case `{}` has no text to summarize", case.id)));
    }
    let truncated: String = text.chars().take(char_limit).collect();
    let prompt = PromptTemplate::builtin("case_summary")?.render(&[("INPUT_CASE", truncated.as_str())])?;
    model.complete(&[ChatMessage::user(prompt)])
}

/// Numbered paragraph block for the entailment prompt.
pub fn render_paragraph_list(paragraphs: &[(usize, String)]) -> String {
    paragraphs
        .iter()
        .map(|(i, t)| format!("Paragraph {i}: {t}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntailSelection {
    pub ids: BTreeSet<usize>,
    /// Extracted ids per model, `None` where the call failed.
    pub per_model: Vec<Option<BTreeSet<usize>>>,
    pub warnings: Vec<String>,
    /// The selection was empty and the top-ranked paragraph was used instead.
    pub fallback: bool,
}

/// Asks one or two models which paragraphs entail the query. Two models are
/// combined with [`agreement_vote`]. `paragraphs` is in rank order.
pub fn entail_select(
    query: &str,
    paragraphs: &[(usize, String)],
    models: &[&dyn ChatModel],
) -> Result<EntailSelection> {
    if paragraphs.is_empty() {
        return Err(Error::InvalidInput("no candidate paragraphs".into()));
    }
    if !(1..=2).contains(&models.len()) {
        return Err(Error::InvalidInput(format!("entailment needs 1 or 2 models, got {}", models.len())));
    }
    let prompt = PromptTemplate::builtin("paragraph_entailment")?
        .render(&[("query", query.to_string()), ("paragraphs", render_paragraph_list(paragraphs))])?;
    let messages = [ChatMessage::user(prompt)];
    let valid: BTreeSet<usize> = paragraphs.iter().map(|(i, _)| *i).collect();

    let mut warnings = Vec::new();
    let mut per_model = Vec::with_capacity(models.len());
    let mut first_err = None;
    for m in models {
        match m.complete(&messages) {
            Ok(reply) => {
                let got = extract_paragraph_ids(&reply, &valid);
                warnings.extend(got.warnings.into_iter().map(|w| format!("{}: {w}", m.model_name())));
                per_model.push(Some(got.ids));
            }
            Err(e) => {
                warnings.push(format!("{}: {e}", m.model_name()));
                first_err.get_or_insert(e);
                per_model.push(None);
            }
        }
    }
    let sets: Vec<&BTreeSet<usize>> = per_model.iter().flatten().collect();
    let mut ids = match sets.as_slice() {
        [] => return Err(first_err.expect("a failed call was recorded")),
        [one] => (*one).clone(),
        [a, b] => agreement_vote(a, b),
        _ => unreachable!("at most two models"),
    };
    let fallback = ids.is_empty();
    if fallback {
        ids.insert(paragraphs[0].0);
        warnings.push(format!("no paragraph extracted; using top-ranked paragraph {}", paragraphs[0].0));
    }
    Ok(EntailSelection {
        ids,
        per_model,
        warnings,
        fallback,
    })
}

/// A labeled training question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: Answer,
    #[serde(default)]
    pub articles: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: Answer,
}

impl From<&PoolItem> for FewShotExample {
    fn from(p: &PoolItem) -> Self {
        FewShotExample {
            premise: p.premise.clone(),
            hypothesis: p.hypothesis.clone(),
            label: p.label,
        }
    }
}

/// Picks up to `k` examples: pool items sharing relevant articles with the
/// query first (most shared, then id), then the rest by descending cosine
/// similarity of their vectors to the query's (then id).
pub fn select_fewshot_examples<'a>(
    query_id: &str,
    query_articles: &BTreeSet<String>,
    pool: &'a [PoolItem],
    vectors: &EmbeddingStore,
    k: usize,
) -> Result<Vec<&'a PoolItem>> {
    let candidates: Vec<&PoolItem> = pool.iter().filter(|p| p.id != query_id).collect();
    let want = k.min(candidates.len());
    let mut shared: Vec<(usize, &PoolItem)> = candidates
        .iter()
        .map(|p| (p.articles.intersection(query_articles).count(), *p))
        .filter(|(n, _)| *n > 0)
        .collect();
    shared.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let mut out: Vec<&PoolItem> = shared.into_iter().map(|(_, p)| p).take(want).collect();
    if out.len() == want {
        return Ok(out);
    }

    let q = vectors
        .get(query_id)
        .ok_or_else(|| Error::UnknownId(format!("no vector for query `{query_id}`")))?;
    let taken: BTreeSet<&str> = out.iter().map(|p| p.id.as_str()).collect();
    let mut rest = Vec::new();
    for p in candidates.iter().filter(|p| !taken.contains(p.id.as_str())) {
        let v = vectors
            .get(&p.id)
            .ok_or_else(|| Error::UnknownId(format!("no vector for pool item `{}`", p.id)))?;
        rest.push((cosine(q, v)?, *p));
    }
    rest.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.id.cmp(&b.1.id),
        o => o,
    });
    out.extend(rest.into_iter().map(|(_, p)| p).take(want - out.len()));
    Ok(out)
}

/// The yes/no prompt in the order system, instruction, premise, hypothesis,
/// examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInput {
    pub system: String,
    pub instruction: String,
    pub premise: String,
    pub hypothesis: String,
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
}

fn render_examples(examples: &[FewShotExample]) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let verdict = if e.label == Answer::Y { "TRUE" } else { "FALSE" };
            format!(
                "Example {}:\nPremise: {}\nHypothesis: {}\nCONCLUSION: {verdict}",
                i + 1,
                e.premise,
                e.hypothesis
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// System message plus one user message; the zero-shot template is used when
/// there are no examples.
pub fn compose_messages(input: &PromptInput) -> Result<Vec<ChatMessage>> {
    let mut bindings = vec![
        ("instruction", input.instruction.trim_end().to_string()),
        ("premise", input.premise.clone()),
        ("hypothesis", input.hypothesis.clone()),
    ];
    let template = if input.examples.is_empty() {
        PromptTemplate::builtin("yesno_zero_shot")?
    } else {
        bindings.push(("examples", render_examples(&input.examples)));
        PromptTemplate::builtin("yesno_few_shot")?
    };
    let mut messages = Vec::with_capacity(2);
    if !input.system.is_empty() {
        messages.push(ChatMessage::system(input.system.clone()));
    }
    messages.push(ChatMessage::user(template.render(&bindings)?));
    Ok(messages)
}
