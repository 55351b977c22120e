//! Deterministic stand-ins for the embedding and chat services, served over
//! HTTP on a local port. Used by the end-to-end tests and `mock-serve`.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::llm::{ChatMessage, Role};
use crate::{Error, Result};

pub const DEFAULT_MOCK_DIM: usize = 64;

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Signed feature hashing of lower-cased word tokens. Never all-zero.
pub fn mock_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim.max(1)];
    for t in tokens(text) {
        let h = Sha256::digest(t.as_bytes());
        let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % v.len();
        v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

fn model_variant(model: &str, n: usize) -> usize {
    model.bytes().map(usize::from).sum::<usize>() % n
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text[from..].find(end).map_or(text.len(), |i| from + i);
    Some(text[from..to].trim())
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> usize {
    a.intersection(b).count()
}

fn entailment_reply(model: &str, prompt: &str) -> String {
    let query = token_set(between(prompt, "Query (Decision of the New Case):", "Paragraphs from the Noticed Case:").unwrap_or(""));
    let block = between(prompt, "Paragraphs from the Noticed Case:", "Which paragraph(s)").unwrap_or("");
    let paras: Vec<(usize, BTreeSet<String>)> = block
        .split("\n\n")
        .filter_map(|p| {
            let rest = p.trim().strip_prefix("Paragraph ")?;
            let (n, text) = rest.split_once(':')?;
            Some((n.trim().parse().ok()?, token_set(text)))
        })
        .collect();
    if paras.is_empty() {
        return "I could not find any paragraphs.".into();
    }
    if model_variant(model, 2) == 0 {
        let best = paras
            .iter()
            .enumerate()
            .max_by_key(|(pos, (_, t))| (overlap(&query, t), std::cmp::Reverse(*pos)))
            .map(|(_, (n, _))| *n)
            .expect("non-empty");
        format!("After reviewing the candidates, Paragraph {best} contains the reasoning that supports the decision.")
    } else {
        let mut scored: Vec<(f64, usize, usize)> = paras
            .iter()
            .enumerate()
            .map(|(pos, (n, t))| (overlap(&query, t) as f64 / (t.len().max(1) as f64).sqrt(), pos, *n))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        match scored.as_slice() {
            [only] => format!("Paragraph {}.", only.2),
            [a, b, ..] => format!("The answer is Paragraphs {} and {}.", a.2, b.2),
            [] => unreachable!(),
        }
    }
}

fn yesno_reply(model: &str, prompt: &str) -> String {
    let premise = token_set(between(prompt, "Premise:", "Hypothesis:").unwrap_or(""));
    let hyp = token_set(between(prompt, "Hypothesis:", "Examples:").unwrap_or(""));
    let ratio = overlap(&premise, &hyp) as f64 / hyp.len().max(1) as f64;
    let threshold = [0.4, 0.5, 0.6][model_variant(model, 3)];
    let verdict = if ratio >= threshold { "TRUE" } else { "FALSE" };
    format!(
        "Step 1: the premise states the requirements.\nStep 2: {:.0}% of the hypothesis terms appear in the premise.\nCONCLUSION: {verdict}",
        ratio * 100.0
    )
}

fn verdict_reply(prompt: &str) -> String {
    let facts = token_set(between(prompt, "Undisputed facts:", "Claims in this sub-argument:").unwrap_or(""));
    let claims = between(prompt, "Claims in this sub-argument:", "Decide which party").unwrap_or("");
    let (mut p, mut d) = (0, 0);
    let mut accepted = Vec::new();
    for line in claims.lines() {
        let Some(rest) = line.trim().strip_prefix("- ") else { continue };
        let Some((label, text)) = rest.split_once(':') else { continue };
        let label = label.split_whitespace().next().unwrap_or("");
        let score = overlap(&facts, &token_set(text));
        if label.starts_with('P') {
            p += score;
        } else {
            d += score;
        }
        if score > 0 {
            accepted.push(label.to_string());
        }
    }
    let winner = if p > d { "plaintiff" } else { "defendant" };
    let accepted = if accepted.is_empty() { "none".to_string() } else { accepted.join(", ") };
    format!("WINNER: {winner}\nACCEPTED CLAIMS: {accepted}")
}

/// The mock's reply to a conversation; depends only on the model name and
/// the last user message.
pub fn mock_chat_reply(model: &str, messages: &[ChatMessage]) -> String {
    let prompt = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map_or("", |m| m.content.as_str());
    if prompt.contains("Paragraphs from the Noticed Case:") {
        entailment_reply(model, prompt)
    } else if prompt.contains("Generated summary:") {
        let case = between(prompt, "Legal case:", "Generated summary:").unwrap_or("");
        let words: Vec<&str> = case.split_whitespace().take(30).collect();
        format!("SUMMARY: {}", words.join(" "))
    } else if prompt.contains("Hypothesis:") {
        yesno_reply(model, prompt)
    } else if prompt.contains("ACCEPTED CLAIMS:") {
        verdict_reply(prompt)
    } else {
        "I am not sure how to answer.".into()
    }
}

#[derive(Debug, Clone)]
pub struct MockOptions {
    pub dim: usize,
    /// Reply 503 to this many requests before serving normally.
    pub fail_first: usize,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            dim: DEFAULT_MOCK_DIM,
            fail_first: 0,
        }
    }
}

fn handle(body: &str, url: &str, opts: &MockOptions) -> (u16, Value) {
    let Ok(req) = serde_json::from_str::<Value>(body) else {
        return (400, json!({"error": "malformed JSON"}));
    };
    let model = req.get("model").and_then(Value::as_str).unwrap_or("").to_string();
    if url.ends_with("/v1/embeddings") {
        let inputs: Vec<String> = match req.get("input") {
            Some(Value::String(s)) => vec![s.clone()],
            Some(Value::Array(a)) => a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect(),
            _ => return (400, json!({"error": "missing input"})),
        };
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"object": "embedding", "index": i, "embedding": mock_embedding(t, opts.dim)}))
            .collect();
        (200, json!({"object": "list", "model": model, "data": data}))
    } else if url.ends_with("/v1/chat/completions") {
        let Ok(messages) = serde_json::from_value::<Vec<ChatMessage>>(req.get("messages").cloned().unwrap_or_default())
        else {
            return (400, json!({"error": "bad messages"}));
        };
        let content = mock_chat_reply(&model, &messages);
        (
            200,
            json!({
                "object": "chat.completion",
                "model": model,
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
            }),
        )
    } else {
        (404, json!({"error": format!("no route for {url}")}))
    }
}

/// Serves `/v1/embeddings` and `/v1/chat/completions` until dropped.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    url: String,
    requests: Arc<AtomicUsize>,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub fn start(opts: MockOptions) -> Result<Self> {
        Self::bind("127.0.0.1:0", opts)
    }

    pub fn bind(addr: &str, opts: MockOptions) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Service(format!("cannot bind {addr}: {e}")))?;
        let port = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Service("mock server has no IP address".into()))?
            .port();
        let server = Arc::new(server);
        let requests = Arc::new(AtomicUsize::new(0));
        let worker = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let seen = requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let (status, reply) = if seen < opts.fail_first {
                        (503, json!({"error": "warming up"}))
                    } else {
                        handle(&body, req.url(), &opts)
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
                    let resp = tiny_http::Response::from_string(reply.to_string())
                        .with_status_code(status)
                        .with_header(header);
                    let _ = req.respond(resp);
                }
            })
        };
        Ok(MockServer {
            server,
            url: format!("http://127.0.0.1:{port}"),
            requests,
            worker: Some(worker),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks the calling thread until the process is killed.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::ResponseCache;
    use crate::embedding::{EmbeddingClient, EmbeddingServiceConfig};
    use crate::llm::{entail_select, summarize_case, ChatModel, HttpChatClient, LlmClientConfig};

    fn chat(url: &str, model: &str, cache: ResponseCache) -> HttpChatClient {
        HttpChatClient::new(
            LlmClientConfig {
                endpoint: url.into(),
                model: model.into(),
                retry_backoff_ms: 1,
                ..Default::default()
            },
            cache,
        )
        .unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_nonzero() {
        assert_eq!(mock_embedding("The Court held", 16), mock_embedding("the court HELD", 16));
        assert!(mock_embedding("", 8).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn serves_embeddings_with_cache() {
        let server = MockServer::start(MockOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = EmbeddingServiceConfig {
            endpoint: server.url().into(),
            model: "mock-embed".into(),
            batch_size: 2,
            ..Default::default()
        };
        let texts: Vec<String> = ["a b", "c d", "e", "a b"].iter().map(|s| s.to_string()).collect();
        let client = EmbeddingClient::new(cfg.clone(), ResponseCache::new(dir.path())).unwrap();
        let vs = client.embed_texts(&texts).unwrap();
        assert_eq!(vs[0].as_slice(), mock_embedding("a b", DEFAULT_MOCK_DIM).as_slice());
        assert_eq!(vs[0], vs[3]);
        assert_eq!(client.request_count(), 2);

        let warm = EmbeddingClient::new(cfg, ResponseCache::new(dir.path())).unwrap();
        assert_eq!(warm.embed_texts(&texts).unwrap(), vs);
        assert_eq!(warm.request_count(), 0);
    }

    #[test]
    fn chat_summary_is_cached() {
        let server = MockServer::start(MockOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let client = chat(server.url(), "mock-a", ResponseCache::new(dir.path()));
        let case = crate::corpus::CaseDocument::from_paragraphs("c", ["The applicant seeks judicial review."]);
        let first = summarize_case(&case, &client, 1000).unwrap();
        assert!(first.starts_with("SUMMARY: The applicant"));
        assert_eq!(summarize_case(&case, &client, 1000).unwrap(), first);
        assert_eq!(client.request_count(), 1);
        assert_eq!(server.request_count(), 1);
    }

    #[test]
    fn retries_through_transient_failures() {
        let server = MockServer::start(MockOptions {
            fail_first: 2,
            ..Default::default()
        })
        .unwrap();
        let client = chat(server.url(), "mock-a", ResponseCache::disabled());
        let reply = client.complete(&[ChatMessage::user("hello")]).unwrap();
        assert_eq!(reply, "I am not sure how to answer.");
        assert_eq!(client.request_count(), 3);
    }

    #[test]
    fn entailment_through_http() {
        let server = MockServer::start(MockOptions::default()).unwrap();
        let a = chat(server.url(), "mock-a", ResponseCache::disabled());
        let paras = vec![
            (1, "Costs are awarded to the respondent.".to_string()),
            (2, "The officer failed to consider the evidence of risk.".to_string()),
        ];
        let r = entail_select("The officer did not consider the risk evidence.", &paras, &[&a]).unwrap();
        assert_eq!(r.ids, BTreeSet::from([2]));
        assert!(!r.fallback);
    }

    #[test]
    fn unknown_route_is_not_retried() {
        let server = MockServer::start(MockOptions::default()).unwrap();
        let poster = crate::http::JsonPoster::new(crate::http::RetryPolicy {
            max_retries: 3,
            timeout: std::time::Duration::from_secs(5),
            backoff: std::time::Duration::from_millis(1),
        });
        let err = poster.post(&format!("{}/nope", server.url()), &json!({})).unwrap_err();
        assert!(matches!(err, Error::Service(_)));
        assert_eq!(server.request_count(), 1);
    }
}
