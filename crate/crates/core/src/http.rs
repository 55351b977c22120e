//! Blocking JSON-over-HTTP with retries, shared by the embedding and chat
//! clients.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::Value;

use crate::{Error, Result};

/// Environment variable holding the bearer token for remote services.
pub const API_KEY_ENV: &str = "LEXCOURT_API_KEY";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub timeout: Duration,
    /// Delay before the first retry; doubles on each subsequent attempt.
    pub backoff: Duration,
}

pub struct JsonPoster {
    agent: ureq::Agent,
    policy: RetryPolicy,
    api_key: Option<String>,
    requests: AtomicUsize,
}

impl JsonPoster {
    pub fn new(policy: RetryPolicy) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(policy.timeout))
            .http_status_as_error(false)
            .build();
        JsonPoster {
            agent: config.into(),
            policy,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            requests: AtomicUsize::new(0),
        }
    }

    /// Network requests issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// POSTs `body` and parses the JSON reply. Transport errors, 429 and 5xx
    /// are retried; other statuses fail immediately.
    pub fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut delay = self.policy.backoff;
        let mut last = String::new();
        for attempt in 0..=self.policy.max_retries {
            if attempt > 0 && !delay.is_zero() {
                std::thread::sleep(delay);
                delay *= 2;
            }
            self.requests.fetch_add(1, Ordering::Relaxed);
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send(body.to_string()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text)
                            .map_err(|e| Error::Service(format!("{url}: malformed JSON reply: {e}")));
                    }
                    last = format!("{url}: HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    if status != 429 && status < 500 {
                        return Err(Error::Service(last));
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
        }
        Err(Error::Service(format!(
            "giving up after {} attempts: {last}",
            self.policy.max_retries + 1
        )))
    }
}

/// Appends `path` to `base` unless `base` already ends with it.
pub fn endpoint_url(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}{path}")
    }
}

/// Runs `f` over `items` with at most `limit` calls in flight, preserving
/// output order.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let limit = limit.max(1).min(items.len().max(1));
    if limit == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..limit {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}
