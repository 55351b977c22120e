//! Vector stores, similarity search, and the embedding-service client.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::{sha256_hex, ResponseCache};
use crate::fusion::RankedList;
use crate::http::{bounded_map, endpoint_url, JsonPoster, RetryPolicy};
use crate::{Error, Exec, Result};

/// Finite, fixed-length vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("empty vector".into()));
        }
        if components.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite vector component".into()));
        }
        Ok(Vector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Vector> {
        Vector::new(self.0.iter().map(|x| x * alpha).collect())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

fn check_dims(u: &Vector, v: &Vector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

pub fn dot(u: &Vector, v: &Vector) -> Result<f64> {
    check_dims(u, v)?;
    Ok(u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    let d = dot(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    pub fn score(self, u: &Vector, v: &Vector) -> Result<f64> {
        match self {
            Similarity::Cosine => cosine(u, v),
            Similarity::Dot => dot(u, v),
        }
    }
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            _ => Err(Error::InvalidInput(format!("unknown similarity `{s}`"))),
        }
    }
}

/// Vectors of one dimension keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vector>,
    pub source_tag: String,
}

impl EmbeddingStore {
    pub fn new(dim: usize, source_tag: impl Into<String>) -> Self {
        EmbeddingStore {
            dim,
            vectors: BTreeMap::new(),
            source_tag: source_tag.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vector) -> Result<()> {
        let id = id.into();
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Vector> {
        self.vectors.get(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parses a vector file: `dim=D` header then `id<TAB>v1,...,vD` lines.
    pub fn read(path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let dim = lines
            .next()
            .and_then(|(_, l)| l.trim().strip_prefix("dim="))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::format(&shown, 1, "expected header `dim=<D>`"))?;
        let tag = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let mut store = EmbeddingStore::new(dim, tag);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&shown, i + 1, "expected id<TAB>values"))?;
            let comps = vals
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(&shown, i + 1, e.to_string()))?;
            let v = Vector::new(comps).map_err(|e| Error::format(&shown, i + 1, e.to_string()))?;
            store.insert(id, v).map_err(|e| Error::format(&shown, i + 1, e.to_string()))?;
        }
        Ok(store)
    }

    /// Components are written in shortest round-trip form.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for (id, v) in &self.vectors {
            let comps: Vec<String> = v.0.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{id}\t{}", comps.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// Ranks every candidate against one query vector.
pub fn rank_candidates(
    query_id: &str,
    query: &Vector,
    candidates: &EmbeddingStore,
    k: usize,
    sim: Similarity,
) -> Result<RankedList> {
    if query.dim() != candidates.dim() {
        return Err(Error::DimensionMismatch {
            expected: candidates.dim(),
            actual: query.dim(),
        });
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, v) in candidates.iter() {
        scored.push((id.to_string(), sim.score(query, v)?));
    }
    Ok(RankedList::from_scores(query_id, scored).top(k))
}

/// Top-`k` candidates for a stored query, ties by ascending candidate id.
pub fn topk_similar(
    query_id: &str,
    queries: &EmbeddingStore,
    candidates: &EmbeddingStore,
    k: usize,
    sim: Similarity,
) -> Result<RankedList> {
    if queries.dim() != candidates.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            actual: candidates.dim(),
        });
    }
    let q = queries
        .get(query_id)
        .ok_or_else(|| Error::UnknownId(query_id.to_string()))?;
    rank_candidates(query_id, q, candidates, k, sim)
}

/// [`topk_similar`] for every query in `query_ids`.
pub fn topk_similar_batch(
    query_ids: &[String],
    queries: &EmbeddingStore,
    candidates: &EmbeddingStore,
    k: usize,
    sim: Similarity,
    exec: Exec,
) -> Result<Vec<RankedList>> {
    exec.map(query_ids, |q| topk_similar(q, queries, candidates, k, sim))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingServiceConfig {
    /// Base URL; `/v1/embeddings` is appended when missing.
    pub endpoint: String,
    pub model: String,
    pub batch_size: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry_backoff_ms: u64,
}

impl Default for EmbeddingServiceConfig {
    fn default() -> Self {
        EmbeddingServiceConfig {
            endpoint: "http://localhost:8000".into(),
            model: "bge-m3".into(),
            batch_size: 32,
            max_retries: 3,
            timeout_secs: 120,
            max_in_flight: 4,
            retry_backoff_ms: 500,
        }
    }
}

/// Client for `/v1/embeddings`-shaped services, with an on-disk cache keyed
/// by (model, text).
pub struct EmbeddingClient {
    cfg: EmbeddingServiceConfig,
    poster: JsonPoster,
    cache: ResponseCache,
}

impl EmbeddingClient {
    pub fn new(cfg: EmbeddingServiceConfig, cache: ResponseCache) -> Result<Self> {
        if cfg.batch_size < 1 {
            return Err(Error::Config("embedding batch_size must be >= 1".into()));
        }
        let poster = JsonPoster::new(RetryPolicy {
            max_retries: cfg.max_retries,
            timeout: Duration::from_secs(cfg.timeout_secs),
            backoff: Duration::from_millis(cfg.retry_backoff_ms),
        });
        Ok(EmbeddingClient { cfg, poster, cache })
    }

    pub fn config(&self) -> &EmbeddingServiceConfig {
        &self.cfg
    }

    pub fn request_count(&self) -> usize {
        self.poster.request_count()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn key(&self, text: &str) -> String {
        sha256_hex(&[self.cfg.model.as_bytes(), text.as_bytes()])
    }

    /// One vector per input text, in order.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vector>> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("no texts to embed".into()));
        }
        let mut found: HashMap<&str, Vector> = HashMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for t in texts {
            if found.contains_key(t.as_str()) || missing.contains(&t.as_str()) {
                continue;
            }
            match self.cache.get(&self.key(t)).and_then(|s| serde_json::from_str::<Vector>(&s).ok()) {
                Some(v) => {
                    found.insert(t, v);
                }
                None => missing.push(t),
            }
        }

        let batches: Vec<&[&str]> = missing.chunks(self.cfg.batch_size).collect();
        let url = endpoint_url(&self.cfg.endpoint, "/v1/embeddings");
        let results = bounded_map(&batches, self.cfg.max_in_flight, |batch| {
            let body = json!({ "model": self.cfg.model, "input": batch });
            let reply = self.poster.post(&url, &body)?;
            parse_embeddings(&reply, batch.len())
        });
        for (batch, result) in batches.iter().zip(results) {
            for (text, v) in batch.iter().zip(result?) {
                self.cache.put(&self.key(text), &serde_json::to_string(&v)?)?;
                found.insert(text, v);
            }
        }

        let out: Vec<Vector> = texts.iter().map(|t| found[t.as_str()].clone()).collect();
        let dim = out[0].dim();
        if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(out)
    }

    /// Embeds `(id, text)` pairs into a store tagged with the model name.
    pub fn embed_store(&self, items: &[(String, String)]) -> Result<EmbeddingStore> {
        let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
        let vectors = self.embed_texts(&texts)?;
        let mut store = EmbeddingStore::new(vectors[0].dim(), self.cfg.model.clone());
        for ((id, _), v) in items.iter().zip(vectors) {
            store.insert(id.clone(), v)?;
        }
        Ok(store)
    }
}

/// Accepts `{"data": [{"embedding": [...], "index": i}, ...]}`.
fn parse_embeddings(reply: &Value, expected: usize) -> Result<Vec<Vector>> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Service("embedding reply lacks `data` array".into()))?;
    let mut rows: Vec<(usize, Vector)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let idx = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let comps: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Service("embedding item lacks `embedding`".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Service("non-numeric embedding".into())))
            .collect::<Result<_>>()?;
        rows.push((idx, Vector::new(comps).map_err(|e| Error::Service(e.to_string()))?));
    }
    if rows.len() != expected {
        return Err(Error::Service(format!(
            "embedding reply has {} vectors for {expected} inputs",
            rows.len()
        )));
    }
    rows.sort_by_key(|r| r.0);
    let dim = rows[0].1.dim();
    if let Some((_, bad)) = rows.iter().find(|(_, v)| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

/// Free-function form of [`EmbeddingClient::embed_texts`].
pub fn embed_texts(client: &EmbeddingClient, texts: &[String]) -> Result<Vec<Vector>> {
    client.embed_texts(texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&v(&[1.0, 2.0, 2.0]), &v(&[1.0, 2.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(Error::ZeroNorm)));
        assert!(Vector::new(vec![f64::NAN]).is_err());
    }

    fn store(tag: &str, rows: &[(&str, &[f64])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(rows[0].1.len(), tag);
        for (id, xs) in rows {
            s.insert(*id, v(xs)).unwrap();
        }
        s
    }

    #[test]
    fn topk_examples() {
        let q = store("q", &[("q1", &[1.0, 0.0])]);
        let c = store("c", &[("c1", &[1.0, 0.0]), ("c2", &[0.0, 1.0])]);
        let r = topk_similar("q1", &q, &c, 5, Similarity::Cosine).unwrap();
        assert_eq!(r.entries, vec![("c1".to_string(), 1.0), ("c2".to_string(), 0.0)]);
        assert!(matches!(topk_similar("zz", &q, &c, 5, Similarity::Cosine), Err(Error::UnknownId(_))));
        let c3 = store("c", &[("c1", &[1.0, 0.0, 0.0])]);
        assert!(topk_similar("q1", &q, &c3, 5, Similarity::Cosine).is_err());
    }

    #[test]
    fn store_rejects_bad_inserts() {
        let mut s = EmbeddingStore::new(2, "t");
        s.insert("a", v(&[1.0, 2.0])).unwrap();
        assert!(matches!(s.insert("a", v(&[1.0, 2.0])), Err(Error::DuplicateId(_))));
        assert!(matches!(s.insert("b", v(&[1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn vector_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pre.vec");
        let s = store("pre", &[("a", &[0.1, -2.5e-7]), ("b", &[1.0 / 3.0, 7.0])]);
        s.write(&p).unwrap();
        assert_eq!(EmbeddingStore::read(&p).unwrap(), s);

        fs::write(&p, "dim=2\na\t1,2,3\n").unwrap();
        assert!(matches!(EmbeddingStore::read(&p), Err(Error::Format { line: 2, .. })));
        fs::write(&p, "a\t1,2\n").unwrap();
        assert!(matches!(EmbeddingStore::read(&p), Err(Error::Format { line: 1, .. })));
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_properties(u in arb_vec(5), w in arb_vec(5), alpha in 0.01f64..100.0) {
            let (u, w) = (v(&u), v(&w));
            let a = cosine(&u, &w).unwrap();
            prop_assert_eq!(a, cosine(&w, &u).unwrap());
            prop_assert!(a.abs() <= 1.0);
            prop_assert!((cosine(&u, &u.scaled(alpha).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn topk_matches_exhaustive_and_is_scale_invariant(
            cands in prop::collection::vec(arb_vec(4), 1..60),
            q in arb_vec(4),
            k in 1usize..10,
            exp in -4i32..5,
        ) {
            let mut cs = EmbeddingStore::new(4, "c");
            let mut scaled = EmbeddingStore::new(4, "c");
            let alpha = 2f64.powi(exp);
            for (i, c) in cands.iter().enumerate() {
                cs.insert(format!("c{i:03}"), v(c)).unwrap();
                scaled.insert(format!("c{i:03}"), v(c).scaled(alpha).unwrap()).unwrap();
            }
            let mut qs = EmbeddingStore::new(4, "q");
            qs.insert("q", v(&q)).unwrap();
            let got = topk_similar("q", &qs, &cs, k, Similarity::Cosine).unwrap();

            // exhaustive oracle: score all, sort, cut
            let qv = v(&q);
            let mut all: Vec<(String, f64)> = cands.iter().enumerate().map(|(i, c)| {
                let c = v(c);
                let s = qv.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>() / (qv.norm() * c.norm());
                (format!("c{i:03}"), s.clamp(-1.0, 1.0))
            }).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(&got.entries, &all);

            let s = topk_similar("q", &qs, &scaled, k, Similarity::Cosine).unwrap();
            prop_assert_eq!(got.ids().collect::<Vec<_>>(), s.ids().collect::<Vec<_>>());
        }
    }
}
