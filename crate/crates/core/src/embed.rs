//! Sentence embeddings for idea texts: remote OpenAI-compatible backend, an
//! offline hashing backend, and a persistent content-addressed cache.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transport::{EndpointConfig, JsonClient, RetryPolicy};

/// An L2-normalized embedding tagged with the model that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn normalized(mut values: Vec<f64>, model_id: impl Into<String>) -> Result<Self> {
        l2_normalize(&mut values)?;
        Ok(Self {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub fn l2_normalize(values: &mut [f64]) -> Result<()> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::InvalidInput(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(())
}

/// Cosine similarity of two unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A source of raw (not necessarily normalized) embeddings.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Client for `POST {base_url}/embeddings`.
pub struct HttpEmbedder {
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(endpoint, retry)?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.client.endpoint().model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let request = EmbeddingRequest {
            model: self.model_id(),
            input: texts,
        };
        let response: EmbeddingResponse = self.client.post("embeddings", &request)?;
        order_response(response, texts.len())
    }
}

fn order_response(response: EmbeddingResponse, expected: usize) -> Result<Vec<Vec<f64>>> {
    if response.data.len() != expected {
        return Err(Error::Transport(format!(
            "embedding endpoint returned {} vectors for {expected} inputs",
            response.data.len()
        )));
    }
    let mut data = response.data;
    if data.iter().all(|d| d.index.is_some()) {
        data.sort_by_key(|d| d.index);
    }
    Ok(data.into_iter().map(|d| d.embedding).collect())
}

/// Deterministic offline embedder built from hashed word and character
/// trigram features. Useful for tests and fully offline runs; it captures
/// lexical overlap only.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    dim: usize,
    model_id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(8),
            model_id: format!("hashing-{}", dim.max(8)),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[slot] += sign * weight;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            add(word, 1.0);
            let padded: Vec<char> = format!(" {word} ").chars().collect();
            for tri in padded.windows(3) {
                add(&tri.iter().collect::<String>(), 0.5);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Embedder for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Cache key: SHA-256 over the model id and the exact text.
pub fn cache_key(model_id: &str, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    text: String,
    embedding: Vec<f64>,
}

/// Normalized embeddings keyed by content hash, optionally persisted as
/// JSON lines (appended as new entries arrive).
#[derive(Default)]
pub struct EmbeddingCache {
    entries: HashMap<String, Vec<f64>>,
    dims: HashMap<String, usize>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first write) a cache file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut cache = Self {
            path: Some(path.clone()),
            ..Self::default()
        };
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)?;
                cache.check_dim(&entry.model, entry.embedding.len())?;
                cache.entries.insert(entry.key, entry.embedding);
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<&[f64]> {
        self.entries.get(&cache_key(model_id, text)).map(Vec::as_slice)
    }

    fn check_dim(&mut self, model: &str, dim: usize) -> Result<()> {
        match self.dims.get(model) {
            Some(&d) if d != dim => Err(Error::Config(format!(
                "embedding dimension {dim} for model {model} does not match cached dimension {d}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.dims.insert(model.to_string(), dim);
                Ok(())
            }
        }
    }

    /// Inserts already-normalized vectors and appends them to the backing file.
    pub fn insert_many(&mut self, model_id: &str, items: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (_, v) in &items {
            self.check_dim(model_id, v.len())?;
        }
        let mut writer = match &self.path {
            Some(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some((path.clone(), BufWriter::new(file)))
            }
            None => None,
        };
        for (text, embedding) in items {
            let key = cache_key(model_id, &text);
            if let Some((path, w)) = writer.as_mut() {
                let line = CacheLine {
                    key: key.clone(),
                    model: model_id.to_string(),
                    text,
                    embedding,
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
                self.entries.insert(key, line.embedding);
            } else {
                self.entries.insert(key, embedding);
            }
        }
        if let Some((path, mut w)) = writer {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Maximum number of batches in flight at once.
    pub parallelism: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            parallelism: 4,
        }
    }
}

/// An [`Embedder`] fronted by an [`EmbeddingCache`]. Only texts missing from
/// the cache reach the backend.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    cache: Mutex<EmbeddingCache>,
    options: BatchOptions,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn Embedder>, cache: EmbeddingCache, options: BatchOptions) -> Self {
        Self {
            inner,
            cache: Mutex::new(cache),
            options,
        }
    }

    pub fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }

    /// Embeds `texts` in order, returning unit-norm vectors.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let model = self.inner.model_id().to_string();
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = HashSet::new();
            texts
                .iter()
                .filter(|t| cache.get(&model, t).is_none() && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };

        if !missing.is_empty() {
            log::info!("embedding {} uncached texts with {model}", missing.len());
            let batch_size = self.options.batch_size.max(1);
            let batches: Vec<&[String]> = missing.chunks(batch_size).collect();
            for wave in batches.chunks(self.options.parallelism.max(1)) {
                let results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
                    let handles: Vec<_> = wave
                        .iter()
                        .map(|batch| s.spawn(|| self.inner.embed_batch(batch)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("embedding worker panicked"))
                        .collect()
                });
                let mut fresh = Vec::new();
                for (batch, result) in wave.iter().zip(results) {
                    let vectors = result?;
                    if vectors.len() != batch.len() {
                        return Err(Error::Transport(format!(
                            "embedder returned {} vectors for {} texts",
                            vectors.len(),
                            batch.len()
                        )));
                    }
                    for (text, mut v) in batch.iter().cloned().zip(vectors) {
                        l2_normalize(&mut v)?;
                        fresh.push((text, v));
                    }
                }
                self.cache
                    .lock()
                    .expect("embedding cache poisoned")
                    .insert_many(&model, fresh)?;
            }
        }

        let cache = self.cache.lock().expect("embedding cache poisoned");
        texts
            .iter()
            .map(|t| {
                let values = cache
                    .get(&model, t)
                    .ok_or_else(|| Error::Integrity(format!("no embedding cached for `{t}`")))?;
                Ok(EmbeddingVector {
                    values: values.to_vec(),
                    model_id: model.clone(),
                })
            })
            .collect()
    }
}

/// Read-only lookup into an existing cache file, for offline consumers.
pub fn load_cached_embeddings(path: &Path, model_id: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    let cache = EmbeddingCache::open(path)?;
    texts
        .iter()
        .map(|t| {
            cache
                .get(model_id, t)
                .map(|v| EmbeddingVector {
                    values: v.to_vec(),
                    model_id: model_id.to_string(),
                })
                .ok_or_else(|| Error::Coverage {
                    message: format!("embedding cache {} lacks texts for model {model_id}", path.display()),
                    keys: vec![t.clone()],
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting {
        inner: HashingEmbedder,
        calls: Arc<AtomicUsize>,
        texts: Arc<AtomicUsize>,
    }

    impl Embedder for Counting {
        fn model_id(&self) -> &str {
            self.inner.model_id()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    fn counting() -> (Counting, Arc<AtomicUsize>, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let texts = Arc::new(AtomicUsize::new(0));
        (
            Counting {
                inner: HashingEmbedder::new(64),
                calls: calls.clone(),
                texts: texts.clone(),
            },
            calls,
            texts,
        )
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_text_is_unit_norm() {
        let e = CachedEmbedder::new(
            Box::new(HashingEmbedder::new(64)),
            EmbeddingCache::in_memory(),
            BatchOptions::default(),
        );
        let v = e.embed_texts(&strings(&["use as a paperweight"])).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].dim(), 64);
        let norm = v[0].values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!((v[0].cosine(&v[0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn repeated_text_hits_cache() {
        let (inner, calls, texts) = counting();
        let e = CachedEmbedder::new(Box::new(inner), EmbeddingCache::in_memory(), BatchOptions::default());
        let v = e
            .embed_texts(&strings(&["hold papers down", "hold papers down"]))
            .unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(texts.load(Ordering::SeqCst), 1);
        let again = e.embed_texts(&strings(&["hold papers down"])).unwrap();
        assert_eq!(again[0], v[0]);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn warm_file_cache_needs_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let input = strings(&["a brick", "a doorstop", "build a wall", "a brick"]);

        let (inner, _, _) = counting();
        let first = CachedEmbedder::new(
            Box::new(inner),
            EmbeddingCache::open(&path).unwrap(),
            BatchOptions {
                batch_size: 2,
                parallelism: 2,
            },
        )
        .embed_texts(&input)
        .unwrap();

        let (inner, calls, _) = counting();
        let second = CachedEmbedder::new(
            Box::new(inner),
            EmbeddingCache::open(&path).unwrap(),
            BatchOptions::default(),
        )
        .embed_texts(&input)
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(
                a.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn batches_respect_batch_size() {
        let (inner, calls, _) = counting();
        let e = CachedEmbedder::new(
            Box::new(inner),
            EmbeddingCache::in_memory(),
            BatchOptions {
                batch_size: 3,
                parallelism: 2,
            },
        );
        let input: Vec<String> = (0..10).map(|i| format!("idea {i}")).collect();
        let v = e.embed_texts(&input).unwrap();
        assert_eq!(v.len(), 10);
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut cache = EmbeddingCache::in_memory();
        cache.insert_many("m", vec![("a".into(), vec![1.0, 0.0])]).unwrap();
        let err = cache
            .insert_many("m", vec![("b".into(), vec![1.0, 0.0, 0.0])])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn response_reordered_by_index() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}],"model":"m"}"#;
        let resp: EmbeddingResponse = serde_json::from_str(body).unwrap();
        let v = order_response(resp, 2).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn request_body_shape() {
        let input = strings(&["x"]);
        let body = serde_json::to_value(EmbeddingRequest {
            model: "e5",
            input: &input,
        })
        .unwrap();
        assert_eq!(body, serde_json::json!({"model": "e5", "input": ["x"]}));
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(EmbeddingVector::normalized(vec![0.0, 0.0], "m").is_err());
    }
}
