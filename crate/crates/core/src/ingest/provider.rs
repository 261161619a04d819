use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::embfile::{read_embedding_matrix, write_embedding_matrix, TextEmbeddingMatrix};
use crate::ingest::prompts::PromptSet;

pub const TOKEN_ENV: &str = "TBG_EMBED_TOKEN";

/// A text encoder reachable from this process.
pub trait EmbeddingProvider: Send + Sync {
    /// Identity mixed into cache keys; two providers with equal ids must
    /// return equal vectors for equal inputs.
    fn id(&self) -> String;

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

/// JSON-over-HTTP provider: POST `{"inputs": [...]}`, expect
/// `{"embeddings": [[...]]}`.
pub struct HttpProvider {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), token, agent }
    }

    /// Token taken from `TBG_EMBED_TOKEN` when set.
    pub fn from_env(url: impl Into<String>, timeout: Duration) -> Self {
        Self::new(url, std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()), timeout)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let resp = req.send_json(EmbedRequest { inputs }).map_err(|e| Error::Provider(format!("{}: {e}", self.url)))?;
        let body: EmbedResponse =
            resp.into_body().read_json().map_err(|e| Error::Provider(format!("malformed response: {e}")))?;
        if body.embeddings.len() != inputs.len() {
            return Err(Error::Provider(format!("{} embeddings for {} inputs", body.embeddings.len(), inputs.len())));
        }
        Ok(body.embeddings)
    }
}

/// Offline signed feature-hashing bag of words, L2-normalised. Texts that
/// share tokens get positively correlated vectors.
#[derive(Clone, Debug)]
pub struct HashingProvider {
    pub dim: usize,
    pub seed: u64,
}

impl HashingProvider {
    pub fn encode(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f64; self.dim];
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(tok.to_lowercase().as_bytes());
            let d = h.finalize();
            let bucket = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % self.dim;
            v[bucket] += if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|&x| if n > 0.0 { (x / n) as f32 } else { 0.0 }).collect()
    }
}

impl EmbeddingProvider for HashingProvider {
    fn id(&self) -> String {
        format!("hashing:{}:{}", self.dim, self.seed)
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(inputs.iter().map(|s| self.encode(s)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct FetchConfig {
    pub batch_size: usize,
    /// Retries per batch after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub cache_path: Option<PathBuf>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self { batch_size: 32, max_retries: 4, initial_backoff: Duration::from_millis(250), cache_path: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FetchStats {
    /// Provider calls, including retries.
    pub requests: usize,
    pub retries: usize,
    pub cache_hits: usize,
}

fn content_key(provider_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Embed every prompt, reading and extending a content-addressed cache.
/// Rows follow the order of `prompts.keys`.
pub fn fetch_embeddings(
    provider: &dyn EmbeddingProvider,
    prompts: &PromptSet,
    config: &FetchConfig,
) -> Result<(TextEmbeddingMatrix, FetchStats)> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let pid = provider.id();
    let mut stats = FetchStats::default();
    let mut dim: Option<usize> = None;
    let mut cache: HashMap<String, Vec<f32>> = HashMap::new();
    let mut cache_order: Vec<String> = Vec::new();
    if let Some(p) = config.cache_path.as_ref().filter(|p| p.exists()) {
        let m = read_embedding_matrix(p)?;
        dim = Some(m.dim());
        for (i, k) in m.keys().iter().enumerate() {
            cache.insert(k.clone(), m.row(i).to_vec());
            cache_order.push(k.clone());
        }
    }

    let hashes: Vec<String> = prompts.prompts.iter().map(|p| content_key(&pid, p)).collect();
    let mut pending: Vec<usize> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for (i, h) in hashes.iter().enumerate() {
        if cache.contains_key(h) {
            stats.cache_hits += 1;
        } else if queued.insert(h.clone()) {
            pending.push(i);
        }
    }

    for batch in pending.chunks(config.batch_size) {
        let inputs: Vec<String> = batch.iter().map(|&i| prompts.prompts[i].clone()).collect();
        let mut attempt = 0;
        let vectors = loop {
            stats.requests += 1;
            match provider.embed(&inputs) {
                Ok(v) => break v,
                Err(e) if attempt < config.max_retries => {
                    let wait = config.initial_backoff * 2u32.pow(attempt);
                    log::warn!("embedding request failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                    stats.retries += 1;
                }
                Err(e) => return Err(Error::Provider(format!("giving up after {} attempts: {e}", attempt + 1))),
            }
        };
        if vectors.len() != inputs.len() {
            return Err(Error::Provider(format!("{} vectors for {} inputs", vectors.len(), inputs.len())));
        }
        for (&i, v) in batch.iter().zip(vectors) {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Provider(format!("embedding dimension drifted from {d} to {}", v.len())))
                }
                _ => {}
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for `{}`", prompts.keys[i])));
            }
            cache_order.push(hashes[i].clone());
            cache.insert(hashes[i].clone(), v);
        }
    }

    let dim = dim.unwrap_or(0);
    if let Some(p) = &config.cache_path {
        if !pending.is_empty() {
            let values = cache_order.iter().flat_map(|k| cache[k].iter().copied()).collect();
            write_embedding_matrix(p, &TextEmbeddingMatrix::new(cache_order.clone(), dim, values, "cache")?)?;
        }
    }
    let values = hashes.iter().flat_map(|h| cache[h].iter().copied()).collect();
    let m = TextEmbeddingMatrix::new(prompts.keys.clone(), dim, values, pid)?;
    Ok((m, stats))
}
