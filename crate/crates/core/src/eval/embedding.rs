//! Text embeddings for label and relation retrieval.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("invalid embedding response: {0}")]
    InvalidResponse(String),
}

/// Which vocabulary an embedding is used for: object/element labels
/// (CLIP-style) or relation predicates (BERT-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingSpace {
    Label,
    Relation,
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;

    fn dimension(&self) -> usize;

    /// Deterministic, unit-norm embedding of nonempty `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

pub fn embed(backend: &dyn EmbeddingBackend, text: &str) -> Result<Vec<f64>, EmbeddingError> {
    backend.embed(text)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub const TOY_DIMENSION: usize = 256;

/// Character-trigram hashing embedding. The text is lowercased, whitespace
/// is collapsed, one space is added at each end, and every character
/// trigram increments bin `fnv1a(trigram) mod 256`; the counts are then
/// L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedding;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingBackend for ToyEmbedding {
    fn id(&self) -> String {
        "toy-trigram-256".into()
    }

    fn dimension(&self) -> usize {
        TOY_DIMENSION
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if norm.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let chars: Vec<char> = format!(" {norm} ").chars().collect();
        let mut v = vec![0.0; TOY_DIMENSION];
        for w in chars.windows(3) {
            let tri: String = w.iter().collect();
            v[(fnv1a64(tri.as_bytes()) % TOY_DIMENSION as u64) as usize] += 1.0;
        }
        Ok(normalize(v))
    }
}

/// OpenAI-compatible `/embeddings` endpoint with an in-memory memo.
pub struct HttpEmbedding {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    agent: ureq::Agent,
    attempts: u32,
    memo: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedding {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, dimension: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEmbedding {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            dimension,
            agent,
            attempts: 3,
            memo: Mutex::new(HashMap::new()),
        }
    }

    fn fetch(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({"model": self.model, "input": [text]});
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_secs(1 << (attempt - 1)));
            }
            let mut req = self.agent.post(&url);
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    if !(200..300).contains(&status) {
                        return Err(EmbeddingError::InvalidResponse(format!("HTTP {status}: {text}")));
                    }
                    let parsed: EmbeddingResponse = serde_json::from_str(&text)
                        .map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
                    let v = parsed
                        .data
                        .into_iter()
                        .next()
                        .ok_or_else(|| EmbeddingError::InvalidResponse("no embedding returned".into()))?
                        .embedding;
                    return Ok(normalize(v));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(EmbeddingError::BackendUnreachable(last))
    }
}

impl EmbeddingBackend for HttpEmbedding {
    fn id(&self) -> String {
        format!("http-embedding[{}]", self.model)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        if let Some(v) = self.memo.lock().expect("memo lock").get(text) {
            return Ok(v.clone());
        }
        let v = self.fetch(text)?;
        self.memo.lock().expect("memo lock").insert(text.to_owned(), v.clone());
        Ok(v)
    }
}
