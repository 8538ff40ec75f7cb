use serde::Deserialize;

use super::KnowledgeError;

pub const EMBED_URL_ENV: &str = "CONFLOOP_EMBED_URL";
pub const EMBED_KEY_ENV: &str = "CONFLOOP_EMBED_KEY";

/// Maps text to a fixed-dimension vector. Identical text must give an identical vector.
pub trait EmbeddingBackend: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError>;
    /// Identifies the backend configuration an index was built with.
    fn id(&self) -> String;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Offline embedding: token counts hashed into `dimension` buckets.
#[derive(Debug, Clone)]
pub struct HashedTokenEmbedder {
    dimension: usize,
}

impl HashedTokenEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashedTokenEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingBackend for HashedTokenEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError> {
        let mut v = vec![0.0; self.dimension];
        for token in tokenize(text) {
            v[(fnv1a(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        }
        Ok(v)
    }

    fn id(&self) -> String {
        format!("hashed-tokens/{}", self.dimension)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Embedding API speaking the common `{"model", "input"}` → `{"data": [{"embedding"}]}` shape.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub url: String,
    pub model: String,
    pub key: Option<String>,
    pub dimension: usize,
}

impl RemoteEmbedder {
    /// Reads the endpoint and key from `CONFLOOP_EMBED_URL` / `CONFLOOP_EMBED_KEY`.
    pub fn from_env(model: &str, dimension: usize) -> Result<Self, KnowledgeError> {
        let url = std::env::var(EMBED_URL_ENV)
            .map_err(|_| KnowledgeError::Config(format!("{EMBED_URL_ENV} is not set")))?;
        Ok(Self { url, model: model.to_string(), key: std::env::var(EMBED_KEY_ENV).ok(), dimension })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingBackend for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError> {
        let mut request = ureq::post(&self.url);
        if let Some(key) = &self.key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut response = request.send_json(&body).map_err(|e| KnowledgeError::Remote(e.to_string()))?;
        let parsed: EmbeddingResponse =
            response.body_mut().read_json().map_err(|e| KnowledgeError::Remote(e.to_string()))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| KnowledgeError::Remote("embedding response has no data".into()))?;
        if vector.len() != self.dimension {
            return Err(KnowledgeError::Remote(format!(
                "expected dimension {}, got {}",
                self.dimension,
                vector.len()
            )));
        }
        Ok(vector)
    }

    fn id(&self) -> String {
        format!("remote/{}/{}", self.model, self.dimension)
    }
}
