use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::embed::{cosine, EmbeddingBackend};
use super::{DocumentChunk, KnowledgeError, KnowledgeItem, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chunking {
    pub size: usize,
    pub overlap: usize,
}

impl Default for Chunking {
    fn default() -> Self {
        Self { size: 400, overlap: 100 }
    }
}

/// Character offsets of chunk starts: every `size − overlap` characters while inside the text.
pub fn chunk_offsets(len: usize, chunking: Chunking) -> Vec<usize> {
    let stride = chunking.size.saturating_sub(chunking.overlap).max(1);
    (0..len).step_by(stride).collect()
}

/// Exact-scan vector index over embedded chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub backend: String,
    pub dimension: usize,
    pub chunking: Chunking,
    pub chunks: Vec<DocumentChunk>,
    pub vectors: Vec<Vec<f64>>,
}

impl Index {
    pub fn empty(backend: &dyn EmbeddingBackend, chunking: Chunking) -> Self {
        Self { backend: backend.id(), dimension: backend.dimension(), chunking, chunks: Vec::new(), vectors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let json = serde_json::to_string(self).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| KnowledgeError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| KnowledgeError::Io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| KnowledgeError::Format(e.to_string()))
    }

    /// Appends one document, chunked and embedded.
    pub fn add_document(
        &mut self,
        document: &str,
        source: &str,
        text: &str,
        backend: &dyn EmbeddingBackend,
    ) -> Result<(), KnowledgeError> {
        let chars: Vec<char> = text.chars().collect();
        for (chunk_index, start) in chunk_offsets(chars.len(), self.chunking).into_iter().enumerate() {
            let end = (start + self.chunking.size).min(chars.len());
            let body: String = chars[start..end].iter().collect();
            if body.trim().is_empty() {
                continue;
            }
            let vector = backend.embed(&body)?;
            self.chunks.push(DocumentChunk {
                id: format!("{document}#{chunk_index}"),
                source: source.to_string(),
                text: body,
                document: document.to_string(),
                chunk_index,
                offset: start,
            });
            self.vectors.push(vector);
        }
        Ok(())
    }
}

/// Ingests every `.txt` file of `corpus_dir` in file-name order.
pub fn ingest(corpus_dir: &Path, backend: &dyn EmbeddingBackend, chunking: Chunking) -> Result<Index, KnowledgeError> {
    if chunking.size == 0 || chunking.overlap >= chunking.size {
        return Err(KnowledgeError::Config(format!("invalid chunking {chunking:?}")));
    }
    let mut index = Index::empty(backend, chunking);
    let mut files = super::text_files(corpus_dir)?;
    files.sort();
    for path in &files {
        let text = std::fs::read_to_string(path).map_err(|e| KnowledgeError::Io(path.display().to_string(), e))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        index.add_document(&name, &corpus_dir.display().to_string(), &text, backend)?;
    }
    if index.is_empty() {
        warn!(corpus = %corpus_dir.display(), "corpus produced no chunks; retrieval will fall back to tools");
    }
    Ok(index)
}

/// Top-`k` chunks by cosine similarity, descending; ties keep index order.
pub fn retrieve(index: &Index, backend: &dyn EmbeddingBackend, q: &str, k: usize) -> Result<Vec<KnowledgeItem>, KnowledgeError> {
    if index.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let query = backend.embed(q)?;
    let mut scored: Vec<(usize, f64)> = index.vectors.iter().map(|v| cosine(&query, v)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, score)| KnowledgeItem {
            chunk: index.chunks[i].clone(),
            retrieval_score: score,
            rerank_score: None,
            provenance: Provenance::Rag,
        })
        .collect())
}
