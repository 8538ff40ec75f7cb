//! Retrieval stack for the agent: vector retrieval, reranking, truncation
//! and tool fallback when the corpus has nothing useful.

mod embed;
mod index;
mod tools;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

pub use embed::{cosine, tokenize, EmbeddingBackend, HashedTokenEmbedder, RemoteEmbedder, EMBED_KEY_ENV, EMBED_URL_ENV};
pub use index::{chunk_offsets, ingest, retrieve, Chunking, Index};
pub use tools::{HttpToolSource, LocalToolSource, ToolSource};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("index format error: {0}")]
    Format(String),
    #[error("remote backend error: {0}")]
    Remote(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub id: String,
    pub source: String,
    pub text: String,
    pub document: String,
    pub chunk_index: usize,
    /// Character offset of the chunk in its document.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Rag,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePref {
    #[default]
    Rag,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub chunk: DocumentChunk,
    pub retrieval_score: f64,
    pub rerank_score: Option<f64>,
    pub provenance: Provenance,
}

/// Relevance of a chunk to a query, used to reorder retrieved items.
pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, text: &str) -> f64;
}

/// Jaccard similarity of lowercased token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReranker;

impl Reranker for LexicalReranker {
    fn score(&self, query: &str, text: &str) -> f64 {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        let t: BTreeSet<String> = tokenize(text).into_iter().collect();
        let union = q.union(&t).count();
        if union == 0 {
            return 0.0;
        }
        q.intersection(&t).count() as f64 / union as f64
    }
}

/// Orders by rerank score, then retrieval score, then chunk id.
pub fn rerank(items: Vec<KnowledgeItem>, q: &str, reranker: &dyn Reranker) -> Vec<KnowledgeItem> {
    let mut items: Vec<KnowledgeItem> = items
        .into_iter()
        .map(|mut item| {
            item.rerank_score = Some(reranker.score(q, &item.chunk.text));
            item
        })
        .collect();
    items.sort_by(|a, b| {
        b.rerank_score
            .unwrap_or(0.0)
            .total_cmp(&a.rerank_score.unwrap_or(0.0))
            .then(b.retrieval_score.total_cmp(&a.retrieval_score))
            .then_with(|| a.chunk.id.cmp(&b.chunk.id))
    });
    items
}

pub fn top_k(mut items: Vec<KnowledgeItem>, k: usize) -> Vec<KnowledgeItem> {
    items.truncate(k);
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatherConfig {
    pub k_retrieve: usize,
    pub k_keep: usize,
    /// Below this best rerank score the corpus is treated as unhelpful.
    pub min_effective_score: f64,
}

impl Default for GatherConfig {
    fn default() -> Self {
        Self { k_retrieve: 10, k_keep: 3, min_effective_score: 0.05 }
    }
}

/// What one gather did, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatherTrace {
    pub query: String,
    pub source_pref: SourcePref,
    /// e.g. `["retrieve(10)", "rerank", "top_k(3)"]` or `[..., "tool(pubmed,3)"]`.
    pub stages: Vec<String>,
    pub retrieved: usize,
    pub best_rerank_score: Option<f64>,
    pub fallback: bool,
    pub tool: Option<String>,
    pub returned: usize,
    pub no_knowledge: bool,
}

/// Corpus index plus tools and the scoring backends around them.
pub struct KnowledgeBase {
    pub index: Option<Index>,
    pub embedder: Box<dyn EmbeddingBackend>,
    pub reranker: Box<dyn Reranker>,
    pub tools: Vec<Box<dyn ToolSource>>,
}

impl KnowledgeBase {
    pub fn new(index: Option<Index>, embedder: Box<dyn EmbeddingBackend>, tools: Vec<Box<dyn ToolSource>>) -> Self {
        Self { index, embedder, reranker: Box::new(LexicalReranker), tools }
    }

    /// No corpus and no tools: every gather returns nothing.
    pub fn offline() -> Self {
        Self::new(None, Box::new(HashedTokenEmbedder::default()), Vec::new())
    }

    pub fn with_reranker(mut self, reranker: Box<dyn Reranker>) -> Self {
        self.reranker = reranker;
        self
    }
}

/// retrieve → rerank → top_k, falling back to the first tool that returns anything.
pub fn gather(kb: &KnowledgeBase, q: &str, pref: SourcePref, cfg: &GatherConfig) -> (Vec<KnowledgeItem>, GatherTrace) {
    let mut trace = GatherTrace {
        query: q.to_string(),
        source_pref: pref,
        stages: Vec::new(),
        retrieved: 0,
        best_rerank_score: None,
        fallback: false,
        tool: None,
        returned: 0,
        no_knowledge: false,
    };
    if pref == SourcePref::Rag {
        if let Some(index) = kb.index.as_ref().filter(|i| !i.is_empty()) {
            trace.stages.push(format!("retrieve({})", cfg.k_retrieve));
            match retrieve(index, kb.embedder.as_ref(), q, cfg.k_retrieve) {
                Ok(items) if !items.is_empty() => {
                    trace.retrieved = items.len();
                    let items = rerank(items, q, kb.reranker.as_ref());
                    trace.stages.push("rerank".into());
                    let items = top_k(items, cfg.k_keep);
                    trace.stages.push(format!("top_k({})", cfg.k_keep));
                    trace.best_rerank_score = items.first().and_then(|i| i.rerank_score);
                    if trace.best_rerank_score.is_some_and(|s| s >= cfg.min_effective_score) {
                        trace.returned = items.len();
                        return (items, trace);
                    }
                    debug!(query = q, best = ?trace.best_rerank_score, "retrieved knowledge below effectiveness gate");
                }
                Ok(_) => {}
                Err(e) => warn!(query = q, error = %e, "retrieval failed"),
            }
        }
        trace.fallback = true;
    }
    for tool in &kb.tools {
        match tool.fetch(q, cfg.k_keep) {
            Ok(chunks) if !chunks.is_empty() => {
                trace.stages.push(format!("tool({},{})", tool.name(), cfg.k_keep));
                trace.tool = Some(tool.name());
                let items: Vec<KnowledgeItem> = chunks
                    .into_iter()
                    .take(cfg.k_keep)
                    .map(|chunk| KnowledgeItem { chunk, retrieval_score: 0.0, rerank_score: None, provenance: Provenance::Tool })
                    .collect();
                trace.returned = items.len();
                return (items, trace);
            }
            Ok(_) => {}
            Err(e) => warn!(tool = %tool.name(), error = %e, "tool fetch failed"),
        }
    }
    warn!(query = q, "no knowledge found for sub-query");
    trace.no_knowledge = true;
    (Vec::new(), trace)
}

pub(crate) fn text_files(dir: &Path) -> Result<Vec<PathBuf>, KnowledgeError> {
    let entries = std::fs::read_dir(dir).map_err(|e| KnowledgeError::Io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| KnowledgeError::Io(dir.display().to_string(), e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            out.push(path);
        }
    }
    Ok(out)
}
