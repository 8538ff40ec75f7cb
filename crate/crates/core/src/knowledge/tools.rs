use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::embed::tokenize;
use super::{DocumentChunk, KnowledgeError};

/// External knowledge fetched on demand when retrieval cannot help.
pub trait ToolSource: Send + Sync {
    fn name(&self) -> String;
    /// Returns at most `k` chunks.
    fn fetch(&self, query: &str, k: usize) -> Result<Vec<DocumentChunk>, KnowledgeError>;
}

/// Directory of text files ranked by how many distinct query tokens each contains.
#[derive(Debug, Clone)]
pub struct LocalToolSource {
    name: String,
    docs: Vec<(String, String, BTreeSet<String>)>,
}

impl LocalToolSource {
    pub fn from_dir(name: &str, dir: &Path) -> Result<Self, KnowledgeError> {
        let mut files: Vec<PathBuf> = super::text_files(dir)?;
        files.sort();
        let mut docs = Vec::new();
        for path in files {
            let text = std::fs::read_to_string(&path).map_err(|e| KnowledgeError::Io(path.display().to_string(), e))?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let tokens = tokenize(&text).into_iter().collect();
            docs.push((stem, text, tokens));
        }
        Ok(Self { name: name.to_string(), docs })
    }

    pub fn from_texts(name: &str, texts: &[(&str, &str)]) -> Self {
        let docs = texts
            .iter()
            .map(|(id, text)| (id.to_string(), text.to_string(), tokenize(text).into_iter().collect()))
            .collect();
        Self { name: name.to_string(), docs }
    }
}

impl ToolSource for LocalToolSource {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn fetch(&self, query: &str, k: usize) -> Result<Vec<DocumentChunk>, KnowledgeError> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut hits: Vec<(usize, &(String, String, BTreeSet<String>))> = self
            .docs
            .iter()
            .map(|d| (terms.intersection(&d.2).count(), d))
            .filter(|(n, _)| *n > 0)
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1 .0.cmp(&b.1 .0)));
        Ok(hits
            .into_iter()
            .take(k)
            .map(|(_, (id, text, _))| DocumentChunk {
                id: format!("{}:{id}", self.name),
                source: self.name.clone(),
                text: text.clone(),
                document: id.clone(),
                chunk_index: 0,
                offset: 0,
            })
            .collect())
    }
}

/// Literature search over HTTP: `GET {url}?q=<query>&k=<k>` returning
/// `[{"id", "text", "source"?}]`. Suits a thin PubMed proxy.
#[derive(Debug, Clone)]
pub struct HttpToolSource {
    pub name: String,
    pub url: String,
}

#[derive(Deserialize)]
struct HttpHit {
    id: String,
    text: String,
    #[serde(default)]
    source: Option<String>,
}

impl ToolSource for HttpToolSource {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn fetch(&self, query: &str, k: usize) -> Result<Vec<DocumentChunk>, KnowledgeError> {
        let mut response = ureq::get(&self.url)
            .query("q", query)
            .query("k", k.to_string())
            .call()
            .map_err(|e| KnowledgeError::Remote(e.to_string()))?;
        let hits: Vec<HttpHit> = response.body_mut().read_json().map_err(|e| KnowledgeError::Remote(e.to_string()))?;
        Ok(hits
            .into_iter()
            .take(k)
            .map(|h| DocumentChunk {
                id: format!("{}:{}", self.name, h.id),
                source: h.source.unwrap_or_else(|| self.name.clone()),
                text: h.text,
                document: h.id,
                chunk_index: 0,
                offset: 0,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_source_ranks_by_token_overlap() {
        let tool = LocalToolSource::from_texts(
            "fixture",
            &[("a", "gout and uric acid"), ("b", "hypertension raises stroke risk"), ("c", "stroke units")],
        );
        let hits = tool.fetch("hypertension stroke", 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.document.as_str()).collect::<Vec<_>>(), vec!["b", "c"]);
        assert_eq!(tool.fetch("hypertension stroke", 1).unwrap().len(), 1);
        assert!(tool.fetch("unrelated", 3).unwrap().is_empty());
    }
}
