//! The run configuration file (JSON). Relative paths resolve against the
//! file's directory; command-line flags override file values.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use confloop::agent::{AgentBackend, AgentConfig, HttpBackend, HttpBackendConfig, MockBackend};
use confloop::bootstrap_ci::BootstrapConfig;
use confloop::causal_tree::TreeParams;
use confloop::dataset::DEFAULT_SPLIT_RATIOS;
use confloop::knowledge::{
    ingest, Chunking, EmbeddingBackend, GatherConfig, HashedTokenEmbedder, HttpToolSource, Index, KnowledgeBase,
    LocalToolSource, RemoteEmbedder, ToolSource,
};
use confloop::orchestrator::PipelineConfig;
use confloop::review::{AutoAccept, ExpertPolicy, InteractivePolicy, ReviewStore, ScriptedPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Canned responses from a fixture file.
    Mock { fixture: PathBuf },
    /// Chat-completions endpoint; the key comes from `CONFLOOP_LLM_KEY`.
    Http(HttpBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Http(HttpBackendConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hashed { dimension: usize },
    /// Endpoint and key from `CONFLOOP_EMBED_URL` / `CONFLOOP_EMBED_KEY`.
    Remote { model: String, dimension: usize },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashed { dimension: HashedTokenEmbedder::default().dimension() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    /// Text files to chunk and embed at startup.
    pub corpus_dir: Option<PathBuf>,
    /// A prebuilt index; takes precedence over `corpus_dir`.
    pub index: Option<PathBuf>,
    /// Local literature fixture searched by token match.
    pub tool_dir: Option<PathBuf>,
    /// HTTP literature search, tried after `tool_dir`.
    pub tool_url: Option<String>,
    pub k_retrieve: Option<usize>,
    pub k_keep: Option<usize>,
    pub min_effective_score: Option<f64>,
    pub embedding: EmbeddingConfig,
    pub chunking: Chunking,
}

impl KnowledgeConfig {
    pub fn gather(&self) -> GatherConfig {
        let d = GatherConfig::default();
        GatherConfig {
            k_retrieve: self.k_retrieve.unwrap_or(d.k_retrieve),
            k_keep: self.k_keep.unwrap_or(d.k_keep),
            min_effective_score: self.min_effective_score.unwrap_or(d.min_effective_score),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ReviewConfig {
    #[default]
    AutoAccept,
    Scripted { fixture: PathBuf },
    /// Decisions arrive through the review service.
    Interactive {
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub tree: TreeParams,
    pub bootstrap: BootstrapConfig,
    pub agent: AgentConfig,
    pub backend: BackendConfig,
    pub knowledge: KnowledgeConfig,
    pub review: ReviewConfig,
    pub max_iterations: usize,
    pub min_active_samples: usize,
    pub max_rework: usize,
    pub min_stratum_size: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: p.seed,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            tree: p.tree,
            bootstrap: p.bootstrap,
            agent: p.agent,
            backend: BackendConfig::default(),
            knowledge: KnowledgeConfig::default(),
            review: ReviewConfig::default(),
            max_iterations: p.max_iterations,
            min_active_samples: p.min_active_samples,
            max_rework: p.max_rework,
            min_stratum_size: p.min_stratum_size,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path`, resolving relative paths inside it against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let BackendConfig::Mock { fixture } = &mut cfg.backend {
            resolve(base, fixture);
        }
        if let ReviewConfig::Scripted { fixture } = &mut cfg.review {
            resolve(base, fixture);
        }
        for p in [&mut cfg.knowledge.corpus_dir, &mut cfg.knowledge.index, &mut cfg.knowledge.tool_dir].into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            split_ratios: self.split_ratios,
            tree: self.tree,
            bootstrap: self.bootstrap,
            agent: self.agent.clone(),
            gather: self.knowledge.gather(),
            max_iterations: self.max_iterations,
            min_active_samples: self.min_active_samples,
            max_rework: self.max_rework,
            min_stratum_size: self.min_stratum_size,
            seed: self.seed,
        }
    }

    pub fn is_interactive(&self) -> bool {
        matches!(self.review, ReviewConfig::Interactive { .. })
    }

    pub fn build_backend(&self) -> Result<Box<dyn AgentBackend>> {
        Ok(match &self.backend {
            BackendConfig::Mock { fixture } => Box::new(
                MockBackend::from_file(fixture).with_context(|| format!("loading mock fixture {}", fixture.display()))?,
            ),
            BackendConfig::Http(http) => Box::new(HttpBackend::from_env(http.clone())),
        })
    }

    pub fn build_knowledge(&self) -> Result<KnowledgeBase> {
        let k = &self.knowledge;
        let embedder: Box<dyn EmbeddingBackend> = match &k.embedding {
            EmbeddingConfig::Hashed { dimension } => Box::new(HashedTokenEmbedder::new(*dimension)),
            EmbeddingConfig::Remote { model, dimension } => Box::new(RemoteEmbedder::from_env(model, *dimension)?),
        };
        let index = match (&k.index, &k.corpus_dir) {
            (Some(path), _) => {
                let index = Index::load(path).with_context(|| format!("loading index {}", path.display()))?;
                if index.backend != embedder.id() || index.dimension != embedder.dimension() {
                    bail!("index {} was built with {} ({}d), not {}", path.display(), index.backend, index.dimension, embedder.id());
                }
                Some(index)
            }
            (None, Some(dir)) => {
                Some(ingest(dir, embedder.as_ref(), k.chunking).with_context(|| format!("ingesting {}", dir.display()))?)
            }
            (None, None) => None,
        };
        let mut tools: Vec<Box<dyn ToolSource>> = Vec::new();
        if let Some(dir) = &k.tool_dir {
            tools.push(Box::new(LocalToolSource::from_dir("literature", dir)?));
        }
        if let Some(url) = &k.tool_url {
            tools.push(Box::new(HttpToolSource { name: "pubmed".into(), url: url.clone() }));
        }
        Ok(KnowledgeBase::new(index, embedder, tools))
    }

    /// Interactive policies need `store`; without one they are a configuration error.
    pub fn build_policy(&self, store: Option<&ReviewStore>) -> Result<Box<dyn ExpertPolicy>> {
        Ok(match &self.review {
            ReviewConfig::AutoAccept => Box::new(AutoAccept),
            ReviewConfig::Scripted { fixture } => Box::new(ScriptedPolicy::load(fixture)?),
            ReviewConfig::Interactive { timeout_secs } => {
                let Some(store) = store else { bail!("interactive policy requires review service (use `confloop serve`)") };
                Box::new(InteractivePolicy { store: store.clone(), timeout: timeout_secs.map(Duration::from_secs) })
            }
        })
    }
}
