//! Project directory layout and `ragforge.toml`.
//!
//! ```text
//! <project>/ragforge.toml       optional settings
//! <project>/corpus/             source documents (configurable)
//! <project>/pipeline.toml       pipeline definition (configurable)
//! <project>/.ragforge/indexes/  index grid
//! <project>/.ragforge/embed_cache/
//! <project>/.ragforge/goldens.json, goldens_history.jsonl
//! ```

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, ChunkConfig, Corpus, CorpusError, DEFAULT_INCLUDE_GLOBS};
use crate::embedder::{
    EmbedError, Embedder, EmbeddingCache, RemoteEmbedder, RemoteEmbedderConfig,
};
use crate::engine::{Engine, EngineError, PipelineDef};
use crate::evalstore::{EvalError, GoldenStore, DEFAULT_THRESHOLD};
use crate::index::{
    grid_of, BuildReport, IndexError, IndexStore, RaptorParams, RetrievalMethod,
    DEFAULT_CHUNK_OVERLAPS, DEFAULT_CHUNK_SIZES,
};
use crate::llm::{Llm, LlmError, RemoteLlm, RemoteLlmConfig};

pub const CONFIG_FILE: &str = "ragforge.toml";
pub const STATE_DIR: &str = ".ragforge";

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub sizes: Vec<usize>,
    pub overlaps: Vec<usize>,
    pub methods: Vec<RetrievalMethod>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_CHUNK_SIZES.to_vec(),
            overlaps: DEFAULT_CHUNK_OVERLAPS.to_vec(),
            methods: RetrievalMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderChoice {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmChoice {
    #[default]
    Mock,
    Remote,
}

/// Provider selection. Endpoint and model fall back to the provider
/// environment variables, then to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    pub embedder: EmbedderChoice,
    pub llm: LlmChoice,
    pub embed_endpoint: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dimension: Option<usize>,
    pub llm_endpoint: Option<String>,
    pub llm_model: Option<String>,
    pub llm_concurrency: Option<usize>,
    pub llm_max_prompt_chars: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub corpus_dir: PathBuf,
    pub pipeline_path: PathBuf,
    pub include: Vec<String>,
    pub grid: GridSettings,
    pub providers: ProviderSettings,
    pub eval: EvalSettings,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            pipeline_path: "pipeline.toml".into(),
            include: DEFAULT_INCLUDE_GLOBS.iter().map(|s| s.to_string()).collect(),
            grid: GridSettings::default(),
            providers: ProviderSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Relative path without `..` or root components.
fn stays_inside(p: &Path) -> bool {
    p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

impl ProjectConfig {
    /// Reads `<root>/ragforge.toml`, or the defaults when it does not exist.
    pub fn load(root: &Path) -> Result<Self, ProjectError> {
        let path = root.join(CONFIG_FILE);
        let cfg: Self = match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).map_err(|e| ProjectError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Self::default(),
            Err(e) => {
                return Err(ProjectError::Config {
                    path,
                    message: e.to_string(),
                })
            }
        };
        cfg.validate().map_err(|message| ProjectError::Config { path, message })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("corpus_dir", &self.corpus_dir), ("pipeline_path", &self.pipeline_path)] {
            if !stays_inside(p) {
                return Err(format!("{name} {} must stay inside the project", p.display()));
            }
        }
        if self.grid_configs().is_empty() {
            return Err("grid has no valid (size, overlap) pair".into());
        }
        if self.grid.methods.is_empty() {
            return Err("grid lists no retrieval methods".into());
        }
        if !(-1.0..=1.0).contains(&self.eval.threshold) {
            return Err(format!("eval threshold {} outside [-1, 1]", self.eval.threshold));
        }
        Ok(())
    }

    /// Valid pairs of the size and overlap axes.
    pub fn grid_configs(&self) -> Vec<ChunkConfig> {
        grid_of(&self.grid.sizes, &self.grid.overlaps)
    }

    pub fn make_embedder(&self, cache_dir: &Path) -> Result<Embedder, ProjectError> {
        let p = &self.providers;
        Ok(match p.embedder {
            EmbedderChoice::Local => Embedder::local(),
            EmbedderChoice::Remote => {
                let mut cfg = RemoteEmbedderConfig::from_env();
                if let Some(v) = &p.embed_endpoint {
                    cfg.endpoint = v.clone();
                }
                if let Some(v) = &p.embed_model {
                    cfg.model = v.clone();
                }
                if let Some(v) = p.embed_dimension {
                    cfg.dimension = v;
                }
                let cache = Arc::new(EmbeddingCache::open(cache_dir)?);
                Embedder::new(Arc::new(RemoteEmbedder::new(cfg)?)).with_cache(cache)
            }
        })
    }

    pub fn make_llm(&self) -> Result<Llm, ProjectError> {
        let p = &self.providers;
        let mut llm = match p.llm {
            LlmChoice::Mock => Llm::mock(),
            LlmChoice::Remote => {
                let mut cfg = RemoteLlmConfig::from_env();
                if let Some(v) = &p.llm_endpoint {
                    cfg.endpoint = v.clone();
                }
                if let Some(v) = &p.llm_model {
                    cfg.model = v.clone();
                }
                Llm::new(Arc::new(RemoteLlm::new(cfg)?))
            }
        };
        if let Some(v) = p.llm_concurrency {
            llm = llm.with_concurrency(v);
        }
        if let Some(v) = p.llm_max_prompt_chars {
            llm = llm.with_max_prompt_chars(v);
        }
        Ok(llm)
    }
}

/// An opened project: corpus loaded, providers constructed, stores opened.
pub struct Project {
    root: PathBuf,
    config: ProjectConfig,
    corpus: Corpus,
    store: Arc<IndexStore>,
    engine: Arc<Engine>,
    goldens: GoldenStore,
}

impl Project {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProjectError> {
        let root = root.into();
        let config = ProjectConfig::load(&root)?;
        Self::with_config(root, config)
    }

    pub fn with_config(root: PathBuf, config: ProjectConfig) -> Result<Self, ProjectError> {
        config.validate().map_err(|message| ProjectError::Config {
            path: root.join(CONFIG_FILE),
            message,
        })?;
        let state = root.join(STATE_DIR);
        let corpus = load_corpus(&root.join(&config.corpus_dir), &config.include)?;
        for w in corpus.warnings() {
            tracing::warn!("{w}");
        }
        let store = Arc::new(IndexStore::open(state.join("indexes"))?);
        let embedder = config.make_embedder(&state.join("embed_cache"))?;
        let llm = config.make_llm()?;
        let engine = Arc::new(Engine::new(store.clone(), corpus.digest(), embedder, llm));
        let goldens = GoldenStore::open(&state)?;
        Ok(Self {
            root,
            config,
            corpus,
            store,
            engine,
            goldens,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn store(&self) -> &Arc<IndexStore> {
        &self.store
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn goldens(&self) -> &GoldenStore {
        &self.goldens
    }

    pub fn pipeline_path(&self) -> PathBuf {
        self.root.join(&self.config.pipeline_path)
    }

    /// The pipeline file, or the baseline pipeline when the file is absent.
    pub fn load_pipeline(&self) -> Result<PipelineDef, ProjectError> {
        let path = self.pipeline_path();
        if !path.exists() {
            return Ok(PipelineDef::baseline());
        }
        Ok(PipelineDef::load(&path)?)
    }

    pub fn build_indexes(
        &self,
        configs: &[ChunkConfig],
        methods: &[RetrievalMethod],
    ) -> Result<BuildReport, ProjectError> {
        Ok(self.store.build_all(
            &self.corpus,
            configs,
            methods,
            self.engine.embedder(),
            self.engine.llm(),
            &RaptorParams::default(),
        )?)
    }
}
