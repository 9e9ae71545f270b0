//! On-disk index grid.
//!
//! ```text
//! <root>/manifest.json                       store-wide listing
//! <root>/<digest16>/<size>_<overlap>_<method>/
//!     manifest.json     key, counts, provider_id, format version
//!     chunks.jsonl      one Chunk per line
//!     vectors.f32       row-major little-endian f32 (embedding methods)
//!     vocab.json        {"terms": [..], "idf": [..]}          (tf_idf)
//!     postings.jsonl    one sparse row [[term_id, weight], ..] per chunk (tf_idf)
//!     tree.json         {"nodes": [..], "roots": [..]}        (raptor)
//! ```
//!
//! Index directories are written under a temporary name and renamed into
//! place, so a directory that exists is complete.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mmr::greedy;
use super::raptor::{build_raptor, LlmSummarizer, RaptorNode, RaptorParams, RaptorTree, Summarizer};
use super::tfidf::TfIdfIndex;
use super::vector::VectorIndex;
use super::{
    rank_indices, IndexError, IndexKey, Retrieval, RetrievalMethod, RetrievalWarning, ScoredChunk,
};
use crate::corpus::{chunk_corpus, Chunk, ChunkConfig, Corpus};
use crate::embedder::Embedder;
use crate::llm::Llm;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: IndexKey,
    pub chunk_count: usize,
    /// Summary nodes (raptor only).
    #[serde(default)]
    pub node_count: usize,
    pub build_ms: u64,
    pub size_bytes: u64,
    pub provider_id: Option<String>,
    pub dir: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    /// Sorted by key.
    pub entries: Vec<ManifestEntry>,
}

impl StoreManifest {
    pub fn keys(&self) -> impl Iterator<Item = &IndexKey> {
        self.entries.iter().map(|e| &e.key)
    }

    pub fn get(&self, key: &IndexKey) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|i| &self.entries[i])
    }

    fn upsert(&mut self, entry: ManifestEntry) {
        match self.entries.binary_search_by(|e| e.key.cmp(&entry.key)) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub built: Vec<IndexKey>,
    pub reused: Vec<IndexKey>,
    pub manifest: StoreManifest,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    key: IndexKey,
    chunk_count: usize,
    #[serde(default)]
    node_count: usize,
    provider_id: Option<String>,
    dimension: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Vocab {
    terms: Vec<String>,
    idf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    nodes: Vec<RaptorNode>,
    roots: Vec<String>,
}

#[derive(Debug)]
pub(crate) enum LoadedIndex {
    Vector(VectorIndex),
    TfIdf(TfIdfIndex),
    Raptor(RaptorTree),
}

impl LoadedIndex {
    fn provider_id(&self) -> Option<&str> {
        match self {
            Self::Vector(v) => Some(v.provider_id()),
            Self::Raptor(t) => Some(t.provider_id()),
            Self::TfIdf(_) => None,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Vector(v) => v.len(),
            Self::TfIdf(t) => t.len(),
            Self::Raptor(t) => t.len(),
        }
    }
}

/// Materialized indexes for any number of corpora under one root directory.
/// Indexes are immutable once built and may be read concurrently.
pub struct IndexStore {
    root: PathBuf,
    manifest: Mutex<StoreManifest>,
    loaded: RwLock<HashMap<IndexKey, Arc<LoadedIndex>>>,
    builds: AtomicU64,
}

impl std::fmt::Debug for IndexStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexStore").field("root", &self.root).finish()
    }
}

impl IndexStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IndexError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| IndexError::io(&root, e))?;
        let path = root.join("manifest.json");
        let mut manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<StoreManifest>(&bytes)
                .map_err(|e| IndexError::corrupt(&path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreManifest {
                format_version: FORMAT_VERSION,
                entries: Vec::new(),
            },
            Err(e) => return Err(IndexError::io(&path, e)),
        };
        // Forget entries whose directory was removed by hand.
        manifest.entries.retain(|e| root.join(&e.dir).is_dir());
        manifest.entries.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(Self {
            root,
            manifest: Mutex::new(manifest),
            loaded: RwLock::new(HashMap::new()),
            builds: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> StoreManifest {
        self.manifest.lock().expect("manifest lock poisoned").clone()
    }

    /// Number of indexes built by this handle since it was opened.
    pub fn build_count(&self) -> u64 {
        self.builds.load(Ordering::SeqCst)
    }

    pub fn contains(&self, key: &IndexKey) -> bool {
        self.manifest().get(key).is_some()
    }

    /// Builds every missing `(config, method)` index for the corpus,
    /// summarizing RAPTOR clusters with `llm`.
    pub fn build_all(
        &self,
        corpus: &Corpus,
        grid: &[ChunkConfig],
        methods: &[RetrievalMethod],
        embedder: &Embedder,
        llm: &Llm,
        raptor: &RaptorParams,
    ) -> Result<BuildReport, IndexError> {
        let summarizer = LlmSummarizer::new(llm, raptor.summary_max_tokens);
        self.build_all_with(corpus, grid, methods, embedder, &summarizer, raptor)
    }

    /// [`build_all`](Self::build_all) with an explicit summarizer.
    ///
    /// An existing key is reused when its manifest entry is present and, for
    /// embedding methods, was built by the same embedder. If a provider
    /// becomes unavailable, remaining embedding-dependent builds are skipped
    /// while TF-IDF builds still finish; the error is returned afterwards.
    pub fn build_all_with(
        &self,
        corpus: &Corpus,
        grid: &[ChunkConfig],
        methods: &[RetrievalMethod],
        embedder: &Embedder,
        summarizer: &dyn Summarizer,
        raptor: &RaptorParams,
    ) -> Result<BuildReport, IndexError> {
        let grid: BTreeSet<ChunkConfig> = grid.iter().copied().collect();
        let methods: BTreeSet<RetrievalMethod> = methods.iter().copied().collect();
        let abort = AtomicBool::new(false);
        let errors: Mutex<Vec<IndexError>> = Mutex::new(Vec::new());
        let built: Mutex<Vec<IndexKey>> = Mutex::new(Vec::new());
        let reused: Mutex<Vec<IndexKey>> = Mutex::new(Vec::new());

        grid.par_iter().for_each(|&cfg| {
            let ctx = ConfigBuild {
                store: self,
                corpus,
                cfg,
                embedder,
                summarizer,
                raptor,
                abort: &abort,
            };
            let outcome = ctx.run(&methods);
            built.lock().unwrap().extend(outcome.built);
            reused.lock().unwrap().extend(outcome.reused);
            errors.lock().unwrap().extend(outcome.errors);
        });

        let mut built = built.into_inner().unwrap();
        let mut reused = reused.into_inner().unwrap();
        built.sort();
        reused.sort();
        let mut errors = errors.into_inner().unwrap();
        if !errors.is_empty() {
            let pos = errors.iter().position(IndexError::is_provider_unavailable).unwrap_or(0);
            return Err(errors.swap_remove(pos));
        }
        Ok(BuildReport {
            built,
            reused,
            manifest: self.manifest(),
        })
    }

    fn is_current(&self, key: &IndexKey, provider_id: &str) -> bool {
        let manifest = self.manifest.lock().expect("manifest lock poisoned");
        manifest.get(key).is_some_and(|e| {
            !key.method.needs_embeddings() || e.provider_id.as_deref() == Some(provider_id)
        }) && self.root.join(key.rel_dir()).is_dir()
    }

    fn record(&self, entry: ManifestEntry) -> Result<(), IndexError> {
        let mut manifest = self.manifest.lock().expect("manifest lock poisoned");
        self.loaded.write().expect("index cache poisoned").remove(&entry.key);
        manifest.upsert(entry);
        manifest.format_version = FORMAT_VERSION;
        let path = self.root.join("manifest.json");
        let body = serde_json::to_vec_pretty(&*manifest).expect("manifest serializes");
        crate::fsutil::write_atomic(&path, &body).map_err(|e| IndexError::io(&path, e))
    }

    /// Loads (once) and returns the index for `key`.
    pub(crate) fn get(&self, key: &IndexKey) -> Result<Arc<LoadedIndex>, IndexError> {
        if let Some(idx) = self.loaded.read().expect("index cache poisoned").get(key) {
            return Ok(idx.clone());
        }
        if !self.contains(key) {
            return Err(IndexError::IndexMissing(key.clone()));
        }
        let idx = Arc::new(load_index(&self.root.join(key.rel_dir()), key)?);
        self.loaded
            .write()
            .expect("index cache poisoned")
            .insert(key.clone(), idx.clone());
        Ok(idx)
    }

    /// Loads every index of a corpus into memory.
    pub fn warm(&self, corpus_digest: &str) -> Result<usize, IndexError> {
        let keys: Vec<IndexKey> = self
            .manifest()
            .keys()
            .filter(|k| k.corpus_digest == corpus_digest)
            .cloned()
            .collect();
        keys.par_iter().map(|k| self.get(k).map(|_| ())).collect::<Result<(), _>>()?;
        Ok(keys.len())
    }

    /// Number of retrievable items (chunks, plus summaries for raptor).
    pub fn item_count(&self, key: &IndexKey) -> Result<usize, IndexError> {
        Ok(self.get(key)?.len())
    }

    /// Top-`k` under the key's method, all marked selected. `mmr_lambda` is
    /// only read for [`RetrievalMethod::Mmr`].
    pub fn retrieve(
        &self,
        key: &IndexKey,
        query: &str,
        k: usize,
        mmr_lambda: f64,
        embedder: &Embedder,
    ) -> Result<Retrieval, IndexError> {
        if query.trim().is_empty() {
            return Err(IndexError::EmptyQuery);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if key.method == RetrievalMethod::Mmr && !(0.0..=1.0).contains(&mmr_lambda) {
            return Err(IndexError::InvalidLambda(mmr_lambda));
        }
        let index = self.get(key)?;
        check_provider(key, &index, embedder)?;
        let mut warnings = Vec::new();
        let available = index.len();
        if k > available {
            warnings.push(RetrievalWarning::KClamped {
                requested: k,
                available,
            });
        }
        let chunks = match &*index {
            LoadedIndex::TfIdf(t) => {
                let scores = t.scores(query);
                if scores.iter().all(|&s| s == 0.0) {
                    warnings.push(RetrievalWarning::DegenerateRanking);
                }
                rank_indices(t.chunks(), &scores, k, true)
            }
            LoadedIndex::Vector(v) if key.method == RetrievalMethod::Mmr => {
                let q = embedder.embed_one(query)?;
                let relevance = v.cosine_scores(&q);
                let ids: Vec<&str> = v.chunks().iter().map(|c| c.chunk_id.as_str()).collect();
                greedy(&relevance, &ids, |a, b| v.row_cosine(a, b), k, mmr_lambda)
                    .into_iter()
                    .enumerate()
                    .map(|(i, (idx, score))| ScoredChunk {
                        chunk: v.chunks()[idx].clone(),
                        score,
                        rank: i + 1,
                        selected: true,
                    })
                    .collect()
            }
            LoadedIndex::Vector(v) => {
                let q = embedder.embed_one(query)?;
                rank_indices(v.chunks(), &v.cosine_scores(&q), k, true)
            }
            LoadedIndex::Raptor(t) => {
                let q = embedder.embed_one(query)?;
                rank_indices(&t.collapsed_chunks(), &t.cosine_scores(&q), k, true)
            }
        };
        Ok(Retrieval {
            key: key.clone(),
            chunks,
            warnings,
        })
    }

    /// Every item scored and sorted descending, none selected. For MMR the
    /// score is the query-relevance term alone.
    pub fn score_all(
        &self,
        key: &IndexKey,
        query: &str,
        embedder: &Embedder,
    ) -> Result<Vec<ScoredChunk>, IndexError> {
        if query.trim().is_empty() {
            return Err(IndexError::EmptyQuery);
        }
        let index = self.get(key)?;
        check_provider(key, &index, embedder)?;
        Ok(match &*index {
            LoadedIndex::TfIdf(t) => rank_indices(t.chunks(), &t.scores(query), usize::MAX, false),
            LoadedIndex::Vector(v) => {
                let q = embedder.embed_one(query)?;
                rank_indices(v.chunks(), &v.cosine_scores(&q), usize::MAX, false)
            }
            LoadedIndex::Raptor(t) => {
                let q = embedder.embed_one(query)?;
                rank_indices(&t.collapsed_chunks(), &t.cosine_scores(&q), usize::MAX, false)
            }
        })
    }

    /// The TF-IDF index for `key`, if that is its method.
    pub fn tfidf(&self, key: &IndexKey) -> Result<Option<Arc<TfIdfIndex>>, IndexError> {
        Ok(match &*self.get(key)? {
            LoadedIndex::TfIdf(t) => Some(Arc::new(t.clone())),
            _ => None,
        })
    }

    pub fn raptor_tree(&self, key: &IndexKey) -> Result<Option<RaptorTree>, IndexError> {
        Ok(match &*self.get(key)? {
            LoadedIndex::Raptor(t) => Some(t.clone()),
            _ => None,
        })
    }

    pub fn vector_index(&self, key: &IndexKey) -> Result<Option<VectorIndex>, IndexError> {
        Ok(match &*self.get(key)? {
            LoadedIndex::Vector(v) => Some(v.clone()),
            _ => None,
        })
    }
}

fn check_provider(key: &IndexKey, index: &LoadedIndex, embedder: &Embedder) -> Result<(), IndexError> {
    match index.provider_id() {
        Some(p) if p != embedder.provider_id() => Err(IndexError::ProviderMismatch {
            key: key.clone(),
            built_with: p.to_string(),
            current: embedder.provider_id().to_string(),
        }),
        _ => Ok(()),
    }
}

struct ConfigBuild<'a> {
    store: &'a IndexStore,
    corpus: &'a Corpus,
    cfg: ChunkConfig,
    embedder: &'a Embedder,
    summarizer: &'a dyn Summarizer,
    raptor: &'a RaptorParams,
    abort: &'a AtomicBool,
}

#[derive(Default)]
struct ConfigOutcome {
    built: Vec<IndexKey>,
    reused: Vec<IndexKey>,
    errors: Vec<IndexError>,
}

impl ConfigBuild<'_> {
    fn key(&self, method: RetrievalMethod) -> IndexKey {
        IndexKey::new(self.corpus.digest(), self.cfg, method)
    }

    fn run(&self, methods: &BTreeSet<RetrievalMethod>) -> ConfigOutcome {
        let mut out = ConfigOutcome::default();
        let provider = self.embedder.provider_id();
        let missing: Vec<RetrievalMethod> = methods
            .iter()
            .copied()
            .filter(|&m| {
                let key = self.key(m);
                let current = self.store.is_current(&key, provider);
                if current {
                    out.reused.push(key);
                }
                !current
            })
            .collect();
        if missing.is_empty() {
            return out;
        }
        let chunks = chunk_corpus(self.corpus, self.cfg);

        if missing.contains(&RetrievalMethod::TfIdf) {
            let started = Instant::now();
            let index = TfIdfIndex::build(chunks.clone());
            self.finish(RetrievalMethod::TfIdf, started, |dir| write_tfidf(dir, &index), &mut out);
        }

        let embedding_methods: Vec<RetrievalMethod> =
            missing.iter().copied().filter(RetrievalMethod::needs_embeddings).collect();
        if embedding_methods.is_empty() || self.abort.load(Ordering::SeqCst) {
            return out;
        }
        // One embedding pass shared by every embedding method of this config.
        let started = Instant::now();
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let embeddings = match self.embedder.embed_batch(&texts) {
            Ok(e) => e,
            Err(e) => {
                let e = IndexError::from(e);
                if e.is_provider_unavailable() {
                    self.abort.store(true, Ordering::SeqCst);
                }
                out.errors.push(e);
                return out;
            }
        };
        let vector = VectorIndex::new(
            chunks.clone(),
            embeddings.clone(),
            self.embedder.dimension(),
            provider,
        );
        for method in embedding_methods {
            if self.abort.load(Ordering::SeqCst) {
                break;
            }
            match method {
                RetrievalMethod::CosineSim | RetrievalMethod::Mmr => {
                    self.finish(method, started, |dir| write_vector(dir, &vector), &mut out);
                }
                RetrievalMethod::Raptor => {
                    let tree = build_raptor(
                        chunks.clone(),
                        embeddings.clone(),
                        self.embedder,
                        self.summarizer,
                        self.raptor,
                    );
                    match tree {
                        Ok(tree) => {
                            self.finish(method, started, |dir| write_raptor(dir, &tree), &mut out)
                        }
                        Err(e) => {
                            if e.is_provider_unavailable() {
                                self.abort.store(true, Ordering::SeqCst);
                            }
                            out.errors.push(e);
                        }
                    }
                }
                RetrievalMethod::TfIdf => unreachable!("filtered above"),
            }
        }
        out
    }

    fn finish(
        &self,
        method: RetrievalMethod,
        started: Instant,
        write: impl FnOnce(&Path) -> Result<WriteStats, IndexError>,
        out: &mut ConfigOutcome,
    ) {
        let key = self.key(method);
        let result = persist(&self.store.root, &key, write).and_then(|(stats, size)| {
            self.store.builds.fetch_add(1, Ordering::SeqCst);
            self.store.record(ManifestEntry {
                dir: key.rel_dir(),
                chunk_count: stats.chunk_count,
                node_count: stats.node_count,
                provider_id: stats.provider_id,
                build_ms: started.elapsed().as_millis() as u64,
                size_bytes: size,
                key: key.clone(),
            })
        });
        match result {
            Ok(()) => {
                tracing::info!(%key, "index built");
                out.built.push(key);
            }
            Err(e) => out.errors.push(e),
        }
    }
}

struct WriteStats {
    chunk_count: usize,
    node_count: usize,
    provider_id: Option<String>,
    dimension: Option<usize>,
}

/// Writes into a scratch directory, adds the per-index manifest, then swaps
/// it into place. Returns the stats and the directory size in bytes.
fn persist(
    root: &Path,
    key: &IndexKey,
    write: impl FnOnce(&Path) -> Result<WriteStats, IndexError>,
) -> Result<(WriteStats, u64), IndexError> {
    let dest = root.join(key.rel_dir());
    let parent = dest.parent().expect("index dirs are nested");
    fs::create_dir_all(parent).map_err(|e| IndexError::io(parent, e))?;
    let scratch = tempdir_in(parent)?;
    let stats = write(&scratch)?;
    let manifest = IndexManifest {
        format_version: FORMAT_VERSION,
        key: key.clone(),
        chunk_count: stats.chunk_count,
        node_count: stats.node_count,
        provider_id: stats.provider_id.clone(),
        dimension: stats.dimension,
    };
    write_json(&scratch.join("manifest.json"), &manifest)?;
    let mut size = 0;
    for entry in fs::read_dir(&scratch).map_err(|e| IndexError::io(&scratch, e))? {
        let entry = entry.map_err(|e| IndexError::io(&scratch, e))?;
        size += entry.metadata().map_err(|e| IndexError::io(&scratch, e))?.len();
    }
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| IndexError::io(&dest, e))?;
    }
    fs::rename(&scratch, &dest).map_err(|e| IndexError::io(&dest, e))?;
    Ok((stats, size))
}

fn tempdir_in(parent: &Path) -> Result<PathBuf, IndexError> {
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let name = format!(
        ".building-{}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    );
    let dir = parent.join(name);
    fs::create_dir_all(&dir).map_err(|e| IndexError::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IndexError> {
    let body = serde_json::to_vec_pretty(value).expect("index metadata serializes");
    fs::write(path, body).map_err(|e| IndexError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IndexError> {
    let file = fs::File::create(path).map_err(|e| IndexError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| IndexError::io(path, e))?;
        w.write_all(b"\n").map_err(|e| IndexError::io(path, e))?;
    }
    w.flush().map_err(|e| IndexError::io(path, e))
}

fn write_f32(path: &Path, values: &[f32]) -> Result<(), IndexError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| IndexError::io(path, e))
}

fn write_vector(dir: &Path, index: &VectorIndex) -> Result<WriteStats, IndexError> {
    write_jsonl(&dir.join("chunks.jsonl"), index.chunks())?;
    write_f32(&dir.join("vectors.f32"), index.raw_vectors())?;
    Ok(WriteStats {
        chunk_count: index.len(),
        node_count: 0,
        provider_id: Some(index.provider_id().to_string()),
        dimension: Some(index.dimension()),
    })
}

fn write_tfidf(dir: &Path, index: &TfIdfIndex) -> Result<WriteStats, IndexError> {
    write_jsonl(&dir.join("chunks.jsonl"), index.chunks())?;
    write_json(
        &dir.join("vocab.json"),
        &Vocab {
            terms: index.terms().to_vec(),
            idf: index.idf_values().to_vec(),
        },
    )?;
    write_jsonl(&dir.join("postings.jsonl"), index.rows())?;
    Ok(WriteStats {
        chunk_count: index.len(),
        node_count: 0,
        provider_id: None,
        dimension: None,
    })
}

fn write_raptor(dir: &Path, tree: &RaptorTree) -> Result<WriteStats, IndexError> {
    write_jsonl(&dir.join("chunks.jsonl"), tree.leaves())?;
    write_f32(&dir.join("vectors.f32"), tree.raw_vectors())?;
    write_json(
        &dir.join("tree.json"),
        &TreeFile {
            nodes: tree.nodes().to_vec(),
            roots: tree.roots().to_vec(),
        },
    )?;
    Ok(WriteStats {
        chunk_count: tree.leaves().len(),
        node_count: tree.nodes().len(),
        provider_id: Some(tree.provider_id().to_string()),
        dimension: Some(tree.dimension()),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IndexError> {
    let bytes = fs::read(path).map_err(|e| IndexError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| IndexError::corrupt(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IndexError> {
    let file = fs::File::open(path).map_err(|e| IndexError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| IndexError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IndexError::corrupt(path, e))?);
    }
    Ok(out)
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, IndexError> {
    let bytes = fs::read(path).map_err(|e| IndexError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(IndexError::corrupt(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

fn load_index(dir: &Path, key: &IndexKey) -> Result<LoadedIndex, IndexError> {
    let manifest: IndexManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION || &manifest.key != key {
        return Err(IndexError::corrupt(dir, "manifest does not match key or format version"));
    }
    let chunks: Vec<Chunk> = read_jsonl(&dir.join("chunks.jsonl"))?;
    if chunks.len() != manifest.chunk_count {
        return Err(IndexError::corrupt(dir, "chunk count mismatch"));
    }
    let dim = manifest.dimension.unwrap_or(0);
    let provider = manifest.provider_id.clone().unwrap_or_default();
    Ok(match key.method {
        RetrievalMethod::CosineSim | RetrievalMethod::Mmr => {
            let vectors = read_f32(&dir.join("vectors.f32"), chunks.len() * dim)?;
            LoadedIndex::Vector(VectorIndex::from_raw(chunks, vectors, dim, provider))
        }
        RetrievalMethod::TfIdf => {
            let vocab: Vocab = read_json(&dir.join("vocab.json"))?;
            let rows: Vec<Vec<(u32, f64)>> = read_jsonl(&dir.join("postings.jsonl"))?;
            if rows.len() != chunks.len() || vocab.terms.len() != vocab.idf.len() {
                return Err(IndexError::corrupt(dir, "postings or vocabulary size mismatch"));
            }
            LoadedIndex::TfIdf(TfIdfIndex::from_parts(chunks, vocab.terms, vocab.idf, rows))
        }
        RetrievalMethod::Raptor => {
            let tree: TreeFile = read_json(&dir.join("tree.json"))?;
            let rows = chunks.len() + tree.nodes.len();
            let vectors = read_f32(&dir.join("vectors.f32"), rows * dim)?;
            LoadedIndex::Raptor(RaptorTree::from_parts(
                chunks, tree.nodes, tree.roots, dim, vectors, provider,
            ))
        }
    })
}
