//! Recursive cluster-and-summarize tree with collapsed-tree retrieval.
//!
//! Level 0 holds the chunks. Each higher level clusters the level below
//! (balanced k-means, at most `branching` members per cluster), asks a
//! [`Summarizer`] for one summary per cluster and embeds it. Building stops
//! when a level has a single node or `max_levels` is reached. Retrieval scores
//! leaves and summaries together.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kmeans::balanced_kmeans;
use super::IndexError;
use crate::corpus::Chunk;
use crate::embedder::{cosine_with_norms, l2_norm, Embedder, Embedding};
use crate::llm::{Llm, LlmRequest};

pub const RAPTOR_PROMPT_TEMPLATE: &str = "Summarize the following passages into one coherent paragraph preserving all named entities and numbers:\n{children}";

/// Prefix of synthetic chunk ids for summary nodes.
pub const RAPTOR_ID_PREFIX: &str = "raptor:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaptorParams {
    pub branching: usize,
    pub max_levels: usize,
    pub kmeans_iterations: usize,
    pub seed: u64,
    pub summary_max_tokens: u32,
}

impl Default for RaptorParams {
    fn default() -> Self {
        Self {
            branching: 4,
            max_levels: 5,
            kmeans_iterations: 25,
            seed: 0x5eed,
            summary_max_tokens: 256,
        }
    }
}

pub trait Summarizer: Sync {
    fn summarize(&self, passages: &[&str]) -> Result<String, IndexError>;
}

/// Fills [`RAPTOR_PROMPT_TEMPLATE`] with the passages (blank-line separated)
/// and returns the LLM's text.
pub struct LlmSummarizer<'a> {
    llm: &'a Llm,
    max_tokens: u32,
}

impl<'a> LlmSummarizer<'a> {
    pub fn new(llm: &'a Llm, max_tokens: u32) -> Self {
        Self { llm, max_tokens }
    }

    pub fn prompt(passages: &[&str]) -> String {
        RAPTOR_PROMPT_TEMPLATE.replace("{children}", &passages.join("\n\n"))
    }
}

impl Summarizer for LlmSummarizer<'_> {
    fn summarize(&self, passages: &[&str]) -> Result<String, IndexError> {
        let mut req = LlmRequest::new(Self::prompt(passages));
        req.max_tokens = self.max_tokens;
        req.temperature = 0.0;
        Ok(self.llm.generate(&req)?.text)
    }
}

/// Offline summarizer: the first `max_chars` characters of the passages
/// joined by single spaces.
#[derive(Debug, Clone, Copy)]
pub struct PrefixSummarizer {
    pub max_chars: usize,
}

impl Summarizer for PrefixSummarizer {
    fn summarize(&self, passages: &[&str]) -> Result<String, IndexError> {
        Ok(passages.join(" ").chars().take(self.max_chars).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaptorNode {
    pub node_id: String,
    /// Chunk ids for level-1 nodes, node ids above that.
    pub child_ids: Vec<String>,
    pub summary_text: String,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaptorTree {
    pub(crate) leaves: Vec<Chunk>,
    pub(crate) nodes: Vec<RaptorNode>,
    pub(crate) roots: Vec<String>,
    pub(crate) dimension: usize,
    /// Leaf rows followed by node rows.
    pub(crate) vectors: Vec<f32>,
    pub(crate) norms: Vec<f64>,
    pub(crate) provider_id: String,
}

impl RaptorTree {
    pub(crate) fn from_parts(
        leaves: Vec<Chunk>,
        nodes: Vec<RaptorNode>,
        roots: Vec<String>,
        dimension: usize,
        vectors: Vec<f32>,
        provider_id: String,
    ) -> Self {
        let norms = vectors.chunks_exact(dimension.max(1)).map(l2_norm).collect();
        Self {
            leaves,
            nodes,
            roots,
            dimension,
            vectors,
            norms,
            provider_id,
        }
    }

    pub fn leaves(&self) -> &[Chunk] {
        &self.leaves
    }

    pub fn nodes(&self) -> &[RaptorNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[String] {
        &self.roots
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub(crate) fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Leaves plus summary nodes.
    pub fn len(&self) -> usize {
        self.leaves.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// The tree's searchable items: leaves as-is, nodes as synthetic chunks
    /// `raptor:<node_id>` carrying the summary text.
    pub fn collapsed_chunks(&self) -> Vec<Chunk> {
        self.leaves
            .iter()
            .cloned()
            .chain(self.nodes.iter().map(|n| Chunk {
                chunk_id: format!("{RAPTOR_ID_PREFIX}{}", n.node_id),
                doc_id: "raptor".to_string(),
                start: 0,
                end: n.summary_text.chars().count(),
                text: n.summary_text.clone(),
            }))
            .collect()
    }

    /// Cosine of the query against every collapsed item.
    pub fn cosine_scores(&self, query: &Embedding) -> Vec<f64> {
        let qn = query.norm() as f64;
        self.vectors
            .chunks_exact(self.dimension)
            .zip(&self.norms)
            .map(|(row, &n)| cosine_with_norms(query.values(), qn, row, n))
            .collect()
    }

    pub fn node(&self, node_id: &str) -> Option<&RaptorNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    /// Content hash over structure, summaries and vectors.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.leaves {
            h.update(c.chunk_id.as_bytes());
            h.update([0]);
        }
        for n in &self.nodes {
            h.update(serde_json::to_vec(n).expect("node serializes"));
        }
        for r in &self.roots {
            h.update(r.as_bytes());
            h.update([0]);
        }
        for v in &self.vectors {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn build_raptor(
    chunks: Vec<Chunk>,
    leaf_embeddings: Vec<Embedding>,
    embedder: &Embedder,
    summarizer: &dyn Summarizer,
    params: &RaptorParams,
) -> Result<RaptorTree, IndexError> {
    assert!(params.branching >= 2, "branching must be at least 2");
    assert_eq!(chunks.len(), leaf_embeddings.len());
    let dimension = embedder.dimension();

    let mut vectors: Vec<f32> = Vec::with_capacity(chunks.len() * dimension * 2);
    for e in &leaf_embeddings {
        vectors.extend_from_slice(e.values());
    }
    // Current level: (id, text, vector).
    let mut frontier: Vec<(String, String, Vec<f32>)> = chunks
        .iter()
        .zip(leaf_embeddings)
        .map(|(c, e)| (c.chunk_id.clone(), c.text.clone(), e.into_values()))
        .collect();
    let mut nodes: Vec<RaptorNode> = Vec::new();
    let mut level = 0u32;

    while frontier.len() > 1 && (level as usize) < params.max_levels {
        level += 1;
        let points: Vec<&[f32]> = frontier.iter().map(|(_, _, v)| v.as_slice()).collect();
        let clusters = balanced_kmeans(
            &points,
            params.branching,
            params.kmeans_iterations,
            params.seed.wrapping_add(level as u64),
        );
        let summaries: Vec<String> = clusters
            .par_iter()
            .map(|members| {
                let texts: Vec<&str> = members.iter().map(|&m| frontier[m].1.as_str()).collect();
                summarizer.summarize(&texts)
            })
            .collect::<Result<_, _>>()?;
        let embeddings = embedder.embed_batch(&summaries)?;

        let mut next = Vec::with_capacity(clusters.len());
        for (i, ((members, summary), emb)) in
            clusters.iter().zip(summaries).zip(embeddings).enumerate()
        {
            let node_id = format!("L{level}N{i}");
            nodes.push(RaptorNode {
                node_id: node_id.clone(),
                child_ids: members.iter().map(|&m| frontier[m].0.clone()).collect(),
                summary_text: summary.clone(),
                level,
            });
            let values = emb.into_values();
            vectors.extend_from_slice(&values);
            next.push((node_id, summary, values));
        }
        frontier = next;
    }

    let roots = frontier.into_iter().map(|(id, _, _)| id).collect();
    Ok(RaptorTree::from_parts(
        chunks,
        nodes,
        roots,
        dimension,
        vectors,
        embedder.provider_id().to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, HashSet};

    use super::*;

    fn chunks(n: usize) -> Vec<Chunk> {
        (0..n)
            .map(|i| {
                let text = format!("passage {i} about topic {} with detail {}", i % 5, i * 37 % 11);
                Chunk {
                    chunk_id: format!("doc{:02}.txt#0..{}", i, text.len()),
                    doc_id: format!("doc{i:02}.txt"),
                    start: 0,
                    end: text.len(),
                    text,
                }
            })
            .collect()
    }

    fn build(n: usize, branching: usize) -> RaptorTree {
        let emb = Embedder::local();
        let cs = chunks(n);
        let e = emb.embed_batch(&cs.iter().map(|c| c.text.as_str()).collect::<Vec<_>>()).unwrap();
        let params = RaptorParams {
            branching,
            ..Default::default()
        };
        build_raptor(cs, e, &emb, &PrefixSummarizer { max_chars: 200 }, &params).unwrap()
    }

    /// Checks reachability and the level rule; returns level per id.
    fn check_structure(tree: &RaptorTree) -> HashMap<String, u32> {
        let mut level: HashMap<String, u32> =
            tree.leaves().iter().map(|c| (c.chunk_id.clone(), 0)).collect();
        for n in tree.nodes() {
            let child_max = n.child_ids.iter().map(|c| level[c]).max().unwrap();
            assert_eq!(n.level, child_max + 1);
            level.insert(n.node_id.clone(), n.level);
        }
        let by_id: HashMap<&str, &RaptorNode> =
            tree.nodes().iter().map(|n| (n.node_id.as_str(), n)).collect();
        let mut reached = HashSet::new();
        let mut stack: Vec<&str> = tree.roots().iter().map(String::as_str).collect();
        while let Some(id) = stack.pop() {
            reached.insert(id.to_string());
            if let Some(n) = by_id.get(id) {
                stack.extend(n.child_ids.iter().map(String::as_str));
            }
        }
        for c in tree.leaves() {
            assert!(reached.contains(&c.chunk_id), "{} unreachable", c.chunk_id);
        }
        level
    }

    #[test]
    fn single_chunk_is_a_lone_leaf() {
        let tree = build(1, 2);
        assert!(tree.nodes().is_empty());
        assert_eq!(tree.roots(), [tree.leaves()[0].chunk_id.clone()]);
    }

    #[test]
    fn four_chunks_binary() {
        let tree = build(4, 2);
        check_structure(&tree);
        let l1 = tree.nodes().iter().filter(|n| n.level == 1).count();
        let l2 = tree.nodes().iter().filter(|n| n.level == 2).count();
        assert_eq!((l1, l2), (2, 1));
        assert_eq!(tree.roots().len(), 1);
        assert!(tree.nodes().iter().all(|n| n.child_ids.len() == 2));
    }

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(build(13, 3).digest(), build(13, 3).digest());
    }

    #[test]
    fn max_levels_caps_height() {
        let emb = Embedder::local();
        let cs = chunks(16);
        let e = emb.embed_batch(&cs.iter().map(|c| c.text.as_str()).collect::<Vec<_>>()).unwrap();
        let params = RaptorParams {
            branching: 2,
            max_levels: 2,
            ..Default::default()
        };
        let tree = build_raptor(cs, e, &emb, &PrefixSummarizer { max_chars: 50 }, &params).unwrap();
        check_structure(&tree);
        assert!(tree.nodes().iter().all(|n| n.level <= 2));
        assert_eq!(tree.roots().len(), 4);
    }

    #[test]
    fn llm_summarizer_fills_template() {
        let p = LlmSummarizer::prompt(&["one", "two"]);
        assert!(p.starts_with("Summarize the following passages"));
        assert!(p.ends_with(":\none\n\ntwo"));
        let llm = Llm::mock();
        let s = LlmSummarizer::new(&llm, 200).summarize(&["one", "two"]).unwrap();
        assert_eq!(s, "MOCK: two");
    }
}
