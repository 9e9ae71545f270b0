use crate::corpus::Chunk;
use crate::embedder::{cosine_with_norms, l2_norm, Embedding};

/// Row-major `|chunks| x dimension` matrix of chunk embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    chunks: Vec<Chunk>,
    dimension: usize,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    provider_id: String,
}

impl VectorIndex {
    pub fn new(
        chunks: Vec<Chunk>,
        embeddings: Vec<Embedding>,
        dimension: usize,
        provider_id: impl Into<String>,
    ) -> Self {
        assert_eq!(chunks.len(), embeddings.len(), "one embedding per chunk");
        let mut vectors = Vec::with_capacity(chunks.len() * dimension);
        for e in embeddings {
            assert_eq!(e.dimension(), dimension);
            vectors.extend_from_slice(e.values());
        }
        Self::from_raw(chunks, vectors, dimension, provider_id.into())
    }

    pub(crate) fn from_raw(
        chunks: Vec<Chunk>,
        vectors: Vec<f32>,
        dimension: usize,
        provider_id: String,
    ) -> Self {
        let norms = vectors.chunks_exact(dimension.max(1)).map(l2_norm).collect();
        Self {
            chunks,
            dimension,
            vectors,
            norms,
            provider_id,
        }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    pub(crate) fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding::new(self.row(i).to_vec())
    }

    /// Cosine of the query against every row, in chunk order.
    pub fn cosine_scores(&self, query: &Embedding) -> Vec<f64> {
        let qn = query.norm() as f64;
        (0..self.len())
            .map(|i| cosine_with_norms(query.values(), qn, self.row(i), self.norms[i]))
            .collect()
    }

    /// Cosine between two rows.
    pub(crate) fn row_cosine(&self, a: usize, b: usize) -> f64 {
        cosine_with_norms(self.row(a), self.norms[a], self.row(b), self.norms[b])
    }
}
