//! Smoothed TF-IDF with cosine scoring.
//!
//! `idf(t) = ln((1 + N) / (1 + df(t))) + 1`, weight = raw count x idf, rows
//! L2-normalized. Queries are weighted with the corpus idf and unseen terms
//! are ignored.

use std::collections::HashMap;

use crate::corpus::Chunk;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfIndex {
    chunks: Vec<Chunk>,
    terms: Vec<String>,
    vocabulary: HashMap<String, u32>,
    idf: Vec<f64>,
    /// Sparse rows sorted by term id; unit norm or empty.
    rows: Vec<Vec<(u32, f64)>>,
}

impl TfIdfIndex {
    pub fn build(chunks: Vec<Chunk>) -> Self {
        let mut vocabulary: HashMap<String, u32> = HashMap::new();
        let mut terms: Vec<String> = Vec::new();
        let mut counts: Vec<Vec<(u32, f64)>> = Vec::with_capacity(chunks.len());
        let mut df: Vec<u32> = Vec::new();

        for chunk in &chunks {
            let mut tf: HashMap<u32, f64> = HashMap::new();
            for tok in tokenize(&chunk.text) {
                let id = *vocabulary.entry(tok).or_insert_with_key(|t| {
                    terms.push(t.clone());
                    df.push(0);
                    (terms.len() - 1) as u32
                });
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
            for &id in tf.keys() {
                df[id as usize] += 1;
            }
            let mut row: Vec<(u32, f64)> = tf.into_iter().collect();
            row.sort_unstable_by_key(|&(id, _)| id);
            counts.push(row);
        }

        let n = chunks.len() as f64;
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let rows = counts
            .into_iter()
            .map(|row| {
                let weighted: Vec<(u32, f64)> =
                    row.into_iter().map(|(id, c)| (id, c * idf[id as usize])).collect();
                normalize(weighted)
            })
            .collect();
        Self {
            chunks,
            terms,
            vocabulary,
            idf,
            rows,
        }
    }

    pub(crate) fn from_parts(
        chunks: Vec<Chunk>,
        terms: Vec<String>,
        idf: Vec<f64>,
        rows: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        let vocabulary = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            chunks,
            terms,
            vocabulary,
            idf,
            rows,
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

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn idf_values(&self) -> &[f64] {
        &self.idf
    }

    pub fn rows(&self) -> &[Vec<(u32, f64)>] {
        &self.rows
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&id| self.idf[id as usize])
    }

    /// Unit-norm sparse query vector; empty when no term is in vocabulary.
    pub fn query_vector(&self, query: &str) -> Vec<(u32, f64)> {
        let mut tf: HashMap<u32, f64> = HashMap::new();
        for tok in tokenize(query) {
            if let Some(&id) = self.vocabulary.get(&tok) {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        let mut q: Vec<(u32, f64)> = tf
            .into_iter()
            .map(|(id, c)| (id, c * self.idf[id as usize]))
            .collect();
        q.sort_unstable_by_key(|&(id, _)| id);
        normalize(q)
    }

    /// Cosine between the query vector and every row, in chunk order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = self.query_vector(query);
        if q.is_empty() {
            return vec![0.0; self.rows.len()];
        }
        self.rows.iter().map(|row| sparse_dot(&q, row)).collect()
    }
}

fn normalize(mut v: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in &mut v {
            *w /= norm;
        }
    }
    v
}

/// Both inputs sorted by id.
fn sparse_dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}
