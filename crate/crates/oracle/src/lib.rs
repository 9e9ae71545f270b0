//! Slow, obviously-correct reference implementations for testing.
//!
//! Nothing here shares code with `ragforge-core`. Everything is computed in
//! `f64` with plain loops and full sorts so it can be read against the
//! definitions directly.

use std::collections::{BTreeMap, BTreeSet};

/// `(start, end)` char offsets of a sliding window: windows start at
/// 0, stride, 2*stride, ...; stop after the first window touching the end.
pub fn windows(char_len: usize, size: usize, overlap: usize) -> Vec<(usize, usize)> {
    assert!(size > 0 && overlap < size);
    let stride = size - overlap;
    let mut out = Vec::new();
    if char_len == 0 {
        return out;
    }
    let mut k = 0;
    loop {
        let start = k * stride;
        let end = usize::min(start + size, char_len);
        out.push((start, end));
        if end >= char_len {
            return out;
        }
        k += 1;
    }
}

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 14695981039346656037;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(1099511628211);
    }
    hash
}

/// Signed hashed trigram vector of `\u{2}text\u{3}`, 256 buckets, unit norm
/// (all zeros stays all zeros).
pub fn trigram_embedding(text: &str) -> Vec<f64> {
    let mut framed = String::from('\u{2}');
    framed.push_str(text);
    framed.push('\u{3}');
    let chars: Vec<char> = framed.chars().collect();
    let mut v = vec![0.0f64; 256];
    let mut i = 0;
    while i + 3 <= chars.len() {
        let gram: String = chars[i..i + 3].iter().collect();
        let h = fnv1a_64(gram.as_bytes());
        let sign = if h & (1u64 << 63) != 0 { -1.0 } else { 1.0 };
        v[(h % 256) as usize] += sign;
        i += 1;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// [`trigram_embedding`] rounded to the `f32` storage precision.
pub fn trigram_embedding_f32(text: &str) -> Vec<f64> {
    trigram_embedding(text)
        .into_iter()
        .map(|x| f64::from(x as f32))
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(cur.to_lowercase());
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur.to_lowercase());
    }
    out
}

/// Smoothed idf for every term of the collection.
pub fn idf(docs: &[&str]) -> BTreeMap<String, f64> {
    let n = docs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for d in docs {
        let uniq: BTreeSet<String> = tokens(d).into_iter().collect();
        for t in uniq {
            *df.entry(t).or_default() += 1.0;
        }
    }
    df.into_iter()
        .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d)).ln() + 1.0))
        .collect()
}

/// Cosine between the query's tf*idf vector and each document's, over a
/// dense vocabulary. Unseen query terms are dropped.
pub fn tfidf_scores(docs: &[&str], query: &str) -> Vec<f64> {
    let idf = idf(docs);
    let vocab: Vec<&String> = idf.keys().collect();
    let dense = |text: &str| -> Vec<f64> {
        let toks = tokens(text);
        vocab
            .iter()
            .map(|t| toks.iter().filter(|x| x == t).count() as f64 * idf[*t])
            .collect()
    };
    let q = dense(query);
    docs.iter().map(|d| cosine(&q, &dense(d))).collect()
}

/// Indices of the top `k` by score descending, then id ascending.
pub fn top_k(ids: &[String], scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    idx.truncate(k);
    idx
}

/// Greedy maximal marginal relevance, recomputing every max from scratch.
/// Returns `(index, objective at selection)`.
pub fn mmr(
    query: &[f64],
    vectors: &[Vec<f64>],
    ids: &[String],
    k: usize,
    lambda: f64,
) -> Vec<(usize, f64)> {
    let rel: Vec<f64> = vectors.iter().map(|v| cosine(query, v)).collect();
    let mut chosen: Vec<(usize, f64)> = Vec::new();
    while chosen.len() < k && chosen.len() < vectors.len() {
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for i in 0..vectors.len() {
            if chosen.iter().any(|&(c, _)| c == i) {
                continue;
            }
            let redundancy = chosen
                .iter()
                .map(|&(c, _)| cosine(&vectors[i], &vectors[c]))
                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
                .unwrap_or(0.0);
            candidates.push((i, lambda * rel[i] - (1.0 - lambda) * redundancy));
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(rel[b.0].partial_cmp(&rel[a.0]).unwrap())
                .then_with(|| ids[a.0].cmp(&ids[b.0]))
        });
        chosen.push(candidates[0]);
    }
    chosen
}

/// Deterministic pseudo-English text from a small vocabulary, for synthetic
/// corpora (xorshift64, no external RNG).
pub fn synthetic_text(seed: u64, chars: usize) -> String {
    const WORDS: &[&str] = &[
        "river", "stone", "market", "engine", "protein", "orbit", "ledger", "harbor",
        "violet", "signal", "canyon", "theory", "copper", "lantern", "glacier", "census",
        "falcon", "quartz", "meadow", "circuit", "archive", "tundra", "compass", "saddle",
        "vaccine", "tariff", "monsoon", "parsec", "granite", "sonnet", "voltage", "basalt",
    ];
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut out = String::new();
    while out.len() < chars {
        let w = WORDS[(next() % WORDS.len() as u64) as usize];
        out.push_str(w);
        out.push(if next() % 9 == 0 { '.' } else { ' ' });
        if out.ends_with('.') {
            out.push(' ');
        }
    }
    out.truncate(chars);
    out
}
