//! Maximal marginal relevance.
//!
//! Greedy: each step picks the remaining candidate maximizing
//! `lambda * cos(q, d) - (1 - lambda) * max_{s in selected} cos(d, s)`, with the
//! max over an empty selection taken as 0. Ties go to higher relevance, then
//! to the smaller chunk_id. The reported score is the objective at the moment
//! the candidate was picked, so it need not decrease with rank.

use std::cmp::Ordering;

use super::ScoredChunk;
use crate::corpus::Chunk;
use crate::embedder::{cosine_with_norms, Embedding};

pub const DEFAULT_MMR_LAMBDA: f64 = 0.5;

pub fn mmr_select(
    query_vec: &Embedding,
    candidates: &[(Chunk, Embedding)],
    k: usize,
    lambda: f64,
) -> Vec<ScoredChunk> {
    let qn = query_vec.norm() as f64;
    let relevance: Vec<f64> = candidates
        .iter()
        .map(|(_, e)| cosine_with_norms(query_vec.values(), qn, e.values(), e.norm() as f64))
        .collect();
    let ids: Vec<&str> = candidates.iter().map(|(c, _)| c.chunk_id.as_str()).collect();
    let sim = |a: usize, b: usize| {
        let (ea, eb) = (&candidates[a].1, &candidates[b].1);
        cosine_with_norms(ea.values(), ea.norm() as f64, eb.values(), eb.norm() as f64)
    };
    greedy(&relevance, &ids, sim, k, lambda)
        .into_iter()
        .enumerate()
        .map(|(i, (idx, score))| ScoredChunk {
            chunk: candidates[idx].0.clone(),
            score,
            rank: i + 1,
            selected: true,
        })
        .collect()
}

/// Returns `(candidate index, objective at selection)` in selection order.
pub(crate) fn greedy(
    relevance: &[f64],
    ids: &[&str],
    sim: impl Fn(usize, usize) -> f64,
    k: usize,
    lambda: f64,
) -> Vec<(usize, f64)> {
    let n = relevance.len();
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    let mut taken = vec![false; n];
    let mut picked: Vec<(usize, f64)> = Vec::with_capacity(k.min(n));

    while picked.len() < k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let penalty = if picked.is_empty() { 0.0 } else { max_sim[i] };
            let objective = lambda * relevance[i] - (1.0 - lambda) * penalty;
            let better = match best {
                None => true,
                Some((b, b_obj)) => match objective.total_cmp(&b_obj) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => match relevance[i].total_cmp(&relevance[b]) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => ids[i] < ids[b],
                    },
                },
            };
            if better {
                best = Some((i, objective));
            }
        }
        let (chosen, objective) = best.expect("at least one candidate remains");
        taken[chosen] = true;
        picked.push((chosen, objective));
        for j in (0..n).filter(|&j| !taken[j]) {
            let s = sim(j, chosen);
            if s > max_sim[j] {
                max_sim[j] = s;
            }
        }
    }
    picked
}
