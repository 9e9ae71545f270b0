//! Seeded k-means with a capacity-bounded final assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Groups `points` into clusters of at most `capacity` members.
///
/// `k = ceil(n / capacity)` centroids are seeded with k-means++ from a
/// ChaCha8 stream at `seed`, refined by `iterations` Lloyd steps (an empty
/// cluster is re-seeded with the point farthest from its centroid), and then
/// points are assigned, closest first, to the nearest centroid that still has
/// room. Returned clusters are non-empty, members ascending, clusters ordered
/// by their smallest member.
pub fn balanced_kmeans(
    points: &[&[f32]],
    capacity: usize,
    iterations: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let n = points.len();
    assert!(capacity >= 1, "capacity must be positive");
    if n == 0 {
        return Vec::new();
    }
    let k = n.div_ceil(capacity);
    if k == 1 {
        return vec![(0..n).collect()];
    }
    let mut centroids = init_plus_plus(points, k, seed);

    for _ in 0..iterations {
        let assign: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let dim = points[0].len();
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x as f64;
            }
        }
        // Farthest-first candidates for re-seeding empty clusters.
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| assign[b].1.total_cmp(&assign[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        let mut changed = false;
        for c in 0..k {
            let next: Vec<f64> = if counts[c] == 0 {
                let p = far.next().expect("fewer clusters than points");
                points[p].iter().map(|&x| x as f64).collect()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            if next != centroids[c] {
                changed = true;
                centroids[c] = next;
            }
        }
        if !changed {
            break;
        }
    }

    capacity_assign(points, &centroids, capacity)
}

fn nearest(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn init_plus_plus(points: &[&[f32]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let to_f64 = |p: &[f32]| p.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut centroids = vec![to_f64(points[rng.gen_range(0..n)])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a centroid.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = to_f64(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn capacity_assign(points: &[&[f32]], centroids: &[Vec<f64>], capacity: usize) -> Vec<Vec<usize>> {
    let k = centroids.len();
    let first: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, centroids)).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| first[a].1.total_cmp(&first[b].1).then(a.cmp(&b)));

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in order {
        let c = if members[first[i].0].len() < capacity {
            first[i].0
        } else {
            let d: Vec<f64> = centroids.iter().map(|c| sq_dist(points[i], c)).collect();
            (0..k)
                .filter(|&c| members[c].len() < capacity)
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)))
                .expect("k * capacity >= n")
        };
        members[c].push(i);
    }
    let mut clusters: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}
