//! Dynamic time warping distance, DTW k-means with barycenter-averaged
//! centroids, and the pairwise distance matrix both are built on.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

/// Classic unconstrained DTW with absolute-difference local cost and
/// steps (1,0), (0,1), (1,1). No warping window.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = b.len();
    let mut prev = vec![f64::INFINITY; n + 1];
    let mut curr = vec![f64::INFINITY; n + 1];
    prev[0] = 0.0;
    for &x in a {
        curr[0] = f64::INFINITY;
        for j in 1..=n {
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[n])
}

/// DTW plus one optimal alignment path as (index into a, index into b)
/// pairs. Ties prefer the diagonal step, then the step consuming `a`.
pub fn dtw_path(a: &[f64], b: &[f64]) -> Result<(f64, Vec<(usize, usize)>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![f64::INFINITY; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    acc[idx(0, 0)] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = acc[idx(i - 1, j - 1)]
                .min(acc[idx(i - 1, j)])
                .min(acc[idx(i, j - 1)]);
            acc[idx(i, j)] = (a[i - 1] - b[j - 1]).abs() + best;
        }
    }
    let mut path = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        path.push((i - 1, j - 1));
        let diag = acc[idx(i - 1, j - 1)];
        let up = acc[idx(i - 1, j)];
        let left = acc[idx(i, j - 1)];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    path.reverse();
    Ok((acc[idx(n, m)], path))
}

/// Full symmetric pairwise DTW matrix. Parallel over pairs; the result is
/// bit-identical for any worker count because each cell is an independent
/// pure computation collected in index order.
pub fn pairwise_dtw(seqs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = seqs.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw(&seqs[i], &seqs[j]))
        .collect::<Result<_>>()?;
    let mut mat = vec![vec![0.0; n]; n];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        mat[i][j] = d;
        mat[j][i] = d;
    }
    Ok(mat)
}

/// Min-max scale one sequence to [0,1]; constant sequences map to 0.5.
pub fn minmax_scale(seq: &[f64]) -> Vec<f64> {
    let lo = seq.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = seq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; seq.len()];
    }
    seq.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Centroids in the scaled [0,1] space the clustering ran in.
    pub centroids: Vec<Vec<f64>>,
    /// Total within-cluster DTW cost after each assignment pass.
    pub cost_history: Vec<f64>,
}

const DBA_INNER_ITERS: usize = 10;

/// K-means over sequences under DTW. Inputs are min-max scaled to [0,1]
/// first; centroids are updated by barycenter averaging with a median
/// combiner, which cannot increase the within-cluster cost under the
/// absolute-difference local metric.
pub fn cluster_bseqs(
    seqs: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    let n = seqs.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} outside 1..={n}"
        )));
    }
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySequence);
    }
    let scaled: Vec<Vec<f64>> = seqs.iter().map(|s| minmax_scale(s)).collect();
    let dmat = pairwise_dtw(&scaled)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let seeds = seed_plus_plus(&dmat, k, &mut rng);
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| scaled[i].clone()).collect();

    let mut labels = vec![0usize; n];
    let mut cost_history = Vec::new();
    for _ in 0..max_iters {
        // assignment (ties toward the lower cluster index)
        let assigned: Vec<(usize, f64)> = scaled
            .par_iter()
            .map(|s| {
                let mut best = (0usize, f64::INFINITY);
                for (c, cent) in centroids.iter().enumerate() {
                    let d = dtw(s, cent).expect("non-empty by construction");
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            })
            .collect();
        let mut new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();

        // reseed empty clusters from the farthest point
        for c in 0..k {
            if new_labels.iter().any(|&l| l == c) {
                continue;
            }
            let far = (0..n)
                .filter(|&i| {
                    let l = new_labels[i];
                    new_labels.iter().filter(|&&x| x == l).count() > 1
                })
                .max_by(|&x, &y| dists[x].partial_cmp(&dists[y]).unwrap())
                .unwrap_or(0);
            centroids[c] = scaled[far].clone();
            new_labels[far] = c;
            dists[far] = 0.0;
        }

        cost_history.push(dists.iter().sum());
        let converged = new_labels == labels && cost_history.len() > 1;
        labels = new_labels;
        if converged {
            break;
        }

        for c in 0..k {
            let members: Vec<&[f64]> = (0..n)
                .filter(|&i| labels[i] == c)
                .map(|i| scaled[i].as_slice())
                .collect();
            dba_update(&mut centroids[c], &members);
        }
    }

    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        cost_history,
    })
}

/// k-means++-style seeding over a precomputed distance matrix.
fn seed_plus_plus(dmat: &[Vec<f64>], k: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let n = dmat.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best = dmat[chosen[0]].clone();
    while chosen.len() < k {
        let weights: Vec<f64> = best.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            best[i] = best[i].min(dmat[next][i]);
        }
    }
    chosen
}

/// Barycenter averaging: align members to the centroid, replace every
/// centroid entry with the median of the values aligned to it.
fn dba_update(centroid: &mut Vec<f64>, members: &[&[f64]]) {
    if members.is_empty() {
        return;
    }
    for _ in 0..DBA_INNER_ITERS {
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); centroid.len()];
        for m in members {
            let (_, path) = dtw_path(centroid, m).expect("non-empty by construction");
            for (ci, mj) in path {
                buckets[ci].push(m[mj]);
            }
        }
        let mut changed = false;
        for (c, bucket) in centroid.iter_mut().zip(buckets.iter_mut()) {
            if bucket.is_empty() {
                continue;
            }
            bucket.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = bucket.len() / 2;
            let new = if bucket.len() % 2 == 1 {
                bucket[mid]
            } else {
                (bucket[mid - 1] + bucket[mid]) / 2.0
            };
            if new != *c {
                *c = new;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}
