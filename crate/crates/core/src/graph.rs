//! Signal-graph construction: connect the signal pairs whose backfill
//! sequences have revised most similarly over the available history.

use crate::dtw::{dtw, minmax_scale};
use crate::error::{Error, Result};
use crate::signal::{SignalId, Week};
use crate::store::RevisionDataset;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub a: SignalId,
    pub b: SignalId,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SignalGraph {
    /// All signals, sorted; vertex v corresponds to `vertices[v]`.
    pub vertices: Vec<SignalId>,
    /// Selected edges, ascending by (weight, endpoint pair).
    pub edges: Vec<GraphEdge>,
    pub tau: usize,
}

impl SignalGraph {
    /// Symmetric normalized adjacency with self-loops,
    /// D^{-1/2} (A + I) D^{-1/2}, as a dense row-major matrix.
    pub fn normalized_adjacency(&self) -> Vec<Vec<f64>> {
        let n = self.vertices.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 1.0;
        }
        let index = |s: &SignalId| self.vertices.binary_search(s).expect("edge endpoint in vertex set");
        for e in &self.edges {
            let (i, j) = (index(&e.a), index(&e.b));
            a[i][j] = 1.0;
            a[j][i] = 1.0;
        }
        let deg: Vec<f64> = a.iter().map(|row| row.iter().sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                a[i][j] /= (deg[i] * deg[j]).sqrt();
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GraphGenOptions {
    /// Min-max scale each backfill sequence before DTW. Off by default:
    /// DTW compares revision magnitudes directly.
    pub scale: bool,
}

/// Build the signal graph at week `t`: for every signal pair, sum DTW
/// distances between their backfill sequences (as revised up to `t`) over
/// observation weeks 1..=t-5, then keep the `tau` pairs with the smallest
/// totals. Ties break lexicographically on the endpoint pair. Pairs are
/// compared only on observation weeks where both have published data;
/// pairs sharing none are ineligible.
pub fn graph_gen(
    ds: &RevisionDataset,
    t: Week,
    tau: usize,
    opts: GraphGenOptions,
) -> Result<SignalGraph> {
    let vertices = ds.signals().to_vec();
    if vertices.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if t < 6 {
        return Err(Error::NoEligibleWeeks(t));
    }
    let last_obs = t - 5;

    // per signal, per obs week: the Bseq values if published by week t
    let seqs: Vec<Vec<Option<Vec<f64>>>> = vertices
        .iter()
        .map(|sig| {
            (1..=last_obs)
                .map(|obs| {
                    ds.backfill_sequence(sig, obs, t).ok().map(|b| {
                        if opts.scale {
                            minmax_scale(&b.values)
                        } else {
                            b.values
                        }
                    })
                })
                .collect()
        })
        .collect();

    let n = vertices.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let weights: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut total = 0.0;
            let mut shared = 0usize;
            for (si, sj) in seqs[i].iter().zip(&seqs[j]) {
                if let (Some(si), Some(sj)) = (si, sj) {
                    total += dtw(si, sj).expect("bseqs are non-empty");
                    shared += 1;
                }
            }
            (shared > 0).then_some(total)
        })
        .collect();

    let mut candidates: Vec<(f64, usize, usize)> = pairs
        .iter()
        .zip(&weights)
        .filter_map(|(&(i, j), w)| w.map(|w| (w, i, j)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoEligibleWeeks(t));
    }
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then_with(|| (&vertices[x.1], &vertices[x.2]).cmp(&(&vertices[y.1], &vertices[y.2])))
    });
    let edges = candidates
        .into_iter()
        .take(tau)
        .map(|(w, i, j)| GraphEdge {
            a: vertices[i].clone(),
            b: vertices[j].clone(),
            weight: w,
        })
        .collect();

    Ok(SignalGraph {
        vertices,
        edges,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{LoadOptions, VintageRecord};

    fn sig(region: &str, feature: &str) -> SignalId {
        SignalId::new(region, feature)
    }

    /// Three signals observed weeks 1..=7, issued weekly through week 12.
    /// A and B revise identically; C revises differently.
    fn three_signal_ds() -> RevisionDataset {
        let mut records = Vec::new();
        let t_f = 12;
        for obs in 1..=7u32 {
            for issue in obs..=t_f {
                let steps = (issue - obs) as f64;
                let ab = 100.0 + 10.0 * steps.min(3.0);
                records.push(VintageRecord {
                    signal: sig("NY", "cases"),
                    obs_week: obs,
                    issue_week: issue,
                    value: ab,
                });
                records.push(VintageRecord {
                    signal: sig("NY", "deaths"),
                    obs_week: obs,
                    issue_week: issue,
                    value: ab,
                });
                records.push(VintageRecord {
                    signal: sig("TX", "cases"),
                    obs_week: obs,
                    issue_week: issue,
                    value: 500.0 - 40.0 * steps.min(4.0),
                });
            }
        }
        RevisionDataset::from_records(records, &LoadOptions::default()).unwrap()
    }

    #[test]
    fn tau_zero_and_complete() {
        let ds = three_signal_ds();
        let empty = graph_gen(&ds, 10, 0, GraphGenOptions::default()).unwrap();
        assert!(empty.edges.is_empty());

        let full = graph_gen(&ds, 10, 3, GraphGenOptions::default()).unwrap();
        assert_eq!(full.edges.len(), 3);
    }

    #[test]
    fn identical_pair_wins_single_edge() {
        let ds = three_signal_ds();
        let g = graph_gen(&ds, 10, 1, GraphGenOptions::default()).unwrap();
        assert_eq!(g.edges.len(), 1);
        let e = &g.edges[0];
        assert_eq!((&e.a, &e.b), (&sig("NY", "cases"), &sig("NY", "deaths")));
        assert_eq!(e.weight, 0.0);
    }

    #[test]
    fn too_early_is_an_error() {
        let ds = three_signal_ds();
        assert!(matches!(
            graph_gen(&ds, 5, 1, GraphGenOptions::default()),
            Err(Error::NoEligibleWeeks(5))
        ));
    }

    #[test]
    fn deterministic_across_runs() {
        let ds = three_signal_ds();
        let a = graph_gen(&ds, 12, 2, GraphGenOptions::default()).unwrap();
        let b = graph_gen(&ds, 12, 2, GraphGenOptions::default()).unwrap();
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn normalized_adjacency_two_connected_nodes() {
        let g = SignalGraph {
            vertices: vec![sig("A", "x"), sig("B", "x")],
            edges: vec![GraphEdge {
                a: sig("A", "x"),
                b: sig("B", "x"),
                weight: 0.0,
            }],
            tau: 1,
        };
        let a = g.normalized_adjacency();
        for row in &a {
            for &v in row {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_adjacency_isolated_node() {
        let g = SignalGraph {
            vertices: vec![sig("A", "x")],
            edges: vec![],
            tau: 0,
        };
        assert_eq!(g.normalized_adjacency(), vec![vec![1.0]]);
    }
}
