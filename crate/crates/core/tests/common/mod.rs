//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use kriformer::attention::AttentionParams;
use kriformer::training::random_graph;
use kriformer::{GraphFeatures, KeepRule, ParamStore, SensorGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nodes split into clusters of at least two; each cluster is a random
/// spanning tree plus extra chords, with no edges between clusters.
pub fn clustered_graph(rng: &mut ChaCha8Rng) -> SensorGraph {
    let n = rng.gen_range(2..=30);
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = if left <= 3 { left } else { rng.gen_range(2..=left.min(10)) };
        let s = if left - s == 1 { s + 1 } else { s };
        sizes.push(s);
        left -= s;
    }
    let mut d = vec![f64::INFINITY; n * n];
    let mut start = 0;
    for s in sizes {
        for v in start + 1..start + s {
            let u = rng.gen_range(start..v);
            let w = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                d[u * n + v] = w;
            } else {
                d[v * n + u] = w;
            }
        }
        for _ in 0..s {
            let (a, b) = (rng.gen_range(start..start + s), rng.gen_range(start..start + s));
            if a != b {
                d[a * n + b] = rng.gen_range(0.1..2.0);
            }
        }
        start += s;
    }
    let ids = (0..n).map(|i| format!("v{i}")).collect();
    let mut g = SensorGraph::new(ids, d).unwrap();
    // every listed edge survives: weights stay above exp(-4) and nothing is cut
    g.sigma = 1.0;
    g.epsilon = 0.0;
    g
}

/// Union-find over undirected edges, independent of the library's search.
pub fn brute_force_components(a: &Tensor) -> usize {
    let n = a.shape()[0];
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if a.at(&[i, j]) > 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn params(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "att", d, heads, &mut rng).unwrap();
    (store, p)
}

/// Symmetric 0/1 adjacency with a random sparsity pattern.
pub fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            if rng.gen_bool(0.4) {
                let w = rng.gen_range(0.1..1.0);
                a.set(&[i, j], w);
                a.set(&[j, i], w);
            }
        }
    }
    a
}

pub fn permute_nodes(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
    let rows = x.len() / (n * c);
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        for &p in perm {
            let at = (r * n + p) * c;
            out.extend_from_slice(&x.data()[at..at + c]);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Graphs whose Laplacian spectrum is simple, so the eigenmap is unique up
/// to the sign convention. Repeated eigenvalues leave the basis of their
/// eigenspace arbitrary and the embedding is then not equivariant.
pub fn simple_spectrum_graphs(n: usize, count: usize) -> Vec<SensorGraph> {
    (0..)
        .map(|s| random_graph(n, s).unwrap())
        .filter(|g| {
            let f = GraphFeatures::compute(g, KeepRule::Kernel, n - 1).unwrap();
            f.spectral.eigenvalues.windows(2).all(|w| w[1] - w[0] > 1e-3)
        })
        .take(count)
        .collect()
}

pub struct Naive {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Straight double loop over steps and nodes, scoring the hidden columns.
pub fn naive(truth: &[Vec<f64>], pred: &[Vec<f64>], hidden: &[bool]) -> Naive {
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut count, mut pct_count) = (0usize, 0usize);
    for t in 0..truth.len() {
        for i in 0..truth[t].len() {
            if !hidden[i] {
                continue;
            }
            let e = truth[t][i] - pred[t][i];
            abs += e.abs();
            sq += e * e;
            count += 1;
            if truth[t][i].abs() >= 1e-6 {
                pct += (e / truth[t][i]).abs();
                pct_count += 1;
            }
        }
    }
    Naive {
        mae: abs / count as f64,
        rmse: (sq / count as f64).sqrt(),
        mape: 100.0 * pct / pct_count as f64,
    }
}
