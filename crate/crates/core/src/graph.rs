//! Road-graph adjacency and Laplacian eigenmaps.

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default sparsity threshold for the distance kernel.
pub const DEFAULT_EPSILON: f64 = 0.1;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;

/// Which pairs the distance kernel keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    /// Keep `exp(-d^2/sigma^2)` when it is at least epsilon.
    #[default]
    Kernel,
    /// Keep when `d^2/sigma^2 > epsilon`, the condition read literally.
    Literal,
}

/// Sensors and the directed road distances between them.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    node_ids: Vec<String>,
    /// Row-major N x N; `f64::INFINITY` where no distance is known.
    distances: Vec<f64>,
    pub sigma: f64,
    pub epsilon: f64,
}

impl SensorGraph {
    /// Builds a graph from a dense distance matrix (`INFINITY` = no edge).
    /// The diagonal is forced to 0; sigma defaults to
    /// [`default_sigma`] and epsilon to [`DEFAULT_EPSILON`].
    pub fn new(node_ids: Vec<String>, mut distances: Vec<f64>) -> Result<Self> {
        let n = node_ids.len();
        if n < 2 {
            return Err(Error::input(format!("a sensor graph needs at least 2 nodes, got {n}")));
        }
        if distances.len() != n * n {
            return Err(Error::shape(format!(
                "{n} nodes need {} distances, got {}",
                n * n,
                distances.len()
            )));
        }
        for (k, d) in distances.iter().enumerate() {
            if d.is_nan() || *d < 0.0 {
                return Err(Error::input(format!(
                    "distance {} -> {} is {d}",
                    node_ids[k / n],
                    node_ids[k % n]
                )));
            }
        }
        for i in 0..n {
            distances[i * n + i] = 0.0;
        }
        let sigma = default_sigma(&distances)?;
        Ok(SensorGraph {
            node_ids,
            distances,
            sigma,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn distance(&self, from: usize, to: usize) -> f64 {
        self.distances[from * self.len() + to]
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// The graph with node `perm[i]` moved to position `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let ids = perm.iter().map(|&p| self.node_ids[p].clone()).collect();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = self.distance(perm[i], perm[j]);
            }
        }
        SensorGraph {
            node_ids: ids,
            distances: d,
            sigma: self.sigma,
            epsilon: self.epsilon,
        }
    }

    /// SHA-256 over node ids and distances; identifies the graph a model
    /// was trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for id in &self.node_ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for d in &self.distances {
            h.update(d.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Symmetric shortest-path road distances (Dijkstra over edges taken in
    /// both directions). Unreachable pairs are `INFINITY`.
    pub fn shortest_paths(&self) -> Vec<f64> {
        let n = self.len();
        let w = |i: usize, j: usize| self.distance(i, j).min(self.distance(j, i));
        let mut out = vec![f64::INFINITY; n * n];
        for s in 0..n {
            let dist = &mut out[s * n..(s + 1) * n];
            let mut done = vec![false; n];
            dist[s] = 0.0;
            for _ in 0..n {
                let mut u = None;
                for v in 0..n {
                    if !done[v] && dist[v].is_finite() && u.map_or(true, |u: usize| dist[v] < dist[u]) {
                        u = Some(v);
                    }
                }
                let Some(u) = u else { break };
                done[u] = true;
                for v in 0..n {
                    let e = w(u, v);
                    if !done[v] && e.is_finite() && dist[u] + e < dist[v] {
                        dist[v] = dist[u] + e;
                    }
                }
            }
        }
        out
    }
}

/// Population standard deviation of the finite, positive distances. Falls
/// back to their mean when all of them are equal.
pub fn default_sigma(distances: &[f64]) -> Result<f64> {
    let vals: Vec<f64> = distances
        .iter()
        .copied()
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    if vals.is_empty() {
        return Err(Error::input("graph has no positive finite distances"));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    Ok(if sd > 0.0 { sd } else { mean })
}

/// Distance-kernel weights `exp(-d^2/sigma^2)` with the sparsity rule
/// applied; zero diagonal, zero for unknown distances.
pub fn build_adjacency(graph: &SensorGraph, rule: KeepRule) -> Result<Tensor> {
    let sigma = graph.sigma;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    if !(0.0..1.0).contains(&graph.epsilon) {
        return Err(Error::param(format!(
            "epsilon must lie in [0, 1), got {}",
            graph.epsilon
        )));
    }
    let n = graph.len();
    let s2 = sigma * sigma;
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let d = graph.distance(i, j);
        if i == j || !d.is_finite() {
            return 0.0;
        }
        let r = d * d / s2;
        let w = (-r).exp();
        let keep = match rule {
            KeepRule::Kernel => w >= graph.epsilon,
            KeepRule::Literal => r > graph.epsilon,
        };
        if keep {
            w
        } else {
            0.0
        }
    }))
}

fn square_dim(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::shape(format!("expected a square matrix, got {s:?}"))),
    }
}

/// `max(A, A^T)` elementwise.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        a.data()[i * n + j].max(a.data()[j * n + i])
    }))
}

/// `I - D^{-1/2} A D^{-1/2}`; isolated nodes keep an identity row.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    let inv_sqrt: Vec<f64> = a
        .data()
        .chunks(n)
        .map(|row| {
            let deg: f64 = row.iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a.data()[k] * inv_sqrt[j]
    }))
}

/// Number of connected components of the graph with an edge wherever
/// `a[i][j] > 0` or `a[j][i] > 0`.
pub fn connected_components(a: &Tensor) -> Result<usize> {
    let n = square_dim(a)?;
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        label[s] = count;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if label[v] == usize::MAX && (a.data()[u * n + v] > 0.0 || a.data()[v * n + u] > 0.0) {
                    label[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    Ok(count)
}

/// Eigenpairs of a symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralData {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// N x N; column `c` is the eigenvector of `eigenvalues[c]`.
    pub eigenvectors: Tensor,
    /// Whether each column was flipped so its largest-magnitude entry is
    /// non-negative (always true for output of [`eigendecompose`]).
    pub sign_fixed: bool,
}

impl SpectralData {
    pub fn vector(&self, c: usize) -> Vec<f64> {
        let n = self.eigenvalues.len();
        (0..n).map(|r| self.eigenvectors.data()[r * n + c]).collect()
    }

    /// `U diag(lambda) U^T`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let u = self.eigenvectors.data();
        Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            (0..n).map(|c| u[i * n + c] * self.eigenvalues[c] * u[j * n + c]).sum()
        })
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, eigenvalues
/// ascending, eigenvector signs fixed.
pub fn eigendecompose(l: &Tensor) -> Result<SpectralData> {
    let n = square_dim(l)?;
    let mut a = l.data().to_vec();
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::input(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    let mut v = Tensor::eye(n).into_data();

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal norm {:e})",
                off(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x * n + x].total_cmp(&a[y * n + y]).then(x.cmp(&y)));
    let eigenvalues: Vec<f64> = order.iter().map(|&c| a[c * n + c]).collect();
    let mut u = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 1..n {
            if v[r * n + src].abs() > v[pivot * n + src].abs() {
                pivot = r;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            u[r * n + dst] = sign * v[r * n + src];
        }
    }
    Ok(SpectralData {
        eigenvalues,
        eigenvectors: Tensor::new(vec![n, n], u)?,
        sign_fixed: true,
    })
}

/// Default eigenmap width: `min(16, N - 1)`.
pub fn default_k(n: usize) -> usize {
    16.min(n.saturating_sub(1)).max(1)
}

/// Rows are nodes, columns are eigenvectors `1..=k` (the trivial first
/// eigenvector is skipped).
pub fn spatial_eigenmap(spectral: &SpectralData, k: usize) -> Result<Tensor> {
    let n = spectral.eigenvalues.len();
    if k < 1 || k >= n {
        return Err(Error::param(format!("eigenmap width must satisfy 1 <= k < {n}, got {k}")));
    }
    let u = spectral.eigenvectors.data();
    Ok(Tensor::from_fn(&[n, k], |idx| {
        let (i, c) = (idx / k, idx % k);
        u[i * n + c + 1]
    }))
}

/// Everything the model needs from the graph, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    /// Symmetrized adjacency.
    pub adjacency: Tensor,
    pub spectral: SpectralData,
    /// N x k eigenmap.
    pub eigenmap: Tensor,
}

impl GraphFeatures {
    pub fn compute(graph: &SensorGraph, rule: KeepRule, k: usize) -> Result<Self> {
        let adjacency = symmetrize(&build_adjacency(graph, rule)?)?;
        let components = connected_components(&adjacency)?;
        if components > 1 {
            warn!("symmetrized sensor graph has {components} connected components");
        }
        let spectral = eigendecompose(&normalized_laplacian(&adjacency)?)?;
        let eigenmap = spatial_eigenmap(&spectral, k)?;
        Ok(GraphFeatures {
            adjacency,
            spectral,
            eigenmap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn graph(n: usize, d: &[(usize, usize, f64)]) -> SensorGraph {
        let mut m = vec![f64::INFINITY; n * n];
        for &(i, j, v) in d {
            m[i * n + j] = v;
        }
        SensorGraph::new((0..n).map(|i| format!("n{i}")).collect(), m).unwrap()
    }

    #[test]
    fn kernel_weight_at_one_sigma() {
        let mut g = graph(3, &[(0, 1, 2.0), (1, 2, 4.0)]);
        g.sigma = 2.0;
        let a = build_adjacency(&g, KeepRule::Kernel).unwrap();
        assert_abs_diff_eq!(a.at(&[0, 1]), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(a.at(&[0, 1]), 0.36788, epsilon = 1e-5);
        // exp(-4) < 0.1 is dropped
        assert_eq!(a.at(&[1, 2]), 0.0);
        assert_eq!(a.at(&[1, 0]), 0.0);
        for i in 0..3 {
            assert_eq!(a.at(&[i, i]), 0.0);
        }
        g.sigma = 0.0;
        assert!(matches!(build_adjacency(&g, KeepRule::Kernel), Err(Error::Parameter(_))));
    }

    #[test]
    fn literal_rule_keeps_distant_pairs() {
        let mut g = graph(3, &[(0, 1, 0.1), (1, 2, 4.0)]);
        g.sigma = 1.0;
        let a = build_adjacency(&g, KeepRule::Literal).unwrap();
        assert_eq!(a.at(&[0, 1]), 0.0);
        assert_abs_diff_eq!(a.at(&[1, 2]), (-16.0f64).exp(), epsilon = 1e-20);
    }

    #[test]
    fn default_sigma_is_population_std() {
        let g = graph(3, &[(0, 1, 1.0), (1, 2, 3.0)]);
        assert_abs_diff_eq!(g.sigma, 1.0, epsilon = 1e-15);
        let g = graph(2, &[(0, 1, 5.0)]);
        assert_eq!(g.sigma, 5.0);
    }

    #[test]
    fn symmetrize_examples() {
        let a = Tensor::from_rows(&[&[0.0, 2.0], &[5.0, 0.0]]);
        assert_eq!(symmetrize(&a).unwrap().data(), &[0.0, 5.0, 5.0, 0.0]);
        let s = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(symmetrize(&s).unwrap(), s);
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(symmetrize(&z).unwrap(), z);
    }

    #[test]
    fn laplacian_examples() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(normalized_laplacian(&a).unwrap().data(), &[1.0, -1.0, -1.0, 1.0]);
        let z = Tensor::zeros(&[4, 4]);
        assert_eq!(normalized_laplacian(&z).unwrap(), Tensor::eye(4));
    }

    #[test]
    fn two_node_spectrum() {
        let l = Tensor::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let s = eigendecompose(&l).unwrap();
        assert_abs_diff_eq!(s.eigenvalues[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eigenvalues[1], 2.0, epsilon = 1e-12);
        let r = 0.5f64.sqrt();
        let v0 = s.vector(0);
        let v1 = s.vector(1);
        assert_abs_diff_eq!(v0[0], r, epsilon = 1e-12);
        assert_abs_diff_eq!(v0[1], r, epsilon = 1e-12);
        // tie on |entry|: the lower index is made non-negative
        assert_abs_diff_eq!(v1[0], r, epsilon = 1e-12);
        assert_abs_diff_eq!(v1[1], -r, epsilon = 1e-12);

        let se = spatial_eigenmap(&s, 1).unwrap();
        assert_abs_diff_eq!(se.at(&[0, 0]), 0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(se.at(&[1, 0]), -0.70711, epsilon = 1e-5);
        assert!(matches!(spatial_eigenmap(&s, 2), Err(Error::Parameter(_))));
        assert!(matches!(spatial_eigenmap(&s, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_spectrum() {
        let s = eigendecompose(&Tensor::eye(5)).unwrap();
        assert!(s.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-12));
        assert!(s.reconstruct().max_abs_diff(&Tensor::eye(5)) < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let l = Tensor::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(eigendecompose(&l), Err(Error::Input(_))));
    }

    #[test]
    fn too_few_nodes() {
        assert!(SensorGraph::new(vec!["a".into()], vec![0.0]).is_err());
    }

    #[test]
    fn shortest_paths_chain() {
        let g = graph(3, &[(0, 1, 1.0), (2, 1, 2.0)]);
        let sp = g.shortest_paths();
        assert_eq!(sp[2], 3.0);
        assert_eq!(sp[2 * 3], 3.0);
        assert_eq!(sp[1 * 3 + 2], 2.0);
    }
}
