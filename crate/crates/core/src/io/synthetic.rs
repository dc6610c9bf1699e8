use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, SpeedTensor};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, connected_components, symmetrize, KeepRule, SensorGraph};
use crate::tensor::Tensor;

/// Parameters of the diffusion-plus-oscillation traffic simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_nodes: usize,
    pub t_total: usize,
    /// connection radius on the unit square
    pub radius: f64,
    /// pull towards the neighbour mean
    pub alpha: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise: f64,
    pub base_speed: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_nodes: 20,
            t_total: 2000,
            radius: 0.35,
            alpha: 0.3,
            amplitude: 5.0,
            period: 288.0,
            noise: 1.0,
            base_speed: 60.0,
        }
    }
}

const ATTEMPTS: usize = 10;
const RADIUS_GROWTH: f64 = 1.25;

/// Random geometric graph with speeds from
/// `x_i(t+1) = x_i(t) + alpha (mean_nbr x(t) - x_i(t)) + A sin(2 pi t / P + phi_i) + noise`,
/// clipped to `[0, 100]`.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<DatasetBundle> {
    let p = params;
    if p.n_nodes < 4 {
        return Err(Error::param(format!("synthetic data needs at least 4 nodes, got {}", p.n_nodes)));
    }
    if p.t_total == 0 || !(p.radius > 0.0) || !(p.period > 0.0) || p.noise < 0.0 {
        return Err(Error::param("synthetic steps, radius and period must be positive, noise non-negative"));
    }
    let n = p.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
    let euclid = |i: usize, j: usize| (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1);

    let mut radius = p.radius;
    let mut found = None;
    for attempt in 0..ATTEMPTS {
        let d: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                let e = euclid(i, j);
                if i == j || e <= radius {
                    e
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let graph = SensorGraph::new(ids, d)?;
        if graph.shortest_paths().iter().all(|v| v.is_finite()) {
            let adj = symmetrize(&build_adjacency(&graph, KeepRule::Kernel)?)?;
            if connected_components(&adj)? != 1 {
                log::warn!("synthetic graph is connected by distance but not by kernel weight");
            }
            found = Some(graph);
            break;
        }
        log::debug!("synthetic graph disconnected at radius {radius} (attempt {})", attempt + 1);
        radius *= RADIUS_GROWTH;
    }
    let graph = found.ok_or_else(|| {
        Error::Input(format!("synthetic graph still disconnected after {ATTEMPTS} attempts"))
    })?;
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && graph.distance(i, j).is_finite()).collect())
        .collect();

    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut x = vec![p.base_speed; n];
    let mut data = Vec::with_capacity(p.t_total * n);
    for t in 0..p.t_total {
        data.extend_from_slice(&x);
        let wave = std::f64::consts::TAU * t as f64 / p.period;
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let mean = nbrs[i].iter().map(|&j| x[j]).sum::<f64>() / nbrs[i].len() as f64;
                let eps: f64 = rng.sample(StandardNormal);
                let v = x[i] + p.alpha * (mean - x[i]) + p.amplitude * (wave + phase[i]).sin() + p.noise * eps;
                v.clamp(0.0, 100.0)
            })
            .collect();
        x = next;
    }
    let speeds = SpeedTensor {
        timestamps: (0..p.t_total).map(|t| t.to_string()).collect(),
        node_ids: graph.node_ids().to_vec(),
        values: Tensor::new(vec![p.t_total, n, 1], data)?,
        missing: vec![false; p.t_total * n],
    };
    DatasetBundle::new(speeds, graph, format!("synthetic(seed={seed})"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_without_forcing() {
        let p = SyntheticParams {
            n_nodes: 6,
            t_total: 50,
            amplitude: 0.0,
            noise: 0.0,
            ..SyntheticParams::default()
        };
        let b = generate_synthetic(&p, 3).unwrap();
        assert!(b.speeds.values.data().iter().all(|&v| v == 60.0));
    }

    #[test]
    fn deterministic_and_bounded() {
        let p = SyntheticParams {
            t_total: 300,
            ..SyntheticParams::default()
        };
        let a = generate_synthetic(&p, 42).unwrap();
        assert_eq!(a, generate_synthetic(&p, 42).unwrap());
        assert_ne!(a.speeds.values, generate_synthetic(&p, 43).unwrap().speeds.values);
        assert!(a.speeds.values.data().iter().all(|v| (0.0..=100.0).contains(v)));
        assert!(generate_synthetic(&SyntheticParams { n_nodes: 3, ..p }, 1).is_err());
    }
}
