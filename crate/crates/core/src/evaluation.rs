//! Error metrics, KNN and mean baselines, the SM3/SM5/SM7 node-masking
//! protocol, the mask-ratio sweep and the ablation suite.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::io::{write_atomic, write_csv, DatasetBundle, RunConfig, SpeedTensor};
use crate::model::{Ablation, KriformerModel};
use crate::tensor::{compensated_sum, Tensor};
use crate::training::{fit, krige, zero_nodes, FitReport, TrainData};

/// Entries with `|truth|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

fn selected<'a>(
    truth: &'a [f64],
    pred: &'a [f64],
    include: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if truth.len() != pred.len() || truth.len() != include.len() {
        return Err(Error::shape(format!(
            "truth {}, prediction {} and include mask {} differ in length",
            truth.len(),
            pred.len(),
            include.len()
        )));
    }
    if !include.iter().any(|&b| b) {
        return Err(Error::input("no entries selected for evaluation"));
    }
    Ok(truth
        .iter()
        .zip(pred)
        .zip(include)
        .filter(|(_, &keep)| keep)
        .map(|((&t, &p), _)| (t, p)))
}

pub fn mae(truth: &[f64], pred: &[f64], include: &[bool]) -> Result<f64> {
    let it = selected(truth, pred, include)?;
    let n = it.clone().count() as f64;
    Ok(compensated_sum(it.map(|(t, p)| (t - p).abs())) / n)
}

pub fn rmse(truth: &[f64], pred: &[f64], include: &[bool]) -> Result<f64> {
    let it = selected(truth, pred, include)?;
    let n = it.clone().count() as f64;
    Ok((compensated_sum(it.map(|(t, p)| (t - p).powi(2))) / n).sqrt())
}

/// Mean absolute percentage error in percent.
pub fn mape(truth: &[f64], pred: &[f64], include: &[bool]) -> Result<f64> {
    let it = selected(truth, pred, include)?.filter(|(t, _)| t.abs() >= MAPE_FLOOR);
    let n = it.clone().count();
    if n == 0 {
        return Err(Error::input("every selected truth value is zero; MAPE is undefined"));
    }
    Ok(100.0 * compensated_sum(it.map(|(t, p)| ((t - p) / t).abs())) / n as f64)
}

/// Anything that fills in hidden nodes of a `[T, N, C]` series.
pub trait Predictor {
    fn name(&self) -> String;

    /// `values` has the `unobserved` node slices zeroed and flagged missing.
    fn predict(&self, values: &Tensor, missing: &[bool], unobserved: &[usize]) -> Result<Tensor>;
}

impl Predictor for KriformerModel {
    fn name(&self) -> String {
        match self.ablation() {
            Ablation::None => "kriformer".into(),
            a => format!("kriformer[{a}]"),
        }
    }

    fn predict(&self, values: &Tensor, missing: &[bool], unobserved: &[usize]) -> Result<Tensor> {
        krige(self, values, missing, unobserved)
    }
}

fn observed_nodes(n: usize, unobserved: &[usize]) -> Result<Vec<usize>> {
    if unobserved.iter().any(|&i| i >= n) {
        return Err(Error::param("unobserved node index out of range"));
    }
    let obs: Vec<usize> = (0..n).filter(|i| !unobserved.contains(i)).collect();
    if obs.is_empty() {
        return Err(Error::input("no observed nodes"));
    }
    Ok(obs)
}

fn series_dims(values: &Tensor, missing: &[bool]) -> Result<(usize, usize, usize)> {
    let s = values.shape();
    if s.len() != 3 || missing.len() != values.len() {
        return Err(Error::shape(format!("expected a [T, N, C] series, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Averages the `k` nearest observed nodes by shortest-path road distance.
#[derive(Clone, Debug)]
pub struct KnnBaseline {
    /// `N x N` shortest-path distances
    paths: Vec<f64>,
    n: usize,
    pub k: usize,
}

impl KnnBaseline {
    pub fn new(graph: &SensorGraph, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("KNN needs k >= 1"));
        }
        Ok(KnnBaseline {
            paths: graph.shortest_paths(),
            n: graph.len(),
            k,
        })
    }

    /// Observed nodes ordered by distance from `i`, nearest first.
    fn ranked(&self, i: usize, observed: &[usize]) -> Vec<usize> {
        let mut r = observed.to_vec();
        r.sort_by(|&a, &b| {
            self.paths[i * self.n + a]
                .total_cmp(&self.paths[i * self.n + b])
                .then(a.cmp(&b))
        });
        r
    }
}

impl Predictor for KnnBaseline {
    fn name(&self) -> String {
        format!("knn(k={})", self.k)
    }

    /// For each hidden node and step, the mean of the non-missing values of
    /// its `k` nearest observed nodes (all observed nodes if fewer). A step
    /// where none of them has data repeats the previous estimate.
    fn predict(&self, values: &Tensor, missing: &[bool], unobserved: &[usize]) -> Result<Tensor> {
        let (steps, n, c) = series_dims(values, missing)?;
        if n != self.n {
            return Err(Error::shape(format!("series has {n} nodes, graph has {}", self.n)));
        }
        let observed = observed_nodes(n, unobserved)?;
        let mut out = values.clone();
        for &i in unobserved {
            let nearest: Vec<usize> = self.ranked(i, &observed).into_iter().take(self.k).collect();
            for ch in 0..c {
                let mut last: Option<f64> = None;
                for t in 0..steps {
                    let vals: Vec<f64> = nearest
                        .iter()
                        .map(|&j| (t * n + j) * c + ch)
                        .filter(|&idx| !missing[idx])
                        .map(|idx| values.data()[idx])
                        .collect();
                    let est = if vals.is_empty() {
                        last.ok_or_else(|| {
                            Error::input(format!("no neighbour data for node {i} at step {t}"))
                        })?
                    } else {
                        compensated_sum(vals.iter().copied()) / vals.len() as f64
                    };
                    last = Some(est);
                    out.data_mut()[(t * n + i) * c + ch] = est;
                }
            }
        }
        Ok(out)
    }
}

/// Cross-sectional mean of the observed nodes at each step.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanBaseline;

impl Predictor for MeanBaseline {
    fn name(&self) -> String {
        "mean".into()
    }

    fn predict(&self, values: &Tensor, missing: &[bool], unobserved: &[usize]) -> Result<Tensor> {
        let (steps, n, c) = series_dims(values, missing)?;
        let observed = observed_nodes(n, unobserved)?;
        let mut out = values.clone();
        for ch in 0..c {
            let mut last: Option<f64> = None;
            for t in 0..steps {
                let vals: Vec<f64> = observed
                    .iter()
                    .map(|&j| (t * n + j) * c + ch)
                    .filter(|&idx| !missing[idx])
                    .map(|idx| values.data()[idx])
                    .collect();
                let est = if vals.is_empty() {
                    last.ok_or_else(|| Error::input(format!("no observed data at step {t}")))?
                } else {
                    compensated_sum(vals.iter().copied()) / vals.len() as f64
                };
                last = Some(est);
                for &i in unobserved {
                    out.data_mut()[(t * n + i) * c + ch] = est;
                }
            }
        }
        Ok(out)
    }
}

/// Share of nodes hidden at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scenario {
    Sm3,
    Sm5,
    Sm7,
    Custom(f64),
}

impl Scenario {
    pub fn ratio(self) -> f64 {
        match self {
            Scenario::Sm3 => 0.3,
            Scenario::Sm5 => 0.5,
            Scenario::Sm7 => 0.7,
            Scenario::Custom(r) => r,
        }
    }

    pub fn name(self) -> String {
        match self {
            Scenario::Sm3 => "SM3".into(),
            Scenario::Sm5 => "SM5".into(),
            Scenario::Sm7 => "SM7".into(),
            Scenario::Custom(r) => format!("custom({r})"),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm3" => Ok(Scenario::Sm3),
            "sm5" => Ok(Scenario::Sm5),
            "sm7" => Ok(Scenario::Sm7),
            other => Err(Error::Usage(format!("unknown scenario {other:?}; use sm3, sm5 or sm7"))),
        }
    }
}

/// The `floor(ratio * n)` pseudo-unobserved nodes for `seed`, sorted.
pub fn pseudo_unobserved(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param(format!("scenario ratio {ratio} outside (0, 1)")));
    }
    let m = (ratio * n as f64).floor() as usize;
    if m == 0 {
        return Err(Error::param(format!("ratio {ratio} hides no node out of {n}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = all.choose_multiple(&mut rng, m).copied().collect();
    v.sort_unstable();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scenario: String,
    /// share of nodes hidden at evaluation
    pub scenario_ratio: f64,
    /// observed-node mask ratio used in training, when applicable
    pub train_mask_ratio: Option<f64>,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub nodes: usize,
    pub entries: usize,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    /// Equality on everything except the wall-clock time.
    pub fn same_result(&self, other: &EvalReport) -> bool {
        EvalReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        } == EvalReport {
            wall_clock_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Hides the scenario's nodes in `test`, runs `predictor`, and scores the
/// hidden, non-missing entries.
pub fn evaluate_sm(
    predictor: &dyn Predictor,
    test: &SpeedTensor,
    scenario: Scenario,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (_, n, c) = series_dims(&test.values, &test.missing)?;
    let hidden = pseudo_unobserved(n, scenario.ratio(), seed)?;
    let mut keep = vec![true; n];
    for &i in &hidden {
        keep[i] = false;
    }
    let input = zero_nodes(&test.values, &keep)?;
    let mut missing = test.missing.clone();
    for (idx, m) in missing.iter_mut().enumerate() {
        if !keep[(idx / c) % n] {
            *m = true;
        }
    }
    debug_assert!(input
        .data()
        .iter()
        .enumerate()
        .all(|(idx, &v)| keep[(idx / c) % n] || v == 0.0));
    let pred = predictor.predict(&input, &missing, &hidden)?;
    if pred.shape() != test.values.shape() {
        return Err(Error::shape(format!(
            "predictor returned {:?} for {:?}",
            pred.shape(),
            test.values.shape()
        )));
    }
    let include: Vec<bool> = (0..test.values.len())
        .map(|idx| !keep[(idx / c) % n] && !test.missing[idx])
        .collect();
    let (truth, p) = (test.values.data(), pred.data());
    let report = EvalReport {
        model: predictor.name(),
        scenario: scenario.name(),
        scenario_ratio: scenario.ratio(),
        train_mask_ratio: None,
        seed,
        mae: mae(truth, p, &include)?,
        rmse: rmse(truth, p, &include)?,
        mape: mape(truth, p, &include)?,
        nodes: hidden.len(),
        entries: include.iter().filter(|&&b| b).count(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(report)
}

/// First `fraction` of the timeline for training, the rest for testing.
pub fn temporal_split(speeds: &SpeedTensor, fraction: f64) -> Result<(SpeedTensor, SpeedTensor)> {
    let t = speeds.steps();
    let cut = (fraction * t as f64).floor() as usize;
    if cut == 0 || cut >= t {
        return Err(Error::param(format!("split fraction {fraction} leaves an empty part of {t} steps")));
    }
    Ok((speeds.slice(0..cut)?, speeds.slice(cut..t)?))
}

/// Builds and trains a model on the training part of `bundle` per `cfg`,
/// with the given ablation and observed-node mask ratio.
pub fn train_on_bundle(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    ablation: Ablation,
    mask_ratio: f64,
) -> Result<(KriformerModel, FitReport)> {
    cfg.validate(Some(bundle.graph.len()))?;
    let (train, _) = temporal_split(&bundle.speeds, cfg.eval.train_fraction)?;
    let mut graph = bundle.graph.clone();
    cfg.graph.apply(&mut graph);
    let mut model =
        KriformerModel::init(cfg.model.clone(), &graph, cfg.graph.keep_rule, cfg.seed)?.with_ablation(ablation);
    let mut tc = cfg.train.clone();
    tc.mask_ratio = mask_ratio;
    tc.seed = cfg.seed;
    let data = TrainData {
        values: &train.values,
        missing: &train.missing,
        observed: (0..graph.len()).collect(),
    };
    let report = fit(&mut model, &data, &tc)?;
    Ok((model, report))
}

/// Trains one model per observed-node mask ratio and evaluates each under
/// SM3 on the test period.
pub fn mask_ratio_sweep(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::param(format!("sweep ratio {r} outside (0, 1)")));
    }
    let (_, test) = temporal_split(&bundle.speeds, cfg.eval.train_fraction)?;
    ratios
        .iter()
        .map(|&r| {
            log::info!("sweep: training at mask ratio {r}");
            let (model, _) = train_on_bundle(bundle, cfg, cfg.ablation, r)?;
            let mut rep = evaluate_sm(&model, &test, Scenario::Sm3, seed)?;
            rep.train_mask_ratio = Some(r);
            Ok(rep)
        })
        .collect()
}

/// Trains every variant with identical settings and evaluates it under SM3.
pub fn ablation_suite(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    variants: &[Ablation],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let (_, test) = temporal_split(&bundle.speeds, cfg.eval.train_fraction)?;
    variants
        .iter()
        .map(|&v| {
            log::info!("ablation: training variant {v}");
            let (model, _) = train_on_bundle(bundle, cfg, v, cfg.train.mask_ratio)?;
            let mut rep = evaluate_sm(&model, &test, Scenario::Sm3, seed)?;
            rep.train_mask_ratio = Some(cfg.train.mask_ratio);
            Ok(rep)
        })
        .collect()
}

const REPORT_HEADER: [&str; 11] = [
    "model",
    "scenario",
    "scenario_ratio",
    "train_mask_ratio",
    "seed",
    "mae",
    "rmse",
    "mape",
    "nodes",
    "entries",
    "wall_clock_seconds",
];

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let rows = reports.iter().map(|r| {
        vec![
            r.model.clone(),
            r.scenario.clone(),
            r.scenario_ratio.to_string(),
            r.train_mask_ratio.map_or(String::new(), |v| v.to_string()),
            r.seed.to_string(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.mape.to_string(),
            r.nodes.to_string(),
            r.entries.to_string(),
            r.wall_clock_seconds.to_string(),
        ]
    });
    write_csv(path, &REPORT_HEADER, rows)
}

pub fn write_reports_json(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(reports).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `ratio,mae,rmse,mape`, one row per training mask ratio.
pub fn write_sweep_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let rows = reports.iter().map(|r| {
        vec![
            r.train_mask_ratio.unwrap_or(r.scenario_ratio).to_string(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.mape.to_string(),
        ]
    });
    write_csv(path, &["ratio", "mae", "rmse", "mape"], rows)
}
