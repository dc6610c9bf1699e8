//! Random node masking, the reconstruction loss, standardization, Adam and
//! the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::error::{Error, Result};
use crate::graph::{KeepRule, SensorGraph};
use crate::model::{Hyper, KriformerModel};
use crate::params::Bound;
use crate::tensor::{grad_check_report, Tape, Tensor, Var};

/// Partition of the nodes for one training iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    /// observed nodes left visible
    pub v_umo: Vec<usize>,
    /// observed nodes hidden this iteration
    pub v_mo: Vec<usize>,
    /// nodes without data
    pub v_u: Vec<usize>,
}

impl MaskSpec {
    pub fn nodes(&self) -> usize {
        self.v_umo.len() + self.v_mo.len() + self.v_u.len()
    }

    /// `true` for nodes whose input is kept.
    pub fn visible(&self) -> Vec<bool> {
        let mut keep = vec![false; self.nodes()];
        for &i in &self.v_umo {
            keep[i] = true;
        }
        keep
    }

    /// `true` for nodes whose reconstruction is scored.
    pub fn scored(&self) -> Vec<bool> {
        let mut s = vec![false; self.nodes()];
        for &i in self.v_umo.iter().chain(&self.v_mo) {
            s[i] = true;
        }
        s
    }
}

/// Number of observed nodes hidden at `ratio`.
pub fn masked_count(observed: usize, ratio: f64) -> usize {
    let m = (ratio * observed as f64).floor() as usize;
    if ratio > 0.0 && observed > 0 {
        m.max(1)
    } else {
        m
    }
}

/// Hides a uniform random subset of `observed` of size
/// [`masked_count`]; `observed` and `unobserved` must partition `0..N`.
pub fn sample_mask(
    observed: &[usize],
    unobserved: &[usize],
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = observed.len() + unobserved.len();
    let mut seen = vec![false; n];
    for &i in observed.iter().chain(unobserved) {
        if i >= n || seen[i] {
            return Err(Error::param(
                "observed and unobserved nodes must partition 0..N",
            ));
        }
        seen[i] = true;
    }
    let m = masked_count(observed.len(), ratio);
    let mut v_mo: Vec<usize> = observed.choose_multiple(rng, m).copied().collect();
    v_mo.sort_unstable();
    let v_umo = observed
        .iter()
        .copied()
        .filter(|i| v_mo.binary_search(i).is_err())
        .collect();
    let mut v_u = unobserved.to_vec();
    v_u.sort_unstable();
    Ok(MaskSpec { v_umo, v_mo, v_u })
}

/// Zeroes every entry of the nodes where `keep` is false. `x` is
/// `[.., N, C]`.
pub fn zero_nodes(x: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2] != keep.len() {
        return Err(Error::shape(format!(
            "tensor {s:?} does not have {} nodes on its second-to-last axis",
            keep.len()
        )));
    }
    let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !keep[(i / c) % n] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Zeroes the `v_mo` and `v_u` node slices of `x` (`[T, N, C]` or
/// `[B, T, N, C]`).
pub fn apply_mask(x: &Tensor, spec: &MaskSpec) -> Result<Tensor> {
    zero_nodes(x, &spec.visible())
}

/// Reduction of the squared reconstruction errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// mean over scored entries
    #[default]
    Mean,
    /// plain sum of squared errors
    Sum,
}

/// Squared error over entries of `v_umo` and `v_mo` nodes that are not
/// flagged missing.
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: Var,
    truth: &Tensor,
    spec: &MaskSpec,
    missing: &[bool],
    mode: LossMode,
) -> Result<Var> {
    if tape.shape(pred) != truth.shape() || missing.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction {:?}, truth {:?} and {} missing flags disagree",
            tape.shape(pred),
            truth.shape(),
            missing.len()
        )));
    }
    let scored = spec.scored();
    let weight = zero_nodes(&Tensor::ones(truth.shape()), &scored)?;
    let mut weight = weight.into_data();
    for (w, &m) in weight.iter_mut().zip(missing) {
        if m {
            *w = 0.0;
        }
    }
    let count = weight.iter().filter(|&&w| w > 0.0).count();
    if count == 0 {
        return Err(Error::Numeric("reconstruction loss has no scored entries".into()));
    }
    let weight = Tensor::new(truth.shape().to_vec(), weight)?;
    let scale = match mode {
        LossMode::Mean => 1.0 / count as f64,
        LossMode::Sum => 1.0,
    };
    tape.weighted_sq_error(pred, truth, &weight, scale)
}

/// Standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::Numeric(format!(
                "invalid standardization mean {mean}, std {std}"
            )));
        }
        Ok(NormStats { mean, std })
    }

    /// Population mean and standard deviation of the non-missing values.
    pub fn fit(values: &[f64], missing: &[bool]) -> Result<Self> {
        let kept: Vec<f64> = values
            .iter()
            .zip(missing)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect();
        if kept.is_empty() {
            return Err(Error::Numeric("no observed values to standardize".into()));
        }
        let n = kept.len() as f64;
        let mean = crate::tensor::compensated_sum(kept.iter().copied()) / n;
        let var = crate::tensor::compensated_sum(kept.iter().map(|v| (v - mean).powi(2))) / n;
        Self::new(mean, var.sqrt())
    }

    /// `(x - mean) / std`; missing entries pass through.
    pub fn standardize(&self, x: &Tensor, missing: &[bool]) -> Tensor {
        self.map(x, missing, |v| (v - self.mean) / self.std)
    }

    /// Inverse of [`NormStats::standardize`].
    pub fn destandardize(&self, x: &Tensor, missing: &[bool]) -> Tensor {
        self.map(x, missing, |v| v * self.std + self.mean)
    }

    fn map(&self, x: &Tensor, missing: &[bool], f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if !missing.get(i).copied().unwrap_or(false) {
                *v = f(*v);
            }
        }
        out
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::param(format!("learning rate {} must be positive", config.lr)));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `None` gradients count as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("parameter, gradient and moment lists differ"));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        params[i].shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].map(Tensor::data);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Training-loop settings; the window length comes from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many iterations even mid-epoch.
    pub max_iterations: Option<usize>,
    pub batch_size: usize,
    /// Window stride; `None` means non-overlapping windows.
    pub stride: Option<usize>,
    pub mask_ratio: f64,
    pub loss: LossMode,
    pub adam: AdamConfig,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            max_iterations: None,
            batch_size: 8,
            stride: None,
            mask_ratio: 0.3,
            loss: LossMode::Mean,
            adam: AdamConfig::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if self.stride == Some(0) {
            return Err(Error::param("window stride must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::param(format!(
                "mask ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Observations used for training: `values` is `[T_total, N, C]` in
/// original units.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub values: &'a Tensor,
    pub missing: &'a [bool],
    /// nodes with sensors; the rest never enter the input or the loss
    pub observed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub loss_history: Vec<f64>,
    pub epochs: usize,
}

/// Start offsets of the length-`window` windows of a `total`-step series.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || total < window {
        return Vec::new();
    }
    (0..=total - window).step_by(stride.max(1)).collect()
}

/// Copies windows `starts` of `[T_total, N, C]` into `[B, T, N, C]`.
fn gather_windows(x: &Tensor, starts: &[usize], window: usize) -> Tensor {
    let row: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(starts.len() * window * row);
    for &s in starts {
        data.extend_from_slice(&x.data()[s * row..(s + window) * row]);
    }
    let mut shape = vec![starts.len(), window];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::new(shape, data).expect("window gather")
}

fn gather_flags(flags: &[bool], row: usize, starts: &[usize], window: usize) -> Vec<bool> {
    starts
        .iter()
        .flat_map(|&s| flags[s * row..(s + window) * row].iter().copied())
        .collect()
}

/// Model input: standardized values with missing entries set to zero.
pub fn model_input(values: &Tensor, missing: &[bool], norm: &NormStats) -> Tensor {
    let mut x = norm.standardize(values, missing);
    for (v, &m) in x.data_mut().iter_mut().zip(missing) {
        if m {
            *v = 0.0;
        }
    }
    x
}

fn check_series(values: &Tensor, missing: &[bool], model: &KriformerModel) -> Result<()> {
    let s = values.shape();
    if s.len() != 3 || s[1] != model.nodes() || s[2] != model.hyper().channels {
        return Err(Error::shape(format!(
            "series {s:?} does not match [T, {}, {}]",
            model.nodes(),
            model.hyper().channels
        )));
    }
    if missing.len() != values.len() {
        return Err(Error::shape("missing mask length differs from the series"));
    }
    Ok(())
}

/// Trains `model` in place with per-iteration random node masking.
pub fn fit(model: &mut KriformerModel, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<FitReport> {
    fit_with(model, data, cfg, |_, _, _| Ok(()))
}

/// [`fit`] calling `on_epoch(epoch, model, loss_history)` after every
/// completed epoch; an error from the callback stops training.
pub fn fit_with<F>(model: &mut KriformerModel, data: &TrainData<'_>, cfg: &TrainConfig, mut on_epoch: F) -> Result<FitReport>
where
    F: FnMut(usize, &KriformerModel, &[f64]) -> Result<()>,
{
    cfg.validate()?;
    check_series(data.values, data.missing, model)?;
    let n = model.nodes();
    let observed: Vec<usize> = {
        let mut o = data.observed.clone();
        o.sort_unstable();
        o.dedup();
        o
    };
    if observed.is_empty() || observed.iter().any(|&i| i >= n) {
        return Err(Error::param("observed node set is empty or out of range"));
    }
    let unobserved: Vec<usize> = (0..n).filter(|i| observed.binary_search(i).is_err()).collect();
    let window = model.hyper().window;
    let row = n * model.hyper().channels;

    // unobserved nodes contribute neither statistics nor input
    let mut missing = data.missing.to_vec();
    for (i, m) in missing.iter_mut().enumerate() {
        if unobserved.binary_search(&((i / model.hyper().channels) % n)).is_ok() {
            *m = true;
        }
    }
    let norm = NormStats::fit(data.values.data(), &missing)?;
    model.norm = Some(norm);
    let series = model_input(data.values, &missing, &norm);

    let starts = window_starts(data.values.shape()[0], window, cfg.stride.unwrap_or(window));
    if starts.is_empty() {
        return Err(Error::Input(format!(
            "series of {} steps is shorter than the window {window}",
            data.values.shape()[0]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // stream 0 of the same seed initializes the parameters
    rng.set_stream(1);
    let mut dropout = Dropout::new(model.hyper().dropout, rng.gen())?;
    let mut adam = Adam::new(cfg.adam, model.params().tensors())?;
    let mut history = Vec::new();
    let mut epochs = 0;
    let limit = cfg.max_iterations.unwrap_or(usize::MAX);

    'outer: for _ in 0..cfg.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if history.len() >= limit {
                break 'outer;
            }
            let truth = gather_windows(&series, batch, window);
            let miss = gather_flags(&missing, row, batch, window);
            let spec = sample_mask(&observed, &unobserved, cfg.mask_ratio, &mut rng)?;
            let input = apply_mask(&truth, &spec)?;

            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let x = tape.constant(input);
            let pred = model.forward_on_tape(&mut tape, &bound, x, Some(&mut dropout))?;
            let loss = reconstruction_loss(&mut tape, pred, &truth, &spec, &miss, cfg.loss)?;
            let value = tape.value(loss).item();
            let iteration = history.len();
            history.push(value);
            if !value.is_finite() {
                return Err(Error::Training {
                    iteration,
                    msg: format!("loss became {value}"),
                    history,
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
            if let Err(e) = adam.step(model.params_mut().tensors_mut(), &grads) {
                return Err(Error::Training {
                    iteration,
                    msg: e.to_string(),
                    history,
                });
            }
        }
        epochs += 1;
        log::debug!("epoch {epochs}: last loss {:?}", history.last());
        on_epoch(epochs, model, &history)?;
    }
    Ok(FitReport {
        loss_history: history,
        epochs,
    })
}

/// Windows fed to the model per forward call during inference.
const INFERENCE_BATCH: usize = 8;

/// Estimates all nodes of `values` (`[T_total, N, C]`, original units) with
/// the `unobserved` nodes hidden. Series are cut into consecutive windows;
/// a short tail is covered by a final window aligned to the end.
pub fn krige(
    model: &KriformerModel,
    values: &Tensor,
    missing: &[bool],
    unobserved: &[usize],
) -> Result<Tensor> {
    check_series(values, missing, model)?;
    let n = model.nodes();
    let c = model.hyper().channels;
    if unobserved.iter().any(|&i| i >= n) {
        return Err(Error::param("unobserved node index out of range"));
    }
    let norm = model
        .norm
        .ok_or_else(|| Error::Usage("model has no standardization statistics; train it first".into()))?;
    let mut keep = vec![true; n];
    for &i in unobserved {
        keep[i] = false;
    }
    let mut hidden = missing.to_vec();
    for (i, m) in hidden.iter_mut().enumerate() {
        if !keep[(i / c) % n] {
            *m = true;
        }
    }
    let input = zero_nodes(&model_input(values, &hidden, &norm), &keep)?;

    let total = values.shape()[0];
    let window = model.hyper().window.min(total);
    let mut starts = window_starts(total, window, window);
    let tail = total - window;
    if starts.last() != Some(&tail) {
        starts.push(tail);
    }
    let row = n * c;
    let mut out = vec![0.0; values.len()];
    for chunk in starts.chunks(INFERENCE_BATCH) {
        let x = gather_windows(&input, chunk, window);
        let y = model.forward(&x)?;
        for (b, &s) in chunk.iter().enumerate() {
            let src = &y.data()[b * window * row..(b + 1) * window * row];
            out[s * row..(s + window) * row].copy_from_slice(src);
        }
    }
    let pred = Tensor::new(values.shape().to_vec(), out)?;
    Ok(norm.destandardize(&pred, &vec![false; pred.len()]))
}

/// The small configuration used for end-to-end gradient checks.
pub fn tiny_hyper() -> Hyper {
    Hyper {
        d_model: 8,
        n_heads: 2,
        n_encoder: 1,
        n_decoder: 1,
        dropout: 0.0,
        window: 8,
        ..Hyper::default()
    }
}

/// A random geometric graph on the unit square with Euclidean distances.
pub fn random_graph(n: usize, seed: u64) -> Result<SensorGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
    let d = (0..n * n)
        .map(|i| {
            let (a, b) = (pts[i / n], pts[i % n]);
            (a.0 - b.0).hypot(a.1 - b.1)
        })
        .collect();
    SensorGraph::new((0..n).map(|i| format!("n{i}")).collect(), d)
}

/// Worst entry of the end-to-end gradient check, labelled by parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic and finite-difference gradients of the reconstruction
/// loss with respect to every parameter of the tiny model (`N = 6`,
/// `T = 8`, `D = 8`, two heads, one layer each side).
pub fn model_grad_check(seed: u64) -> Result<ModelGradCheck> {
    let graph = random_graph(6, seed)?;
    let model = KriformerModel::init(tiny_hyper(), &graph, KeepRule::Kernel, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let truth = Tensor::from_fn(&[8, 6, 1], |_| rng.gen_range(-1.5..1.5));
    let spec = sample_mask(&[0, 1, 2, 3, 4], &[5], 0.3, &mut rng)?;
    let input = apply_mask(&truth, &spec)?;
    let missing = vec![false; truth.len()];
    let r = grad_check_report(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let x = tape.constant(input.clone());
            let pred = model.forward_on_tape(tape, &bound, x, None)?;
            reconstruction_loss(tape, pred, &truth, &spec, &missing, LossMode::Mean)
        },
        model.params().tensors(),
    )?;
    Ok(ModelGradCheck {
        max_rel_error: r.max_rel_error,
        max_abs_error: r.max_abs_error,
        param: model.params().names()[r.input].clone(),
        element: r.element,
        analytic: r.analytic,
        numeric: r.numeric,
    })
}
