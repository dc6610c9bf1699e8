//! `kriformer` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric or training failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kriformer::evaluation::{
    ablation_suite, evaluate_sm, mask_ratio_sweep, temporal_split, train_on_bundle, write_reports_csv,
    write_reports_json, write_sweep_csv, EvalReport, KnnBaseline, MeanBaseline, Predictor, Scenario,
};
use kriformer::graph::GraphFeatures;
use kriformer::io::{
    distance_node_ids, generate_synthetic, load_distances_csv, save_distances_csv,
    save_speeds_csv, write_atomic, write_csv,
};
use kriformer::training::{krige, model_grad_check};
use kriformer::{Ablation, DatasetBundle, Error, KriformerModel, RunConfig};

#[derive(Parser)]
#[command(name = "kriformer", version, about = "Spatiotemporal kriging with a graph transformer")]
struct Cli {
    /// Log more (-v debug, -vv trace); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and loss history.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Estimate the series of sensor-less nodes with a trained model.
    Krige {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speeds: PathBuf,
        #[arg(long)]
        distances: PathBuf,
        /// Comma-separated node ids to estimate.
        #[arg(long, value_delimiter = ',', required = true)]
        unobserved: Vec<String>,
        /// Cell value treated as missing.
        #[arg(long)]
        sentinel: Option<f64>,
        /// Predictions CSV; defaults to predictions.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained model and the baselines under an SM scenario.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// sm3, sm5 or sm7.
        #[arg(long)]
        scenario: String,
        /// Seed of the pseudo-unobserved draw; defaults to the config seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Several draw seeds; the mean is printed.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one model per mask ratio and score each under SM3.
    SweepMask {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
    },
    /// Train the full model and ablated variants and score each under SM3.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `all` or comma-separated names: full, no_TE, no_SE, no_STE, no_MTA, no_MSA, no_MSIA.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variants: Vec<String>,
    },
    /// Write the spatial eigenmap of a distances file.
    Embed {
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        k: usize,
        /// Optional config for the kernel settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Eigenmap CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the tiny model's gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use generated data even if the config names files.
    #[arg(long)]
    synthetic: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Run configuration, e.g. the config.toml written by `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "distances")]
    speeds: Option<PathBuf>,
    #[arg(long, requires = "speeds")]
    distances: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if self.synthetic {
            cfg.data.speeds = None;
            cfg.data.distances = None;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok((cfg, out))
    }
}

/// The configured files, or the synthetic bundle for the config seed.
fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    match (&cfg.data.speeds, &cfg.data.distances) {
        (Some(s), Some(d)) => Ok(DatasetBundle::load(s, d, cfg.data.missing_sentinel)?),
        _ => {
            log::info!("generating synthetic data (seed {})", cfg.seed);
            Ok(generate_synthetic(&cfg.data.synthetic, cfg.seed)?)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(run: &RunArgs) -> Result<()> {
    let (mut cfg, out) = run.resolve()?;
    let bundle = load_bundle(&cfg)?;
    create_dir(&out)?;
    if cfg.data.speeds.is_none() {
        // keep the generated data next to the model so later commands can use it
        let (s, d) = (out.join("speeds.csv"), out.join("distances.csv"));
        save_speeds_csv(&s, &bundle.speeds)?;
        save_distances_csv(&d, &bundle.graph)?;
        cfg.data.speeds = Some(s);
        cfg.data.distances = Some(d);
    }
    let (model, fit) = train_on_bundle(&bundle, &cfg, cfg.ablation, cfg.train.mask_ratio)?;
    model.save(&out.join("model.ckpt"))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let rows = fit
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]);
    write_csv(&out.join("loss.csv"), &["iteration", "loss"], rows)?;
    println!(
        "trained {} epochs ({} iterations), final loss {:.6}; wrote {}",
        fit.epochs,
        fit.loss_history.len(),
        fit.loss_history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn check_graph(model: &KriformerModel, bundle: &DatasetBundle) -> Result<()> {
    if model.node_ids() != bundle.graph.node_ids() {
        return Err(Error::Input("data node ids differ from the checkpoint's".into()).into());
    }
    if model.graph_fingerprint() != bundle.graph.fingerprint() {
        return Err(Error::Input("distances differ from the graph the checkpoint was trained on".into()).into());
    }
    Ok(())
}

fn krige_cmd(
    checkpoint: &Path,
    speeds: &Path,
    distances: &Path,
    unobserved: &[String],
    sentinel: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let model = KriformerModel::load(checkpoint)?;
    let bundle = DatasetBundle::load(speeds, distances, sentinel)?;
    check_graph(&model, &bundle)?;
    let hidden = unobserved
        .iter()
        .map(|id| {
            bundle
                .node_index(id)
                .ok_or_else(|| usage(format!("unknown node id {id:?} in --unobserved")))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = &bundle.speeds;
    let pred = krige(&model, &s.values, &s.missing, &hidden)?;
    let n = s.nodes();
    let rows = (0..s.steps()).flat_map(|t| {
        let pred = &pred;
        hidden.iter().map(move |&i| {
            vec![
                s.timestamps[t].clone(),
                s.node_ids[i].clone(),
                pred.data()[t * n + i].to_string(),
            ]
        })
    });
    let path = out.map_or_else(|| checkpoint.with_file_name("predictions.csv"), Path::to_path_buf);
    write_csv(&path, &["timestamp", "node", "value"], rows)?;
    println!("wrote {} rows to {}", s.steps() * hidden.len(), path.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, scenario: &str, seed: Option<u64>, seeds: &[u64], data: &DataArgs) -> Result<()> {
    let scenario = Scenario::from_str(scenario)?;
    let mut cfg = load_config(data.config.as_deref())?;
    if let (Some(s), Some(d)) = (&data.speeds, &data.distances) {
        cfg.data.speeds = Some(s.clone());
        cfg.data.distances = Some(d.clone());
    }
    let model = KriformerModel::load(checkpoint)?;
    let bundle = load_bundle(&cfg)?;
    check_graph(&model, &bundle)?;
    let (_, test) = temporal_split(&bundle.speeds, cfg.eval.train_fraction)?;
    let seeds = match (seed, seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, false) => seeds.to_vec(),
        (None, true) => cfg.eval_seeds(),
    };
    let knn = KnnBaseline::new(&bundle.graph, cfg.eval.knn_k)?;
    let predictors: [&dyn Predictor; 3] = [&model, &knn, &MeanBaseline];
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in predictors {
        for &s in &seeds {
            reports.push(evaluate_sm(p, &test, scenario, s)?);
        }
    }
    let out = data.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    create_dir(&out)?;
    write_reports_json(&out.join("report.json"), &reports)?;
    write_reports_csv(&out.join("report.csv"), &reports)?;
    for chunk in reports.chunks(seeds.len()) {
        let k = chunk.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| chunk.iter().map(f).sum::<f64>() / k;
        println!(
            "{:<12} {}  MAE {:.4}  RMSE {:.4}  MAPE {:.3}%  ({} seeds)",
            chunk[0].model,
            chunk[0].scenario,
            mean(|r| r.mae),
            mean(|r| r.rmse),
            mean(|r| r.mape),
            chunk.len()
        );
    }
    Ok(())
}

fn sweep(run: &RunArgs, ratios: &[f64]) -> Result<()> {
    let (cfg, out) = run.resolve()?;
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(usage(format!("ratio {r} outside (0, 1)")));
    }
    let bundle = load_bundle(&cfg)?;
    let reports = mask_ratio_sweep(&bundle, &cfg, ratios, cfg.seed)?;
    create_dir(&out)?;
    write_sweep_csv(&out.join("sweep.csv"), &reports)?;
    write_reports_json(&out.join("sweep.json"), &reports)?;
    for r in &reports {
        println!("ratio {:.2}  MAE {:.4}", r.train_mask_ratio.unwrap_or(f64::NAN), r.mae);
    }
    Ok(())
}

fn ablate(run: &RunArgs, names: &[String]) -> Result<()> {
    let (cfg, out) = run.resolve()?;
    let variants: Vec<Ablation> = if names.len() == 1 && names[0] == "all" {
        Ablation::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| Ablation::from_str(n).map_err(|e| usage(e.to_string())))
            .collect::<Result<_>>()?
    };
    let bundle = load_bundle(&cfg)?;
    let reports = ablation_suite(&bundle, &cfg, &variants, cfg.seed)?;
    create_dir(&out)?;
    write_reports_csv(&out.join("ablation.csv"), &reports)?;
    write_reports_json(&out.join("ablation.json"), &reports)?;
    for r in &reports {
        println!("{:<20} MAE {:.4}", r.model, r.mae);
    }
    Ok(())
}

fn embed(distances: &Path, k: usize, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ids = distance_node_ids(distances)?;
    let mut graph = load_distances_csv(distances, &ids)?;
    cfg.graph.apply(&mut graph);
    if k == 0 || k >= ids.len() {
        return Err(usage(format!("k must lie in 1..{} for {} nodes", ids.len(), ids.len())));
    }
    let f = GraphFeatures::compute(&graph, cfg.graph.keep_rule, k)?;
    let mut header = vec!["node".to_string()];
    header.extend((1..=k).map(|c| format!("v{c}")));
    let rows: Vec<Vec<String>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut r = vec![id.clone()];
            r.extend((0..k).map(|c| f.eigenmap.at(&[i, c]).to_string()));
            r
        })
        .collect();
    match out {
        Some(p) => {
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(p, &h, rows)?;
        }
        None => {
            println!("{}", header.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let r = model_grad_check(seed)?;
    println!("max relative error {:.6e}", r.max_rel_error);
    log::info!(
        "worst entry {}[{}]: analytic {:e}, numeric {:e}; max absolute error {:.3e}",
        r.param,
        r.element,
        r.analytic,
        r.numeric,
        r.max_abs_error
    );
    if r.max_rel_error < 1e-5 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {:e} >= 1e-5", r.max_rel_error)).into())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run } => train(&run),
        Command::Krige {
            checkpoint,
            speeds,
            distances,
            unobserved,
            sentinel,
            out,
        } => krige_cmd(&checkpoint, &speeds, &distances, &unobserved, sentinel, out.as_deref()),
        Command::Evaluate {
            checkpoint,
            scenario,
            seed,
            seeds,
            data,
        } => evaluate(&checkpoint, &scenario, seed, &seeds, &data),
        Command::SweepMask { run, ratios } => sweep(&run, &ratios),
        Command::Ablate { run, variants } => ablate(&run, &variants),
        Command::Embed {
            distances,
            k,
            config,
            out,
        } => embed(&distances, k, config.as_deref(), out.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Parameter(_)) => 1,
        Some(Error::Numeric(_) | Error::Training { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
