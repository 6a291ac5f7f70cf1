//! Pipeline driver: collect GRAPE datasets, split, train and evaluate
//! surrogates, slice the landscape, compute per-duration measures, estimate
//! the speed limit, and benchmark exact against surrogate evaluation.
//!
//! Every artifact is reproducible from the config file and its seeds; see
//! the repository README for the config schema and file layout.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use landscape_atlas::bench::{bench_exact, bench_model, BenchResult};
use landscape_atlas::dataset::{Dataset, SplitGranularity};
use landscape_atlas::grape::{self, GrapeConfig, Trajectory};
use landscape_atlas::landscape::{
    estimate_qsl, evaluate_cut, measures, phase_markers, CutEvaluator, CutSpec,
    LandscapeMeasures, QSL_EPSILON,
};
use landscape_atlas::spin::{Boundary, Pulse, SpinChainSpec};
use landscape_atlas::surrogates::{
    evaluate, fit_gp, fit_linear, fit_nn, load_model, save_model, training_size_curve, Model,
    ModelFamily, TrainConfig,
};
use landscape_atlas::{AtlasError, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "g_over_J", default)]
    g_over_j: f64,
    #[serde(default = "default_boundary")]
    boundary: Boundary,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T_J_grid")]
    t_j_grid: Vec<f64>,
    #[serde(rename = "u_max_over_J", default = "default_u_max")]
    u_max_over_j: f64,
    seeds_per_duration: u32,
    master_seed: u64,
    #[serde(default)]
    grape: GrapeConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    split: SplitConfig,
    #[serde(default)]
    gp: GpConfig,
    #[serde(default = "default_curve_sizes")]
    curve_sizes: Vec<usize>,
    #[serde(default)]
    bench: BenchConfig,
    #[serde(default)]
    out_dir: Option<String>,
}

fn default_boundary() -> Boundary {
    Boundary::Periodic
}

fn default_u_max() -> f64 {
    1.0
}

fn default_curve_sizes() -> Vec<usize> {
    vec![1000, 3000, 10_000, 30_000, 100_000]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SplitConfig {
    train_fraction: f64,
    granularity: SplitGranularity,
    seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, granularity: SplitGranularity::Trajectory, seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GpConfig {
    subsample: usize,
    restarts: usize,
    seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { subsample: 1000, restarts: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchConfig {
    batch: usize,
    repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 1000, repeats: 5 }
    }
}

#[derive(Parser)]
#[command(
    name = "landscape-atlas",
    about = "Fidelity-landscape pipeline for driven Ising spin chains",
    version
)]
struct Cli {
    /// Path to the run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for data collection (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Restrict the command to one duration-grid index.
    #[arg(long, global = true)]
    duration_index: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run GRAPE from random seeds over the duration grid; write datasets.
    Collect {
        /// Also export each dataset as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Split datasets into train/validation files.
    Split,
    /// Fit a surrogate on the training split.
    Train {
        #[arg(long)]
        model: ModelName,
    },
    /// Report validation MAE of a trained surrogate.
    Evaluate {
        #[arg(long)]
        model: ModelName,
    },
    /// Neural-network error versus training-set size.
    Curve,
    /// Evaluate a 2D landscape cut through the three best optima.
    Cut {
        /// Score the grid with exact propagation.
        #[arg(long, conflicts_with = "model")]
        exact: bool,
        /// Score the grid with a trained surrogate.
        #[arg(long)]
        model: Option<ModelName>,
    },
    /// Landscape measures per duration.
    Measures,
    /// Quantum-speed-limit estimate (plus phase markers when possible).
    Qsl {
        /// Infidelity threshold for the estimate.
        #[arg(long, default_value_t = QSL_EPSILON)]
        epsilon: f64,
    },
    /// Wall-time benchmark: exact evaluation and any trained nn model.
    Bench,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModelName {
    Linear,
    Gp,
    Nn,
}

impl ModelName {
    fn family(self) -> ModelFamily {
        match self {
            ModelName::Linear => ModelFamily::Linear,
            ModelName::Gp => ModelFamily::Gp,
            ModelName::Nn => ModelFamily::Nn,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("LANDSCAPE_ATLAS_LOG", "warn"),
    )
    .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({ "error": e.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    spec: SpinChainSpec,
}

impl Context {
    fn duration_indices(&self, only: Option<usize>) -> Result<Vec<usize>> {
        match only {
            Some(i) if i >= self.config.t_j_grid.len() => Err(AtlasError::InvalidSpec(format!(
                "duration index {i} out of range: the grid has {} durations",
                self.config.t_j_grid.len()
            ))),
            Some(i) => Ok(vec![i]),
            None => Ok((0..self.config.t_j_grid.len()).collect()),
        }
    }

    fn dataset_path(&self, i: usize) -> PathBuf {
        self.out.join(format!("dataset_{i}.bin"))
    }

    fn train_path(&self, i: usize) -> PathBuf {
        self.out.join(format!("train_{i}.bin"))
    }

    fn valid_path(&self, i: usize) -> PathBuf {
        self.out.join(format!("valid_{i}.bin"))
    }

    fn model_path(&self, family: ModelFamily, i: usize) -> PathBuf {
        self.out.join(format!("model_{family}_{i}.bin"))
    }

    fn load_dataset(&self, i: usize) -> Result<Dataset> {
        let path = self.dataset_path(i);
        if !path.exists() {
            return Err(AtlasError::Dataset(format!(
                "no dataset found at {}; run `collect` first",
                path.display()
            )));
        }
        Dataset::load(&path)
    }

    fn load_split(&self, i: usize) -> Result<(Dataset, Dataset)> {
        let (tp, vp) = (self.train_path(i), self.valid_path(i));
        if !tp.exists() || !vp.exists() {
            return Err(AtlasError::Dataset(format!(
                "no split found for duration index {i}; run `split` first"
            )));
        }
        Ok((Dataset::load(&tp)?, Dataset::load(&vp)?))
    }

    fn load_trained(&self, family: ModelFamily, i: usize) -> Result<Model> {
        let path = self.model_path(family, i);
        if !path.exists() {
            return Err(AtlasError::Model(format!(
                "no model found at {}; run `train --model {family}` first",
                path.display()
            )));
        }
        load_model(&path, Some(family))
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| AtlasError::InvalidSpec(format!("worker pool: {e}")))?;
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| AtlasError::InvalidSpec("--config PATH is required".into()))?;
    let raw = fs::read_to_string(config_path)?;
    let mut config: RunConfig = serde_json::from_str(&raw)?;
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if config.t_j_grid.is_empty() {
        return Err(AtlasError::InvalidSpec("T_J_grid must not be empty".into()));
    }

    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;

    let spec = SpinChainSpec::new(config.l, config.g_over_j, config.boundary)?;
    let ctx = Context { config, out, spec };

    match cli.command {
        Command::Collect { csv } => cmd_collect(&ctx, cli.duration_index, csv),
        Command::Split => cmd_split(&ctx, cli.duration_index),
        Command::Train { model } => cmd_train(&ctx, cli.duration_index, model),
        Command::Evaluate { model } => cmd_evaluate(&ctx, cli.duration_index, model),
        Command::Curve => cmd_curve(&ctx, cli.duration_index),
        Command::Cut { exact, model } => cmd_cut(&ctx, cli.duration_index, exact, model),
        Command::Measures => cmd_measures(&ctx).map(|_| ()),
        Command::Qsl { epsilon } => cmd_qsl(&ctx, epsilon),
        Command::Bench => cmd_bench(&ctx, cli.duration_index),
    }
}

fn cmd_collect(ctx: &Context, only: Option<usize>, csv: bool) -> Result<()> {
    let indices = ctx.duration_indices(only)?;
    let grid: Vec<(u32, f64)> =
        indices.iter().map(|&i| (i as u32, ctx.config.t_j_grid[i])).collect();
    let collection = grape::collect_indexed(
        &ctx.spec,
        ctx.config.n,
        ctx.config.u_max_over_j,
        &grid,
        ctx.config.seeds_per_duration,
        ctx.config.master_seed,
        &ctx.config.grape,
    )?;
    for (pos, &i) in indices.iter().enumerate() {
        let ds = &collection.datasets[pos];
        let path = ctx.dataset_path(i);
        ds.save(&path)?;
        if csv {
            ds.export_csv(&path.with_extension("csv"))?;
        }
        log::info!("wrote {} ({} records)", path.display(), ds.len());
        println!(
            "{}",
            serde_json::json!({
                "duration_index": i,
                "T_J": ctx.config.t_j_grid[i],
                "records": ds.len(),
                "path": path.display().to_string(),
            })
        );
    }
    Ok(())
}

fn cmd_split(ctx: &Context, only: Option<usize>) -> Result<()> {
    for i in ctx.duration_indices(only)? {
        let ds = ctx.load_dataset(i)?;
        let (train, valid) = ds.split(
            ctx.config.split.train_fraction,
            ctx.config.split.seed,
            ctx.config.split.granularity,
        )?;
        train.save(&ctx.train_path(i))?;
        valid.save(&ctx.valid_path(i))?;
        println!(
            "{}",
            serde_json::json!({
                "duration_index": i,
                "train_records": train.len(),
                "valid_records": valid.len(),
            })
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    model: String,
    duration_index: usize,
    #[serde(rename = "M_train")]
    m_train: usize,
    seconds: f64,
}

fn cmd_train(ctx: &Context, only: Option<usize>, name: ModelName) -> Result<()> {
    for i in ctx.duration_indices(only)? {
        let (train, _) = ctx.load_split(i)?;
        let started = Instant::now();
        let (model, m_train) = match name {
            ModelName::Linear => (Model::Linear(fit_linear(&train)?), train.len()),
            ModelName::Gp => {
                let sub = if train.len() > ctx.config.gp.subsample {
                    train.subsample(ctx.config.gp.subsample, ctx.config.gp.seed)?
                } else {
                    train
                };
                (Model::Gp(fit_gp(&sub, ctx.config.gp.restarts, ctx.config.gp.seed)?), sub.len())
            }
            ModelName::Nn => (Model::Nn(fit_nn(&train, &ctx.config.train)?), train.len()),
        };
        let seconds = started.elapsed().as_secs_f64();
        save_model(&model, &ctx.model_path(name.family(), i))?;
        let report = TrainReport {
            model: name.family().to_string(),
            duration_index: i,
            m_train,
            seconds,
        };
        fs::write(
            ctx.out.join(format!("train_{}_{i}.json", name.family())),
            serde_json::to_vec_pretty(&report)?,
        )?;
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Context, only: Option<usize>, name: ModelName) -> Result<()> {
    for i in ctx.duration_indices(only)? {
        let model = ctx.load_trained(name.family(), i)?;
        let (_, valid) = ctx.load_split(i)?;
        let mae = evaluate(&model, &valid)?;
        let m_train = match &model {
            Model::Gp(g) => g.training_size(),
            _ => Dataset::load(&ctx.train_path(i))?.len(),
        };
        let payload = serde_json::json!({
            "model": name.family().to_string(),
            "M_train": m_train,
            "mae": mae,
        });
        fs::write(
            ctx.out.join(format!("evaluate_{}_{i}.json", name.family())),
            serde_json::to_vec_pretty(&payload)?,
        )?;
        println!("{payload}");
    }
    Ok(())
}

fn cmd_curve(ctx: &Context, only: Option<usize>) -> Result<()> {
    for i in ctx.duration_indices(only)? {
        let (train, valid) = ctx.load_split(i)?;
        let sizes: Vec<usize> = ctx
            .config
            .curve_sizes
            .iter()
            .copied()
            .filter(|&m| m <= train.len())
            .collect();
        if sizes.is_empty() {
            return Err(AtlasError::Model(format!(
                "training split has {} records, below every curve size",
                train.len()
            )));
        }
        let curve = training_size_curve(&train, &valid, &sizes, &ctx.config.train, 0)?;
        fs::write(
            ctx.out.join(format!("curve_{i}.json")),
            serde_json::to_vec_pretty(&curve)?,
        )?;
        let mut csv = String::from("M,mae\n");
        for (m, mae) in &curve.points {
            csv.push_str(&format!("{m},{mae}\n"));
        }
        fs::write(ctx.out.join(format!("curve_{i}.csv")), csv)?;
        println!("{}", serde_json::to_string(&curve)?);
    }
    Ok(())
}

/// Rebuilds per-seed trajectories (ordered iterates) from a stored dataset.
fn trajectories_from(ds: &Dataset) -> Result<Vec<Trajectory>> {
    let mut by_seed: std::collections::BTreeMap<u32, Vec<(u32, Pulse, f64)>> =
        std::collections::BTreeMap::new();
    for rec in ds.records() {
        by_seed.entry(rec.seed_id).or_default().push((
            rec.iterate_index,
            ds.record_pulse(rec)?,
            rec.infidelity,
        ));
    }
    Ok(by_seed
        .into_iter()
        .map(|(seed_id, mut iterates)| {
            iterates.sort_by_key(|(idx, _, _)| *idx);
            Trajectory {
                seed_id,
                iterates: iterates.into_iter().map(|(_, p, c)| (p, c)).collect(),
                converged: true,
            }
        })
        .collect())
}

/// Final pulses of the three best seeds, used as cut anchors.
fn best_three_optima(ds: &Dataset) -> Result<(Pulse, Pulse, Pulse)> {
    let mut finals: Vec<(f64, Pulse)> = trajectories_from(ds)?
        .iter()
        .map(|t| (t.final_infidelity(), t.final_pulse().clone()))
        .collect();
    if finals.len() < 3 {
        return Err(AtlasError::Landscape(format!(
            "cut needs at least 3 trajectories, dataset has {}",
            finals.len()
        )));
    }
    finals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut it = finals.into_iter();
    let (v1, v2, v3) = (it.next().unwrap().1, it.next().unwrap().1, it.next().unwrap().1);
    Ok((v1, v2, v3))
}

fn cmd_cut(ctx: &Context, only: Option<usize>, exact: bool, name: Option<ModelName>) -> Result<()> {
    if exact == name.is_some() {
        return Err(AtlasError::InvalidSpec(
            "cut requires exactly one of --exact or --model NAME".into(),
        ));
    }
    for i in ctx.duration_indices(only)? {
        let ds = ctx.load_dataset(i)?;
        let (v1, v2, v3) = best_three_optima(&ds)?;
        let cut = CutSpec::new(v1, v2, v3)?;
        let (grid, label) = if exact {
            (evaluate_cut(&cut, CutEvaluator::Exact(&ctx.spec))?, "exact".to_string())
        } else {
            let family = name.unwrap().family();
            let model = ctx.load_trained(family, i)?;
            (evaluate_cut(&cut, CutEvaluator::Model(&model))?, family.to_string())
        };
        let base = ctx.out.join(format!("cut_{label}_{i}"));
        fs::write(base.with_extension("csv"), grid.to_csv())?;
        fs::write(
            base.with_extension("json"),
            serde_json::to_vec_pretty(&cut.sidecar())?,
        )?;
        println!(
            "{}",
            serde_json::json!({
                "duration_index": i,
                "evaluator": label,
                "masked": grid.masked_count(),
                "grid": [grid.alphas.len(), grid.betas.len()],
            })
        );
    }
    Ok(())
}

fn cmd_measures(ctx: &Context) -> Result<Vec<(f64, LandscapeMeasures)>> {
    let mut per_duration = Vec::new();
    for i in ctx.duration_indices(None)? {
        let ds = ctx.load_dataset(i)?;
        let trajectories = trajectories_from(&ds)?;
        let m = measures(&trajectories, &ctx.spec)?;
        per_duration.push((ctx.config.t_j_grid[i], m));
    }
    let all: Vec<&LandscapeMeasures> = per_duration.iter().map(|(_, m)| m).collect();
    fs::write(ctx.out.join("measures.json"), serde_json::to_vec_pretty(&all)?)?;
    let mut csv = String::from(
        "T_J,F_star,D_attr_I,D_attr_II,repeated_fraction,ruggedness,trap_density\n",
    );
    for m in &all {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.t_j,
            m.best_fidelity,
            m.attractor_distance_i,
            m.attractor_distance_ii,
            m.repeated_fraction,
            m.ruggedness,
            m.trap_density
        ));
    }
    fs::write(ctx.out.join("measures.csv"), csv)?;
    println!("{}", serde_json::to_string(&all)?);
    Ok(per_duration)
}

fn cmd_qsl(ctx: &Context, epsilon: f64) -> Result<()> {
    let per_duration = cmd_measures(ctx)?;
    let qsl = estimate_qsl(&per_duration, epsilon)?;
    let markers = if per_duration.len() >= 5 {
        Some(phase_markers(&per_duration)?)
    } else {
        None
    };
    let payload = serde_json::json!({
        "T_QSL_J": qsl,
        "epsilon": epsilon,
        "phase_markers": markers.map(|(t1, t2)| serde_json::json!({ "T1_J": t1, "T2_J": t2 })),
    });
    fs::write(ctx.out.join("qsl.json"), serde_json::to_vec_pretty(&payload)?)?;
    println!("{payload}");
    Ok(())
}

fn cmd_bench(ctx: &Context, only: Option<usize>) -> Result<()> {
    let mut results: Vec<BenchResult> = vec![bench_exact(
        &ctx.spec,
        ctx.config.n,
        ctx.config.bench.batch,
        ctx.config.bench.repeats,
    )?];
    // Benchmark the nn surrogate when one has been trained.
    let i = only.unwrap_or(0);
    let nn_path = ctx.model_path(ModelFamily::Nn, i);
    if nn_path.exists() {
        let model = load_model(&nn_path, Some(ModelFamily::Nn))?;
        results.push(bench_model(&model, ctx.config.bench.batch, ctx.config.bench.repeats)?);
    } else {
        log::info!("no nn model at {}; benchmarking exact only", nn_path.display());
    }
    let mut jsonl = String::new();
    let mut csv = format!("{}\n", BenchResult::csv_header());
    for r in &results {
        jsonl.push_str(&r.to_json());
        jsonl.push('\n');
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
        println!("{}", r.to_json());
    }
    fs::write(ctx.out.join("bench.jsonl"), jsonl)?;
    fs::write(ctx.out.join("bench.csv"), csv)?;
    Ok(())
}
