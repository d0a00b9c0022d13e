//! The `malk` command surface: run configs, checkpoints and the commands
//! that tie training, analysis and benchmarking into reproducible runs.
//!
//! Every command reads a [`RunConfig`] (directly, or echoed inside a
//! checkpoint), so a checkpoint alone is enough to re-run any analysis.

mod checkpoint;
mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, DTYPE_F64, FORMAT_VERSION, MAGIC,
};
pub use config::{
    default_bench_methods, BalanceFactor, BalancePreset, BenchSection, BudgetSection, DataSection, OutputSection,
    RunConfig, TaskFamily, TrainingSection, LLAMA2_7B_PRESET, SEED_ENV,
};

use crate::analysis::{
    beta_grad_probe, layer_spectra, similarity_report, write_probe_csv, write_similarity_csv, write_spectrum_csv,
    BetaProbeRow, SimilarityReport, SpectrumReport,
};
use crate::error::{Error, Result};
use crate::harness::{
    bench_step, evaluate, make_multitask, make_validation, train, BenchTable, Dataset, EvalReport, MetricsHistory,
    World,
};
use crate::linalg::{Rng, RNG_ALGORITHM};
use crate::moe::{param_budget, AdapterConfig, AdapterLayer, Method, ParamBudget};

pub const CHECKPOINT_FILE: &str = "checkpoint.malk";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

/// Process exit code for `err`: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Checkpoint <-> layer

/// Packs a layer and the config that produced it.
pub fn layer_checkpoint(config: &RunConfig, layer: &AdapterLayer) -> Checkpoint {
    let metadata = serde_json::json!({
        "config": config,
        "rng_algorithm": RNG_ALGORITHM,
        "seed": config.seed,
        "method": config.adapter.method,
        "in_dim": layer.in_dim(),
        "out_dim": layer.out_dim(),
        "kaiming": "uniform(-b, b), b = sqrt(6 / fan_in)",
    });
    let tensors = layer.params().into_iter().map(|p| (p.name, p.value.clone())).collect();
    Checkpoint { metadata, tensors }
}

/// Rebuilds the layer described by a checkpoint's config echo and loads its tensors.
///
/// Every parameter of the rebuilt layer must appear exactly once with the
/// expected shape; anything else is a schema error.
pub fn restore_layer(ckpt: &Checkpoint) -> Result<(RunConfig, AdapterLayer)> {
    let echo = ckpt.metadata.get("config").ok_or_else(|| Error::Schema("metadata has no config echo".into()))?;
    let config: RunConfig =
        serde_json::from_value(echo.clone()).map_err(|e| Error::Schema(format!("config echo: {e}")))?;
    let base = ckpt.tensor("base_w").ok_or_else(|| Error::Schema("missing tensor \"base_w\"".into()))?;
    let mut layer = AdapterLayer::build(base.clone(), &config.adapter, &mut Rng::new(0)).map_err(|e| match e {
        Error::Config(m) | Error::Schema(m) => Error::Schema(m),
        other => other,
    })?;
    let mut params = layer.params_mut();
    if params.len() != ckpt.tensors.len() {
        return Err(Error::Schema(format!("expected {} tensors, found {}", params.len(), ckpt.tensors.len())));
    }
    for p in params.iter_mut() {
        let t = ckpt.tensor(&p.name).ok_or_else(|| Error::Schema(format!("missing tensor {:?}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Schema(format!(
                "tensor {:?} has shape {:?}, config implies {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        *p.value = t.clone();
    }
    drop(params);
    Ok((config, layer))
}

// ---------------------------------------------------------------------------
// budget

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetRow {
    pub label: String,
    pub method: Method,
    pub budget: ParamBudget,
    pub percent_of_base: f64,
    /// Trainable count relative to the baseline row.
    pub ratio_to_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub sites: usize,
    pub base_params: u64,
    pub baseline: BudgetRow,
    pub rows: Vec<BudgetRow>,
}

impl BudgetReport {
    pub fn render(&self) -> String {
        let mut s = format!("sites: {}  base params: {}\n", self.sites, self.base_params);
        let _ = writeln!(
            s,
            "{:<44} {:>14} {:>14} {:>10} {:>9} {:>10}",
            "method", "trainable", "frozen", "router", "%base", "vs base"
        );
        for r in std::iter::once(&self.baseline).chain(&self.rows) {
            let _ = writeln!(
                s,
                "{:<44} {:>14} {:>14} {:>10} {:>8.3}% {:>10.4}",
                r.label, r.budget.trainable, r.budget.frozen, r.budget.router, r.percent_of_base, r.ratio_to_baseline
            );
        }
        s
    }
}

fn adapter_label(a: &AdapterConfig) -> Result<String> {
    let s = a.method_spec()?;
    Ok(match s.method {
        Method::Lora | Method::Asylora => format!("{}(r={})", s.method, s.rank),
        Method::Molora | Method::Moasylora => format!("{}(N={},r={},K={})", s.method, s.n_experts, s.rank, s.top_k),
        Method::Malora => format!(
            "malora(N={},r={},d={},r_bar={},K={})",
            s.n_experts, s.rank, s.shared_rank, s.expanded_rank, s.top_k
        ),
    })
}

pub fn budget_report(config: &RunConfig) -> Result<BudgetReport> {
    let section = config.budget.clone().unwrap_or_default();
    let (sites, base_params) = section.resolve_sites()?;
    let baseline_cfg = section.baseline.clone().unwrap_or_else(|| AdapterConfig {
        n_experts: config.adapter.n_experts,
        top_k: config.adapter.top_k,
        ..AdapterConfig::new(Method::Molora, config.adapter.rank)
    });
    let row = |a: &AdapterConfig, reference: Option<u64>| -> Result<BudgetRow> {
        let budget = param_budget(&a.method_spec()?, &sites)?;
        let reference = reference.unwrap_or(budget.trainable);
        Ok(BudgetRow {
            label: adapter_label(a)?,
            method: a.method,
            percent_of_base: budget.percent_of(base_params),
            ratio_to_baseline: if reference == 0 { 0.0 } else { budget.trainable as f64 / reference as f64 },
            budget,
        })
    };
    let baseline = row(&baseline_cfg, None)?;
    let reference = Some(baseline.budget.trainable);
    let rows =
        std::iter::once(&config.adapter).chain(&section.compare).map(|a| row(a, reference)).collect::<Result<_>>()?;
    Ok(BudgetReport { sites: sites.len(), base_params, baseline, rows })
}

// ---------------------------------------------------------------------------
// train / eval

/// Training and validation sets described by the config's data section.
pub fn build_datasets(config: &RunConfig) -> Result<(World, Dataset, Dataset)> {
    let data = config.data_section()?;
    let specs = data.task_specs()?;
    let world = World::new(data.world.clone())?;
    let train_set = make_multitask(&world, &specs, &data.mix_weights(specs.len()), data.train_samples)?;
    let val = make_validation(&world, &specs)?;
    Ok((world, train_set, val))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub layer: AdapterLayer,
    pub history: MetricsHistory,
    pub final_eval: EvalReport,
}

impl TrainRun {
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.history.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn timings_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.history.write_timings_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Trains in memory; nothing is written.
pub fn run_training(config: &RunConfig) -> Result<TrainRun> {
    let tc = config.train_config()?;
    let (world, train_set, val) = build_datasets(config)?;
    let out = train(&tc, &world.base_w, &train_set, &val)?;
    let final_eval = evaluate(&out.layer, &val)?;
    Ok(TrainRun {
        checkpoint: layer_checkpoint(config, &out.layer),
        layer: out.layer,
        history: out.history,
        final_eval,
    })
}

/// Writes the checkpoint, metrics CSV and timing sidecar into `dir`.
pub fn write_run(run: &TrainRun, dir: &Path) -> Result<()> {
    let metrics = run.metrics_csv()?;
    let timings = run.timings_csv()?;
    let ckpt = encode(&run.checkpoint)?;
    write_atomic(&dir.join(METRICS_FILE), &metrics)?;
    write_atomic(&dir.join(TIMINGS_FILE), &timings)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &ckpt)
}

/// Validation metrics of a checkpoint on the tasks named in its config echo.
pub fn eval_checkpoint(ckpt: &Checkpoint) -> Result<EvalReport> {
    let (config, layer) = restore_layer(ckpt)?;
    let data = config.data_section()?;
    let world = World::new(data.world.clone())?;
    evaluate(&layer, &make_validation(&world, &data.task_specs()?)?)
}

// ---------------------------------------------------------------------------
// analyze

pub const DEFAULT_PROBE_BETAS: [f64; 5] = [0.5, 1.0, 1.25, 2.0, 5.0];

pub fn analyze_cca(ckpt: &Checkpoint) -> Result<SimilarityReport> {
    similarity_report(&restore_layer(ckpt)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumPair {
    pub a_side: SpectrumReport,
    pub b_side: SpectrumReport,
}

pub fn analyze_spectrum(ckpt: &Checkpoint, threshold: Option<f64>) -> Result<SpectrumPair> {
    let (a_side, b_side) = layer_spectra(&restore_layer(ckpt)?.1, threshold)?;
    Ok(SpectrumPair { a_side, b_side })
}

/// β sweep over the checkpoint's MALoRA geometry on a random batch drawn from `seed`.
pub fn analyze_beta_probe(ckpt: &Checkpoint, betas: &[f64], batch: usize, seed: u64) -> Result<Vec<BetaProbeRow>> {
    let (config, layer) = restore_layer(ckpt)?;
    if config.adapter.method != Method::Malora {
        return Err(Error::UnsupportedMethod(format!(
            "beta-probe needs a malora checkpoint, not {}",
            config.adapter.method
        )));
    }
    if batch == 0 || betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::config("beta-probe needs a positive batch and positive finite betas"));
    }
    let geometry = config.adapter.geometry(layer.in_dim(), layer.out_dim())?;
    let mut rng = Rng::new(seed);
    let x = rng.normal_matrix(batch, layer.in_dim(), 1.0);
    let target = rng.normal_matrix(batch, layer.out_dim(), 1.0);
    beta_grad_probe(&geometry, layer.base_w(), &x, &target, betas, seed)
}

// ---------------------------------------------------------------------------
// bench

/// MALoRA over MoLoRA median total step time, when both rows are present.
pub fn bench_ratio(table: &BenchTable) -> Option<f64> {
    Some(table.row("malora")?.total / table.row("molora")?.total)
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "malk", version, about = "Mixture-of-LoRA adapters with a shared subspace")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print trainable/frozen parameter counts per method.
    Budget {
        config: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train one adapter site and write checkpoint, metrics and timings.
    Train {
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an analysis on a checkpoint.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Time forward, backward and optimizer phases per method.
    Bench {
        config: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task validation metrics of a checkpoint.
    Eval { checkpoint: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeKind {
    /// Pairwise CCA similarity of A-side and B-side experts.
    Cca {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Singular values of the concatenated expert matrices.
    Spectrum {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dominance threshold; the mean singular value when absent.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Gradient norms of the shared subspace and coefficients across β.
    BetaProbe {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PROBE_BETAS)]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Probe seed; the checkpoint's run seed when absent.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn report_dir(out: Option<PathBuf>, ckpt_path: &Path) -> PathBuf {
    out.unwrap_or_else(|| ckpt_path.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn write_report(dir: &Path, stem: &str, csv: &[u8], json: &[u8]) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), csv)?;
    write_atomic(&dir.join(format!("{stem}.json")), json)?;
    println!("wrote {}/{stem}.{{csv,json}}", dir.display());
    Ok(())
}

/// Executes one parsed command, printing to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Budget { config, json } => {
            let report = budget_report(&load_run_config(&config)?)?;
            if json {
                print!("{}", String::from_utf8_lossy(&json_bytes(&report)));
            } else {
                print!("{}", report.render());
            }
        }
        Command::Train { config, out } => {
            let cfg = load_run_config(&config)?;
            let dir = out
                .or_else(|| cfg.output.dir.clone())
                .ok_or_else(|| Error::config("no output directory: set `output.dir` or pass --out"))?;
            let run = run_training(&cfg)?;
            write_run(&run, &dir)?;
            if let Some(last) = run.history.final_metrics() {
                println!("steps: {}  final task loss: {:.6}", last.step, last.task_loss);
            }
            for t in &run.final_eval.per_task {
                println!("task {}: val loss {:.6}", t.task, t.loss);
            }
            println!("wrote {}", dir.display());
        }
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Cca { checkpoint, out } => {
                let report = analyze_cca(&load_checkpoint(&checkpoint)?)?;
                let csv = csv_bytes(|b| write_similarity_csv(&report, b))?;
                let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                println!("A-side mean {}  B-side mean {}", fmt(report.a_side.mean), fmt(report.b_side.mean));
                write_report(&report_dir(out, &checkpoint), "cca", &csv, &json_bytes(&report))?;
            }
            AnalyzeKind::Spectrum { checkpoint, out, threshold } => {
                let pair = analyze_spectrum(&load_checkpoint(&checkpoint)?, threshold)?;
                let csv = csv_bytes(|b| write_spectrum_csv(&pair.a_side, &pair.b_side, b))?;
                println!(
                    "A-side fraction above threshold {:.4}  B-side {:.4}",
                    pair.a_side.fraction_above, pair.b_side.fraction_above
                );
                write_report(&report_dir(out, &checkpoint), "spectrum", &csv, &json_bytes(&pair))?;
            }
            AnalyzeKind::BetaProbe { checkpoint, out, betas, batch, seed } => {
                let ckpt = load_checkpoint(&checkpoint)?;
                let seed = seed.unwrap_or_else(|| ckpt.metadata["seed"].as_u64().unwrap_or(0));
                let rows = analyze_beta_probe(&ckpt, &betas, batch, seed)?;
                let csv = csv_bytes(|b| write_probe_csv(&rows, b))?;
                for r in &rows {
                    println!("beta {:<8} |dP| {:.6e}  |dS_A| {:.6e}", r.beta, r.grad_p_norm, r.grad_s_a_norm);
                }
                write_report(&report_dir(out, &checkpoint), "beta_probe", &csv, &json_bytes(&rows))?;
            }
        },
        Command::Bench { config, reps, out } => {
            let mut bc = load_run_config(&config)?.bench_config();
            if let Some(r) = reps {
                bc.reps = r;
            }
            let table = bench_step(&bc)?;
            let csv = csv_bytes(|b| table.write_csv(b))?;
            print!("{}", String::from_utf8_lossy(&csv));
            if let Some(ratio) = bench_ratio(&table) {
                println!("malora/molora total ratio: {ratio:.4} (speedup {:.3}x)", 1.0 / ratio);
            }
            if let Some(path) = out {
                write_atomic(&path, &csv)?;
            }
        }
        Command::Eval { checkpoint } => {
            let report = eval_checkpoint(&load_checkpoint(&checkpoint)?)?;
            print!("{}", String::from_utf8_lossy(&json_bytes(&report)));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
