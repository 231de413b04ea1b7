//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2
//! runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::dataset::{load_dataset, DatasetFormat};
use super::plot::{line_plot, scatter_plot};
use super::reduction::{apply_reduction, fit_reduction, normalize_split};
use super::report::{
    models_csv, parse_models_csv, read_json, scatter_csv, to_json, trajectories_csv, write_json, GroupsFile,
    TrajectoriesFile,
};
use super::{Result, ShellError};
use crate::grouping::group_run;
use crate::harness::{run_experiment, run_replicated, EvalReport};
use crate::sequencing::{score_all, ScoringMode, ScoringOptions};
use crate::theory;
use crate::transport::{debiased_distance, exact_ot_oracle, PointCloud, SinkhornConfig, EXACT_ORACLE_MAX_CELLS};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ADB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "adb", version, about = "Optimal-transport scoring of training-sample permutations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score seeded permutations of a dataset and write deviation trajectories as JSON.
    Score(ScoreArgs),
    /// Group scored permutations into Low/Medium/High deviation classes.
    Classify(ClassifyArgs),
    /// Closed-form and Monte Carlo correlation of ID/OOD error components.
    Theory(TheoryArgs),
    /// Run the synthetic shift experiment.
    Experiment(ExperimentArgs),
    /// Compare the debiased Sinkhorn distance with exact transport on two small clouds.
    OracleOt(OracleArgs),
    /// Emit CSV and SVG plots from trajectories or model reports.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    format: Option<DatasetFormat>,
    /// CSV column to drop before scoring.
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ScoringMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    perms: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    subsample_cap: Option<usize>,
    /// Keep this many principal components before scoring.
    #[arg(long)]
    reduce: Option<usize>,
    /// Z-score every column first.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    q_low: Option<f64>,
    #[arg(long)]
    q_high: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[arg(long)]
    k: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the (k, delta) sweep as CSV instead.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 0.01)]
    k_min: f64,
    #[arg(long, default_value_t = 3.0)]
    k_max: f64,
    #[arg(long, default_value_t = 300)]
    k_steps: usize,
    /// Comma-separated shifts for the sweep; defaults to --delta.
    #[arg(long, value_delimiter = ',')]
    deltas: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of replication seeds (seed, seed + 1, ...).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    epsilon: f64,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Models CSV written by `experiment`.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| ShellError::io(p, e))?),
        None => Ok(RunConfig::default()),
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| ShellError::io(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| ShellError::io(Path::new("<stdout>"), e)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ShellError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ShellError::io(path, e))
}

fn score(args: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let data = load_dataset(&args.data, args.format, args.label_column.as_deref())?;
    let mut latents = data.features;
    if args.standardize {
        latents = normalize_split(latents.view(), latents.view())?.train;
    }
    if let Some(k) = args.reduce.or(cfg.reduce) {
        let model = fit_reduction(latents.view(), k)?;
        latents = apply_reduction(&model, latents.view())?;
    }
    let opts = ScoringOptions {
        batch_size: args.batch_size.unwrap_or(cfg.batch_size),
        permutations: args.perms.unwrap_or(cfg.permutations),
        seed: args.seed.unwrap_or(cfg.seed),
        mode: args.mode.unwrap_or(cfg.mode),
        sinkhorn: SinkhornConfig::with_epsilon(args.epsilon.unwrap_or(cfg.epsilon)),
        subsample_cap: args.subsample_cap.or(cfg.subsample_cap),
    };
    let run = score_all(latents.view(), &opts)?;
    emit(out, args.out.as_deref(), &to_json(&TrajectoriesFile::from(&run))?)
}

fn classify(args: ClassifyArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let file: TrajectoriesFile = read_json(&args.trajectories)?;
    let grouping = group_run(&file.to_run()?, args.q_low.unwrap_or(cfg.q_low), args.q_high.unwrap_or(cfg.q_high))?;
    emit(out, args.out.as_deref(), &to_json(&GroupsFile::from(&grouping))?)
}

fn run_theory(args: TheoryArgs, out: &mut dyn Write) -> Result<()> {
    if args.sweep {
        let deltas = if args.deltas.is_empty() { vec![args.delta] } else { args.deltas.clone() };
        let rows = theory::sweep(&theory::linspace(args.k_min, args.k_max, args.k_steps), &deltas);
        return emit(out, args.out.as_deref(), &theory::sweep_csv(&rows));
    }
    let rho = theory::rho_tu(args.k, args.delta)?;
    let mc = theory::mc_rho(args.k, args.delta, args.mc_samples, args.seed)?;
    let text = format!(
        "k = {}\ndelta = {}\nrho = {rho}\nmc_rho = {mc}\ncov = {}\nregime = {}\n",
        args.k,
        args.delta,
        theory::cov_tu(args.k, args.delta),
        theory::negative_regime(args.k, args.delta)
    );
    emit(out, args.out.as_deref(), &text)
}

fn write_run_files(dir: &Path, suffix: &str, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(format!("models{suffix}.csv")), &models_csv(&report.models))?;
    write_text(&dir.join(format!("scatter{suffix}.csv")), &scatter_csv(&report.models))
}

fn summary_line(r: &EvalReport) -> String {
    let corr = r.correlations.medium_high.pearson.map_or("n/a".to_string(), |c| format!("{c:.4}"));
    format!(
        "seed {}: OOD W1 {:.4}, ID W1 {:.4}, ADB OOD MAE {:.4}, CV OOD MAE {:.4}, I {:.2}%, PR {:.1}%, corr {corr}\n",
        r.seed,
        r.ood_w1,
        r.id_w1,
        r.adb_metrics.ood_mae,
        r.cv.selected_metrics.ood_mae,
        r.improvement_pct.ood_mae,
        r.percentile_rank
    )
}

fn experiment(args: ExperimentArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let dir = args.out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let replications = args.seeds.unwrap_or(cfg.replications);
    if replications <= 1 {
        let report = run_experiment(&cfg.experiment)?;
        write_json(&dir.join("report.json"), &report)?;
        write_run_files(&dir, "", &report)?;
        emit(out, None, &summary_line(&report))?;
        return Ok(());
    }
    let seeds: Vec<u64> = (0..replications as u64).map(|i| cfg.seed + i).collect();
    let report = run_replicated(&cfg.experiment, &seeds)?;
    write_json(&dir.join("replication.json"), &report)?;
    for run in &report.runs {
        write_run_files(&dir, &format!("_seed{}", run.seed), run)?;
        emit(out, None, &summary_line(run))?;
    }
    let p = report.ttests.ood_mae.map_or("n/a".to_string(), |t| format!("{:.4}", t.p));
    emit(
        out,
        None,
        &format!(
            "negative correlations {}/{} (sign test p = {:.4}); mean OOD MAE ADB {:.4} vs CV {:.4} (paired t-test p = {p})\n",
            report.negative_correlations,
            report.correlated_runs,
            report.sign_test_p,
            report.adb.mean.ood_mae,
            report.cv.mean.ood_mae
        ),
    )
}

fn oracle_ot(args: OracleArgs, out: &mut dyn Write) -> Result<()> {
    let cloud = |p: &Path| -> Result<PointCloud> {
        let data = load_dataset(p, None, None)?;
        let (n, d) = data.features.dim();
        PointCloud::from_rows_of(data.features.view(), &(0..n).collect::<Vec<_>>())
            .map_err(|e| ShellError::InvalidInput(format!("{}: {e} ({n} x {d})", p.display())))
    };
    let (a, b) = (cloud(&args.a)?, cloud(&args.b)?);
    let debiased = debiased_distance(&a, &b, &SinkhornConfig::with_epsilon(args.epsilon))?;
    let mut text = format!("debiased = {debiased}\nhalf_debiased = {}\n", debiased / 2.0);
    if a.len() * b.len() <= EXACT_ORACLE_MAX_CELLS {
        text.push_str(&format!("exact = {}\n", exact_ot_oracle(&a, &b)?));
    } else {
        text.push_str("exact = skipped (instance too large)\n");
    }
    emit(out, None, &text)
}

fn plot(args: PlotArgs, out: &mut dyn Write) -> Result<()> {
    if args.trajectories.is_none() && args.models.is_none() {
        return Err(ShellError::InvalidInput("plot needs --trajectories or --models".into()));
    }
    create_dir(&args.out_dir)?;
    if let Some(path) = &args.trajectories {
        let file: TrajectoriesFile = read_json(path)?;
        write_text(&args.out_dir.join("trajectories.csv"), &trajectories_csv(&file))?;
        let title =
            format!("{} deviation trajectories (B = {}, M = {})", file.mode, file.batch_size, file.permutations);
        write_text(&args.out_dir.join("trajectories.svg"), &line_plot(&file.values, &title, "step", "deviation"))?;
    }
    if let Some(path) = &args.models {
        let text = fs::read_to_string(path).map_err(|e| ShellError::io(path, e))?;
        let rows = parse_models_csv(&text)?;
        let points: Vec<(f64, f64, String)> =
            rows.iter().map(|r| (r.metrics[0], r.metrics[2], r.group.to_string())).collect();
        let mut csv = String::from("id_mae,ood_mae,group\n");
        for (x, y, g) in &points {
            csv.push_str(&format!("{x},{y},{g}\n"));
        }
        write_text(&args.out_dir.join("scatter.csv"), &csv)?;
        write_text(&args.out_dir.join("scatter.svg"), &scatter_plot(&points, "ID vs OOD MAE", "ID MAE", "OOD MAE"))?;
    }
    emit(out, None, &format!("wrote plots to {}\n", args.out_dir.display()))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Score(a) => score(a, out),
        Command::Classify(a) => classify(a, out),
        Command::Theory(a) => run_theory(a, out),
        Command::Experiment(a) => experiment(a, out),
        Command::OracleOt(a) => oracle_ot(a, out),
        Command::Plot(a) => plot(a, out),
    }
}

fn thread_count() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        },
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            return 1;
        }
    };
    let result = match threads {
        None => dispatch(cli.command, out),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => {
                let mut buf = Vec::new();
                let r = pool.install(|| dispatch(cli.command, &mut buf));
                let _ = out.write_all(&buf);
                r
            }
            Err(e) => Err(ShellError::InvalidInput(e.to_string())),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
