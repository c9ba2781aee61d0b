//! `mld`: train, evaluate, gradient-check, sweep β, report and generate data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mld_core::data::{generate_synthetic, load_manifest, save_manifest, Split, SyntheticParams};
use mld_core::gradcheck::run_gradcheck;
use mld_core::numeric::RngState;
use mld_core::plot::{LineChart, Series, SERIES_COLOURS};
use mld_core::trainer::{
    evaluate, load_checkpoint, metrics_csv, train, Datasets, EpochLog, RunDir, RunState, TrainConfig,
};
use mld_core::{Error, Real};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mld", version, about = "Discriminative multi-label representation learning")]
struct Cli {
    /// Write diagnostics to stderr as JSON lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write its metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest directory to evaluate on.
        #[arg(long, conflicts_with = "split", required_unless_present = "split")]
        data: Option<PathBuf>,
        /// Split of the checkpoint's own data source.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// One run per β value; writes sweep.csv and sweep.png.
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,3")]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Run the β values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Consolidated curves of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output file (csv, json) or directory (plot); defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    GenData {
        /// JSON synthetic parameters; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Plot,
}

/// Failure of a subcommand, mapped onto the exit-code contract.
#[derive(Debug)]
enum Failure {
    Core(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Divergence { .. }) => 2,
            Failure::Core(_) => 1,
            Failure::Check(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Check(_) => "check_failed",
            Failure::Core(e) => match e {
                Error::Divergence { .. } => "divergence",
                Error::Config(_) => "config",
                Error::Io { .. } => "io",
                Error::Checksum { .. } | Error::Version { .. } => "corrupt_file",
                Error::Json(_) | Error::Format(_) => "format",
                _ => "input",
            },
        }
    }

    fn report(&self, json: bool) {
        let message = match self {
            Failure::Core(e) => e.to_string(),
            Failure::Check(m) => m.clone(),
        };
        if json {
            let mut v = serde_json::json!({ "error": self.kind(), "message": message, "exit_code": self.exit_code() });
            if let Failure::Core(Error::Divergence {
                breakdown: Some(b), ..
            }) = self
            {
                v["breakdown"] = serde_json::to_value(b).unwrap_or_default();
            }
            eprintln!("{v}");
        } else {
            eprintln!("error: {message}");
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path) -> Result<TrainConfig, Error> {
    TrainConfig::from_json(&read_text(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let data = Datasets::load(&cfg)?;
    let resume: Option<RunState<Real>> = resume.map(load_checkpoint).transpose()?;
    let dir = RunDir::create(out)?;
    let state = train(&cfg, &data, resume, &dir)?;
    if let Some(last) = state.history.last() {
        println!("trained {} epochs; final validation metrics:", state.epoch);
        print!("{}", last.eval.table());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: Option<&Path>, split: Option<SplitArg>, out: &Path) -> CmdResult {
    let state: RunState<Real> = load_checkpoint(checkpoint)?;
    let samples = match (data, split) {
        (Some(dir), _) => load_manifest(dir)?.samples,
        (None, Some(s)) => {
            let sets = Datasets::load(&state.config)?;
            match s {
                SplitArg::Train => sets.train.samples,
                SplitArg::Val => sets.val.samples,
            }
        }
        (None, None) => return Err(Error::Config("one of --data or --split is required".into()).into()),
    };
    if samples.is_empty() {
        return Err(Error::Config("evaluation split has no images".into()).into());
    }
    let classes = state.shape().classes;
    for img in &samples {
        img.validate(classes)?;
    }
    let report = evaluate(&state.params, &samples)?;
    write_bytes(out, &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize, tolerance: f64) -> CmdResult {
    let report = run_gradcheck(seed, trials, tolerance)?;
    println!("seed {seed}, {trials} trials, {} redrawn near kinks", report.redrawn);
    for r in &report.components {
        println!("{:<8} worst relative error {:.3e} (trial {})", r.component.to_string(), r.worst_rel_error, r.worst_trial);
    }
    if report.passed() {
        println!("all components below {tolerance:e}");
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check exceeded tolerance {tolerance:e}")))
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    beta: f64,
    status: String,
    map: f64,
    cf1: f64,
    of1: f64,
}

fn sweep_one(cfg: &TrainConfig, data: &Datasets, beta: f64, out: &Path) -> Result<SweepRow, Error> {
    let cfg = TrainConfig { beta, ..cfg.clone() };
    let dir = RunDir::create(out.join(format!("beta_{beta}")))?;
    let nan = |status: String| SweepRow {
        beta,
        status,
        map: f64::NAN,
        cf1: f64::NAN,
        of1: f64::NAN,
    };
    match train::<Real>(&cfg, data, None, &dir) {
        Ok(state) => Ok(match state.history.last() {
            Some(l) => SweepRow {
                beta,
                status: "ok".into(),
                map: l.eval.map,
                cf1: l.eval.all.cf1,
                of1: l.eval.all.of1,
            },
            None => nan("no epochs".into()),
        }),
        Err(Error::Divergence { .. }) => Ok(nan("diverged".into())),
        Err(e) => Err(e),
    }
}

fn cmd_sweep(config: &Path, values: &[f64], out: &Path, parallel: bool) -> CmdResult {
    let cfg = load_config(config)?;
    if let Some(bad) = values.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Config(format!("β values must be finite and non-negative, got {bad}")).into());
    }
    let data = Datasets::load(&cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows: Vec<SweepRow> = if parallel {
        use rayon::prelude::*;
        values.par_iter().map(|&b| sweep_one(&cfg, &data, b, out)).collect::<Result<_, _>>()?
    } else {
        values.iter().map(|&b| sweep_one(&cfg, &data, b, out)).collect::<Result<_, _>>()?
    };

    let mut csv = String::from("beta,mAP,CF1,OF1,status\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.beta, r.map, r.cf1, r.of1, r.status).expect("write to String");
    }
    write_bytes(&out.join("sweep.csv"), csv.as_bytes())?;
    let series = |name: &str, f: fn(&SweepRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.beta, 100.0 * f(r))).collect(),
    };
    let chart = LineChart::new(vec![series("mAP", |r| r.map), series("CF1", |r| r.cf1), series("OF1", |r| r.of1)]);
    chart.save(&out.join("sweep.png"))?;
    print!("{csv}");
    println!("{}", legend(&chart));

    let diverged: Vec<String> = rows.iter().filter(|r| r.status == "diverged").map(|r| r.beta.to_string()).collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(Error::Divergence {
            reason: format!("runs diverged at β = {}", diverged.join(", ")),
            breakdown: None,
        }
        .into())
    }
}

fn legend(chart: &LineChart) -> String {
    let names: Vec<String> = chart
        .series
        .iter()
        .zip(SERIES_COLOURS.iter().cycle())
        .map(|(s, [r, g, b])| format!("{} = #{r:02x}{g:02x}{b:02x}", s.name))
        .collect();
    format!("legend: {}", names.join(", "))
}

fn curve(history: &[EpochLog], name: &str, f: impl Fn(&EpochLog) -> f64) -> Series {
    Series {
        name: name.into(),
        points: history.iter().map(|l| (l.epoch as f64, f(l))).collect(),
    }
}

fn cmd_report(run: &Path, format: Format, out: Option<&Path>) -> CmdResult {
    let dir = RunDir::open(run);
    let missing = dir.missing_artifacts();
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} is incomplete; missing {}", run.display(), missing.join(", "))).into());
    }
    let history = dir.read_history()?;
    match format {
        Format::Csv => {
            let path = out.map_or_else(|| dir.path("report.csv"), Path::to_path_buf);
            write_bytes(&path, metrics_csv(&history).as_bytes())?;
            println!("{}", path.display());
        }
        Format::Json => {
            let path = out.map_or_else(|| dir.path("report.json"), Path::to_path_buf);
            write_bytes(&path, &serde_json::to_vec_pretty(&history).map_err(Error::from)?)?;
            println!("{}", path.display());
        }
        Format::Plot => {
            let root = out.map_or_else(|| dir.root().to_path_buf(), Path::to_path_buf);
            fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            let charts = [
                (
                    "losses.png",
                    LineChart::new(vec![
                        curve(&history, "l_ce", |l| l.l_ce),
                        curve(&history, "l_mc", |l| l.l_mc),
                        curve(&history, "total", |l| l.total),
                    ]),
                ),
                (
                    "metrics.png",
                    LineChart::new(vec![
                        curve(&history, "mAP", |l| 100.0 * l.eval.map),
                        curve(&history, "CF1", |l| 100.0 * l.eval.all.cf1),
                        curve(&history, "OF1", |l| 100.0 * l.eval.all.of1),
                    ]),
                ),
                (
                    "ratio.png",
                    LineChart::new(vec![curve(&history, "inter/intra", |l| l.diagnostics.ratio)]),
                ),
            ];
            for (name, chart) in &charts {
                let path = root.join(name);
                chart.save(&path)?;
                println!("{} ({})", path.display(), legend(chart));
            }
        }
    }
    Ok(())
}

fn cmd_gen_data(params: Option<&Path>, out: &Path, seed: u64) -> CmdResult {
    let p: SyntheticParams = match params {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => SyntheticParams::default(),
    };
    p.validate()?;
    let splits = generate_synthetic(&p, RngState::new(seed))?;
    for (split, m) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
        if m.samples.is_empty() {
            continue;
        }
        let dir = out.join(split.to_string());
        save_manifest(m, &dir)?;
        println!("{}: {} images", dir.display(), m.samples.len());
    }
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let n = match std::env::var("MLD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("MLD_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn dispatch(command: &Command) -> CmdResult {
    configure_threads()?;
    match command {
        Command::Train { config, out, resume } => cmd_train(config, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(checkpoint, data.as_deref(), *split, out),
        Command::Gradcheck {
            seed,
            trials,
            tolerance,
        } => cmd_gradcheck(*seed, *trials, *tolerance),
        Command::SweepBeta {
            config,
            values,
            out,
            parallel,
        } => cmd_sweep(config, values, out, *parallel),
        Command::Report { run, format, out } => cmd_report(run, *format, out.as_deref()),
        Command::GenData { params, out, seed } => cmd_gen_data(params.as_deref(), out, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report(cli.json);
            ExitCode::from(f.exit_code())
        }
    }
}
