//! `ssmflow` command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments or inputs,
//! failed checks), 2 internal error (including training divergence).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssmflow::color::flow_to_color;
use ssmflow::flo::{read_flo, write_flo, FloError};
use ssmflow::gradcheck::{self, Scope};
use ssmflow::nn::ParamStore;
use ssmflow::pipeline::{
    self, instantiate, load_weights, save_weights, train_toy, write_log, FlowModel, ModelConfig, ModelError,
    TrainConfig, TrainError, WeightError,
};
use ssmflow::scalar::{Precision, Scalar};
use ssmflow::ssm::bench::{self, Form};
use ssmflow::Tensor;

mod imageio;

#[derive(Parser)]
#[command(name = "ssmflow", version, about = "Optical flow with selective state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate flow between two images.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        /// Output `.flo` file.
        #[arg(long)]
        out: PathBuf,
        /// Optional color rendering (PNG or PPM by extension).
        #[arg(long)]
        viz: Option<PathBuf>,
        /// Refinement iterations (default: from the weight file's config).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train on synthetic translations and write a weight file and CSV log.
    TrainToy {
        /// `key=value` model config (default: the tiny config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Metric log (default: the weight path with `.csv` appended).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Synthetic samples generated before the 80/20 split.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Time the sequential, kernel and parallel scans over doubling lengths.
    BenchScan {
        #[arg(long, default_value_t = 16384)]
        max_len: usize,
        #[arg(long, default_value_t = 256)]
        min_len: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        /// The O(L²) kernel form is skipped above this length.
        #[arg(long, default_value_t = 8192)]
        kernel_max_len: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_parser = ["primitives", "blocks", "end2end"])]
        scope: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Render a `.flo` file as a color image.
    Viz {
        #[arg(long)]
        flo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Magnitude mapped to full saturation (default: 99th percentile).
        #[arg(long)]
        max_norm: Option<f64>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        invalid(e.to_string())
    }
}

impl From<FloError> for CliError {
    fn from(e: FloError) -> Self {
        invalid(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Indivisible { .. }
            | ModelError::ImageShape(..)
            | ModelError::Match(_)
            | ModelError::Config(_) => invalid(e.to_string()),
            ModelError::Tensor(_) => internal(e),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SSMFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| invalid(format!("SSMFLOW_THREADS must be a number, got '{v}'")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(internal)?;
    }
    Ok(())
}

fn infer_with<T: Scalar>(
    cfg: ModelConfig,
    weights: &ParamStore<f32>,
    img1: &Tensor<f32>,
    img2: &Tensor<f32>,
    iters: Option<usize>,
) -> Result<(Tensor<f32>, pipeline::StageTimings), CliError> {
    let (store, model) = instantiate::<T>(cfg, weights)?;
    Ok(model.infer(&store, img1, img2, iters)?)
}

fn infer(
    weights: &Path,
    img1: &Path,
    img2: &Path,
    out: &Path,
    viz: Option<&Path>,
    iters: Option<usize>,
) -> Result<(), CliError> {
    let (cfg, store) = load_weights(weights)?;
    let a = imageio::load_rgb(img1)?;
    let b = imageio::load_rgb(img2)?;
    if a.shape() != b.shape() {
        return Err(invalid(format!("image sizes differ: {:?} and {:?}", &a.shape()[..2], &b.shape()[..2])));
    }
    let (flow, timings) = match cfg.precision {
        Precision::F32 => infer_with::<f32>(cfg, &store, &a, &b, iters)?,
        Precision::F64 => infer_with::<f64>(cfg, &store, &a, &b, iters)?,
    };
    write_flo(&flow, out)?;
    if let Some(path) = viz {
        imageio::save_rgb(&flow_to_color(&flow, None), path)?;
    }
    println!("{timings}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    steps: usize,
    seed: u64,
    out: &Path,
    log: Option<&Path>,
    lr: Option<f64>,
    batch: Option<usize>,
    samples: Option<usize>,
    eval_every: Option<usize>,
) -> Result<(), CliError> {
    let mc = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            ModelConfig::parse(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::tiny(),
    };
    let mut tc = TrainConfig { steps, seed, ..TrainConfig::new(mc.image_height, mc.image_width) };
    tc.lr = lr.unwrap_or(tc.lr);
    tc.batch = batch.unwrap_or(tc.batch);
    tc.samples = samples.unwrap_or(tc.samples);
    tc.eval_every = eval_every.unwrap_or(tc.eval_every);
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    });
    let (store, model) = FlowModel::new::<f32>(mc, seed).map_err(|e| invalid(e.to_string()))?;
    println!("{} parameters, {} steps, seed {seed}", store.num_elements(), steps);
    match train_toy(&model, store, &tc, |r| {
        println!("step {:6}  loss {:9.4}  epe {:8.4}  f1-all {:6.2}%", r.step, r.loss, r.epe, r.f1_all)
    }) {
        Ok(outcome) => {
            save_weights(&mc, &outcome.store, out)?;
            write_log(&outcome.log, &log_path).map_err(|e| invalid(format!("{}: {e}", log_path.display())))?;
            println!("held-out epe {:.4} (untrained {:.4})", outcome.last.epe, outcome.initial.epe);
            Ok(())
        }
        Err(TrainError::Diverged { step, loss, last_good_step, last_good }) => {
            save_weights(&mc, &last_good, out)?;
            Err(CliError::Internal(format!(
                "training diverged at step {step} (loss {loss}); weights from step {last_good_step} written to {}",
                out.display()
            )))
        }
        Err(TrainError::Config(m)) => Err(invalid(m)),
        Err(e) => Err(internal(e)),
    }
}

fn bench_scan(
    min_len: usize,
    max_len: usize,
    state: usize,
    channels: usize,
    kernel_max: usize,
    reps: usize,
    out: &Path,
) -> Result<(), CliError> {
    if min_len == 0 || max_len < min_len || state == 0 || channels == 0 {
        return Err(invalid("need 0 < min-len ≤ max-len and positive state and channels"));
    }
    let lens: Vec<usize> =
        std::iter::successors(Some(min_len), |&l| Some(l * 2)).take_while(|&l| l <= max_len).collect();
    let mut rows =
        bench::run(&[Form::Sequential, Form::Parallel], &lens, state, channels, reps, 0).map_err(internal)?;
    let short: Vec<usize> = lens.iter().copied().filter(|&l| l <= kernel_max).collect();
    rows.extend(bench::run(&[Form::Kernel], &short, state, channels, reps, 0).map_err(internal)?);
    std::fs::write(out, bench::to_csv(&rows)).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    println!("doubling ratios time(2L)/time(L)");
    println!("{:>8} {:>11} {:>11} {:>11}", "L", "sequential", "parallel", "kernel");
    let cols = [Form::Sequential, Form::Parallel, Form::Kernel].map(|f| bench::doubling_ratios(&rows, f));
    for &l in &lens[..lens.len().saturating_sub(1)] {
        let cell =
            |c: &Vec<(usize, f64)>| c.iter().find(|r| r.0 == l).map_or("-".to_string(), |r| format!("{:.2}", r.1));
        println!("{l:>8} {:>11} {:>11} {:>11}", cell(&cols[0]), cell(&cols[1]), cell(&cols[2]));
    }
    Ok(())
}

fn gradcheck_cmd(scope: &str, seed: u64) -> Result<(), CliError> {
    let scope = Scope::parse(scope).ok_or_else(|| invalid(format!("unknown scope '{scope}'")))?;
    let checks = gradcheck::run(scope, seed).map_err(internal)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    for c in &checks {
        println!("{c}");
    }
    println!("{} passed, {} failed", checks.len() - failed.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn viz(flo: &Path, out: &Path, max_norm: Option<f64>) -> Result<(), CliError> {
    if let Some(m) = max_norm {
        if !(m > 0.0) {
            return Err(invalid("--max-norm must be positive"));
        }
    }
    let field = read_flo(flo)?;
    imageio::save_rgb(&flow_to_color(&field, max_norm), out)
}

fn selftest() -> Result<(), CliError> {
    let outcomes = ssmflow::selftest::run();
    let mut failed = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(()) => println!("pass {}", o.name),
            Err(e) => {
                println!("FAIL {}: {e}", o.name);
                failed.push(o.name);
            }
        }
    }
    println!("{} passed, {} failed", outcomes.len() - failed.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("self-test failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Infer { weights, img1, img2, out, viz, iters } => {
            infer(&weights, &img1, &img2, &out, viz.as_deref(), iters)
        }
        Command::TrainToy { config, steps, seed, out, log, lr, batch, samples, eval_every } => {
            train(config.as_deref(), steps, seed, &out, log.as_deref(), lr, batch, samples, eval_every)
        }
        Command::BenchScan { max_len, min_len, state, channels, kernel_max_len, reps, out } => {
            bench_scan(min_len, max_len, state, channels, kernel_max_len, reps, &out)
        }
        Command::Gradcheck { scope, seed } => gradcheck_cmd(&scope, seed),
        Command::Viz { flo, out, max_norm } => viz(&flo, &out, max_norm),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
