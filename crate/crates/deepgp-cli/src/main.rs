//! `deepgp` — train, evaluate and use deep-GP models from the shell.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use deepgp::bo::{branin, branin_domain, run_bo, SurrogateConfig, SurrogateKind};
use deepgp::executor::PoolEvaluator;
use deepgp::infer::{test_log_likelihood, ImputeOptions, PredictInput, Predictor};
use deepgp::model::{ModeKind, ModelConfig};
use deepgp::protocol::{serve_worker, ProcessEvaluator};
use deepgp::train::{fit_with_progress, initialize, FitStatus, TrainConfig};
use ndarray::{Array1, Array2};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exit codes: 0 converged / success, 2 iteration budget exhausted,
/// 3 optimizer stalled, 4 usage or data errors.
const EXIT_MAX_ITERS: u8 = 2;
const EXIT_STALLED: u8 = 3;
const EXIT_ERROR: u8 = 4;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint_format_version=1\nmatrix_format_version=1"
);

#[derive(Parser)]
#[command(name = "deepgp", version, long_version = LONG_VERSION, about = "Deep Gaussian process toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to data and write a checkpoint.
    Train {
        /// Data matrix (.csv, or .bin/.mat in the binary format).
        #[arg(long)]
        data: PathBuf,
        /// Observed inputs (supervised mode only).
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// JSON config with `model` and `train` sections.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (TSV) output path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Worker count (in-process pool, or processes with --multiprocess).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force deterministic reduction regardless of the config.
        #[arg(long)]
        deterministic: bool,
        /// Run workers as separate processes over local sockets.
        #[arg(long)]
        multiprocess: bool,
        /// Write the checkpoint every N accepted iterations as well.
        #[arg(long = "checkpoint-every")]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint: test log-likelihood, or MSE in supervised mode.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "train-data")]
        train_data: PathBuf,
        #[arg(long = "test-data")]
        test_data: PathBuf,
        /// Supervised: training inputs.
        #[arg(long = "train-inputs")]
        train_inputs: Option<PathBuf>,
        /// Supervised: test inputs.
        #[arg(long = "test-inputs")]
        test_inputs: Option<PathBuf>,
    },
    /// Draw samples from a trained unsupervised model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output matrix (.csv or .bin).
        #[arg(long)]
        out: PathBuf,
        /// Also render an image grid (requires --height/--width).
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Complete rows with missing entries (empty cells or `nan`).
    Impute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Completed output CSV (values then per-dimension variances).
        #[arg(long)]
        out: PathBuf,
        /// Skip test-point optimization (recognition forward only).
        #[arg(long)]
        no_optimize: bool,
    },
    /// Bayesian optimization of a test objective.
    Bo {
        /// `branin` or `table:<csv>` (nearest-neighbor lookup, last column
        /// is the objective value).
        #[arg(long, default_value = "branin")]
        objective: String,
        /// Surrogate model: dgp or gp.
        #[arg(long, default_value = "dgp")]
        surrogate: String,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long, default_value_t = 3)]
        init: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 30)]
        inducing: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-replicate trace CSVs.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Print format version tags.
    Version,
    /// Internal: serve shards over the worker protocol.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        socket: PathBuf,
    },
}

/// The JSON config file: model structure, trainer settings, and an optional
/// image shape for renderers.
#[derive(serde::Serialize, serde::Deserialize)]
struct FileConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    image: Option<ImageShape>,
}

#[derive(Clone, Copy, serde::Serialize, serde::Deserialize)]
struct ImageShape {
    height: usize,
    width: usize,
}

fn read_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("{}: cannot read config", path.display()))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .with_context(|| format!("{}: invalid config", path.display()))?;
    cfg.model
        .validate()
        .with_context(|| format!("{}: invalid model section", path.display()))?;
    Ok(cfg)
}

fn load_matrix(path: &Path) -> anyhow::Result<Array2<f64>> {
    deepgp::io::read_matrix_auto::<f64>(path)
        .with_context(|| format!("{}: cannot load matrix", path.display()))
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> anyhow::Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("mat") => deepgp::io::write_matrix_binary(path, &m.view())?,
        _ => deepgp::io::write_csv(path, &m.view())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data: &Path,
    inputs: Option<&Path>,
    config: &Path,
    out: &Path,
    log: Option<&Path>,
    workers: usize,
    seed: Option<u64>,
    deterministic: bool,
    multiprocess: bool,
    checkpoint_every: Option<usize>,
) -> anyhow::Result<u8> {
    let cfg = read_config(config)?;
    let y = load_matrix(data)?;
    if y.iter().any(|v| !v.is_finite()) {
        bail!("{}: training data contains non-finite entries", data.display());
    }
    let x = match (cfg.model.mode, inputs) {
        (ModeKind::Supervised, Some(p)) => Some(load_matrix(p)?),
        (ModeKind::Supervised, None) => bail!("supervised mode requires --inputs"),
        (ModeKind::Unsupervised, _) => None,
    };
    let mut tc = cfg.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    if deterministic {
        tc.deterministic_reduction = true;
    }
    let model = initialize(&cfg.model, &y.view(), x.as_ref().map(|m| m.view()).as_ref(), tc.seed)?;

    let mut full_cfg = cfg.model.clone();
    full_cfg.data_dim = y.ncols();
    full_cfg.n_train = y.nrows();
    if let Some(xm) = &x {
        full_cfg.input_dim = xm.ncols();
    }
    // periodic checkpoints, written through the same format as the final one
    let write_interval_ckpt = |m: &deepgp::DgpModel| -> anyhow::Result<()> {
        let predictor = Predictor::fit(m.clone(), &y.view())?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
        deepgp::checkpoint::save(&mut file, &predictor, &full_cfg)?;
        Ok(())
    };
    let progress = |iter: usize, m: &deepgp::DgpModel, _rec: &deepgp::train::IterRecord<f64>| {
        if let Some(every) = checkpoint_every {
            if every > 0 && iter > 0 && iter % every == 0 {
                if let Err(e) = write_interval_ckpt(m) {
                    eprintln!("warning: interval checkpoint failed: {e:#}");
                }
            }
        }
    };

    // the shard partition depends only on the data and shard_count, so the
    // worker count never affects the numbers
    let result = if multiprocess {
        let exe = std::env::current_exe()?;
        let mut eval = ProcessEvaluator::spawn(
            y.clone(),
            x.as_ref(),
            &full_cfg,
            tc.shard_count,
            workers,
            tc.deterministic_reduction,
            |sock| {
                let mut cmd = std::process::Command::new(&exe);
                cmd.arg("worker").arg("--socket").arg(sock);
                cmd
            },
        )?;
        let r = fit_with_progress(model, &mut eval, &tc, progress)?;
        eval.shutdown();
        r
    } else {
        let mut eval = PoolEvaluator::new(y.clone(), tc.shard_count, workers, tc.deterministic_reduction);
        fit_with_progress(model, &mut eval, &tc, progress)?
    };

    if let Some(p) = log {
        deepgp::io::write_training_log(p, &result.trace)?;
    }
    let predictor = Predictor::fit(result.model, &y.view())?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    deepgp::checkpoint::save(&mut file, &predictor, &full_cfg)?;
    let last = result.trace.last().expect("trace is never empty");
    println!(
        "status={} iterations={} bound={}",
        match result.status {
            FitStatus::Converged => "converged",
            FitStatus::MaxIters => "max_iters",
            FitStatus::LineSearchFailed => "stalled",
        },
        last.iter,
        last.bound
    );
    Ok(match result.status {
        FitStatus::Converged => 0,
        FitStatus::MaxIters => EXIT_MAX_ITERS,
        FitStatus::LineSearchFailed => EXIT_STALLED,
    })
}

fn run_eval(
    model_path: &Path,
    train_data: &Path,
    test_data: &Path,
    train_inputs: Option<&Path>,
    test_inputs: Option<&Path>,
) -> anyhow::Result<u8> {
    let mut f = std::io::BufReader::new(std::fs::File::open(model_path)?);
    let (predictor, _cfg) = deepgp::checkpoint::load::<f64>(&mut f)?;
    let y_train = load_matrix(train_data)?;
    let y_test = load_matrix(test_data)?;
    println!("train_bound={}", predictor.train_bound);
    if predictor.model.is_supervised() {
        let xs = test_inputs
            .ok_or_else(|| anyhow::anyhow!("supervised eval requires --test-inputs"))?;
        let x_test = load_matrix(xs)?;
        let _ = train_inputs; // training inputs live in the checkpoint
        let (mean, _) = predictor.predict_outputs(PredictInput::Deterministic(x_test.view()))?;
        if mean.raw_dim() != y_test.raw_dim() {
            bail!("prediction/target shape mismatch");
        }
        let mse: f64 = mean
            .iter()
            .zip(y_test.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / y_test.len() as f64;
        println!("mse={mse}");
    } else {
        let ll = test_log_likelihood(&predictor.model, &y_test.view(), &y_train.view())?;
        println!("test_log_likelihood={ll}");
    }
    Ok(0)
}

fn run_sample(
    model_path: &Path,
    n: usize,
    seed: u64,
    out: &Path,
    pgm: Option<&Path>,
    height: Option<usize>,
    width: Option<usize>,
) -> anyhow::Result<u8> {
    let mut f = std::io::BufReader::new(std::fs::File::open(model_path)?);
    let (predictor, _) = deepgp::checkpoint::load::<f64>(&mut f)?;
    let samples = predictor.sample(n, seed)?;
    write_matrix(out, &samples)?;
    if let Some(p) = pgm {
        let (h, w) = match (height, width) {
            (Some(h), Some(w)) => (h, w),
            _ => bail!("--pgm requires --height and --width"),
        };
        let per_row = (n as f64).sqrt().ceil() as usize;
        deepgp::io::write_pgm_grid(p, &samples.view(), h, w, per_row)?;
    }
    println!("samples={n} out={}", out.display());
    Ok(0)
}

fn run_impute(model_path: &Path, data: &Path, out: &Path, no_optimize: bool) -> anyhow::Result<u8> {
    let mut f = std::io::BufReader::new(std::fs::File::open(model_path)?);
    let (predictor, _) = deepgp::checkpoint::load::<f64>(&mut f)?;
    let rows = load_matrix(data)?;
    let d = rows.ncols();
    let opts = ImputeOptions {
        optimize: !no_optimize,
        ..Default::default()
    };
    let mut completed = Array2::<f64>::zeros((rows.nrows(), 2 * d));
    for (i, row) in rows.rows().into_iter().enumerate() {
        let missing: Vec<bool> = row.iter().map(|v| v.is_nan()).collect();
        let filled: Array1<f64> = row.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
        let imp = predictor
            .impute(&filled.view(), &missing, &opts)
            .with_context(|| format!("row {i}"))?;
        for j in 0..d {
            // observed entries pass through; missing ones take the imputation
            completed[(i, j)] = if missing[j] { imp.values[j] } else { row[j] };
            completed[(i, d + j)] = imp.variances[j];
        }
    }
    deepgp::io::write_csv(out, &completed.view())?;
    println!("rows={} out={}", rows.nrows(), out.display());
    Ok(0)
}

/// Nearest-neighbor lookup objective defined by a CSV table.
struct TableObjective {
    x: Array2<f64>,
    y: Array1<f64>,
}

impl TableObjective {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let m = load_matrix(path)?;
        if m.ncols() < 2 {
            bail!("{}: lookup table needs inputs plus a value column", path.display());
        }
        let q = m.ncols() - 1;
        Ok(TableObjective {
            x: m.slice(ndarray::s![.., ..q]).to_owned(),
            y: m.column(q).to_owned(),
        })
    }

    fn domain(&self) -> Vec<(f64, f64)> {
        (0..self.x.ncols())
            .map(|j| {
                let col = self.x.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect()
    }

    fn eval(&self, x: &ndarray::ArrayView1<f64>) -> f64 {
        let mut best = f64::INFINITY;
        let mut val = f64::NAN;
        for (row, y) in self.x.rows().into_iter().zip(self.y.iter()) {
            let d: f64 = row.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best {
                best = d;
                val = *y;
            }
        }
        val
    }
}

#[allow(clippy::too_many_arguments)]
fn run_bo_cmd(
    objective: &str,
    surrogate: &str,
    replicates: usize,
    init: usize,
    iters: usize,
    inducing: usize,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<u8> {
    std::fs::create_dir_all(out_dir)?;
    let kind = match surrogate {
        "dgp" => SurrogateKind::Dgp,
        "gp" => SurrogateKind::Gp,
        other => bail!("unknown surrogate `{other}` (use dgp or gp)"),
    };
    let cfg = SurrogateConfig {
        kind,
        inducing,
        ..Default::default()
    };
    let table = match objective.strip_prefix("table:") {
        Some(path) => Some(TableObjective::load(Path::new(path))?),
        None if objective == "branin" => None,
        None => bail!("unknown objective `{objective}` (use branin or table:<csv>)"),
    };
    let domain = match &table {
        Some(t) => t.domain(),
        None => branin_domain::<f64>(),
    };
    let mut finals = Vec::new();
    for rep in 0..replicates {
        let rep_seed = seed + rep as u64;
        let trace = match &table {
            Some(t) => run_bo(
                |x| t.eval(x),
                domain.clone(),
                init,
                iters,
                &cfg,
                rep_seed,
            )?,
            None => run_bo(
                |x| branin::<f64>(x),
                domain.clone(),
                init,
                iters,
                &cfg,
                rep_seed,
            )?,
        };
        let path = out_dir.join(format!("trace_{surrogate}_{rep:02}.csv"));
        deepgp::io::write_bo_trace(&path, &trace)?;
        println!(
            "replicate={rep} seed={rep_seed} best={} evaluations={}",
            trace.state.best_value,
            trace.state.len()
        );
        finals.push(trace.state.best_value);
    }
    finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = finals[finals.len() / 2];
    println!("median_best={median}");
    Ok(0)
}

fn run_worker(socket: &Path) -> anyhow::Result<u8> {
    let stream = std::os::unix::net::UnixStream::connect(socket)
        .with_context(|| format!("{}: cannot reach coordinator", socket.display()))?;
    serve_worker(stream)?;
    Ok(0)
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train {
            data,
            inputs,
            config,
            out,
            log,
            workers,
            seed,
            deterministic,
            multiprocess,
            checkpoint_every,
        } => run_train(
            &data,
            inputs.as_deref(),
            &config,
            &out,
            log.as_deref(),
            workers,
            seed,
            deterministic,
            multiprocess,
            checkpoint_every,
        ),
        Command::Eval {
            model,
            train_data,
            test_data,
            train_inputs,
            test_inputs,
        } => run_eval(
            &model,
            &train_data,
            &test_data,
            train_inputs.as_deref(),
            test_inputs.as_deref(),
        ),
        Command::Sample {
            model,
            n,
            seed,
            out,
            pgm,
            height,
            width,
        } => run_sample(&model, n, seed, &out, pgm.as_deref(), height, width),
        Command::Impute {
            model,
            data,
            out,
            no_optimize,
        } => run_impute(&model, &data, &out, no_optimize),
        Command::Bo {
            objective,
            surrogate,
            replicates,
            init,
            iters,
            inducing,
            seed,
            out_dir,
        } => run_bo_cmd(
            &objective, &surrogate, replicates, init, iters, inducing, seed, &out_dir,
        ),
        Command::Version => {
            println!("deepgp {}", env!("CARGO_PKG_VERSION"));
            println!(
                "checkpoint_format_version={}",
                deepgp::checkpoint::FORMAT_VERSION
            );
            println!(
                "matrix_format_version={}",
                deepgp::io::MATRIX_FORMAT_VERSION
            );
            Ok(0)
        }
        Command::Worker { socket } => run_worker(&socket),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
