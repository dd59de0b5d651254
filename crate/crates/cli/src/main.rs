//! `leancl`: train, evaluate and gradient-check sparse continual learners.
//!
//! Results go to stdout as JSON. Failures exit nonzero with
//! `{"error": <kind>, "message": <text>}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leancl_core::harness::{emit_report, run_experiment, MetricsSummary, Quiet};
use leancl_core::metrics::evaluate;
use leancl_core::nn::{checkpoint_precision, numeric_grad_check, Checkpoint};
use leancl_core::{Error, EvalMode, Method, Model, Precision, Result, Scalar, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "leancl", version, about = "Sparse continual learning with dynamic masks and data removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a task stream and write the report, logs and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every task of a stream.
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences.
    GradCheck(GradCheckArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    gradient_extra_sparsity: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    delta_k: Option<usize>,
    /// Rehearsal buffer capacity.
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory with the four IDX files, or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with the four IDX files, or `synthetic`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "class-il")]
    mode: EvalMode,
    /// Configuration describing the task split; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "f64")]
    precision: Precision,
    /// Parameters sampled per model.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig::load(&a.config)?;
    if let Some(m) = a.method {
        c.method = m;
    }
    c.sparsity = a.sparsity.or(c.sparsity);
    c.gradient_extra_sparsity = a.gradient_extra_sparsity.or(c.gradient_extra_sparsity);
    c.rho = a.rho.or(c.rho);
    c.cutoff = a.cutoff.unwrap_or(c.cutoff);
    c.delta_k = a.delta_k.unwrap_or(c.delta_k);
    c.buffer_capacity = a.buffer.unwrap_or(c.buffer_capacity);
    c.seed = a.seed.unwrap_or(c.seed);
    if let Some(d) = &a.data {
        c.data = d.clone();
    }
    c.validate()?;
    Ok(c)
}

fn train_with<F: Scalar>(config: &TrainConfig, out: &Path) -> Result<serde_json::Value> {
    let stream = config.load_stream::<F>()?;
    let exp = run_experiment(config, &stream, &mut Quiet)?;
    emit_report(&exp, out)?;
    Ok(serde_json::to_value(MetricsSummary::from_report(&exp.report))?)
}

fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let config = train_config(&a)?;
    match config.precision {
        Precision::F32 => train_with::<f32>(&config, &a.out),
        Precision::F64 => train_with::<f64>(&config, &a.out),
    }
}

fn eval_with<F: Scalar>(a: &EvalArgs, config: &TrainConfig) -> Result<serde_json::Value> {
    let model: Model<F> = Checkpoint::load(&a.checkpoint)?.model;
    let stream = config.load_stream::<F>()?;
    if model.input_shape() != stream.input_shape.as_slice() || model.class_count() < stream.class_count {
        return Err(Error::Dimension(format!(
            "checkpoint expects input {:?} with {} classes, data has {:?} with {}",
            model.input_shape(),
            model.class_count(),
            stream.input_shape,
            stream.class_count
        )));
    }
    Ok(serde_json::to_value(evaluate(&model, &stream, a.mode)?)?)
}

fn eval(a: EvalArgs) -> Result<serde_json::Value> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config.data = a.data.clone();
    config.seed = a.seed.unwrap_or(config.seed);
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => eval_with::<f32>(&a, &config),
        Precision::F64 => eval_with::<f64>(&a, &config),
    }
}

fn grad_check_with<F: Scalar>(samples: usize, seed: u64, tol: f64) -> Result<serde_json::Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Model::<F>::mlp(&[20], &[32, 16], 5, &mut rng)?;
    let x_mlp = Tensor::from_fn(&[3, 20], |_| F::of(rng.random_range(-1.0..1.0)));
    let cnn = Model::<F>::small_cnn(&[1, 8, 8], 4, 3, 5, &mut rng)?;
    let x_cnn = Tensor::from_fn(&[3, 1, 8, 8], |_| F::of(rng.random_range(-1.0..1.0)));
    let labels = [0, 2, 4];
    let reports = [
        ("mlp", numeric_grad_check(&mlp, &x_mlp, &labels, samples, tol, seed)?),
        ("cnn", numeric_grad_check(&cnn, &x_cnn, &labels, samples, tol, seed)?),
    ];
    if let Some((name, r)) = reports.iter().find(|(_, r)| !r.pass) {
        return Err(Error::Numeric(format!(
            "{name} gradient check failed: relative error {:.3e} > {:.0e} at {:?}",
            r.max_rel_error, r.tolerance, r.worst
        )));
    }
    Ok(json!({ "mlp": reports[0].1, "cnn": reports[1].1 }))
}

fn grad_check(a: GradCheckArgs) -> Result<serde_json::Value> {
    match a.precision {
        Precision::F32 => grad_check_with::<f32>(a.samples, a.seed, 1e-4),
        Precision::F64 => grad_check_with::<f64>(a.samples, a.seed, 1e-6),
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), 2),
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
