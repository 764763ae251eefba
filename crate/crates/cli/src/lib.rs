//! The `wavetuner` command line: train, evaluate, forecast, analyze,
//! ablate and gradcheck.

pub mod checkpoint;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wavetuner::data::{load_csv, write_forecast_csv, Dataset, SplitName, DEFAULT_RATIOS};
use wavetuner::model::{ModelConfig, Variant, WaveTuner};
use wavetuner::training::{evaluate, grad_check, thread_count, train, GradCheckOptions, TrainConfig, TrainReport};
use wavetuner::wavelet::{best_basis_tree, make_filter_bank, EntropyNode, WaveletFamily};
use wavetuner::{Error, ErrorKind, Result};

pub use checkpoint::Checkpoint;

/// Gradient-check pass threshold on the max relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "wavetuner", version, about = "Wavelet-packet time series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.json, report.json and losses.csv.
    Train(TrainArgs),
    /// Print test (or validation) MSE and MAE of a checkpoint as JSON.
    Evaluate(EvaluateArgs),
    /// Forecast the horizon after the last lookback rows of a CSV.
    Forecast(ForecastArgs),
    /// Entropy-guided wavelet packet tree of a CSV, as JSON.
    Analyze(AnalyzeArgs),
    /// Train every model variant with one budget and compare test metrics.
    Ablate(AblateArgs),
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 96)]
    pub lookback: usize,
    #[arg(long, default_value_t = 96)]
    pub horizon: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value = "haar")]
    pub wavelet: String,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub router_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub base_order: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Train, validation and test fractions, e.g. `0.6,0.2,0.2`.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_RATIOS)]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the router weights as `band,channel,weight` rows.
    #[arg(long)]
    pub dump_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value = "haar")]
    pub wavelet: String,
    /// Analyze only the last K rows.
    #[arg(long)]
    pub last: Option<usize>,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Number of variants trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Distort one analytic gradient entry (negative control).
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

/// Process exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config | ErrorKind::Shape => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numeric | ErrorKind::Domain => 4,
        ErrorKind::State => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Output goes to `stdout`; diagnostics to stderr.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(&a, out).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(&a, out).map(|_| 0),
        Command::Forecast(a) => cmd_forecast(&a).map(|_| 0),
        Command::Analyze(a) => cmd_analyze(&a, out).map(|_| 0),
        Command::Ablate(a) => cmd_ablate(&a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|source| Error::Io {
        path: "<stdout>".into(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("serializing JSON: {e}")))
}

fn ratios(fit: &FitArgs) -> Result<[f64; 3]> {
    fit.ratios
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config(format!("--ratios takes three values, got {}", fit.ratios.len())))
}

fn model_config(fit: &FitArgs, channels: usize, variant: Variant) -> Result<ModelConfig> {
    let m = &fit.model;
    let config = ModelConfig {
        channels,
        lookback: m.lookback,
        horizon: m.horizon,
        levels: m.levels,
        wavelet: m.wavelet.parse::<WaveletFamily>()?,
        embed_dim: m.embed_dim,
        router_hidden: m.router_hidden,
        base_order: m.base_order,
        variant,
        seed: fit.seed,
    };
    config.validate()?;
    Ok(config)
}

fn train_config(fit: &FitArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: fit.lr,
        epochs: fit.epochs,
        batch_size: fit.batch,
        patience: fit.patience,
        seed: fit.seed,
        ..TrainConfig::default()
    }
}

/// Loads, splits and standardizes the training data for `fit`.
fn prepare(fit: &FitArgs) -> Result<Dataset> {
    let ratios = ratios(fit)?;
    load_csv(&fit.data)?
        .split(ratios, fit.model.lookback, fit.model.horizon)?
        .standardize()
}

/// Trains one variant on prepared data.
pub fn fit_variant(fit: &FitArgs, data: &Dataset, variant: Variant) -> Result<(ModelConfig, wavetuner::params::ParamStore, TrainReport)> {
    let config = model_config(fit, data.channels(), variant)?;
    let (mut model, mut params) = WaveTuner::build(config.clone())?;
    let report = train(
        &mut model,
        &mut params,
        data,
        config.lookback,
        config.horizon,
        &train_config(fit),
    )?;
    Ok((config, params, report))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<TrainReport> {
    let variant: Variant = a.variant.parse()?;
    // validate flags before touching the data
    model_config(&a.fit, 1, variant)?;
    train_config(&a.fit).validate()?;
    let data = prepare(&a.fit)?;
    let (config, params, report) = fit_variant(&a.fit, &data, variant)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let scaler = data.scaler().cloned().expect("standardized data carries a scaler");
    Checkpoint::new(&config, &params, ratios(&a.fit)?, data.names().to_vec(), scaler).save(&a.out.join("model.json"))?;
    write_file(&a.out.join("report.json"), &(to_json(&report)? + "\n"))?;
    write_file(&a.out.join("losses.csv"), &report.losses_csv())?;
    eprintln!(
        "trained {} epochs in {:.2}s; best epoch {}, test mse {:.6}, mae {:.6}",
        report.val_loss.len() - 1,
        report.wall_clock_seconds,
        report.best_epoch,
        report.test_mse,
        report.test_mae
    );
    emit(out, &a.out.join("model.json").display().to_string())?;
    Ok(report)
}

/// Loads a checkpoint together with a CSV standardized by its statistics.
fn checkpoint_data(model: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(model)?;
    let raw = load_csv(data)?;
    if raw.channels() != ckpt.config.channels {
        return Err(Error::Data(format!(
            "checkpoint has {} channels, data has {}",
            ckpt.config.channels,
            raw.channels()
        )));
    }
    let scaled = raw.standardize_with(ckpt.scaler.clone())?;
    Ok((ckpt, scaled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalOutput {
    pub mse: f64,
    pub mae: f64,
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<EvalOutput> {
    let split: SplitName = a.split.parse()?;
    let (ckpt, data) = checkpoint_data(&a.model, &a.data)?;
    let (model, params) = ckpt.restore()?;
    let cfg = &ckpt.config;
    let data = data.split(ckpt.split_ratios, cfg.lookback, cfg.horizon)?;
    let windows = data.windows(split, cfg.lookback, cfg.horizon, 1)?;
    let m = evaluate(&model, &params, &windows, thread_count())?;
    let result = EvalOutput { mse: m.mse, mae: m.mae };
    emit(out, &serde_json::to_string(&result).map_err(|e| Error::Data(e.to_string()))?)?;
    Ok(result)
}

pub fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let (ckpt, data) = checkpoint_data(&a.model, &a.data)?;
    let (model, params) = ckpt.restore()?;
    let history = data.tail(ckpt.config.lookback)?;
    let out = model.predict(&params, history)?;
    let forecast = ckpt.scaler.inverse(out.forecast.view())?;
    if forecast.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forecast contains non-finite values".into()));
    }
    let file = fs::File::create(&a.output).map_err(io_err(&a.output))?;
    write_forecast_csv(file, &ckpt.channel_names, forecast.view())?;
    if let Some(path) = &a.dump_weights {
        let mut csv = String::from("band,channel,weight\n");
        for (label, channel, weight) in model.weight_table(&params, history)? {
            csv.push_str(&format!("{label},{channel},{weight}\n"));
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelTree {
    pub channel: String,
    pub best_basis: Vec<String>,
    pub nodes: Vec<EntropyNode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeOutput {
    pub wavelet: String,
    pub levels: usize,
    pub length: usize,
    pub channels: Vec<ChannelTree>,
    /// Entropy summed over channels.
    pub aggregate: ChannelTree,
}

pub fn analyze(data: &Dataset, wavelet: &str, levels: usize, last: Option<usize>) -> Result<AnalyzeOutput> {
    let fb = make_filter_bank(wavelet)?;
    let n = data.len();
    let values = match last {
        Some(k) if k == 0 || k > n => {
            return Err(Error::Config(format!("--last {k} is outside 1..={n}")));
        }
        Some(k) => data.values().slice_move(ndarray::s![.., n - k..]),
        None => data.values(),
    };
    let len = values.ncols();
    let factor = 1usize << levels.min(31);
    if levels >= 1 && len % factor != 0 {
        let usable = len / factor * factor;
        return Err(Error::Config(format!(
            "2^{levels} does not divide series length {len}; rerun with --last {usable}"
        )));
    }
    let tree_of = |name: String, x: ndarray::ArrayView2<f64>| -> Result<ChannelTree> {
        let tree = best_basis_tree(x, &fb, levels)?;
        Ok(ChannelTree {
            channel: name,
            best_basis: tree.best_basis(),
            nodes: tree.nodes,
        })
    };
    let channels = data
        .names()
        .iter()
        .enumerate()
        .map(|(c, name)| tree_of(name.clone(), values.slice(ndarray::s![c..c + 1, ..])))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyzeOutput {
        wavelet: fb.family.to_string(),
        levels,
        length: len,
        channels,
        aggregate: tree_of("all".into(), values)?,
    })
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<AnalyzeOutput> {
    let data = load_csv(&a.data)?;
    let result = analyze(&data, &a.wavelet, a.levels, a.last)?;
    let json = to_json(&result)?;
    match &a.output {
        Some(path) => write_file(path, &(json + "\n"))?,
        None => emit(out, &json)?,
    }
    Ok(result)
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: Result<TrainReport>,
}

/// Trains every variant on `data`, `jobs` at a time. Rows come back sorted
/// by test MSE (ties and failures ordered by variant name, failures last).
pub fn ablate(fit: &FitArgs, data: &Dataset, jobs: usize) -> Vec<AblationRow> {
    let mut variants: Vec<Variant> = Variant::ALL.to_vec();
    variants.sort_by_key(|v| v.name());
    let run = |v: Variant| AblationRow {
        variant: v,
        result: fit_variant(fit, data, v).map(|(_, _, r)| r),
    };
    let mut rows: Vec<AblationRow> = if jobs <= 1 {
        variants.into_iter().map(run).collect()
    } else {
        let mut rows = Vec::with_capacity(variants.len());
        for group in variants.chunks(jobs) {
            std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|&v| s.spawn(move || run(v))).collect();
                rows.extend(handles.into_iter().map(|h| h.join().expect("ablation worker panicked")));
            });
        }
        rows
    };
    rows.sort_by(|a, b| {
        let key = |r: &AblationRow| r.result.as_ref().map(|r| r.test_mse).unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.variant.name().cmp(b.variant.name()))
    });
    rows
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv = String::from("variant,mse,mae\n");
    for row in rows {
        match &row.result {
            Ok(r) => csv.push_str(&format!("{},{},{}\n", row.variant, r.test_mse, r.test_mae)),
            Err(_) => csv.push_str(&format!("{},failed,failed\n", row.variant)),
        }
    }
    csv
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    model_config(&a.fit, 1, Variant::Full)?;
    train_config(&a.fit).validate()?;
    let data = prepare(&a.fit)?;
    let rows = ablate(&a.fit, &data, a.jobs);
    for row in &rows {
        if let Err(e) = &row.result {
            eprintln!("variant {} failed: {e}", row.variant);
        }
    }
    let csv = ablation_csv(&rows);
    match &a.output {
        Some(path) => write_file(path, &csv)?,
        None => out
            .write_all(csv.as_bytes())
            .map_err(|source| Error::Io {
                path: "<stdout>".into(),
                source,
            })?,
    }
    Ok(rows)
}

/// The small model the gradient check runs on.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(2, 8, 8);
    cfg.levels = 1;
    cfg.embed_dim = 4;
    cfg.variant = variant;
    cfg
}

#[derive(Debug, Clone, Serialize)]
struct GradcheckOutput<'a> {
    variant: &'a str,
    fd_step: f64,
    max_rel_error: f64,
    worst_param: &'a str,
    worst_index: usize,
    checked: usize,
    passed: bool,
}

/// Exit code 0 when the max relative error is below the tolerance, 1 otherwise.
pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let variant: Variant = a.variant.parse()?;
    let opts = GradCheckOptions {
        fd_step: a.fd_step,
        seed: a.seed,
        corrupt_backward: a.corrupt_backward,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&gradcheck_config(variant), &opts)?;
    let passed = report.max_rel_error < GRAD_CHECK_TOLERANCE;
    emit(
        out,
        &to_json(&GradcheckOutput {
            variant: variant.name(),
            fd_step: a.fd_step,
            max_rel_error: report.max_rel_error,
            worst_param: &report.worst_param,
            worst_index: report.worst_index,
            checked: report.checked,
            passed,
        })?,
    )?;
    Ok(if passed { 0 } else { 1 })
}
