use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alps_core::pipeline::{localize, sweep, sweep_csv};
use alps_core::scoring::{score_all_heads, DEFAULT_TAU};
use alps_core::selection::{select_layer_consistent, select_random, select_topk, DEFAULT_RATIO};
use alps_core::trainer::{
    ablation_sensitivity, init_model, make_dataset, train, AttentionFreeze, ModelConfig, TaskFamily, ToyModel,
    TrainConfig,
};
use alps_core::{read_checkpoint, Error, HeadMask, Metric, MetricDomain, ScoreReport, Strategy};
use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "alps", version, about = "Score, select, and fine-tune task-sensitive attention heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every head of a task checkpoint against its base.
    Score {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "pad")]
        metric: Metric,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Compare raw projections or their tempered softmax. Defaults to
        /// `dist` for pad/kl and `raw` for cosine/euclid.
        #[arg(long)]
        metric_domain: Option<MetricDomain>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a score report into a head mask.
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RATIO)]
        ratio: f64,
        #[arg(long, default_value = "topk")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the toy model; writes the checkpoint and `<out>.metrics.jsonl`.
    Train {
        /// TOML or JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Head mask; implies `--freeze mask` unless `--freeze` is given.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        freeze: Option<AttentionFreeze>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-head loss increase when each head's output is removed.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task_family: TaskFamily,
        #[arg(long, default_value_t = DEFAULT_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked fine-tuning over a ratio × strategy × seed grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Score report for Top-K; computed from a full fine-tune when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Layer × head CSV of a score report.
    Heatmap {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Numeric(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

type Outcome = Result<PathBuf, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", subcommand_usage());
            }
            return ExitCode::from(1);
        }
    };
    if let Err(f) = configure_threads() {
        return report(Err(f));
    }
    report(run(cli.command))
}

fn subcommand_usage() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().nth(1).unwrap_or_default();
    match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn report(outcome: Outcome) -> ExitCode {
    match outcome {
        Ok(path) => {
            eprintln!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ALPS_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("ALPS_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Score { base, task, metric, tau, metric_domain, out } => {
            cmd_score(&base, &task, metric, tau, metric_domain, &out)
        }
        Command::Select { scores, ratio, strategy, seed, out } => cmd_select(&scores, ratio, strategy, seed, &out),
        Command::Train { config, mask, freeze, out } => cmd_train(&config, mask.as_deref(), freeze, &out),
        Command::Ablate { model, task_family, ratio, data_seed, size, out } => {
            cmd_ablate(&model, task_family, ratio, data_seed, size, &out)
        }
        Command::Sweep { config, ratios, strategies, seeds, scores, out_dir } => {
            cmd_sweep(&config, &ratios, &strategies, &seeds, scores.as_deref(), &out_dir)
        }
        Command::Heatmap { scores, out } => {
            let report = load_report(&scores)?;
            write_atomic(&out, report.heatmap_csv().as_bytes())?;
            Ok(out)
        }
    }
}

fn check_ratio(ratio: f64) -> Result<(), Failure> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Write via a sibling temporary file and rename, so a failed run never
/// leaves a partial file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| data_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| data_err(path, e))?;
    tmp.persist(path).map_err(|e| data_err(path, e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| data_err(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_report(path: &Path) -> Result<ScoreReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let report: ScoreReport = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
    report.validate().map_err(|e| data_err(path, e))?;
    Ok(report)
}

fn load_mask(path: &Path) -> Result<HeadMask, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mask: HeadMask = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
    mask.validate().map_err(|e| data_err(path, e))?;
    Ok(mask)
}

fn load_model(path: &Path) -> Result<ToyModel, Failure> {
    let ckpt = read_checkpoint(path).map_err(|e| data_err(path, e))?;
    ToyModel::from_checkpoint(&ckpt).map_err(|e| data_err(path, e))
}

fn cmd_score(base: &Path, task: &Path, metric: Metric, tau: f64, domain: Option<MetricDomain>, out: &Path) -> Outcome {
    let domain = domain.unwrap_or(metric.default_domain());
    if !metric.supports(domain) {
        return Err(Failure::Usage(format!("--metric {metric} only compares distributions")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Failure::Usage(format!("--tau must be positive, got {tau}")));
    }
    let base_ckpt = read_checkpoint(base).map_err(|e| data_err(base, e))?;
    let task_ckpt = read_checkpoint(task).map_err(|e| data_err(task, e))?;
    let geometry = base_ckpt
        .geometry()
        .map_err(|e| data_err(base, e))?
        .ok_or_else(|| data_err(base, "checkpoint carries no model geometry"))?;
    let report = score_all_heads(&base_ckpt, &task_ckpt, &geometry, metric, domain, tau)?;
    write_json(out, &report)?;
    Ok(out.to_path_buf())
}

fn cmd_select(scores: &Path, ratio: f64, strategy: Strategy, seed: u64, out: &Path) -> Outcome {
    check_ratio(ratio)?;
    let report = load_report(scores)?;
    let mask = match strategy {
        Strategy::Topk => select_topk(&report, ratio)?,
        Strategy::Random => select_random(&report.geometry, ratio, seed)?,
        Strategy::Lc => select_layer_consistent(&report.geometry, ratio, seed)?,
    };
    write_json(out, &mask)?;
    Ok(out.to_path_buf())
}

/// Parse a training configuration; relative paths inside it resolve
/// against the file's directory.
fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut config: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| data_err(path, e))?
    } else {
        toml::from_str(&text).map_err(|e| data_err(path, e))?
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    for p in [&mut config.init, &mut config.mask].into_iter().flatten() {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    config.validate().map_err(|e| data_err(path, e))?;
    Ok(config)
}

fn starting_model(config: &TrainConfig) -> Result<ToyModel, Failure> {
    let model = match &config.init {
        Some(path) => load_model(path)?,
        None => init_model(config.geometry.map(ModelConfig::new).unwrap_or_default(), config.model_seed)?,
    };
    if let Some(g) = config.geometry {
        if g != *model.geometry() {
            return Err(Failure::Data(format!(
                "configured geometry {g:?} differs from the initial checkpoint's {:?}",
                model.geometry()
            )));
        }
    }
    Ok(model)
}

fn cmd_train(config_path: &Path, mask: Option<&Path>, freeze: Option<AttentionFreeze>, out: &Path) -> Outcome {
    let mut config = load_config(config_path)?;
    if let Some(m) = mask {
        config.mask = Some(m.to_path_buf());
        config.freeze = AttentionFreeze::Mask;
    }
    if let Some(f) = freeze {
        config.freeze = f;
    }
    let mask = match (&config.mask, config.freeze) {
        (Some(p), AttentionFreeze::Mask) => Some(load_mask(p)?),
        _ => None,
    };
    let model = starting_model(&config)?;
    let outcome = train(model, &config, mask.as_ref())?;
    let bytes = outcome.model.to_checkpoint()?.to_bytes()?;
    let mut log_name = out.as_os_str().to_owned();
    log_name.push(".metrics.jsonl");
    write_atomic(Path::new(&log_name), outcome.log_jsonl().as_bytes())?;
    write_atomic(out, &bytes)?;
    Ok(out.to_path_buf())
}

fn cmd_ablate(model: &Path, family: TaskFamily, ratio: f64, data_seed: u64, size: usize, out: &Path) -> Outcome {
    check_ratio(ratio)?;
    if size == 0 {
        return Err(Failure::Usage("--size must be positive".into()));
    }
    let model = load_model(model)?;
    let data = make_dataset(family, data_seed, size)?;
    let report = ablation_sensitivity(&model, &data, None, ratio)?;
    write_json(out, &report)?;
    Ok(out.to_path_buf())
}

fn cmd_sweep(
    config_path: &Path,
    ratios: &[f64],
    strategies: &[Strategy],
    seeds: &[u64],
    scores: Option<&Path>,
    out_dir: &Path,
) -> Outcome {
    for &r in ratios {
        check_ratio(r)?;
    }
    let config = load_config(config_path)?;
    let base = starting_model(&config)?;
    fs::create_dir_all(out_dir).map_err(|e| data_err(out_dir, e))?;
    let report = match scores {
        Some(p) => load_report(p)?,
        None => {
            let (_, report) = localize(&base, &config, Metric::Pad, DEFAULT_TAU)?;
            write_json(&out_dir.join("scores.json"), &report)?;
            report
        }
    };
    if report.geometry != *base.geometry() {
        return Err(Failure::Data("score report geometry differs from the base model".into()));
    }
    let rows = sweep(&base, &report, &config, ratios, strategies, seeds)?;
    let path = out_dir.join("sweep.csv");
    write_atomic(&path, sweep_csv(&rows).as_bytes())?;
    Ok(path)
}
