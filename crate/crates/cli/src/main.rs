use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use avreason_core::counterfactual::{affinity_csv, affinity_json};
use avreason_core::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use avreason_core::harness::{
    batch_affinity, evaluate, load_checkpoint, load_data, metrics_csv, probe_disentanglement, save_checkpoint,
    summary_json, train, MetricsRecord, TrainConfig, KEYS,
};
use avreason_core::synth::{raw_feature_probe, write_dataset, Dataset};
use avreason_core::Error;

// stdout may be a closed pipe (`| head`); that is not an error worth a panic
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Disentangled counterfactual reasoning over synthetic audiovisual episodes.
///
/// Configuration is layered: built-in defaults, then `--config`, then
/// `AVREASON_<KEY>` environment variables, then `--set` flags.
#[derive(Parser, Debug)]
#[command(name = "avreason", version, after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file and report a raw-feature probe on it.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Number of episodes (default: train_episodes + val_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and write metrics.csv, summary.json and model.ckpt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Comma-separated seed list; each seed gets its own subdirectory.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on its validation split.
    Eval(CheckpointArgs),
    /// Linear probes from the static and dynamic latents to the true classes.
    Probe(CheckpointArgs),
    /// Finite-difference checks of every operation and loss.
    Gradcheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Dump the affinity graphs of one evaluation batch.
    DumpAffinity {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Evaluation batch index.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override one key of the stored config (e.g. alpha_audio); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn keys_help() -> String {
    let mut s = String::from("Config keys:\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<18} {d}\n"));
    }
    s
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Numeric(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn apply_sets(cfg: &mut TrainConfig, sets: &[String]) -> Result<(), Failure> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

fn resolve(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    apply_sets(&mut cfg, &args.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    say!("{text}");
    match out {
        Some(p) => write(p, format!("{text}\n")),
        None => Ok(()),
    }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value")
}

fn gen_data(cfg: &TrainConfig, out: &Path, episodes: Option<usize>) -> Result<(), Failure> {
    let n = episodes.unwrap_or(cfg.train_episodes + cfg.val_episodes);
    let ds = Dataset::generate_range(&cfg.generator, 0, n)?;
    write_dataset(out, &ds)?;
    let probe = raw_feature_probe(&ds)?;
    let report = json!({
        "path": out.display().to_string(),
        "episodes": ds.len(),
        "label_balance": ds.label_balance(),
        "raw_probe": probe,
    });
    say!("{}", pretty(&report));
    Ok(())
}

fn run_one(cfg: &TrainConfig, dir: &Path, quiet: bool) -> Result<MetricsRecord, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (tr, va) = load_data(cfg)?;
    let outcome = train(cfg, &tr, &va, |r| {
        if !quiet {
            eprintln!(
                "seed {} epoch {:>3}  loss {:.4}  tie {:.4}  train {:.3}  val {:.3}  probe s/z static {:.3}/{:.3} dynamic {:.3}/{:.3}  {:.1}s",
                cfg.seed,
                r.epoch,
                r.loss.total,
                r.loss.l_tie,
                r.train_accuracy,
                r.val.accuracy,
                r.probe.s_static.accuracy,
                r.probe.z_static.accuracy,
                r.probe.s_dynamic.accuracy,
                r.probe.z_dynamic.accuracy,
                r.wall_clock,
            );
        }
    })?;
    write(&dir.join("metrics.csv"), metrics_csv(&outcome.records))?;
    write(&dir.join("summary.json"), pretty(&summary_json(cfg, &outcome.records)))?;
    save_checkpoint(&dir.join("model.ckpt"), &outcome.model, cfg)?;
    Ok(*outcome.final_record())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

fn train_cmd(cfg: &TrainConfig, out: &Path, seeds: &[u64], quiet: bool) -> Result<(), Failure> {
    if seeds.is_empty() {
        let r = run_one(cfg, out, quiet)?;
        say!("{}", pretty(&json!({ "out": out.display().to_string(), "final": r })));
        return Ok(());
    }
    let mut finals = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.set("seed", &seed.to_string())?;
        finals.push((seed, run_one(&c, &out.join(format!("seed-{seed}")), quiet)?));
    }
    let acc: Vec<f64> = finals.iter().map(|(_, r)| r.val.accuracy).collect();
    let gaps: Vec<(f64, f64)> = finals.iter().map(|(_, r)| r.probe.gaps()).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let (g1, _) = mean_std(&gaps.iter().map(|g| g.0).collect::<Vec<_>>());
    let (g2, _) = mean_std(&gaps.iter().map(|g| g.1).collect::<Vec<_>>());
    let report = json!({
        "seeds": seeds,
        "val_accuracy": { "mean": acc_mean, "std": acc_std, "per_seed": acc },
        "static_gap_mean": g1,
        "dynamic_gap_mean": g2,
        "final": finals.iter().map(|(s, r)| json!({ "seed": s, "record": r })).collect::<Vec<_>>(),
    });
    write(&out.join("seeds.json"), pretty(&report))?;
    say!("{}", pretty(&report));
    Ok(())
}

fn open_checkpoint(args: &CheckpointArgs) -> Result<(avreason_core::harness::Model, TrainConfig, Dataset), Failure> {
    if !args.checkpoint.exists() {
        return Err(Failure::Usage(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    let (model, mut cfg) = load_checkpoint(&args.checkpoint)?;
    apply_sets(&mut cfg, &args.set)?;
    cfg.validate()?;
    let (_, val) = load_data(&cfg)?;
    Ok((model, cfg, val))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { cfg, out, episodes } => gen_data(&resolve(&cfg)?, &out, episodes),
        Command::Train { cfg, out, seeds, quiet } => train_cmd(&resolve(&cfg)?, &out, &seeds, quiet),
        Command::Eval(args) => {
            let (model, cfg, val) = open_checkpoint(&args)?;
            let r = evaluate(&model, &val.episodes, &cfg)?;
            emit(args.out.as_deref(), &pretty(&json!(r)))
        }
        Command::Probe(args) => {
            let (model, cfg, val) = open_checkpoint(&args)?;
            let r = probe_disentanglement(&model, &val.episodes, &cfg)?;
            let (g1, g2) = r.gaps();
            emit(args.out.as_deref(), &pretty(&json!({ "probe": r, "static_gap": g1, "dynamic_gap": g2 })))
        }
        Command::Gradcheck { seeds } => {
            let mut failed = Vec::new();
            run_gradient_suite(seeds, |c| {
                let verdict = if c.passed() { "pass" } else { "FAIL" };
                say!("{verdict} {:<18} worst rel err {:.3e} (seed {})", c.name, c.worst, c.worst_seed);
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            })?;
            if failed.is_empty() {
                say!("all gradient checks within {GRAD_TOLERANCE:e} over {seeds} seeds");
                Ok(())
            } else {
                Err(Failure::Numeric(format!("gradient checks failed: {}", failed.join(", "))))
            }
        }
        Command::DumpAffinity { ckpt, batch, format } => {
            let (model, cfg, val) = open_checkpoint(&ckpt)?;
            let a = batch_affinity(&model, &val.episodes, &cfg, batch)?;
            let text = match format {
                Format::Csv => affinity_csv(&a).trim_end().to_string(),
                Format::Json => pretty(&affinity_json(&a)),
            };
            emit(ckpt.out.as_deref(), &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
