use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sentinel::checkpoint;
use sentinel::config::RunConfig;
use sentinel::data::{load_csv, LoadOptions, Split};
use sentinel::experiments::{self, ExperimentPlan};
use sentinel::layers::ForwardCtx;
use sentinel::tensor::{no_grad, Tensor};
use sentinel::training::{self, persistence_metrics};
use sentinel::{Error, Result, SentinelModel};

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Multi-patch attention transformer for time-series forecasting")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config (run config for train/eval/inspect, plan for ablate/sweep/grid).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
    /// Tiny budget: 2 epochs of at most 4 batches.
    #[arg(long)]
    smoke: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    RepeatLast,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed; writes checkpoints, epoch log and metrics.
    Train(Common),
    /// Score a checkpoint (or the persistence baseline) on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Variant ablation matrix from a plan file.
    Ablate(Common),
    /// Lookback sweep from a plan file.
    Sweep(Common),
    /// (n_enc, n_dec, d_model) grid search from a plan file.
    Grid(Common),
    /// List parameters; optionally dump encoder attention for one window.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to inspect; without it a fresh model is built from --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV (timestamp + channels) holding exactly one lookback window.
        #[arg(long)]
        window_csv: Option<PathBuf>,
    },
    /// Write the bundled two-channel sinusoid fixture as CSV.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = sentinel::synthetic::SINUSOID_ROWS)]
        rows: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => cmd_train(&c),
        Command::Eval {
            common,
            checkpoint,
            baseline,
        } => cmd_eval(&common, checkpoint.as_deref(), baseline),
        Command::Ablate(c) => cmd_experiment(&c, Experiment::Ablate),
        Command::Sweep(c) => cmd_experiment(&c, Experiment::Sweep),
        Command::Grid(c) => cmd_experiment(&c, Experiment::Grid),
        Command::Inspect {
            common,
            checkpoint,
            window_csv,
        } => cmd_inspect(&common, checkpoint.as_deref(), window_csv.as_deref()),
        Command::Fixture { out, rows } => sentinel::synthetic::sinusoid(rows).write_csv(&out),
    }
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    if let Some(seeds) = &c.seeds {
        cfg.training.seeds = seeds.clone();
    }
    if c.smoke {
        smoke(&mut cfg.training);
    }
    cfg.training.validate()?;
    Ok(cfg)
}

fn smoke(t: &mut training::TrainConfig) {
    t.epochs = t.epochs.min(2);
    t.max_batches_per_epoch = Some(t.max_batches_per_epoch.map_or(4, |m| m.min(4)));
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

/// Creates `dir` and refuses to replace any of `files` unless `overwrite`.
fn prepare_out(dir: &Path, files: &[&str], overwrite: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    if !overwrite {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.join(f).display()
            )));
        }
    }
    Ok(())
}

fn dataset_name(cfg: &RunConfig) -> String {
    if let Some(p) = &cfg.data.path {
        return Path::new(p)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.clone());
    }
    match &cfg.data.synthetic {
        Some(s) => serde_json::to_value(s)
            .ok()
            .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
            .unwrap_or_else(|| "synthetic".into()),
        None => "unknown".into(),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn checkpoint_name(seed: u64) -> String {
    format!("model_seed{seed}.ckpt")
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let out = require_out(c)?;
    let mut files = vec!["effective_config.toml", "epochs.jsonl", "metrics.json"];
    let ckpts: Vec<String> = cfg.training.seeds.iter().map(|&s| checkpoint_name(s)).collect();
    files.extend(ckpts.iter().map(String::as_str));
    prepare_out(out, &files, c.overwrite)?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml_string()?)?;

    let prepared = cfg.data.prepare()?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.channels != prepared.table.channels() {
        log::info!(
            "model.channels set to {} to match the dataset",
            prepared.table.channels()
        );
        model_cfg.channels = prepared.table.channels();
    }
    let data = prepared.windows(model_cfg.lookback, model_cfg.horizon);
    let name = dataset_name(&cfg);
    let (base_mse, base_mae) = persistence_metrics(&data, Split::Test)?;

    let mut log = File::create(out.join("epochs.jsonl"))?;
    let mut records = Vec::new();
    for &seed in &cfg.training.seeds {
        let outcome = training::train(&model_cfg, &data, &cfg.training, seed, Some(&mut log))?;
        checkpoint::save(&outcome.model, &out.join(checkpoint_name(seed)))?;
        let (mse, mae) = training::evaluate(&outcome.model, &data, Split::Test, cfg.training.eval_batch_size)?;
        println!(
            "seed {seed}: test mse {mse:.6} mae {mae:.6} (best epoch {}, repeat-last mse {base_mse:.6})",
            outcome.best_epoch
        );
        records.push(json!({
            "dataset": name,
            "horizon": model_cfg.horizon,
            "seed": seed,
            "variant": model_cfg.variant,
            "mse": mse,
            "mae": mae,
            "val_mse": outcome.best_val_mse,
            "best_epoch": outcome.best_epoch,
            "baseline_mse": base_mse,
            "baseline_mae": base_mae,
        }));
    }
    write_json(&out.join("metrics.json"), &json!(records))
}

fn cmd_eval(c: &Common, ckpt: Option<&Path>, baseline: Option<Baseline>) -> Result<()> {
    let cfg = run_config(c)?;
    if let Some(out) = &c.out {
        prepare_out(out, &["eval.json"], c.overwrite)?;
    }
    let prepared = cfg.data.prepare()?;
    let name = dataset_name(&cfg);
    let mut report = serde_json::Map::new();
    report.insert("dataset".into(), json!(name));

    let model = ckpt.map(checkpoint::load).transpose()?;
    let (lookback, horizon) = match &model {
        Some(m) => {
            let channels = prepared.table.channels();
            if m.config.channels != channels {
                return Err(Error::Config(format!(
                    "checkpoint expects C={} channels but the dataset has C={channels}",
                    m.config.channels
                )));
            }
            (m.config.lookback, m.config.horizon)
        }
        None => (cfg.model.lookback, cfg.model.horizon),
    };
    let data = prepared.windows(lookback, horizon);
    report.insert("horizon".into(), json!(horizon));
    report.insert("lookback".into(), json!(lookback));

    match (&model, baseline) {
        (None, None) => {
            return Err(Error::Config("eval needs --checkpoint or --baseline repeat-last".into()));
        }
        (Some(m), _) => {
            let (mse, mae) = training::evaluate(m, &data, Split::Test, cfg.training.eval_batch_size)?;
            println!("model: mse {mse:.6} mae {mae:.6}");
            report.insert("mse".into(), json!(mse));
            report.insert("mae".into(), json!(mae));
        }
        _ => {}
    }
    if let Some(Baseline::RepeatLast) = baseline {
        let (mse, mae) = persistence_metrics(&data, Split::Test)?;
        println!("repeat-last: mse {mse:.6} mae {mae:.6}");
        report.insert("baseline".into(), json!({"name": "repeat_last", "mse": mse, "mae": mae}));
    }
    if let Some(out) = &c.out {
        write_json(&out.join("eval.json"), &serde_json::Value::Object(report))?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Experiment {
    Ablate,
    Sweep,
    Grid,
}

fn cmd_experiment(c: &Common, which: Experiment) -> Result<()> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <plan.toml> is required".into()))?;
    let mut plan = ExperimentPlan::load(path, &c.overrides)?;
    if let Some(seeds) = &c.seeds {
        plan.seeds = seeds.clone();
    }
    if c.smoke {
        smoke(&mut plan.training);
    }
    plan.validate()?;
    for d in &plan.datasets {
        d.data
            .load_table()
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("dataset '{}': {m}", d.name)),
                other => other,
            })?;
    }
    let out = require_out(c)?;
    fs::create_dir_all(out)?;
    let results = out.join("results.jsonl");
    if c.overwrite && results.exists() {
        fs::remove_file(&results)?;
    }
    fs::write(out.join("effective_plan.toml"), plan.to_toml_string()?)?;

    let (cells, failed) = match which {
        Experiment::Ablate => {
            let (cells, table) = experiments::run_ablation(&plan, Some(&results))?;
            experiments::write_csv(&table, &out.join("ablation.csv"))?;
            for r in &table {
                println!(
                    "{:<12} T={:<4} {:<17} mse {:.4} ({:+.1}%) mae {:.4} ({:+.1}%)",
                    r.dataset, r.horizon, r.variant, r.mse, r.mse_change_pct, r.mae, r.mae_change_pct
                );
            }
            let failed = cells.iter().filter(|r| !r.ok()).count();
            (cells, failed)
        }
        Experiment::Sweep => {
            let (cells, table) = experiments::run_lookback_sweep(&plan, Some(&results))?;
            experiments::write_csv(&table, &out.join("lookback.csv"))?;
            for r in &table {
                println!("{:<12} L={:<4} mse {:.4} mae {:.4}", r.dataset, r.lookback, r.mse, r.mae);
            }
            let failed = cells.iter().filter(|r| !r.ok()).count();
            (cells, failed)
        }
        Experiment::Grid => {
            let (cells, choices) = experiments::run_grid(&plan, Some(&results))?;
            experiments::write_grid_csv(&choices, &out.join("grid_choice.csv"))?;
            for ch in &choices {
                println!(
                    "{:<12} best n_enc={} n_dec={} d_model={} (mean val mse {:.4})",
                    ch.dataset, ch.point.n_enc, ch.point.n_dec, ch.point.d_model, ch.mean_val_mse
                );
            }
            let failed = cells.iter().filter(|r| !r.ok()).count();
            (cells, failed)
        }
    };
    experiments::write_cells_csv(&cells, &out.join("cells.csv"))?;
    if failed > 0 {
        return Err(Error::Data(format!(
            "{failed} of {} cells failed; see {}",
            cells.len(),
            results.display()
        )));
    }
    Ok(())
}

fn cmd_inspect(c: &Common, ckpt: Option<&Path>, window_csv: Option<&Path>) -> Result<()> {
    let model = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => {
            let cfg = run_config(c)?;
            let seed = cfg.training.seeds[0];
            SentinelModel::new(cfg.model, seed)?
        }
    };
    let config = serde_json::to_string_pretty(&model.config).map_err(|e| Error::Data(e.to_string()))?;
    println!("config: {config}");
    println!("{:<40} {:<16} {:>8}", "parameter", "shape", "count");
    for (name, t) in model.named_params() {
        println!("{name:<40} {:<16} {:>8}", format!("{:?}", t.shape()), t.numel());
        if name.starts_with("revin.") {
            println!("    {:?}", t.data());
        }
    }
    println!("total parameters: {}", model.num_params());

    if let Some(path) = window_csv {
        let table = load_csv(path, &LoadOptions::default())?;
        let (l, ch) = (model.config.lookback, model.config.channels);
        if table.rows() != l || table.channels() != ch {
            return Err(Error::Config(format!(
                "window has {} rows x {} channels, model expects L={l} x C={ch}",
                table.rows(),
                table.channels()
            )));
        }
        let x = Tensor::new(&[l, ch], table.values.clone())?;
        let (_, trace) = no_grad(|| model.forward_traced(&x, &mut ForwardCtx::eval()))?;
        let Some(weights) = trace.encoder_weights.first() else {
            return Err(Error::Config(format!(
                "variant {} has no encoder attention to dump",
                model.config.variant
            )));
        };
        let out = require_out(c)?;
        prepare_out(out, &["attention.csv"], c.overwrite)?;
        write_attention(weights, &out.join("attention.csv"))?;
        println!("encoder attention written to {}", out.join("attention.csv").display());
    }
    Ok(())
}

/// One CSV row per (slice, query): the weights over keys.
fn write_attention(weights: &Tensor, path: &Path) -> Result<()> {
    let shape = weights.shape();
    let keys = shape[shape.len() - 1];
    let queries = shape[shape.len() - 2];
    let mut f = File::create(path)?;
    let header: Vec<String> = (0..keys).map(|k| format!("w{k}")).collect();
    writeln!(f, "slice,query,{}", header.join(","))?;
    for (row, chunk) in weights.data().chunks(keys).enumerate() {
        let vals: Vec<String> = chunk.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{},{}", row / queries, row % queries, vals.join(","))?;
    }
    Ok(())
}
