use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use reducr::config::{ExperimentConfig, KEYS};
use reducr::data::write_dataset_dir;
use reducr::experts::{
    load_expert_dir, save_expert_dir, train_group_experts, train_reference_model, ExpertDir,
};
use reducr::reporting::{emit_plots, summarize, write_records, Summary};
use reducr::selection::Rule;
use reducr::simulator::{run_experiment, sweep, RunResult};
use reducr::Error;

const DATA_KEYS: &[&str] = &[
    "spec_version",
    "data_path",
    "num_classes",
    "dim",
    "n_train",
    "n_holdout",
    "n_test",
    "separation",
    "label_noise",
    "data_seed",
    "train_fraction",
    "holdout_fraction",
    "split_seed",
    "standardize",
];

const EXPERT_KEYS: &[&str] = &[
    "gamma",
    "imbalance_classes",
    "imbalance_p",
    "superclasses",
    "arch",
    "hidden",
    "expert_arch",
    "expert_steps",
    "expert_batch",
    "expert_learning_rate",
    "expert_val_fraction",
    "expert_eval_every",
    "expert_seed",
    "expert_imbalanced",
];

fn keys_help(groups: &[&[&str]]) -> String {
    let mut s = String::from("Config keys (from --config, overridable with --set KEY=VALUE):\n");
    for (k, d) in KEYS {
        if groups.is_empty() || groups.iter().any(|g| g.contains(k)) {
            s.push_str(&format!("  {k:<22} {d}\n"));
        }
    }
    s
}

#[derive(Parser)]
#[command(
    name = "reducr",
    version,
    about = "Robust online batch selection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (pool.csv and splits.json)
    GenerateData(GenerateArgs),
    /// Train per-class (or per-group) experts and the reference model
    TrainExperts(TrainArgs),
    /// Run one experiment
    Run(RunArgs),
    /// Run every (rule, seed) pair and summarize
    Sweep(SweepArgs),
    /// Summarize record files or draw charts from them
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
#[command(after_help = keys_help(&[DATA_KEYS]))]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
#[command(after_help = keys_help(&[DATA_KEYS, EXPERT_KEYS]))]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory or CSV file (overrides data_path)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
#[command(after_help = keys_help(&[]))]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    rule: Option<Rule>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory written by train-experts (needed by reducr, payoff, rholoss)
    #[arg(long)]
    experts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
#[command(after_help = keys_help(&[]))]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated rules
    #[arg(long, value_delimiter = ',', required = true)]
    rules: Vec<Rule>,
    /// Seeds: `0..9` (inclusive), `1,2,5` or a single seed
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    experts: Option<PathBuf>,
    /// Maximum concurrent runs
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["summary", "plots"])))]
struct ReportArgs {
    /// Print a summary table for these record files
    #[arg(long, num_args = 1..)]
    summary: Vec<PathBuf>,
    /// Draw charts for these record files into --out
    #[arg(long, num_args = 1..)]
    plots: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the summary as JSON to this file
    #[arg(long)]
    json: Option<PathBuf>,
}

type CliResult<T> = Result<T, Error>;

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(args: &ConfigArgs, extra: Vec<(String, String)>) -> CliResult<ExperimentConfig> {
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    overrides.extend(extra);
    let cfg = ExperimentConfig::load(args.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn path_override(data: &Option<PathBuf>) -> Vec<(String, String)> {
    data.iter()
        .map(|p| ("data_path".to_string(), toml_string(&p.to_string_lossy())))
        .collect()
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else if dir.exists() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate_data(a: GenerateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, Vec::new())?;
    let spec = cfg.synthetic_spec();
    spec.validate()?;
    prepare_out(&a.out, a.force)?;
    let pool = reducr::data::generate_synthetic(&spec)?;
    write_dataset_dir(&pool, &a.out)?;
    info!("wrote {} examples to {}", pool.len(), a.out.display());
    Ok(())
}

fn train_experts(a: TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, path_override(&a.data))?;
    let pool = cfg.load_pool()?;
    let c = pool.num_classes();
    let groups = cfg.superclass_map(c)?;
    let training = cfg.expert_training(c)?;
    let arch = cfg.expert_architecture(pool.dim(), c);
    prepare_out(&a.out, a.force)?;
    let (bank, reports) = train_group_experts(&pool, arch, &groups, cfg.gamma, &training)?;
    let reference = train_reference_model(&pool, arch, &training)?;
    for w in reports.iter().flat_map(|r| &r.warnings) {
        warn!("{w}");
    }
    save_expert_dir(&a.out, &bank, &reports, &reference, &pool.fingerprint())?;
    info!(
        "wrote {} experts and a reference model to {}",
        bank.len(),
        a.out.display()
    );
    Ok(())
}

fn load_models(
    dir: Option<&Path>,
    rules: &[Rule],
    pool: &reducr::data::DataPool,
) -> CliResult<Option<ExpertDir>> {
    let needs = rules
        .iter()
        .any(|r| r.needs_experts() || r.needs_reference());
    match (dir, needs) {
        (None, true) => {
            let r = rules
                .iter()
                .find(|r| r.needs_experts() || r.needs_reference())
                .expect("checked");
            Err(usage(format!(
                "rule {r} needs --experts <dir> (see train-experts)"
            )))
        }
        (Some(d), true) => {
            let loaded = load_expert_dir(d)?;
            if loaded.manifest.dataset_fingerprint != pool.fingerprint() {
                return Err(usage(format!(
                    "experts in {} were trained on a different dataset",
                    d.display()
                )));
            }
            Ok(Some(loaded))
        }
        (_, false) => Ok(None),
    }
}

fn write_run(out: &Path, r: &RunResult) -> CliResult<()> {
    let name = format!("{}_seed{}", r.final_record.rule, r.final_record.seed);
    write_records(&r.all_records(), &out.join(format!("{name}.jsonl")))?;
    let sel = out.join("selections");
    std::fs::create_dir_all(&sel).map_err(|e| Error::Io {
        path: sel.clone(),
        source: e,
    })?;
    r.selection_log.write(&sel.join(format!("{name}.jsonl")))
}

fn run(a: RunArgs) -> CliResult<()> {
    let mut extra = path_override(&a.data);
    if let Some(r) = a.rule {
        extra.push(("rule".into(), toml_string(r.as_str())));
    }
    if let Some(s) = a.seed {
        extra.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = a.steps {
        extra.push(("steps".into(), s.to_string()));
    }
    let cfg = load_config(&a.config, extra)?;
    if (cfg.rule.needs_experts() || cfg.rule.needs_reference()) && a.experts.is_none() {
        return Err(usage(format!(
            "rule {} needs --experts <dir> (see train-experts)",
            cfg.rule
        )));
    }
    let pool = cfg.load_pool()?;
    let models = load_models(a.experts.as_deref(), &[cfg.rule], &pool)?;
    prepare_out(&a.out, a.force)?;
    let result = run_experiment(
        &cfg,
        &pool,
        models.as_ref().map(|m| &m.bank),
        models.as_ref().map(|m| &m.reference),
    )?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml_string()?)?;
    write_run(&a.out, &result)?;
    let f = &result.final_record;
    println!(
        "{} seed {}: worst-class test accuracy {:.4}, average {:.4} (checkpoint step {})",
        f.rule,
        f.seed,
        f.worst_class_accuracy.unwrap_or(f64::NAN),
        f.average_accuracy.unwrap_or(f64::NAN),
        f.checkpoint_step
    );
    Ok(())
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = || usage(format!("cannot parse seeds {s:?}; use 0..9, 1,2,5 or 3"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect()
}

fn write_summary(out: &Path, summary: &Summary) -> CliResult<()> {
    write_text(&out.join("summary.txt"), &summary.to_table())?;
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(summary)? + "\n"),
    )
}

fn run_sweep(a: SweepArgs) -> CliResult<bool> {
    let mut extra = path_override(&a.data);
    if let Some(s) = a.steps {
        extra.push(("steps".into(), s.to_string()));
    }
    let cfg = load_config(&a.config, extra)?;
    let seeds = parse_seeds(&a.seeds)?;
    if a.parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    let pool = cfg.load_pool()?;
    let models = load_models(a.experts.as_deref(), &a.rules, &pool)?;
    prepare_out(&a.out, a.force)?;
    let outcome = sweep(
        &cfg,
        &a.rules,
        &seeds,
        &pool,
        models.as_ref().map(|m| &m.bank),
        models.as_ref().map(|m| &m.reference),
        a.parallel,
    )?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml_string()?)?;
    for r in &outcome.runs {
        if let Ok(res) = &r.result {
            write_run(&a.out, res)?;
        }
    }
    let Some(summary) = outcome.summary else {
        return Err(Error::Numeric("every run in the sweep failed".into()));
    };
    write_summary(&a.out, &summary)?;
    print!("{}", summary.to_table());
    Ok(outcome.warnings.is_empty())
}

fn report(a: ReportArgs) -> CliResult<()> {
    if !a.summary.is_empty() {
        let summary = summarize(&a.summary)?;
        print!("{}", summary.to_table());
        if let Some(p) = &a.json {
            write_text(p, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        }
    }
    if !a.plots.is_empty() {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| usage("--plots needs --out <dir>"))?;
        for p in emit_plots(&a.plots, out)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn error_line(kind: &str, code: u8, err: &str, step: Option<usize>) {
    let mut line = serde_json::json!({
        "level": "error",
        "kind": kind,
        "exit_code": code,
        "message": err,
    });
    if let Some(s) = step {
        line["step"] = s.into();
    }
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            error_line("usage", 1, first.trim_start_matches("error: "), None);
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::TrainExperts(a) => train_experts(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a).map(|clean| {
            if !clean {
                warn!("some sweep runs failed; summary covers the survivors");
            }
        }),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let step = match &e {
                Error::AtStep { step, .. } => Some(*step),
                _ => None,
            };
            let (kind, code) = if e.is_usage() {
                ("usage", 1)
            } else {
                ("runtime", 2)
            };
            error_line(kind, code, &e.to_string(), step);
            ExitCode::from(code)
        }
    }
}
