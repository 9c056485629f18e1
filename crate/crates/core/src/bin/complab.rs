use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use complab::cmploss::Strategy;
use complab::experiment::{compare_strategies, sweep, write_sweep_csv, SweepAxis};
use complab::models::load_checkpoint;
use complab::tasks::{
    gen_classification, gen_extraction, gen_ranking, ClsParams, Dataset, RankParams, SpanParams,
    TaskKind,
};
use complab::train::{evaluate, train, write_run, TrainConfig, TrainOptions};
use complab::{Error, Result};

#[derive(Parser)]
#[command(name = "complab", version, about = "Comparative-loss training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSONL.
    Gen(GenArgs),
    /// Train one model from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare weighting strategies over several seeds.
    Compare(CompareArgs),
    /// Sweep c, context size or PRF depth.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples (queries for ranking).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    noise_segments: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    feedback: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Hold out this many trailing samples of the same generation.
    #[arg(long, requires = "holdout_out")]
    holdout: Option<usize>,
    #[arg(long, requires = "holdout")]
    holdout_out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Non-support segments kept (PRF depth for ranking).
    #[arg(long)]
    context_size: Option<usize>,
    /// Optional CSV of metric rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "cmp,average,first,second,max")]
    strategies: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let holdout = a.holdout.unwrap_or(0);
    let n = a.n.map(|n| n + holdout);
    let data = match a.task {
        TaskKind::Cls => {
            let mut p = ClsParams::default();
            set(&mut p.n_samples, n);
            set(&mut p.n_classes, a.classes);
            set(&mut p.n_noise, a.noise_segments);
            gen_classification(a.seed, &p)?
        }
        TaskKind::Span => {
            let mut p = SpanParams::default();
            set(&mut p.n_samples, n);
            set(&mut p.n_distractors, a.distractors);
            gen_extraction(a.seed, &p)?
        }
        TaskKind::Rank => {
            let mut p = RankParams::default();
            set(&mut p.n_queries, n);
            set(&mut p.pool_size, a.pool_size);
            set(&mut p.n_feedback, a.feedback);
            gen_ranking(a.seed, &p)?
        }
    };
    if holdout >= data.len() {
        return Err(Error::Config("holdout must leave training samples".into()));
    }
    let (train_part, held) = data.split(data.len() - holdout);
    write_dataset(&train_part, &a.out, a.quiet)?;
    if let Some(path) = &a.holdout_out {
        write_dataset(&held, path, a.quiet)?;
    }
    Ok(())
}

fn write_dataset(data: &Dataset, path: &Path, quiet: bool) -> Result<()> {
    let text = data.to_jsonl()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, &text)?;
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    if !quiet {
        println!("samples={} sha256={hex} path={}", data.len(), path.display());
    }
    Ok(())
}

fn set(slot: &mut usize, value: Option<usize>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_json(&fs::read_to_string(path)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = Dataset::read_jsonl(&a.data)?;
    cfg.validate_for(&data)?;
    let eval_data = a.eval_data.as_deref().map(Dataset::read_jsonl).transpose()?;
    let opts = TrainOptions {
        eval_data: eval_data.clone(),
        out_dir: Some(a.out.clone()),
        init: None,
    };
    let outcome = train(&cfg, &data, &opts)?;
    write_run(&a.out, &cfg, &outcome)?;

    let metric = cfg.task.primary_metric();
    let (split, value) = match outcome.record.final_metric(metric) {
        Some(v) => ("eval", v),
        None => {
            let scored = eval_data.as_ref().unwrap_or(&data);
            let m = evaluate(&outcome.model, &outcome.params, scored, None)?;
            (if eval_data.is_some() { "eval" } else { "train" }, m[metric])
        }
    };
    let cost = outcome.record.cost();
    if !a.quiet {
        println!(
            "{split} {metric}={value:.4} c={} forward_passes={} per_sample_step={:.3} relative_cost={:.2}x shortened_chains={} out={}",
            cfg.c,
            cost.forward_passes,
            cost.forward_per_sample_step,
            cost.relative_cost,
            cost.shortened_chains,
            a.out.display()
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, params) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::read_jsonl(&a.data)?;
    let metrics = evaluate(&model, &params, &data, a.context_size)?;
    let ctx = a.context_size.map(|k| k.to_string()).unwrap_or_default();
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric_name", "metric_value", "context_size"])?;
        for (name, value) in &metrics {
            w.write_record([name.as_str(), &value.to_string(), &ctx])?;
        }
        w.flush()?;
    }
    for (name, value) in &metrics {
        println!("{name}={value:.4}");
    }
    Ok(())
}

fn load_experiment(a: &ExperimentArgs) -> Result<(TrainConfig, Dataset, Dataset)> {
    let cfg = load_config(&a.config)?;
    let data = Dataset::read_jsonl(&a.data)?;
    let eval_data = Dataset::read_jsonl(&a.eval_data)?;
    cfg.validate_for(&data)?;
    fs::create_dir_all(&a.out)?;
    Ok((cfg, data, eval_data))
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let strategies = a
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>>>()?;
    let (cfg, data, eval_data) = load_experiment(&a.common)?;
    let cmp = compare_strategies(&cfg, &strategies, &a.common.seeds, &data, &eval_data)?;
    let path = a.common.out.join("compare.csv");
    cmp.write_csv(&path)?;
    if !a.common.quiet {
        let metric = cfg.task.primary_metric();
        for s in cmp.summary.iter().filter(|s| s.metric == metric) {
            println!(
                "{:<8} {metric}={:.4} std={:.4} n={}",
                s.strategy, s.mean, s.std, s.n
            );
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (cfg, data, eval_data) = load_experiment(&a.common)?;
    let rows = sweep(&cfg, a.axis, &a.values, &a.common.seeds, &data, &eval_data)?;
    let path = a.common.out.join(format!("sweep_{}.csv", a.axis));
    write_sweep_csv(&rows, &path)?;
    if !a.common.quiet {
        println!("rows={} wrote {}", rows.len(), path.display());
    }
    Ok(())
}
