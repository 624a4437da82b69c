use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uiclab::config::{emit_config, parse_config, ExperimentConfig, Method};
use uiclab::experiment::{gen_data, run_compare, run_eval, run_experiment};
use uiclab::{Parallelism, Result, SynthSpec};

/// Unsupervised image classification experiments.
#[derive(Parser)]
#[command(name = "uiclab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config method.
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Worker threads. Results do not depend on this: work is split into
    /// fixed chunks and reduced in chunk order.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics, checkpoint and evaluation.
    Train(Common),
    /// Evaluate a saved checkpoint without training.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train both methods with the same config and write a side-by-side CSV.
    Compare(Common),
    /// Print the fully defaulted config.
    EmitConfig(Common),
    /// Write the synthetic benchmark as IDX files.
    GenData(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::synthetic(Method::Uic),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(method) = common.method {
        cfg.method = method;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let par = Parallelism::with_threads(common.threads)?;
            let summary = run_experiment(&cfg, &cfg.out_dir, &par)?;
            let last = summary.run.final_trace();
            println!(
                "{} finished: nmi_vs_truth {} partition_entropy {:.4}; outputs in {}",
                cfg.method,
                last.nmi_vs_truth
                    .map_or("n/a".into(), |v| format!("{v:.4}")),
                last.partition_entropy,
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let par = Parallelism::with_threads(common.threads)?;
            let report = run_eval(&cfg, &checkpoint, &cfg.out_dir, &par)?;
            if let Some(p) = report.probe {
                println!("probe accuracy {:.4}", p.accuracy);
            }
            if let Some(f) = report.fewshot {
                println!("few-shot accuracy {:.4} ± {:.4}", f.mean_accuracy, f.stderr);
            }
        }
        Command::Compare(common) => {
            let cfg = load(&common)?;
            let par = Parallelism::with_threads(common.threads)?;
            let path = run_compare(&cfg, &cfg.out_dir, &par)?;
            println!("wrote {}", path.display());
        }
        Command::EmitConfig(common) => print!("{}", emit_config(&load(&common)?)?),
        Command::GenData(common) => {
            let cfg = load(&common)?;
            let spec = cfg.data.synthetic.unwrap_or_else(SynthSpec::default);
            for path in gen_data(&spec, cfg.seed, &cfg.out_dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
