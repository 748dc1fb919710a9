use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use metadt_core::{Ablation, DatasetType, EnvName};
use metadt_pipeline::{resolve_seed, Axis, CliError, Pipeline, PipelineConfig, Result};

/// Meta-DT offline meta-RL pipeline on Point-Robot.
#[derive(Debug, Parser)]
#[command(name = "metadt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config with [run], [data], [paths], [sweep] and [g_star] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "point_robot")]
    env: EnvName,
    #[arg(long, global = true, default_value = "expert")]
    dataset: DatasetType,
    #[arg(long, global = true, default_value = "meta_dt")]
    ablation: Ablation,
    /// Output root (default: paths.out from the config, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace outputs written under a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample train and test tasks.
    SampleTasks,
    /// Collect the offline dataset selected by --dataset.
    Collect,
    /// Train the context-aware world model.
    TrainWm,
    /// Train the policy variant selected by --ablation.
    TrainMdt,
    /// Few-shot and zero-shot evaluation on the test tasks.
    Eval,
    /// Train and evaluate full Meta-DT plus the listed variants.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "no_context,no_com,no_prompt,dt")]
        variants: Vec<Ablation>,
    },
    /// Rerun the pipeline over values of h, k or n_train_tasks.
    Sweep {
        /// `name=v1,v2,...`; repeatable. Defaults to the config's [sweep] section.
        #[arg(long)]
        axis: Vec<Axis>,
    },
    /// Aggregate every evaluation under the output root into summary.csv.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let seed = resolve_seed(cli.seed, std::env::var("SEED").ok().as_deref(), config.run.seed)?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    if let Command::Report = cli.command {
        let (path, rows) = metadt_pipeline::report::report(&out)?;
        info!("{} rows -> {}", rows.len(), path.display());
        return Ok(());
    }
    let axes_from_file = config.sweep.axes();
    let p = Pipeline::new(config, cli.env, seed, out, cli.force)?;
    let dt = cli.dataset;
    match cli.command {
        Command::SampleTasks => {
            p.sample_tasks()?;
        }
        Command::Collect => {
            p.collect(dt)?;
        }
        Command::TrainWm => {
            p.train_wm(dt)?;
        }
        Command::TrainMdt => {
            p.train_mdt(dt, cli.ablation)?;
        }
        Command::Eval => {
            p.eval(dt, cli.ablation)?;
        }
        Command::Ablate { variants } => {
            for r in p.ablate(dt, &variants)? {
                println!(
                    "{},{},{},{:.4},{:.4}",
                    r.env, r.dataset_type, r.method_variant, r.mean, r.stderr
                );
            }
        }
        Command::Sweep { axis } => {
            let axes = if axis.is_empty() { axes_from_file } else { axis };
            if axes.is_empty() {
                return Err(CliError::InvalidArgument(
                    "sweep needs --axis or a non-empty [sweep] section".into(),
                ));
            }
            for a in &axes {
                for r in p.sweep(dt, cli.ablation, a)? {
                    println!(
                        "{},{},{},{:.4},{:.4}",
                        r.env, r.dataset_type, r.method_variant, r.mean, r.stderr
                    );
                }
            }
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
