//! `crat`: data generation, training, evaluation, prediction, the vehicle
//! selection experiment and figures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use crat_core::experiment::Strategy;
use crat_core::scene::{ScenarioKind, Split};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "crat",
    version,
    about = "Interaction-aware multi-modal vehicle trajectory prediction"
)]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: scene CSVs plus manifest.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: Option<ScenarioKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Run both training stages, writing checkpoints and a JSON-lines log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stage1_epochs: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
        #[arg(long)]
        modes: Option<usize>,
    },
    /// Score a checkpoint on one split; writes a metrics CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Comma-separated mode counts, e.g. `1,6`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Write per-scene predicted trajectories (raw frame) as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        input: SceneInput,
    },
    /// Euclidean vs attention-based vehicle selection with retrained predictors.
    SelectExperiment {
        #[arg(long)]
        data: PathBuf,
        /// Trained full model whose attention ranks the vehicles.
        #[arg(long)]
        selector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
    },
    /// Render scenes (with predictions when a checkpoint is given) or a metrics CSV to SVG.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV from `eval`; `--out` is then the SVG file.
        #[arg(long, conflicts_with_all = ["scenes", "data"])]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[command(flatten)]
        input: SceneInput,
    },
    /// Print the per-block parameter counts.
    ParamCount,
}

#[derive(Args, Debug)]
struct SceneInput {
    /// Scene CSV files.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Dataset directory with manifest.csv (alternative to --scenes).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: Split,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let strict = cli.config.is_some();
    match cli.command {
        Command::GenData {
            out,
            kind,
            seed,
            train,
            val,
            test,
        } => {
            let d = &mut cfg.data;
            d.kind = kind.unwrap_or(d.kind);
            d.seed = seed.unwrap_or(d.seed);
            d.train = train.unwrap_or(d.train);
            d.val = val.unwrap_or(d.val);
            d.test = test.unwrap_or(d.test);
            commands::gen_data(&cfg, &out)
        }
        Command::Train {
            data,
            out,
            seed,
            stage1_epochs,
            stage2_epochs,
            modes,
        } => {
            let t = &mut cfg.training;
            t.seed = seed.unwrap_or(t.seed);
            t.stage1_epochs = stage1_epochs.unwrap_or(t.stage1_epochs);
            t.stage2_epochs = stage2_epochs.unwrap_or(t.stage2_epochs);
            cfg.model.modes = modes.unwrap_or(cfg.model.modes);
            cfg.model.validate()?;
            cfg.training.validate()?;
            commands::train_cmd(&cfg, &data, &out)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            split,
            k,
        } => {
            cfg.eval.split = split.unwrap_or(cfg.eval.split);
            cfg.eval.k = k.unwrap_or(cfg.eval.k);
            commands::eval_cmd(&cfg, &data, &checkpoint, &out, strict)
        }
        Command::Predict {
            checkpoint,
            out,
            input,
        } => commands::predict_cmd(
            &cfg,
            &checkpoint,
            &input.scenes,
            input.data.as_deref(),
            input.split,
            &out,
            strict,
        ),
        Command::SelectExperiment {
            data,
            selector,
            out,
            workers,
            seeds,
            budgets,
            strategies,
        } => {
            let e = &mut cfg.experiment;
            e.workers = workers.unwrap_or(e.workers);
            e.seeds = seeds.unwrap_or(std::mem::take(&mut e.seeds));
            e.budgets = budgets.unwrap_or(std::mem::take(&mut e.budgets));
            e.strategies = strategies.unwrap_or(std::mem::take(&mut e.strategies));
            cfg.experiment.validate()?;
            commands::experiment_cmd(&cfg, &data, &selector, &out)
        }
        Command::Plot {
            out,
            checkpoint,
            metrics,
            limit,
            input,
        } => match metrics {
            Some(m) => commands::plot_metrics(&m, &out),
            None => commands::plot_scenes(
                &cfg,
                &input.scenes,
                input.data.as_deref(),
                input.split,
                limit,
                checkpoint.as_deref(),
                &out,
            ),
        },
        Command::ParamCount => commands::param_count(&cfg),
    }
}

/// 1 usage or configuration, 2 data, 3 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use crat_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_) => 3,
                E::Config(_) => 1,
                E::Shape(_) | E::Data(_) | E::Checkpoint(_) | E::Io(_) | E::Csv(_) | E::Json(_) => {
                    2
                }
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<csv::Error>().is_some()
        {
            return 2;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
