use std::path::PathBuf;
use std::process::ExitCode;

use cacti::masking::MaskStrategy;
use cacti::metrics::RmseScale;
use cacti::missingness::{Mechanism, SimConfig};
use cacti::model::LossMode;
use cacti::{Error, Result};
use cacti_cli::benchmark::{run_benchmark, BenchmarkConfig};
use cacti_cli::{
    cmd_dump_batch, cmd_evaluate, cmd_impute, cmd_simulate, cmd_train, exit_code, version_string, BatchDumpArgs,
    EvaluateArgs, ImputeArgs, SimulateArgs, TrainArgs, TrainOverrides,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cacti", version = &*Box::leak(version_string().into_boxed_str()), about = "Context-aware masked autoencoder imputation for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Mcar,
    Mar,
    Mnar,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Mcar => Mechanism::Mcar,
            MechanismArg::Mar => Mechanism::Mar,
            MechanismArg::Mnar => Mechanism::Mnar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Mtcm,
    NaiveCm,
    Random,
}

impl From<StrategyArg> for MaskStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Mtcm => MaskStrategy::Mtcm,
            StrategyArg::NaiveCm => MaskStrategy::NaiveCm,
            StrategyArg::Random => MaskStrategy::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Both,
    Observed,
    Masked,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Both => LossMode::Both,
            LossArg::Observed => LossMode::Observed,
            LossArg::Masked => LossMode::Masked,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Standardized,
    Original,
    Minmax,
}

impl From<ScaleArg> for RmseScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Standardized => RmseScale::Standardized,
            ScaleArg::Original => RmseScale::Original,
            ScaleArg::Minmax => RmseScale::Minmax,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a missingness mask for a data file.
    Simulate {
        data: PathBuf,
        #[arg(long, value_enum)]
        mechanism: MechanismArg,
        #[arg(long)]
        p_miss: f64,
        #[arg(long, default_value_t = 0.3)]
        p_obs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Mask CSV; a JSON report is written to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a loss trace.
    Train {
        data: PathBuf,
        /// 0/1 mask hiding extra cells of the data.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Column context embeddings (JSON).
        #[arg(long, conflicts_with = "no_context")]
        context: Option<PathBuf>,
        #[arg(long)]
        no_context: bool,
        /// Use zero vectors for columns absent from the context file.
        #[arg(long)]
        allow_missing_context: bool,
        /// Training configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mask_strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        loss_mode: Option<LossArg>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        p_cm: Option<f64>,
        /// Loss trace CSV; defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the missing cells of a data file.
    Impute {
        data: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        round_categorical: bool,
        #[arg(long, default_value_t = cacti::imputation::DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an imputed file at the cells hidden by a mask.
    Evaluate {
        truth: PathBuf,
        imputed: PathBuf,
        /// Mask whose zeros mark the evaluated cells.
        eval_mask: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "standardized")]
        metrics_scale: ScaleArg,
        /// Checkpoint supplying the train scaler for min-max RMSE.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a benchmark grid described by a JSON config.
    Benchmark {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one masked training batch as JSON.
    #[command(hide = true)]
    DumpBatch {
        data: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.9)]
        p_cm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            data,
            mechanism,
            p_miss,
            p_obs,
            seed,
            schema,
            out,
        } => {
            let report = cmd_simulate(&SimulateArgs {
                data,
                schema,
                config: SimConfig {
                    mechanism: mechanism.into(),
                    p_miss,
                    p_obs,
                    seed,
                },
                out,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train {
            data,
            mask,
            schema,
            context,
            no_context,
            allow_missing_context,
            config,
            epochs,
            batch_size,
            seed,
            mask_strategy,
            loss_mode,
            weight_decay,
            p_cm,
            trace,
            out,
        } => {
            let ck = cmd_train(&TrainArgs {
                data,
                mask,
                schema,
                context,
                no_context,
                allow_missing_context,
                config,
                overrides: TrainOverrides {
                    epochs,
                    batch_size,
                    seed,
                    mask_strategy: mask_strategy.map(Into::into),
                    loss_mode: loss_mode.map(Into::into),
                    weight_decay,
                    p_cm,
                },
                out: out.clone(),
                trace,
            })?;
            println!(
                "wrote {} ({} parameters, context {})",
                out.display(),
                ck.model.params.num_scalars(),
                if ck.model.config.uses_context() { "on" } else { "off" }
            );
        }
        Command::Impute {
            data,
            mask,
            schema,
            checkpoint,
            round_categorical,
            batch_size,
            out,
        } => {
            let t = cmd_impute(&ImputeArgs {
                data,
                mask,
                schema,
                checkpoint,
                out: out.clone(),
                round_categorical,
                batch_size,
            })?;
            println!("wrote {} ({} rows)", out.display(), t.n_rows());
        }
        Command::Evaluate {
            truth,
            imputed,
            eval_mask,
            schema,
            metrics_scale,
            checkpoint,
            json,
        } => {
            let report = cmd_evaluate(&EvaluateArgs {
                truth,
                imputed,
                eval_mask,
                schema,
                scale: metrics_scale.into(),
                checkpoint,
            })?;
            if let Some(path) = json {
                write(&path, &report.to_json()?)?;
            }
            print!("{}", report.to_text());
        }
        Command::Benchmark { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let report = run_benchmark(&BenchmarkConfig::from_json(&text)?)?;
            if let Some(path) = out {
                write(&path, &report.to_json()?)?;
            }
            print!("{}", report.to_text());
        }
        Command::DumpBatch {
            data,
            mask,
            schema,
            batch_size,
            p_cm,
            seed,
        } => {
            let batch = cmd_dump_batch(&BatchDumpArgs {
                data,
                mask,
                schema,
                batch_size,
                p_cm,
                seed,
            })?;
            println!("{}", serde_json::to_string_pretty(&batch)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
