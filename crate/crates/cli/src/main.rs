use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use segsr_cli::config::parse_regime;
use segsr_cli::error::{EXIT_DATA, EXIT_OK, EXIT_QUALITY_GATE};
use segsr_cli::{
    cmd_degrade, cmd_evaluate, cmd_gen_data, cmd_superres, cmd_train_vae, CliError, CliResult, ExperimentConfig,
    Layout, Method,
};
use segsr_core::Regime;

#[derive(Debug, Parser)]
#[command(name = "segsr", version, about = "Segmentation super-resolution experiments on cardiac phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Restrict degrade/superres to one regime.
    #[arg(long, global = true, value_parser = regime_arg)]
    regime: Option<Regime>,

    /// Restrict superres to one method.
    #[arg(long, global = true, value_parser = method_arg)]
    method: Option<Method>,

    /// Override the worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    GenData,
    /// Train the generator on the training split.
    TrainVae,
    /// Simulate low-resolution acquisitions of the test split.
    Degrade,
    /// Up-sample the low-resolution test volumes.
    Superres,
    /// Score the up-sampled volumes and write the tables.
    Evaluate,
    /// Run every stage in order.
    All,
    /// Print the default configuration.
    DefaultConfig,
}

fn regime_arg(s: &str) -> Result<Regime, String> {
    parse_regime(s).map_err(|e| e.to_string())
}

fn method_arg(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <file> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<i32> {
    if let Command::DefaultConfig = cli.command {
        println!("{}", ExperimentConfig::default().to_json());
        return Ok(EXIT_OK);
    }
    let cfg = load_config(cli)?;
    let layout = Layout::new(cfg.output_root());
    let mut code = EXIT_OK;
    let train = |code: &mut i32| -> CliResult<()> {
        let report = cmd_train_vae(&cfg, &layout)?;
        println!("held-out reconstruction Dice: {:.4}", report.heldout_dice);
        if !report.passed {
            *code = EXIT_QUALITY_GATE;
        }
        Ok(())
    };
    let evaluate = |code: &mut i32| -> CliResult<()> {
        let report = cmd_evaluate(&cfg, &layout)?;
        let missing = report.missing_rows();
        if missing > 0 {
            error!("{missing} table rows are missing outputs");
            *code = EXIT_DATA;
        }
        Ok(())
    };
    match cli.command {
        Command::GenData => {
            cmd_gen_data(&cfg, &layout)?;
        }
        Command::TrainVae => train(&mut code)?,
        Command::Degrade => cmd_degrade(&cfg, &layout, cli.regime)?,
        Command::Superres => {
            cmd_superres(&cfg, &layout, cli.regime, cli.method)?;
        }
        Command::Evaluate => evaluate(&mut code)?,
        Command::All => {
            cmd_gen_data(&cfg, &layout)?;
            train(&mut code)?;
            cmd_degrade(&cfg, &layout, cli.regime)?;
            cmd_superres(&cfg, &layout, cli.regime, cli.method)?;
            let mut eval_code = EXIT_OK;
            evaluate(&mut eval_code)?;
            code = code.max(eval_code);
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
