use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use proxskin_cli::{cmd_avoid, cmd_characterize, cmd_generate, cmd_map, cmd_pipeline, cmd_simulate, cmd_train, load_config, CliError, Context};

#[derive(Parser, Debug)]
#[command(name = "proxskin", version, about = "Generate, simulate, characterize and map capacitive proximity skins")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config JSON; the built-in demo is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the skin unit (dermis, electrodes, wires).
    Generate {
        /// Base mesh (OBJ or mesh JSON) instead of the config's mesh source.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Simulate the characterization runs.
    Simulate,
    /// Fit per-sensor power laws and detection ranges.
    Characterize,
    /// Train and calibrate the ensemble.
    Train {
        #[arg(long)]
        no_calibrate: bool,
    },
    /// Sample the sensing-space uncertainty map.
    Map,
    /// Run the circle-tracing avoidance scenario and its ablation.
    Avoid,
    /// Run every stage in order.
    Pipeline {
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        no_calibrate: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.common.config.as_deref(), cli.common.seed)?;
    let ctx = Context::new(config, &cli.common.out, cli.common.quiet)?;
    match cli.command {
        Command::Generate { mesh } => cmd_generate(&ctx, mesh.as_deref()).map(drop),
        Command::Simulate => cmd_simulate(&ctx).map(drop),
        Command::Characterize => cmd_characterize(&ctx).map(drop),
        Command::Train { no_calibrate } => cmd_train(&ctx, !no_calibrate).map(drop),
        Command::Map => cmd_map(&ctx).map(drop),
        Command::Avoid => cmd_avoid(&ctx).map(drop),
        Command::Pipeline { mesh, no_calibrate } => cmd_pipeline(&ctx, mesh.as_deref(), !no_calibrate).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
