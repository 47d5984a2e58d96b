use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dwdp_cli::{cmd_analytic, cmd_contention, cmd_placement, cmd_plan, cmd_simulate, Common, Format};

#[derive(Parser, Debug)]
#[command(name = "dwdp", version, about = "Analytic models and event simulation of DEP vs. DWDP MoE inference")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `workload.seed` (and seeds the contention Monte Carlo).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Format of tables written to disk.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer roofline comparison over the config's sweep.
    Analytic,
    /// Event simulation of every run block (and sweep point).
    Simulate,
    /// Contention probabilities, closed form next to Monte Carlo.
    Contention {
        #[arg(long, value_delimiter = ',', default_value = "3,4,6,8,12,16")]
        sizes: Vec<u32>,
        #[arg(long, default_value_t = 1_000_000)]
        rounds: u64,
    },
    /// Dump the expert placement of each DWDP run block.
    Placement,
    /// Dump the per-layer copy plan of one destination rank.
    Plan {
        #[arg(long, default_value_t = 0)]
        rank: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = Common {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        format: match cli.format {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        },
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Analytic => cmd_analytic(&common, &mut out),
        Command::Simulate => cmd_simulate(&common, &mut out),
        Command::Contention { sizes, rounds } => cmd_contention(&common, sizes, *rounds, &mut out),
        Command::Placement => cmd_placement(&common, &mut out),
        Command::Plan { rank } => cmd_plan(&common, *rank, &mut out),
    };
    match result {
        Ok(dir) => {
            let _ = writeln!(out, "wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
