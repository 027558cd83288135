use std::path::PathBuf;
use std::process::ExitCode;

use ccmfg::cli::{run, Command, Invocation, Mode, SweepParam};
use ccmfg::Error;
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Equilibria,
    Simulate,
    Sweep,
    Nash,
    Hetero,
}

#[derive(Debug, Parser)]
#[command(
    name = "ccmfg",
    version,
    about = "Equilibria of collective destination choice games"
)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// det, stoch or hetero.
    #[arg(long)]
    mode: Option<String>,
    /// Report path; for simulate, the trajectory CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides population.rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Population sizes for nash.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Swept coefficient: q, r or M.
    #[arg(long)]
    param: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Option<Vec<f64>>,
    /// Fixed split for simulate instead of a solved equilibrium.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Number of simulated agents.
    #[arg(long = "agents", short = 'n')]
    agents: Option<usize>,
}

fn invocation(args: Args) -> Result<Invocation, Error> {
    let command = match args.command {
        Cmd::Equilibria => Command::Equilibria,
        Cmd::Simulate => Command::Simulate,
        Cmd::Sweep => Command::Sweep,
        Cmd::Nash => Command::Nash,
        Cmd::Hetero => Command::Hetero,
    };
    let mut inv = Invocation::new(command, args.config);
    inv.mode = args.mode.as_deref().map(str::parse::<Mode>).transpose()?;
    inv.param = args
        .param
        .as_deref()
        .map(str::parse::<SweepParam>)
        .transpose()?;
    inv.out = args.out;
    inv.seed = args.seed;
    inv.sizes = args.sizes;
    inv.values = args.values;
    inv.lambda = args.lambda;
    inv.agents = args.agents;
    Ok(inv)
}

fn threads() -> Result<(), String> {
    let Ok(value) = std::env::var("CCMFG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CCMFG_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let outcome = invocation(args).and_then(|inv| {
        let printed = inv.out.is_none();
        run(&inv).map(|o| (o, printed))
    });
    match outcome {
        Ok((o, printed)) => {
            if printed {
                print!("{}", o.json);
            }
            for path in &o.written {
                eprintln!("wrote {}", path.display());
            }
            if o.status.exit_code() == 2 {
                eprintln!("no equilibrium found");
            }
            ExitCode::from(o.status.exit_code() as u8)
        }
        Err(Error::NoEquilibrium) => {
            eprintln!("error: no equilibrium found");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
