use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flpred::dgp::{generate_dataset, write_dataset, DumpHeader, Model, ModelSpec, NoiseCase};
use flpred::harness::{
    default_workers, emit_console, emit_csv, load_csv, write_csv, Estimator, Evaluation, ExperimentConfig, Runner,
};
use flpred::hilbert::make_grid;
use flpred::verify;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILURES: u8 = 2;

#[derive(Parser)]
#[command(name = "flpred", version, about = "Functional linear prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write the summary CSV.
    Run(RunArgs),
    /// Run the built-in property and oracle checks.
    Verify,
    /// Pretty-print a results CSV.
    Table {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Simulate one dataset and write the predictor series as text.
    Dump(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with ExperimentConfig keys; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    model: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    case: Option<Vec<NoiseCase>>,
    #[arg(long = "T", value_delimiter = ',')]
    t: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    estimator: Option<Vec<Estimator>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Measure MSPE on a continuation of the path instead of in-sample.
    #[arg(long)]
    out_of_sample: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, default_value_t = 1)]
    model: u8,
    #[arg(long, default_value = "BB")]
    case: NoiseCase,
    #[arg(long = "T", default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    #[arg(long)]
    out: PathBuf,
}

fn build_config(args: &RunArgs) -> flpred::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(ids) = &args.model {
        cfg.models = ids.iter().map(|&id| Model::from_id(id)).collect::<flpred::Result<_>>()?;
    }
    if let Some(cases) = &args.case {
        cfg.cases = cases.clone();
    }
    if let Some(t) = &args.t {
        cfg.sample_sizes = t.clone();
    }
    if let Some(g) = &args.gamma {
        cfg.gammas = g.clone();
    }
    if let Some(e) = &args.estimator {
        cfg.estimators = e.clone();
    }
    if let Some(r) = args.reps {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(n) = args.grid_points {
        cfg.grid_points = n;
    }
    if args.out_of_sample {
        cfg.evaluation = Evaluation::OutOfSample;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match build_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let table = match Runner::new(cfg).and_then(|r| r.run(default_workers())) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("experiment failed: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let written = match &args.out {
        Some(path) => emit_csv(&table, path).map(|_| print!("{}", emit_console(&table))),
        None => write_csv(&table, std::io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("cannot write results: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    if table.exceeds_failure_threshold() {
        return ExitCode::from(EXIT_FAILURES);
    }
    ExitCode::SUCCESS
}

fn dump(args: DumpArgs) -> flpred::Result<()> {
    let model = Model::from_id(args.model)?;
    let grid = make_grid(args.grid_points)?;
    let spec = ModelSpec::new(model, args.case, args.t, grid);
    let data = generate_dataset(&spec, args.seed)?;
    let header = DumpHeader {
        grid_points: args.grid_points,
        t: args.t,
        model,
        case: args.case,
        seed: args.seed,
    };
    write_dataset(&args.out, &data.x, &header)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => run(args),
        Command::Verify => {
            let outcomes = verify::run_all();
            for o in &outcomes {
                println!("{}", o.line());
            }
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURES)
            }
        }
        Command::Table { input } => match load_csv(&input) {
            Ok(table) => {
                print!("{}", emit_console(&table));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("cannot read {}: {e}", input.display());
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Dump(args) => match dump(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("dump failed: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
    }
}
