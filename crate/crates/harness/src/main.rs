use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bilevel_harness::config::{ExperimentConfig, Profile, Task};
use bilevel_harness::gradcheck::{gradcheck, GradcheckSpec};
use bilevel_harness::report::{bound_report, cod_grid, load_bound_inputs};
use bilevel_harness::sweep::{prepare_out_dir, run_sweep, Algorithm};
use bilevel_harness::{parse_seed_list, HarnessError, Result};

#[derive(Parser, Debug)]
#[command(name = "bilevel", version, about = "Bilevel hyperparameter optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (run-ud, run-cv) or bound inputs (bounds), TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seeds; overrides BILEVEL_SEED and the config.
    #[arg(long, global = true)]
    seeds: Option<String>,

    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    /// Concurrent sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    FeatureLearning,
    Reweighting,
    ScalarQuadratic,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unrolled differentiation over the configured sweep.
    RunUd,
    /// Cross-validation by random search over the configured sweep.
    RunCv,
    /// Evaluate every bound for the inputs in --config.
    Bounds,
    /// Compare the hypergradient with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = TaskArg::Reweighting)]
        task: TaskArg,
        #[arg(long, default_value_t = 8)]
        n_train: usize,
        #[arg(long, default_value_t = 4)]
        n_val: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        /// Inner steps; defaults to 3 for scalar_quadratic and 4 otherwise.
        #[arg(short = 'K', long)]
        inner_steps: Option<usize>,
    },
    /// Monte-Carlo check of random search's excess-risk bound.
    CodCheck {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        dims: Vec<u64>,
        #[arg(
            short = 'T',
            long = "candidates",
            value_delimiter = ',',
            default_value = "10,100,1000"
        )]
        candidates: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

fn seeds_override(cli: &Cli) -> Result<Option<Vec<u64>>> {
    if let Some(s) = &cli.seeds {
        return parse_seed_list(s).map(Some);
    }
    match std::env::var("BILEVEL_SEED") {
        Ok(s) => parse_seed_list(&s).map(Some),
        Err(_) => Ok(None),
    }
}

fn profile(cli: &Cli) -> Profile {
    match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    }
}

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| HarnessError::Config("--config is required".into()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    prepare_out_dir(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })
}

fn run_experiment(cli: &Cli, algorithm: Algorithm) -> Result<()> {
    let mut cfg = ExperimentConfig::load(require_config(cli)?, profile(cli))?;
    if let Some(seeds) = seeds_override(cli)? {
        cfg.seeds = seeds;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let result = run_sweep(&cfg, algorithm, &out, cli.workers)?;
    for f in &result.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::RunUd => run_experiment(cli, Algorithm::Ud),
        Command::RunCv => run_experiment(cli, Algorithm::Cv),
        Command::Bounds => {
            let inputs = load_bound_inputs(require_config(cli)?)?;
            let text = bound_report(&inputs)?;
            print!("{text}");
            if let Some(dir) = &cli.out {
                write_text(dir, "bounds-report.txt", &text)?;
            }
            Ok(())
        }
        Command::Gradcheck {
            task,
            n_train,
            n_val,
            hidden,
            inner_steps,
        } => {
            let task = match task {
                TaskArg::FeatureLearning => Task::FeatureLearning,
                TaskArg::Reweighting => Task::Reweighting,
                TaskArg::ScalarQuadratic => Task::ScalarQuadratic,
            };
            let mut spec = GradcheckSpec::small(task);
            spec.n_train = *n_train;
            spec.n_val = *n_val;
            spec.hidden_dim = *hidden;
            if let Some(k) = inner_steps {
                spec.k = *k;
            }
            if let Some(seeds) = seeds_override(cli)? {
                spec.seed = seeds[0];
            }
            let report = gradcheck(&spec)?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(HarnessError::GradcheckFailed {
                    max_rel_err: report.max_rel_err,
                    tol: report.tol,
                })
            }
        }
        Command::CodCheck {
            dims,
            candidates,
            trials,
        } => {
            let seed = seeds_override(cli)?.map_or(0, |s| s[0]);
            let checks = cod_grid(dims, candidates, *trials, seed)?;
            let text: String = checks.iter().map(|c| format!("{c}\n")).collect();
            print!("{text}");
            if let Some(dir) = &cli.out {
                write_text(dir, "cod-check.txt", &text)?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HarnessError::CodFailed {
                    failed,
                    total: checks.len(),
                });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
