use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use p2hh_core::cli::{
    cluster_command, evaluate_command, export_command, plan_command, with_threads, CliError, Mode, Overrides,
    RunConfig, THREADS_ENV,
};

/// Sizing of power-to-hydrogen-and-heat and electric-boiler flexibility
/// under wind uncertainty.
///
/// Exit codes: 0 success, 1 internal error, 2 configuration error,
/// 3 infeasible, 4 limit reached, 5 input load error, 6 dimension mismatch.
#[derive(Parser)]
#[command(name = "p2hh", version, after_help = format!("Worker threads are read from {THREADS_ENV} (default 1)."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster yearly profiles into representative days.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Number of representative days.
        #[arg(long)]
        clusters: Option<usize>,
        /// Seed of the k-means initialisation.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compile, solve and write the sizing decision.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Also write the compiled program in CBF.
        #[arg(long)]
        export_cbf: bool,
        /// Seed of the random branching rule.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a plan solution out of sample.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Solution CSV written by `plan`.
        #[arg(long)]
        solution: PathBuf,
        /// Bootstrap sample count.
        #[arg(long)]
        samples: Option<usize>,
        /// Bootstrap seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the compiled program as CBF.
    Export {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Target file; defaults to `program.cbf` in the output directory.
        #[arg(long)]
        cbf: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Drcc,
    Gaussian,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Violation probability ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Planning case 1–4: CHP only, boiler, P2HH, both.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scenario: Option<u8>,
    /// Disable the power-to-hydrogen-and-heat plant.
    #[arg(long, conflicts_with = "scenario")]
    no_p2hh: bool,
    /// Disable the electric boiler.
    #[arg(long, conflicts_with = "scenario")]
    no_boiler: bool,
}

impl ModelArgs {
    fn apply(&self, o: &mut Overrides) {
        o.mode = self.mode.map(|m| match m {
            ModeArg::Drcc => Mode::Drcc,
            ModeArg::Gaussian => Mode::Gaussian,
        });
        o.epsilon = self.epsilon;
        if let Some(s) = self.scenario {
            o.p2hh = Some(s >= 3);
            o.boiler = Some(s % 2 == 0);
        }
        if self.no_p2hh {
            o.p2hh = Some(false);
        }
        if self.no_boiler {
            o.boiler = Some(false);
        }
    }
}

fn load(common: &Common, mut o: Overrides) -> Result<RunConfig, CliError> {
    o.output = common.output.clone();
    RunConfig::load(&common.config, &o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Cluster { common, clusters, seed } => {
            let config = load(
                &common,
                Overrides {
                    clusters,
                    clustering_seed: seed,
                    ..Overrides::default()
                },
            )?;
            let outcome = with_threads(|| cluster_command(&config))?;
            println!(
                "clustered into {} representative days (wcss {:.6})",
                outcome.days, outcome.wcss
            );
            Ok(())
        }
        Command::Plan {
            common,
            model,
            export_cbf,
            seed,
        } => {
            let mut o = Overrides {
                export_cbf,
                branching_seed: seed,
                ..Overrides::default()
            };
            model.apply(&mut o);
            let config = load(&common, o)?;
            let outcome = with_threads(|| plan_command(&config))?;
            print!("{}", outcome.summary);
            outcome.check()
        }
        Command::Evaluate {
            common,
            model,
            solution,
            samples,
            seed,
        } => {
            let mut o = Overrides {
                samples,
                bootstrap_seed: seed,
                ..Overrides::default()
            };
            model.apply(&mut o);
            let config = load(&common, o)?;
            let outcome = with_threads(|| evaluate_command(&config, &solution))?;
            println!(
                "violation fraction {:?} over {} samples",
                outcome.violation.fraction(),
                outcome.violation.samples
            );
            Ok(())
        }
        Command::Export { common, model, cbf } => {
            let mut o = Overrides::default();
            model.apply(&mut o);
            let config = load(&common, o)?;
            let path = export_command(&config, cbf.as_deref())?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
