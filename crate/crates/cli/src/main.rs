use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlatent_cli::{compare, format_comparison, load_config, run, Overrides, COMPARE_FILE};

#[derive(Parser)]
#[command(name = "fedlatent", version, about = "Federated learning with latent-similarity contribution normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write metrics.csv and run.json.
    Run {
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare run B against run A.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Accuracy to time both runs against (default: A's final accuracy).
        #[arg(long)]
        threshold: Option<f64>,
        /// Where to write the JSON comparison.
        #[arg(long, default_value = COMPARE_FILE)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => (|| {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let summary = run(&cfg, &out)?;
            match summary {
                Some(s) => println!(
                    "{} rounds, final accuracy {:.4}, best {:.4} (round {}); results in {}",
                    s.rounds,
                    s.final_accuracy,
                    s.best_accuracy,
                    s.best_round,
                    out.display()
                ),
                None => println!("0 rounds; results in {}", out.display()),
            }
            Ok(())
        })(),
        Command::Compare { run_a, run_b, threshold, out } => compare(&run_a, &run_b, threshold, &out).map(|c| {
            print!("{}", format_comparison(&c, &run_a.display().to_string(), &run_b.display().to_string()));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
