use std::process::ExitCode;

use clap::Parser;
use sparsegam_cli::args::{Cli, Command};
use sparsegam_cli::error::{EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE};
use sparsegam_cli::{fit, predict, report, CliError};

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Fit(args) => {
            let cfg = args.resolve()?;
            if let Some(n) = cfg.threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
            }
            let outcome = fit::cmd_fit(&cfg)?;
            eprintln!("artifacts written to {}", outcome.out_dir.display());
            if outcome.converged {
                Ok(EXIT_OK)
            } else {
                eprintln!("error: the selected model did not meet the convergence tolerance");
                Ok(EXIT_NOT_CONVERGED)
            }
        }
        Command::Predict(args) => predict::cmd_predict(&args).map(|_| EXIT_OK),
        Command::Report(args) => {
            let out = report::cmd_report(&args)?;
            eprintln!("reports written to {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
