use std::process::ExitCode;

use clap::Parser;
use scfa::config::{BenchConfig, Cli};
use scfa::run::{emit, execute};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cfg = match BenchConfig::from_args(cli.command.mode(), cli.command.args()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let output = match scfa::with_workers(|| execute(&cfg)) {
        Ok(Ok(output)) => output,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    for check in &output.checks {
        println!("{check}");
    }
    if cfg.mode != scfa::config::Mode::Verify || cfg.out.is_some() {
        if let Err(e) = emit(&cfg, &output.records) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    if output.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
