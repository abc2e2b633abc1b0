use std::process::ExitCode;

use clap::Parser;
use stocon_cli::{configure_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.into_config().and_then(|cfg| {
        configure_threads(cfg.threads)?;
        run(&cfg)
    });
    match result {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stocon: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
