use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = amfir_cli::Cli::parse();
    match amfir_cli::run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("amfir {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
