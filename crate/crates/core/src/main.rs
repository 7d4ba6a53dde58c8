use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    // Parsed twice: once for the log level, once inside `run_from`.
    let level = match synthboot::cli::Cli::try_parse().map(|c| c.verbose) {
        Ok(0) | Err(_) => log::LevelFilter::Warn,
        Ok(1) => log::LevelFilter::Info,
        Ok(_) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let code = synthboot::cli::run_from(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(code as u8)
}
